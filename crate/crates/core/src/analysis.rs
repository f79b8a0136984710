//! Degradation, asymmetry and relatedness summaries of transfer curves, and
//! their CSV / JSON emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::protocol::TransferCurve;

pub const DEGRADATION_DEFINITION: &str =
    "d = (baseline - transfer) / baseline for accuracy, (transfer - baseline) / baseline for error metrics; positive is worse";
pub const ASYMMETRY_DEFINITION: &str = "mean over l_c of d(B->A) - d(A->B); positive means A transfers better to B";
pub const RELATEDNESS_DEFINITION: &str = "1 - mean over l_c of max(d, 0)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationProfile {
    pub l_c: Vec<usize>,
    pub labels: Vec<String>,
    pub d: Vec<f64>,
}

/// Relative change of the transfer metric against the baseline, signed so
/// that positive always means worse than baseline.
pub fn degradation_value(metric: Metric, baseline: f64, transfer: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::Analysis("baseline metric is 0; degradation undefined".into()));
    }
    Ok(if metric.higher_is_better() {
        (baseline - transfer) / baseline
    } else {
        (transfer - baseline) / baseline
    })
}

pub fn degradation(curve: &TransferCurve) -> Result<DegradationProfile> {
    Ok(DegradationProfile {
        l_c: curve.points.iter().map(|p| p.l_c).collect(),
        labels: curve.points.iter().map(|p| p.label.clone()).collect(),
        d: curve
            .points
            .iter()
            .map(|p| degradation_value(curve.metric, curve.baseline.metric, p.final_metric))
            .collect::<Result<_>>()?,
    })
}

/// `mean(d_ba - d_ab)`: positive when A's representations serve B better
/// than B's serve A.
pub fn asymmetry(ab: &TransferCurve, ba: &TransferCurve) -> Result<f64> {
    let (dab, dba) = (degradation(ab)?.d, degradation(ba)?.d);
    if dab.len() != dba.len() {
        return Err(Error::Analysis(format!("sweep lengths differ: {} vs {}", dab.len(), dba.len())));
    }
    if dab.is_empty() {
        return Err(Error::Analysis("empty curves".into()));
    }
    Ok(dab.iter().zip(&dba).map(|(a, b)| b - a).sum::<f64>() / dab.len() as f64)
}

pub fn relatedness(curve: &TransferCurve) -> Result<f64> {
    let d = degradation(curve)?.d;
    if d.is_empty() {
        return Err(Error::Analysis("empty curve".into()));
    }
    Ok(1.0 - d.iter().map(|v| v.max(0.0)).sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub task_a: String,
    pub task_b: String,
    pub score: f64,
}

/// Scores each unordered task pair by the mean relatedness of every curve
/// between them (both directions, all architectures) and sorts by score
/// descending, ties by task ids.
pub fn rank_tasks(curves: &[TransferCurve]) -> Result<Vec<RankedPair>> {
    let mut scores: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for c in curves {
        let (a, b) = (c.primary_task_id.clone(), c.secondary_task_id.clone());
        let key = if a <= b { (a, b) } else { (b, a) };
        scores.entry(key).or_default().push(relatedness(c)?);
    }
    let mut out: Vec<RankedPair> = scores
        .into_iter()
        .map(|((task_a, task_b), s)| RankedPair {
            task_a,
            task_b,
            score: s.iter().sum::<f64>() / s.len() as f64,
        })
        .collect();
    out.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| (&x.task_a, &x.task_b).cmp(&(&y.task_a, &y.task_b)))
    });
    Ok(out)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Analysis(format!("spearman needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Analysis("spearman undefined for a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Piecewise-linear interpolation of the points `(xs, ys)` (xs ascending)
/// at each of `at`, clamped to the end values outside the range.
pub fn interpolate(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    at.iter()
        .map(|&f| {
            let i = xs.iter().rposition(|&g| g <= f).unwrap_or(0);
            if i + 1 >= xs.len() || xs[i + 1] == xs[i] {
                return ys[i];
            }
            let t = ((f - xs[i]) / (xs[i + 1] - xs[i])).clamp(0.0, 1.0);
            ys[i] * (1.0 - t) + ys[i + 1] * t
        })
        .collect()
}

/// Spearman correlation of two curves' transfer metrics at matched `l_c / L_H`
/// fractions: the longer curve is interpolated at the shorter one's fractions.
pub fn architecture_agreement(x: &TransferCurve, y: &TransferCurve) -> Result<f64> {
    let fractions = |c: &TransferCurve| -> Result<Vec<f64>> {
        let max = c.points.iter().map(|p| p.l_c).max().ok_or_else(|| Error::Analysis("empty curve".into()))?;
        Ok(c.points.iter().map(|p| p.l_c as f64 / max.max(1) as f64).collect())
    };
    if x.points.len() <= y.points.len() {
        spearman(&x.metrics(), &interpolate(&fractions(y)?, &y.metrics(), &fractions(x)?))
    } else {
        spearman(&interpolate(&fractions(x)?, &x.metrics(), &fractions(y)?), &y.metrics())
    }
}

/// One CSV row per swept point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub primary_task: String,
    pub secondary_task: String,
    pub architecture: String,
    pub l_c_label: String,
    pub metric_name: String,
    pub transfer_value: f64,
    pub baseline_value: f64,
    pub degradation: f64,
}

pub fn curve_rows(curves: &[TransferCurve]) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for c in curves {
        let d = degradation(c)?;
        for (p, dv) in c.points.iter().zip(d.d) {
            rows.push(CurveRow {
                primary_task: c.primary_task_id.clone(),
                secondary_task: c.secondary_task_id.clone(),
                architecture: c.architecture.clone(),
                l_c_label: p.label.clone(),
                metric_name: c.metric.name().into(),
                transfer_value: p.final_metric,
                baseline_value: c.baseline.metric,
                degradation: dv,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub primary_task: String,
    pub secondary_task: String,
    pub architecture: String,
    pub relatedness: f64,
    pub degradation: Vec<f64>,
}

/// The structured-text (JSON) output document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub definitions: BTreeMap<String, String>,
    pub curves: Vec<TransferCurve>,
    pub summaries: Vec<CurveSummary>,
    pub ranking: Vec<RankedPair>,
    /// `A->B|B->A|architecture` to asymmetry.
    pub asymmetry: BTreeMap<String, f64>,
}

pub fn report(curves: &[TransferCurve]) -> Result<Report> {
    let definitions = [
        ("degradation", DEGRADATION_DEFINITION),
        ("asymmetry", ASYMMETRY_DEFINITION),
        ("relatedness", RELATEDNESS_DEFINITION),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let summaries = curves
        .iter()
        .map(|c| {
            Ok(CurveSummary {
                primary_task: c.primary_task_id.clone(),
                secondary_task: c.secondary_task_id.clone(),
                architecture: c.architecture.clone(),
                relatedness: relatedness(c)?,
                degradation: degradation(c)?.d,
            })
        })
        .collect::<Result<_>>()?;
    let mut asym = BTreeMap::new();
    for ab in curves {
        for ba in curves {
            let pair = ab.primary_task_id == ba.secondary_task_id && ab.secondary_task_id == ba.primary_task_id;
            if pair && ab.architecture == ba.architecture && ab.primary_task_id < ab.secondary_task_id {
                let key = format!("{}->{}|{}->{}|{}", ab.primary_task_id, ab.secondary_task_id, ba.primary_task_id, ba.secondary_task_id, ab.architecture);
                asym.insert(key, asymmetry(ab, ba)?);
            }
        }
    }
    Ok(Report {
        definitions,
        curves: curves.to_vec(),
        summaries,
        ranking: rank_tasks(curves)?,
        asymmetry: asym,
    })
}

pub fn emit(curves: &[TransferCurve], format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::Analysis(format!("{other:?}")),
            })?;
            for row in curve_rows(curves)? {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        Format::Json => {
            let text = serde_json::to_string_pretty(&report(curves)?)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn parse_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn parse_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Baseline, RunSeeds, TransferResult};

    pub(crate) fn curve(a: &str, b: &str, metric: Metric, baseline: f64, values: &[f64]) -> TransferCurve {
        TransferCurve {
            primary_task_id: a.into(),
            secondary_task_id: b.into(),
            architecture: "arch".into(),
            metric,
            points: values
                .iter()
                .enumerate()
                .map(|(l_c, &v)| TransferResult {
                    l_c,
                    label: format!("stage {l_c}"),
                    phase1_metric_history: vec![],
                    phase2_metric_history: vec![],
                    final_metric: v,
                    final_metric_std: 0.0,
                    frozen_layer_ids: vec![],
                    seeds: RunSeeds {
                        output_head: 0,
                        shuffle: 0,
                        dropout: 0,
                    },
                    log: vec![],
                })
                .collect(),
            baseline: Baseline {
                metric: baseline,
                std: 0.0,
                seed: 0,
                log: vec![],
            },
        }
    }

    #[test]
    fn degradation_examples() {
        let flat = curve("a", "b", Metric::Accuracy, 0.9, &[0.9, 0.9]);
        assert_eq!(degradation(&flat).unwrap().d, vec![0.0, 0.0]);
        assert_eq!(relatedness(&flat).unwrap(), 1.0);
        let half = curve("a", "b", Metric::Accuracy, 0.9, &[0.45]);
        assert!((degradation(&half).unwrap().d[0] - 0.5).abs() < 1e-12);
        let err = curve("a", "b", Metric::Error, 0.2, &[0.3]);
        assert!((degradation(&err).unwrap().d[0] - 0.5).abs() < 1e-12);
        assert!(degradation(&curve("a", "b", Metric::Accuracy, 0.0, &[0.3])).is_err());
    }

    #[test]
    fn asymmetry_examples() {
        let ab = curve("a", "b", Metric::Accuracy, 1.0, &[0.9, 0.9]);
        let ba = curve("b", "a", Metric::Accuracy, 1.0, &[0.7, 0.7]);
        assert!((asymmetry(&ab, &ba).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(asymmetry(&ab, &ab).unwrap(), 0.0);
        assert_eq!(asymmetry(&ab, &ba).unwrap(), -asymmetry(&ba, &ab).unwrap());
        let short = curve("b", "a", Metric::Accuracy, 1.0, &[0.7]);
        assert!(asymmetry(&ab, &short).is_err());
    }

    #[test]
    fn ranking_and_ties() {
        let curves = vec![
            curve("g1", "g2", Metric::Accuracy, 1.0, &[1.0, 0.9]),
            curve("g2", "g1", Metric::Accuracy, 1.0, &[1.0, 0.95]),
            curve("g1", "s", Metric::Accuracy, 1.0, &[1.0, 0.5]),
            curve("s", "g2", Metric::Accuracy, 1.0, &[1.0, 0.5]),
        ];
        let r = rank_tasks(&curves).unwrap();
        assert_eq!((r[0].task_a.as_str(), r[0].task_b.as_str()), ("g1", "g2"));
        assert_eq!((r[1].task_a.as_str(), r[1].task_b.as_str()), ("g1", "s"));
        assert_eq!((r[2].task_a.as_str(), r[2].task_b.as_str()), ("g2", "s"));
        assert!(rank_tasks(&[curve("a", "b", Metric::Accuracy, 1.0, &[])]).is_err());
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn interpolation_at_fractions() {
        let v = interpolate(&[0.0, 0.5, 1.0], &[0.0, 1.0, 2.0], &[0.0, 0.25, 1.0, 2.0]);
        assert_eq!(v, vec![0.0, 0.5, 2.0, 2.0]);
        let a = curve("a", "b", Metric::Accuracy, 1.0, &[1.0, 0.8, 0.6]);
        let b = curve("a", "b", Metric::Accuracy, 1.0, &[1.0, 0.9, 0.8, 0.7, 0.6]);
        assert!((architecture_agreement(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curves = vec![curve("a", "b", Metric::Accuracy, 0.9123456789012345, &[0.1 + 0.2, 1.0 / 3.0])];
        emit(&curves, Format::Csv, &path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "primary_task,secondary_task,architecture,l_c_label,metric_name,transfer_value,baseline_value,degradation\n"
        ));
        let rows = parse_csv(&path).unwrap();
        assert_eq!(rows, curve_rows(&curves).unwrap());
        let json = dir.path().join("c.json");
        emit(&curves, Format::Json, &json).unwrap();
        assert_eq!(parse_report(&json).unwrap().curves, curves);
    }
}
