//! Helpers shared by the integration tests.
#![allow(dead_code)]

use graft::metrics::Metric;
use graft::model::{build_model, Model};
use graft::protocol::{Baseline, RunSeeds, TransferCurve, TransferResult};
use graft::surgery::{crc_ok, encode, load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use graft::zoo::Preset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A curve with one point per value, at `l_c = 0, 1, ...`.
pub fn curve(primary: &str, secondary: &str, metric: Metric, baseline: f64, values: &[f64]) -> TransferCurve {
    TransferCurve {
        primary_task_id: primary.into(),
        secondary_task_id: secondary.into(),
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

/// Outcome of a checkpoint fuzz run; empty vectors mean every check held.
#[derive(Debug, Default)]
pub struct FuzzReport {
    pub iterations: usize,
    pub round_trip_failures: Vec<String>,
    pub undetected_corruptions: Vec<String>,
}

impl FuzzReport {
    pub fn ok(&self) -> bool {
        self.round_trip_failures.is_empty() && self.undetected_corruptions.is_empty()
    }
}

fn random_text(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen::<char>()).collect()
}

fn random_finite_f32(rng: &mut impl Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.gen());
        if v.is_finite() {
            return v;
        }
    }
}

fn random_finite_f64(rng: &mut impl Rng) -> f64 {
    loop {
        let v = f64::from_bits(rng.gen());
        if v.is_finite() {
            return v;
        }
    }
}

/// Saves random micro models with arbitrary finite payloads and provenance,
/// checks that loading returns the same bits, then flips one byte per
/// iteration and checks that the CRC rejects it.
pub fn checkpoint_fuzz(iterations: usize, seed: u64) -> FuzzReport {
    let presets = [Preset::DensenetMicro, Preset::ModelAMicro, Preset::ModelBMicro];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport {
        iterations,
        ..Default::default()
    };
    for it in 0..iterations {
        let preset = presets[rng.gen_range(0..presets.len())];
        let spec = preset.spec(rng.gen_range(2..40));
        let mut model: Model = build_model(&spec, rng.gen()).unwrap();
        for t in model.params.values_mut().chain(model.bn_running_stats.values_mut()) {
            for v in t.data_mut() {
                *v = match rng.gen_range(0..8) {
                    0 => -0.0,
                    1 => f32::from_bits(rng.gen_range(1..0x0080_0000)),
                    _ => random_finite_f32(&mut rng),
                };
            }
        }
        let provenance = Provenance {
            task_id: random_text(&mut rng, 24),
            seed: rng.gen(),
            epochs: rng.gen_range(0..1000),
            metrics: (0..rng.gen_range(0..4)).map(|_| (random_text(&mut rng, 8), random_finite_f64(&mut rng))).collect(),
            notes: (0..rng.gen_range(0..4)).map(|_| (random_text(&mut rng, 8), random_text(&mut rng, 16))).collect(),
        };
        let bytes = save_checkpoint(&model, &provenance).unwrap();
        let tag = format!("iteration {it} ({})", preset.name());

        match load_checkpoint(&bytes) {
            Err(e) => report.round_trip_failures.push(format!("{tag}: {e}")),
            Ok(ckpt) => {
                let expected = Checkpoint::from_model(&model, provenance);
                let same_bits = ckpt.tensors.len() == expected.tensors.len()
                    && ckpt.tensors.iter().zip(&expected.tensors).all(|((ka, a), (kb, b))| {
                        ka == kb
                            && a.shape() == b.shape()
                            && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    });
                let provenance_same = ckpt.provenance == expected.provenance
                    && ckpt
                        .provenance
                        .metrics
                        .values()
                        .zip(expected.provenance.metrics.values())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same_bits {
                    report.round_trip_failures.push(format!("{tag}: tensor bits differ"));
                } else if !provenance_same || ckpt.spec != spec || ckpt.architecture_fingerprint != spec.fingerprint() {
                    report.round_trip_failures.push(format!("{tag}: trailer differs"));
                } else if encode(&ckpt).unwrap() != bytes {
                    report.round_trip_failures.push(format!("{tag}: re-encoding differs"));
                }
            }
        }

        let mut corrupt = bytes.clone();
        let at = rng.gen_range(0..corrupt.len());
        corrupt[at] ^= rng.gen_range(1..=255u8);
        if crc_ok(&corrupt) || load_checkpoint(&corrupt).is_ok() {
            report.undetected_corruptions.push(format!("{tag}: byte {at} of {}", corrupt.len()));
        }
    }
    report
}
