//! Datasets, preprocessing, file ingestion and synthetic task families.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    /// `[N, C, H, W]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Splits,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with every sample in the training split.
    pub fn new(task_id: impl Into<String>, features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        let ds = Self {
            task_id: task_id.into(),
            features,
            labels,
            classes,
            splits: Splits {
                train: (0..n).collect(),
                ..Splits::default()
            },
            warnings: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("{}: {m}", self.task_id)));
        if self.features.shape().len() != 4 {
            return bad(format!("features must be [N, C, H, W], got {:?}", self.features.shape()));
        }
        if self.features.batch() != self.labels.len() {
            return bad(format!("{} samples but {} labels", self.features.batch(), self.labels.len()));
        }
        if self.classes < 2 {
            return bad("at least 2 classes".into());
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return bad(format!("label {l} >= {} classes", self.classes));
        }
        let mut seen = vec![false; self.len()];
        for split in [Split::Train, Split::Val, Split::Test] {
            for &i in self.splits.get(split) {
                if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                    return bad(format!("split index {i} out of range or in two splits"));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn input_shape(&self) -> Vec<usize> {
        self.features.shape()[1..].to_vec()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.features.gather_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn split_batch(&self, split: Split) -> (Tensor, Vec<usize>) {
        self.batch(self.splits.get(split))
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        self.splits = splits;
        self.validate()?;
        Ok(self)
    }
}

/// Per-channel mean and standard deviation from the training split, applied
/// to every sample. A channel with zero spread is only centered.
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let train = &ds.splits.train;
    if train.is_empty() {
        return Err(Error::Dataset(format!("{}: standardize needs a nonempty train split", ds.task_id)));
    }
    let shape = ds.features.shape();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let per = c * plane;
    let x = ds.features.data();
    let mut out = ds.clone();
    let y = out.features.data_mut();
    for ch in 0..c {
        let values = || {
            train
                .iter()
                .flat_map(move |&i| x[i * per + ch * plane..i * per + (ch + 1) * plane].iter().map(|&v| v as f64))
        };
        let count = (train.len() * plane) as f64;
        let mean = values().sum::<f64>() / count;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let std = var.sqrt();
        let scale = if std > 0.0 {
            1.0 / std
        } else {
            let msg = format!("{}: channel {ch} is constant on the train split; centered without scaling", ds.task_id);
            log::warn!("{msg}");
            out.warnings.push(msg);
            1.0
        };
        for i in 0..ds.len() {
            let s = i * per + ch * plane;
            for (o, &v) in y[s..s + plane].iter_mut().zip(&x[s..s + plane]) {
                *o = ((v as f64 - mean) * scale) as f32;
            }
        }
    }
    Ok(out)
}

/// Divides integer features in [0, 255] by 256.
pub fn scale_unit(ds: &Dataset) -> Result<Dataset> {
    if let Some((i, &v)) = ds
        .features
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=255.0).contains(&v) || v.fract() != 0.0)
    {
        return Err(Error::Dataset(format!("{}: feature {i} = {v} is not an integer in [0, 255]", ds.task_id)));
    }
    let mut out = ds.clone();
    out.features = ds.features.map(|v| v / 256.0);
    Ok(out)
}

/// Shuffled split into `sizes` = `[train, val]` or `[train, val, test]`.
pub fn split(ds: &Dataset, sizes: &[usize], seed: u64) -> Result<Dataset> {
    if sizes.is_empty() || sizes.len() > 3 {
        return Err(Error::Dataset(format!("split takes 1 to 3 sizes, got {}", sizes.len())));
    }
    let total: usize = sizes.iter().sum();
    if total > ds.len() {
        return Err(Error::Dataset(format!("split sizes {sizes:?} exceed {} samples", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut at = 0;
    for (part, &n) in parts.iter_mut().zip(sizes) {
        *part = order[at..at + n].to_vec();
        at += n;
    }
    let [train, val, test] = parts;
    ds.clone().with_splits(Splits { train, val, test })
}

/// Index-based folds over all samples: fold `i` tests on chunk `i`,
/// validates on chunk `i + 1` and trains on the rest.
pub fn kfold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<Splits>> {
    if k < 3 || k > n {
        return Err(Error::Dataset(format!("k-fold needs 3 <= k <= {n}, got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chunks: Vec<Vec<usize>> = (0..k).map(|f| order[f * n / k..(f + 1) * n / k].to_vec()).collect();
    Ok((0..k)
        .map(|f| {
            let v = (f + 1) % k;
            Splits {
                train: (0..k).filter(|&j| j != f && j != v).flat_map(|j| chunks[j].clone()).collect(),
                val: chunks[v].clone(),
                test: chunks[f].clone(),
            }
        })
        .collect())
}

const IDX_U8: u8 = 0x08;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, msg: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg,
    }
}

fn idx_header(path: &Path, bytes: &[u8], ranks: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(parse_err(path, "byte 0: file shorter than the 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_U8 || !ranks.contains(&bytes[3]) {
        return Err(parse_err(path, format!("byte 0: bad IDX magic {:02x?}", &bytes[..4])));
    }
    let rank = bytes[3] as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let at = 4 + 4 * d;
        let b = bytes
            .get(at..at + 4)
            .ok_or_else(|| parse_err(path, format!("byte {at}: truncated dimension header")))?;
        dims.push(u32::from_be_bytes(b.try_into().unwrap()) as usize);
    }
    let start = 4 + 4 * rank;
    let expected = start + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(parse_err(
            path,
            format!("byte {}: payload length disagrees with dimensions {dims:?} (file has {} bytes, expected {expected})", bytes.len().min(expected), bytes.len()),
        ));
    }
    Ok((dims, start))
}

/// Reads an unsigned-byte IDX image file (`[N, H, W]` or `[N, C, H, W]`)
/// with its label file. Features keep their raw 0..=255 values.
pub fn load_idx(images: &Path, labels: &Path, task_id: &str) -> Result<Dataset> {
    let ib = read(images)?;
    let (dims, start) = idx_header(images, &ib, &[3, 4])?;
    let lb = read(labels)?;
    let (ldims, lstart) = idx_header(labels, &lb, &[1])?;
    if ldims[0] != dims[0] {
        return Err(parse_err(labels, format!("byte 4: {} labels for {} images", ldims[0], dims[0])));
    }
    let shape = if dims.len() == 3 {
        vec![dims[0], 1, dims[1], dims[2]]
    } else {
        dims.clone()
    };
    let features = Tensor::from_vec(shape, ib[start..].iter().map(|&b| b as f32).collect())?;
    let labels: Vec<usize> = lb[lstart..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(task_id, features, labels, classes)
}

/// Writes features (which must be integers in 0..=255) and labels as IDX.
pub fn save_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = ds.features.shape();
    if ds.classes > 256 {
        return Err(Error::Dataset("IDX labels hold at most 256 classes".into()));
    }
    let mut out = vec![0, 0, IDX_U8, if shape[1] == 1 { 3 } else { 4 }];
    let dims: Vec<usize> = if shape[1] == 1 {
        vec![shape[0], shape[2], shape[3]]
    } else {
        shape.to_vec()
    };
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for (i, &v) in ds.features.data().iter().enumerate() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Dataset(format!("feature {i} = {v} does not fit an unsigned byte; quantize first")));
        }
        out.push(v as u8);
    }
    fs::write(images, out).map_err(|e| Error::io(images, e))?;
    let mut out = vec![0, 0, IDX_U8, 1];
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels, out).map_err(|e| Error::io(labels, e))
}

/// Affine map of all features onto integers 0..=255 (for IDX export).
pub fn quantize_u8(ds: &Dataset) -> Dataset {
    let (lo, hi) = ds
        .features
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = ds.clone();
    out.features = ds.features.map(|v| ((v - lo) / span * 255.0).round());
    out
}

/// Reads `label,pix0,pix1,...` rows. `input_shape` defaults to a single
/// square channel when the pixel count is a perfect square, else `[1, 1, P]`.
pub fn load_csv(path: &Path, input_shape: Option<Vec<usize>>, task_id: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(path, format!("line 1: {e}")))?.clone();
    let pixels = header.len().saturating_sub(1);
    let header_ok = header.get(0) == Some("label") && header.iter().skip(1).enumerate().all(|(i, h)| h == format!("pix{i}"));
    if pixels == 0 || !header_ok {
        return Err(parse_err(path, "line 1: header must be `label,pix0,pix1,...`".into()));
    }
    let shape = match input_shape {
        Some(s) if s.iter().product::<usize>() == pixels => s,
        Some(s) => return Err(parse_err(path, format!("line 1: {pixels} pixels do not fill shape {s:?}"))),
        None => {
            let side = (pixels as f64).sqrt().round() as usize;
            if side * side == pixels {
                vec![1, side, side]
            } else {
                vec![1, 1, pixels]
            }
        }
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| parse_err(path, format!("line {line}: {e}")))?;
        if record.len() != pixels + 1 {
            return Err(parse_err(path, format!("line {line}: {} fields, expected {}", record.len(), pixels + 1)));
        }
        labels.push(
            record[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(path, format!("line {line}: label `{}`: {e}", &record[0])))?,
        );
        for f in record.iter().skip(1) {
            data.push(f.trim().parse::<f32>().map_err(|e| parse_err(path, format!("line {line}: value `{f}`: {e}")))?);
        }
    }
    let mut full = vec![labels.len()];
    full.extend(shape);
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(task_id, Tensor::from_vec(full, data)?, labels, classes)
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    let per = ds.features.row_len();
    for i in 0..per {
        out.push_str(&format!(",pix{i}"));
    }
    out.push('\n');
    for (row, &label) in ds.features.data().chunks(per).zip(&ds.labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic tasks

/// How a task's labels are computed from the latent coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelRule {
    /// Class `k` wins when `<directions[k], c>` is largest.
    Argmax { directions: Vec<Vec<f64>> },
    /// Labels of `base` mapped through `groups` (a coarsening).
    Coarsen { base: Box<LabelRule>, groups: Vec<usize> },
}

impl LabelRule {
    pub fn classes(&self) -> usize {
        match self {
            LabelRule::Argmax { directions } => directions.len(),
            LabelRule::Coarsen { groups, .. } => groups.iter().max().map_or(0, |m| m + 1),
        }
    }

    /// Label and the gap between the best and second-best score.
    pub fn label(&self, c: &[f64]) -> (usize, f64) {
        match self {
            LabelRule::Argmax { directions } => {
                let mut best = (0, f64::NEG_INFINITY);
                let mut second = f64::NEG_INFINITY;
                for (k, d) in directions.iter().enumerate() {
                    let s: f64 = d.iter().zip(c).map(|(a, b)| a * b).sum();
                    if s > best.1 {
                        second = best.1;
                        best = (k, s);
                    } else if s > second {
                        second = s;
                    }
                }
                (best.0, best.1 - second)
            }
            LabelRule::Coarsen { base, groups } => {
                let (l, gap) = base.label(c);
                (groups[l], gap)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub id: String,
    pub rule: LabelRule,
}

/// Inputs are noisy superpositions `x = sum_m c_m * atom_m + noise * e` of
/// smooth random atoms shared by every task of the family, with
/// `c ~ N(0, I)`. Tasks differ only in how labels are read off `c`.
#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub input_shape: Vec<usize>,
    pub atoms: Vec<Vec<f64>>,
    pub noise: f64,
    /// Samples whose top two class scores differ by less than this are redrawn.
    pub margin: f64,
    directions: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

/// A random smooth pattern: a few low-frequency plane waves, unit norm.
fn smooth_atom(shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut a = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let fy = rng.gen_range(0.0..3.0);
            let fx = rng.gen_range(0.0..3.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.sample(StandardNormal);
            for y in 0..h {
                for x in 0..w {
                    let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                    a[(ch * h + y) * w + x] += amp * t.cos();
                }
            }
        }
    }
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    a.iter_mut().for_each(|v| *v /= norm);
    a
}

impl TaskFamily {
    pub fn new(input_shape: Vec<usize>, dictionary_size: usize, noise: f64, margin: f64, seed: u64) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::Dataset(format!("input shape must be [C, H, W], got {input_shape:?}")));
        }
        if dictionary_size == 0 {
            return Err(Error::Dataset("dictionary needs at least one atom".into()));
        }
        let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "atoms"));
        let atoms = (0..dictionary_size).map(|_| smooth_atom(&input_shape, &mut arng)).collect();
        Ok(Self {
            input_shape,
            atoms,
            noise,
            margin,
            directions: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "rules")),
        })
    }

    pub fn dictionary_size(&self) -> usize {
        self.atoms.len()
    }

    /// A unit direction orthogonal to every direction handed out so far.
    fn fresh_direction(&mut self) -> Result<Vec<f64>> {
        let m = self.dictionary_size();
        if self.directions.len() >= m {
            return Err(Error::Dataset(format!("dictionary of {m} atoms cannot hold more than {m} orthogonal rules")));
        }
        loop {
            let mut v: Vec<f64> = (0..m).map(|_| self.rng.sample(StandardNormal)).collect();
            for d in &self.directions {
                let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                self.directions.push(v.clone());
                return Ok(v);
            }
        }
    }

    /// A task with `classes` rules: `round(relatedness * classes)` of them
    /// reused from `base` (in random order), the rest fresh and orthogonal to
    /// every rule seen before.
    pub fn task(&mut self, id: &str, classes: usize, base: Option<(&TaskDef, f64)>) -> Result<TaskDef> {
        if classes < 2 {
            return Err(Error::Dataset(format!("{id}: at least 2 classes")));
        }
        let mut directions = Vec::with_capacity(classes);
        if let Some((base, rho)) = base {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Dataset(format!("{id}: relatedness {rho} outside [0, 1]")));
            }
            let LabelRule::Argmax { directions: pool } = &base.rule else {
                return Err(Error::Dataset(format!("{id}: can only share rules with an argmax task")));
            };
            let shared = ((rho * classes as f64).round() as usize).min(pool.len());
            let mut pool = pool.clone();
            pool.shuffle(&mut self.rng);
            directions.extend(pool.into_iter().take(shared));
        }
        while directions.len() < classes {
            directions.push(self.fresh_direction()?);
        }
        directions.shuffle(&mut self.rng);
        Ok(TaskDef {
            id: id.to_string(),
            rule: LabelRule::Argmax { directions },
        })
    }

    /// A task whose classes are unions of `base`'s classes, `base` thus being
    /// a refinement of it.
    pub fn coarsen(&mut self, id: &str, base: &TaskDef, classes: usize) -> Result<TaskDef> {
        let fine = base.rule.classes();
        if classes < 2 || classes > fine {
            return Err(Error::Dataset(format!("{id}: cannot coarsen {fine} classes into {classes}")));
        }
        let mut groups: Vec<usize> = (0..fine).map(|k| k % classes).collect();
        groups.shuffle(&mut self.rng);
        Ok(TaskDef {
            id: id.to_string(),
            rule: LabelRule::Coarsen {
                base: Box::new(base.rule.clone()),
                groups,
            },
        })
    }

    pub fn latent(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dictionary_size()).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn render(&self, c: &[f64], rng: &mut impl Rng, out: &mut Vec<f32>) {
        let p = self.atoms[0].len();
        for i in 0..p {
            let clean: f64 = self.atoms.iter().zip(c).map(|(a, &ci)| a[i] * ci).sum();
            let e: f64 = rng.sample(StandardNormal);
            out.push((clean + self.noise * e) as f32);
        }
    }

    /// Samples `n` inputs with latents (redrawn until the task's margin holds).
    pub fn sample(&self, task: &TaskDef, n: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * self.atoms[0].len());
        let mut labels = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        while labels.len() < n {
            let c = self.latent(&mut rng);
            let (label, gap) = task.rule.label(&c);
            if gap < self.margin {
                continue;
            }
            self.render(&c, &mut rng, &mut data);
            labels.push(label);
            latents.push(c);
        }
        let mut shape = vec![n];
        shape.extend(&self.input_shape);
        (Tensor::from_vec(shape, data).expect("rendered sizes"), labels, latents)
    }

    /// A dataset with contiguous train/val/test splits of the given sizes.
    /// Tasks sampled with one seed draw from the same input stream, so they
    /// share inputs wherever their margins agree.
    pub fn dataset(&self, task: &TaskDef, sizes: SplitSizes, seed: u64) -> Result<Dataset> {
        let n = sizes.train + sizes.val + sizes.test;
        let (features, labels, _) = self.sample(task, n, seed);
        let ds = Dataset::new(task.id.clone(), features, labels, task.rule.classes())?;
        ds.with_splits(Splits {
            train: (0..sizes.train).collect(),
            val: (sizes.train..sizes.train + sizes.val).collect(),
            test: (sizes.train + sizes.val..n).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// B reuses a `relatedness` fraction of A's class rules.
    #[default]
    Related,
    /// A's classes refine B's: every B class is a union of A classes.
    GeneralSpecific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPairParams {
    pub shared_dictionary_size: usize,
    pub input_shape: Vec<usize>,
    pub classes_a: usize,
    pub classes_b: usize,
    pub relatedness: f64,
    pub noise_level: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    pub samples: SplitSizes,
    #[serde(default)]
    pub mode: PairMode,
    pub seed: u64,
}

fn default_margin() -> f64 {
    1.0
}

impl Default for TaskPairParams {
    fn default() -> Self {
        Self {
            shared_dictionary_size: 12,
            input_shape: vec![1, 16, 16],
            classes_a: 4,
            classes_b: 4,
            relatedness: 0.5,
            noise_level: 0.05,
            margin: default_margin(),
            samples: SplitSizes {
                train: 1200,
                val: 300,
                test: 600,
            },
            mode: PairMode::Related,
            seed: 0,
        }
    }
}

impl TaskPairParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::Dataset(format!("relatedness {} outside [0, 1]", self.relatedness)));
        }
        if self.classes_a < 2 || self.classes_b < 2 {
            return Err(Error::Dataset("each task needs at least 2 classes".into()));
        }
        if self.mode == PairMode::GeneralSpecific && self.classes_b >= self.classes_a {
            return Err(Error::Dataset("general/specific mode needs classes_a > classes_b".into()));
        }
        if self.noise_level < 0.0 || self.margin < 0.0 {
            return Err(Error::Dataset("noise and margin must be nonnegative".into()));
        }
        Ok(())
    }

    /// The task definitions behind [`gen_task_pair`].
    pub fn tasks(&self) -> Result<(TaskFamily, TaskDef, TaskDef)> {
        self.validate()?;
        let mut family = TaskFamily::new(self.input_shape.clone(), self.shared_dictionary_size, self.noise_level, self.margin, self.seed)?;
        let a = family.task("A", self.classes_a, None)?;
        let b = match self.mode {
            PairMode::Related => family.task("B", self.classes_b, Some((&a, self.relatedness)))?,
            PairMode::GeneralSpecific => family.coarsen("B", &a, self.classes_b)?,
        };
        Ok((family, a, b))
    }
}

pub fn gen_task_pair(p: &TaskPairParams) -> Result<(Dataset, Dataset)> {
    let (family, a, b) = p.tasks()?;
    let seed = derive_seed(p.seed, "samples");
    Ok((family.dataset(&a, p.samples, seed)?, family.dataset(&b, p.samples, seed)?))
}

/// Three tasks over one family: `G1`, `G2` sharing a `relatedness`
/// fraction of `G1`'s rules, and an unrelated outsider `S`. All use
/// `classes_a` classes and share one input stream.
pub fn gen_task_triple(p: &TaskPairParams) -> Result<[Dataset; 3]> {
    p.validate()?;
    let k = p.classes_a;
    let mut family = TaskFamily::new(p.input_shape.clone(), p.shared_dictionary_size, p.noise_level, p.margin, p.seed)?;
    let g1 = family.task("G1", k, None)?;
    let g2 = family.task("G2", k, Some((&g1, p.relatedness)))?;
    let s = family.task("S", k, None)?;
    let seed = derive_seed(p.seed, "samples");
    Ok([family.dataset(&g1, p.samples, seed)?, family.dataset(&g2, p.samples, seed)?, family.dataset(&s, p.samples, seed)?])
}
