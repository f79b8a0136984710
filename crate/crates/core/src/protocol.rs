//! Primary training, two-phase gradual transfer, l_c sweeps and cross matrices.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{kfold_splits, Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::TrainMode;
use crate::loss::softmax_cross_entropy;
use crate::metrics::Metric;
use crate::model::{build_model, Model};
use crate::optim::{sgd_update, SgdConfig, SgdState};
use crate::seed::derive_seed;
use crate::surgery::{freeze_prefix, transplant, Checkpoint, FreezePlan, FreezeSelector, Provenance};
use crate::zoo::{block_boundaries, CutPoint, ModelSpec};

pub const WORKERS_ENV: &str = "GRAFT_WORKERS";
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Output-layer warm-up steps; default `min(200, steps per epoch)`.
    #[serde(default)]
    pub warmup_iterations: Option<usize>,
    /// Epochs of joint fine-tuning (and of the baseline); default `max(1, epochs / 2)`.
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
}

fn default_metric() -> Metric {
    Metric::Accuracy
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            sgd: SgdConfig::default(),
            warmup_iterations: None,
            finetune_epochs: None,
            metric: Metric::Accuracy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_iterations == Some(0) {
            return Err(Error::Config("warmup_iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn warmup_for(&self, train_len: usize) -> usize {
        self.warmup_iterations
            .unwrap_or_else(|| 200.min(train_len.div_ceil(self.batch_size)).max(1))
    }

    pub fn finetune_budget(&self) -> usize {
        self.finetune_epochs.unwrap_or((self.epochs / 2).max(1))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub run_id: String,
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_log(records: &[LogRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Which part of a transfer run an optimizer step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPhase {
    Warmup,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub output_head: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub l_c: usize,
    pub label: String,
    pub phase1_metric_history: Vec<f64>,
    pub phase2_metric_history: Vec<f64>,
    /// Secondary test metric.
    pub final_metric: f64,
    /// Spread over folds when averaged, else 0.
    #[serde(default)]
    pub final_metric_std: f64,
    pub frozen_layer_ids: Vec<String>,
    pub seeds: RunSeeds,
    #[serde(default)]
    pub log: Vec<LogRecord>,
}

/// A from-scratch secondary model trained with the phase-2 budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub metric: f64,
    #[serde(default)]
    pub std: f64,
    pub seed: u64,
    #[serde(default)]
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCurve {
    pub primary_task_id: String,
    pub secondary_task_id: String,
    pub architecture: String,
    pub metric: Metric,
    pub points: Vec<TransferResult>,
    pub baseline: Baseline,
}

impl TransferCurve {
    pub fn metrics(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.final_metric).collect()
    }
}

/// Evaluates `metric` on a split in inference mode.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, metric: Metric) -> Result<f64> {
    let idx = ds.splits.get(split);
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk);
        preds.extend(model.predict(&x)?.argmax_rows());
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    Ok(metric.evaluate(&preds, &labels, ds.classes))
}

/// Shuffled minibatches of the train split, reshuffled every pass.
struct Batches<'a> {
    ds: &'a Dataset,
    size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    at: usize,
}

impl<'a> Batches<'a> {
    fn new(ds: &'a Dataset, size: usize, seed: u64) -> Result<Self> {
        if ds.splits.train.len() < 2 {
            return Err(Error::Dataset(format!("{}: training needs at least 2 train samples", ds.task_id)));
        }
        Ok(Self {
            ds,
            size: size.max(2),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            at: usize::MAX,
        })
    }

    fn start_epoch(&mut self) {
        self.order = self.ds.splits.train.clone();
        self.order.shuffle(&mut self.rng);
        self.at = 0;
    }

    /// Next batch of the current pass; a trailing single sample is skipped
    /// since batch statistics need two.
    fn next_in_epoch(&mut self) -> Option<&[usize]> {
        let rest = self.order.len().saturating_sub(self.at);
        if rest < 2 {
            return None;
        }
        let n = rest.min(self.size);
        self.at += n;
        Some(&self.order[self.at - n..self.at])
    }

    fn next_cycling(&mut self) -> Vec<usize> {
        if let Some(b) = self.next_in_epoch() {
            return b.to_vec();
        }
        self.start_epoch();
        self.next_in_epoch().expect("at least two samples").to_vec()
    }
}

struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    plan: FreezePlan,
    dropout: ChaCha8Rng,
    state: SgdState,
}

impl Trainer<'_> {
    /// One SGD step; returns the batch loss.
    fn step(&mut self, model: &mut Model, batch: &[usize], lr: f64, epoch: usize) -> Result<f64> {
        let (x, y) = self.ds.batch(batch);
        let pass = model.forward(&x, TrainMode::Training, self.plan.first_trainable(), Some(&mut self.dropout))?;
        let (loss, grad) = softmax_cross_entropy(pass.logits(), &y)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, lr });
        }
        let grads = model.backward(&pass, grad)?;
        model.update_running_stats(&pass);
        sgd_update(model, &grads, &self.cfg.sgd, lr, &self.plan, &mut self.state)?;
        Ok(loss)
    }
}

type Observer<'o> = &'o mut dyn FnMut(TransferPhase, usize, &Model, &SgdState);

fn record(log: &mut Vec<LogRecord>, run_id: &str, phase: &str, epoch: usize, split: &str, metric: &str, value: f64) {
    log::debug!("{run_id} {phase} epoch {epoch} {split} {metric} = {value:.4}");
    log.push(LogRecord {
        run_id: run_id.into(),
        phase: phase.into(),
        epoch,
        split: split.into(),
        metric: metric.into(),
        value,
    });
}

/// Trains for `epochs` passes and restores the parameters of the epoch with
/// the best validation metric (the last epoch when there is no validation
/// split). Returns the validation history.
#[allow(clippy::too_many_arguments)]
fn train_epochs(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    plan: FreezePlan,
    epochs: usize,
    seed: u64,
    run_id: &str,
    phase: TransferPhase,
    phase_name: &str,
    log: &mut Vec<LogRecord>,
    observer: Observer,
) -> Result<Vec<f64>> {
    let mut batches = Batches::new(ds, cfg.batch_size, derive_seed(seed, "shuffle"))?;
    let mut trainer = Trainer {
        ds,
        cfg,
        plan,
        dropout: ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout")),
        state: SgdState::default(),
    };
    let has_val = !ds.splits.val.is_empty();
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Model)> = None;
    let mut step = 0;
    for epoch in 0..epochs {
        let lr = cfg.sgd.lr_at(epoch);
        batches.start_epoch();
        let (mut total, mut count) = (0.0, 0);
        while let Some(batch) = batches.next_in_epoch() {
            let batch = batch.to_vec();
            total += trainer.step(model, &batch, lr, epoch)?;
            count += 1;
            step += 1;
            observer(phase, step, model, &trainer.state);
        }
        record(log, run_id, phase_name, epoch, "train", "loss", total / count.max(1) as f64);
        if has_val {
            let v = evaluate(model, ds, Split::Val, cfg.metric)?;
            record(log, run_id, phase_name, epoch, "val", cfg.metric.name(), v);
            history.push(v);
            if best.as_ref().is_none_or(|(b, _)| cfg.metric.better(v, *b)) {
                best = Some((v, model.clone()));
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

/// Trains a model from scratch on `ds` and packages it as a checkpoint whose
/// provenance carries the selected epoch's validation and test metrics.
pub fn train_primary(spec: &ModelSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<LogRecord>)> {
    cfg.validate()?;
    let spec = spec.with_classes(ds.classes);
    let mut model: Model = build_model(&spec, derive_seed(cfg.seed, "init"))?;
    let run_id = format!("primary/{}/{}/{}", ds.task_id, spec.name, cfg.seed);
    let mut log = Vec::new();
    train_epochs(
        &mut model,
        ds,
        cfg,
        FreezePlan::none(),
        cfg.epochs,
        cfg.seed,
        &run_id,
        TransferPhase::Finetune,
        "primary",
        &mut log,
        &mut |_, _, _, _| {},
    )?;
    let mut provenance = Provenance {
        task_id: ds.task_id.clone(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        ..Provenance::default()
    };
    for split in [Split::Val, Split::Test] {
        if ds.splits.get(split).is_empty() {
            continue;
        }
        let v = evaluate(&model, ds, split, cfg.metric)?;
        let name = if split == Split::Val { "val" } else { "test" };
        record(&mut log, &run_id, "primary", cfg.epochs, name, cfg.metric.name(), v);
        provenance.metrics.insert(format!("{name}_{}", cfg.metric.name()), v);
    }
    provenance.notes.insert("architecture".into(), spec.name.clone());
    Ok((Checkpoint::from_model(&model, provenance), log))
}

pub fn gradual_transfer(primary: &Checkpoint, secondary: &Dataset, l_c: usize, cfg: &TrainConfig) -> Result<TransferResult> {
    gradual_transfer_observed(primary, secondary, &FreezeSelector::Stages(l_c), cfg, &mut |_, _, _, _| {})
}

/// Transplants `primary` into a model for `secondary`, warms up the output
/// layer, then fine-tunes everything after the cut-point. For the
/// feature-extractor cut (`l_c = L_H`) the output layer alone trains for the
/// whole budget. `observer` sees the model and the optimizer state after
/// every optimizer step.
pub fn gradual_transfer_observed(
    primary: &Checkpoint,
    secondary: &Dataset,
    selector: &FreezeSelector,
    cfg: &TrainConfig,
    observer: Observer,
) -> Result<TransferResult> {
    cfg.validate()?;
    let spec = primary.spec.with_classes(secondary.classes);
    let plan = freeze_prefix(&spec, selector)?;
    let head_only = freeze_prefix(&spec, &FreezeSelector::Stages(spec.hidden_stages()))?;
    let mut model = transplant(primary, &spec, cfg.seed)?;
    let frozen_before = frozen_tensors(&model, &plan);
    let run_id = format!("transfer/{}->{}/{}/{}/{}", primary.provenance.task_id, secondary.task_id, spec.name, plan.l_c, cfg.seed);
    let seeds = RunSeeds {
        output_head: crate::surgery::output_head_seed(cfg.seed),
        shuffle: derive_seed(derive_seed(cfg.seed, "finetune"), "shuffle"),
        dropout: derive_seed(derive_seed(cfg.seed, "finetune"), "dropout"),
    };
    let mut log = Vec::new();
    let mut phase1 = Vec::new();
    let feature_extractor = plan.l_c == spec.hidden_stages();
    if !feature_extractor {
        let warm_seed = derive_seed(cfg.seed, "warmup");
        let mut batches = Batches::new(secondary, cfg.batch_size, derive_seed(warm_seed, "shuffle"))?;
        let mut trainer = Trainer {
            ds: secondary,
            cfg,
            plan: head_only,
            dropout: ChaCha8Rng::seed_from_u64(derive_seed(warm_seed, "dropout")),
            state: SgdState::default(),
        };
        let lr = cfg.sgd.lr_at(0);
        let steps = cfg.warmup_for(secondary.splits.train.len());
        let mut total = 0.0;
        for step in 1..=steps {
            let batch = batches.next_cycling();
            total += trainer.step(&mut model, &batch, lr, 0)?;
            observer(TransferPhase::Warmup, step, &model, &trainer.state);
        }
        record(&mut log, &run_id, "warmup", 0, "train", "loss", total / steps as f64);
        if !secondary.splits.val.is_empty() {
            let v = evaluate(&model, secondary, Split::Val, cfg.metric)?;
            record(&mut log, &run_id, "warmup", 0, "val", cfg.metric.name(), v);
            phase1.push(v);
        }
    }
    let phase2 = train_epochs(
        &mut model,
        secondary,
        cfg,
        plan.clone(),
        cfg.finetune_budget(),
        derive_seed(cfg.seed, "finetune"),
        &run_id,
        TransferPhase::Finetune,
        "finetune",
        &mut log,
        observer,
    )?;
    if frozen_tensors(&model, &plan) != frozen_before {
        return Err(Error::Config(format!("{run_id}: frozen prefix changed during fine-tuning")));
    }
    let final_metric = evaluate(&model, secondary, Split::Test, cfg.metric)?;
    record(&mut log, &run_id, "finetune", cfg.finetune_budget(), "test", cfg.metric.name(), final_metric);
    Ok(TransferResult {
        l_c: plan.l_c,
        label: plan.label,
        phase1_metric_history: phase1,
        phase2_metric_history: phase2,
        final_metric,
        final_metric_std: 0.0,
        frozen_layer_ids: plan.frozen_layer_ids,
        seeds,
        log,
    })
}

/// Bit patterns of every parameter and buffer owned by a frozen layer.
fn frozen_tensors(model: &Model, plan: &FreezePlan) -> Vec<(String, Vec<u32>)> {
    model
        .params
        .iter()
        .chain(&model.bn_running_stats)
        .filter(|(k, _)| model.layer_of_key(k).is_some_and(|i| plan.contains(i)))
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Trains the from-scratch comparison model: same architecture as the
/// transferred one, phase-2 epoch budget, its own seed stream.
pub fn train_baseline(spec: &ModelSpec, secondary: &Dataset, cfg: &TrainConfig) -> Result<Baseline> {
    let seed = derive_seed(cfg.seed, "baseline");
    let bcfg = TrainConfig {
        epochs: cfg.finetune_budget(),
        ..cfg.with_seed(seed)
    };
    let (ckpt, mut log) = train_primary(spec, secondary, &bcfg)?;
    for r in &mut log {
        r.phase = "baseline".into();
        r.run_id = format!("baseline/{}/{}/{}", secondary.task_id, spec.name, cfg.seed);
    }
    let metric = evaluate(&ckpt.model()?, secondary, Split::Test, cfg.metric)?;
    Ok(Baseline { metric, std: 0.0, seed, log })
}

/// Worker count from `GRAFT_WORKERS`, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn check_cuts(cuts: &[CutPoint]) -> Result<()> {
    if cuts.is_empty() {
        return Err(Error::Config("sweep needs at least one cut-point".into()));
    }
    let mut l: Vec<usize> = cuts.iter().map(|c| c.l_c).collect();
    l.sort_unstable();
    if l.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("sweep cut-points must have distinct l_c".into()));
    }
    Ok(())
}

fn sweep_points(primary: &Checkpoint, secondary: &Dataset, cuts: &[CutPoint], cfg: &TrainConfig) -> Result<Vec<TransferResult>> {
    let mut points = cuts
        .par_iter()
        .map(|c| gradual_transfer(primary, secondary, c.l_c, cfg).map(|r| TransferResult { label: c.label.clone(), ..r }))
        .collect::<Result<Vec<_>>>()?;
    points.sort_by_key(|p| p.l_c);
    Ok(points)
}

/// One transfer run per cut-point plus the from-scratch baseline, run on up
/// to `workers` threads. Points come back sorted by `l_c`.
pub fn sweep(primary: &Checkpoint, secondary: &Dataset, cuts: &[CutPoint], cfg: &TrainConfig, workers: usize) -> Result<TransferCurve> {
    check_cuts(cuts)?;
    let spec = primary.spec.with_classes(secondary.classes);
    let (points, baseline) = pool(workers)?.install(|| {
        rayon::join(
            || sweep_points(primary, secondary, cuts, cfg),
            || train_baseline(&spec, secondary, cfg),
        )
    });
    Ok(TransferCurve {
        primary_task_id: primary.provenance.task_id.clone(),
        secondary_task_id: secondary.task_id.clone(),
        architecture: spec.name.clone(),
        metric: cfg.metric,
        points: points?,
        baseline: baseline?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossMatrix {
    /// One per (task, architecture).
    pub primaries: Vec<Checkpoint>,
    /// One per ordered pair of distinct tasks and architecture, primary-major.
    pub curves: Vec<TransferCurve>,
}

/// Trains a primary per (task, architecture) and sweeps every primary onto
/// every other task at the architecture's block cut-points. Baselines are
/// shared by all curves with the same secondary task and architecture.
pub fn cross_matrix(tasks: &[Dataset], specs: &[ModelSpec], cfg: &TrainConfig, workers: usize) -> Result<CrossMatrix> {
    if tasks.len() < 2 {
        return Ok(CrossMatrix {
            primaries: Vec::new(),
            curves: Vec::new(),
        });
    }
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("cross matrix task ids must be distinct".into()));
    }
    let jobs: Vec<(usize, &ModelSpec)> = specs.iter().flat_map(|s| (0..tasks.len()).map(move |t| (t, s))).collect();
    let pool = pool(workers)?;
    let trained = pool.install(|| {
        jobs.par_iter()
            .map(|&(t, s)| {
                let c = cfg.with_seed(derive_seed(cfg.seed, &format!("primary/{}", tasks[t].task_id)));
                let baseline = train_baseline(&s.with_classes(tasks[t].classes), &tasks[t], cfg)?;
                Ok((train_primary(s, &tasks[t], &c)?.0, baseline))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut pairs = Vec::new();
    for (a, (ta, sa)) in jobs.iter().enumerate() {
        for (b, (tb, sb)) in jobs.iter().enumerate() {
            if ta != tb && sa.name == sb.name {
                pairs.push((a, b));
            }
        }
    }
    let curves = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(a, b)| {
                let (primary, _) = &trained[a];
                let secondary = &tasks[jobs[b].0];
                let spec = primary.spec.with_classes(secondary.classes);
                Ok(TransferCurve {
                    primary_task_id: primary.provenance.task_id.clone(),
                    secondary_task_id: secondary.task_id.clone(),
                    architecture: spec.name.clone(),
                    metric: cfg.metric,
                    points: sweep_points(primary, secondary, &block_boundaries(&spec), cfg)?,
                    baseline: trained[b].1.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(CrossMatrix {
        primaries: trained.into_iter().map(|(c, _)| c).collect(),
        curves,
    })
}

/// Mean (and population std) of matching curves, point by point.
pub fn average_curves(curves: &[TransferCurve]) -> Result<TransferCurve> {
    let first = curves.first().ok_or_else(|| Error::Analysis("no curves to average".into()))?;
    let ls: Vec<usize> = first.points.iter().map(|p| p.l_c).collect();
    if curves.iter().any(|c| c.points.iter().map(|p| p.l_c).collect::<Vec<_>>() != ls) {
        return Err(Error::Analysis("curves to average have different cut-points".into()));
    }
    let stats = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt())
    };
    let mut out = first.clone();
    for (i, p) in out.points.iter_mut().enumerate() {
        (p.final_metric, p.final_metric_std) = stats(curves.iter().map(|c| c.points[i].final_metric).collect());
        p.log.clear();
    }
    (out.baseline.metric, out.baseline.std) = stats(curves.iter().map(|c| c.baseline.metric).collect());
    out.baseline.log.clear();
    Ok(out)
}

/// Re-runs primary training and the sweep on each of `k` index folds of the
/// two datasets and averages the resulting curves.
pub fn kfold_sweep(
    primary_task: &Dataset,
    secondary: &Dataset,
    spec: &ModelSpec,
    cuts: &[CutPoint],
    cfg: &TrainConfig,
    k: usize,
    workers: usize,
) -> Result<TransferCurve> {
    let pf = kfold_splits(primary_task.len(), k, derive_seed(cfg.seed, "folds/primary"))?;
    let sf = kfold_splits(secondary.len(), k, derive_seed(cfg.seed, "folds/secondary"))?;
    let mut curves = Vec::with_capacity(k);
    for (p, s) in pf.into_iter().zip(sf) {
        let pd = primary_task.clone().with_splits(p)?;
        let sd = secondary.clone().with_splits(s)?;
        let (ckpt, _) = train_primary(spec, &pd, cfg)?;
        curves.push(sweep(&ckpt, &sd, cuts, cfg, workers)?);
    }
    average_curves(&curves)
}
