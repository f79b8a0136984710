//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    backward_layer, forward_layer, Layer, LayerKind, LayerParams, TrainMode, BETA, BIAS, GAMMA, RUNNING_MEAN,
    RUNNING_VAR, WEIGHT,
};
use crate::loss::softmax_cross_entropy;
use crate::model::{build_model, Model, NamedTensors};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::Preset;

/// Step size and tolerance used for 32-bit checks.
pub const F32_EPS: f64 = 1e-3;
pub const F32_TOLERANCE: f64 = 1e-2;
/// Step size and tolerance used for 64-bit checks.
pub const F64_EPS: f64 = 1e-6;
pub const F64_TOLERANCE: f64 = 1e-5;
/// Base step for whole-model checks. Probes that cross a kink retry with a
/// smaller step, so the base can be large enough to keep rounding low.
pub const MODEL_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Evaluate the finite differences on a 64-bit copy of the model while
    /// the analytic gradients keep the model's own precision.
    pub numeric_in_f64: bool,
    /// Entries checked per parameter tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl GradCheckOptions {
    /// 32-bit analytic gradients are compared with 64-bit central
    /// differences: single-precision differences are dominated by rounding
    /// of the loss once the gradient entry is small.
    pub fn for_precision<T: Scalar>(seed: u64) -> Self {
        Self {
            eps: if T::NAME == "f64" { F64_EPS } else { F32_EPS },
            numeric_in_f64: T::NAME != "f64",
            samples_per_tensor: 12,
            seed,
        }
    }

    /// Whole-model checks, with a step suited to kink-aware differences.
    pub fn for_model<T: Scalar>(seed: u64) -> Self {
        Self {
            eps: MODEL_EPS,
            ..Self::for_precision::<T>(seed)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter entry with the largest error, as `key[index]`.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = name();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn pick(len: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= samples {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, samples).into_vec();
        v.sort_unstable();
        v
    }
}

/// Mean cross-entropy of a training-mode pass. Dropout draws from a fresh
/// generator seeded identically on every call, so masks never change.
fn model_loss<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], seed: u64) -> Result<(T, Tensor<T>, NamedTensors<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pass = model.forward(x, TrainMode::Training, 0, Some(&mut rng))?;
    let (loss, grad) = softmax_cross_entropy(pass.logits(), labels)?;
    let grads = model.backward(&pass, grad.clone())?;
    Ok((loss, grad, grads))
}

/// Loss and activation pattern of a training-mode pass.
fn loss_at<U: Scalar>(model: &Model<U>, x: &Tensor<U>, labels: &[usize], dropout_seed: u64) -> Result<(f64, u64)> {
    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
    let pass = model.forward(x, TrainMode::Training, 0, Some(&mut r))?;
    let loss = softmax_cross_entropy(pass.logits(), labels)?.0.to_f64().unwrap();
    Ok((loss, pass.activation_pattern()))
}

/// Times the step is quartered when a probe lands on another linear piece.
const KINK_RETRIES: usize = 4;

/// Central difference along one parameter entry. When either probe changes
/// the activation pattern the step straddles a ReLU or max-pool kink, where
/// the difference quotient is not the derivative, so the step shrinks.
#[allow(clippy::too_many_arguments)]
fn central_difference<U: Scalar>(
    probe: &mut Model<U>,
    x: &Tensor<U>,
    labels: &[usize],
    key: &str,
    i: usize,
    eps: f64,
    dropout_seed: u64,
    pattern: u64,
) -> Result<f64> {
    let orig = probe.params[key].data()[i];
    let at = |p: &mut Model<U>, v: U| {
        p.params.get_mut(key).unwrap().data_mut()[i] = v;
        loss_at(p, x, labels, dropout_seed)
    };
    let mut h = eps;
    let mut estimate = 0.0;
    for attempt in 0..=KINK_RETRIES {
        let plus = at(probe, orig + U::lit(h));
        let minus = at(probe, orig - U::lit(h));
        let ((lp, pp), (lm, pm)) = match (plus, minus) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                probe.params.get_mut(key).unwrap().data_mut()[i] = orig;
                return Err(e);
            }
        };
        estimate = (lp - lm) / (2.0 * h);
        if (pp == pattern && pm == pattern) || attempt == KINK_RETRIES {
            break;
        }
        h /= 4.0;
    }
    probe.params.get_mut(key).unwrap().data_mut()[i] = orig;
    Ok(estimate)
}

/// Compares backpropagated parameter gradients of the cross-entropy loss
/// against central differences on sampled entries of every parameter tensor.
pub fn grad_check<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let dropout_seed = derive_seed(opts.seed, "dropout");
    let (_, _, analytic) = model_loss(model, x, labels, dropout_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "entries"));
    let mut report = GradCheckReport::empty();
    let mut probe = model.clone();
    let mut wide: Option<(Model<f64>, Tensor<f64>)> = opts.numeric_in_f64.then(|| (model.cast(), x.cast()));
    let pattern = match &wide {
        Some((m, x)) => loss_at(m, x, labels, dropout_seed)?.1,
        None => loss_at(model, x, labels, dropout_seed)?.1,
    };
    for (key, grad) in &analytic {
        for i in pick(grad.len(), opts.samples_per_tensor, &mut rng) {
            let numeric = match &mut wide {
                Some((m, x)) => central_difference(m, x, labels, key, i, opts.eps, dropout_seed, pattern)?,
                None => central_difference(&mut probe, x, labels, key, i, opts.eps, dropout_seed, pattern)?,
            };
            report.record(|| format!("{key}[{i}]"), grad.data()[i].to_f64().unwrap(), numeric);
        }
    }
    Ok(report)
}

fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect()).unwrap()
}

/// Random values with magnitude at least `gap`, keeping ReLU inputs away from
/// the kink at zero.
fn away_from_zero<T: Scalar>(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            T::lit(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Distinct values on a shuffled grid, so max-pool windows have no near-ties.
fn distinct<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let data = order.iter().map(|&k| T::lit(k as f64 / n as f64 - 0.5)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// A single layer with its parameters and inputs, checked in isolation.
pub struct LayerCase {
    pub name: &'static str,
    pub kind: LayerKind,
    pub inputs: Vec<Vec<usize>>,
}

/// One small configuration of every layer kind.
pub fn layer_cases() -> Vec<LayerCase> {
    let case = |name, kind, inputs: &[&[usize]]| LayerCase {
        name,
        kind,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
    };
    vec![
        case("convolution", LayerKind::convolution(3, 3, 3, 1, true), &[&[2, 2, 4, 4]]),
        case("convolution_5x4", LayerKind::convolution(2, 5, 4, 1, false), &[&[2, 1, 6, 5]]),
        case("convolution_strided", LayerKind::convolution(2, 3, 3, 2, true), &[&[2, 2, 5, 5]]),
        case("fully_connected", LayerKind::FullyConnected { out_units: 4, bias: true }, &[&[3, 2, 2, 2]]),
        case("batch_norm", LayerKind::BatchNorm, &[&[4, 3, 2, 2]]),
        case("batch_norm_dense", LayerKind::BatchNorm, &[&[6, 5]]),
        case("relu", LayerKind::Relu, &[&[2, 3, 2, 2]]),
        case("dropout", LayerKind::Dropout { rate: 0.4 }, &[&[2, 3, 3, 3]]),
        case("max_pool", LayerKind::MaxPool { size: [2, 2], stride: 2 }, &[&[2, 2, 4, 4]]),
        case("avg_pool", LayerKind::AvgPool { size: [2, 2], stride: 2 }, &[&[2, 2, 4, 4]]),
        case("concat", LayerKind::Concat { sources: vec![0, 1] }, &[&[2, 2, 3, 3], &[2, 3, 3, 3]]),
        case("softmax_output", LayerKind::SoftmaxOutput { classes: 5 }, &[&[4, 6]]),
    ]
}

/// Checks gradients of one layer with respect to its parameters and inputs.
/// Output layers use the cross-entropy loss; every other kind a fixed random
/// projection `sum(out * r)`.
pub fn layer_grad_check<T: Scalar>(case: &LayerCase, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, case.name));
    let inputs: Vec<Tensor<T>> = case
        .inputs
        .iter()
        .map(|s| match case.kind {
            LayerKind::Relu => away_from_zero(s, 0.05, &mut rng),
            LayerKind::MaxPool { .. } => distinct(s, &mut rng),
            _ => uniform(s, -1.0, 1.0, &mut rng),
        })
        .collect();
    let sample_shape: Vec<usize> = case.inputs[0][1..].to_vec();
    let mut params = NamedTensors::<T>::new();
    for (name, shape) in case.kind.param_shapes(&sample_shape) {
        let t = if name == GAMMA {
            uniform(&shape, 0.5, 1.5, &mut rng)
        } else {
            uniform(&shape, -0.5, 0.5, &mut rng)
        };
        params.insert(name.to_string(), t);
    }
    for (name, shape) in case.kind.buffer_shapes(&sample_shape) {
        params.insert(name.to_string(), Tensor::zeros(&shape));
    }
    let batch = case.inputs[0][0];
    let labels: Vec<usize> = match case.kind {
        LayerKind::SoftmaxOutput { classes } => (0..batch).map(|_| rng.gen_range(0..classes)).collect(),
        _ => Vec::new(),
    };
    let problem = LayerProblem {
        case,
        labels,
        dropout_seed: rng.next_u64(),
        projection_seed: derive_seed(opts.seed, "projection"),
    };

    let (_, grads) = problem.loss(&params, &inputs, true)?;
    let (dins, dparams) = grads.expect("backward requested");
    let wide = opts.numeric_in_f64.then(|| {
        let p: NamedTensors<f64> = params.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        (p, inputs.iter().map(Tensor::cast).collect::<Vec<Tensor<f64>>>())
    });
    let numeric = |entry: Entry, i: usize| match &wide {
        Some((p, x)) => problem.central_difference(p, x, entry, i, opts.eps),
        None => problem.central_difference(&params, &inputs, entry, i, opts.eps),
    };

    let mut report = GradCheckReport::empty();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "entries"));
    for (key, grad) in &dparams {
        for i in pick(grad.len(), opts.samples_per_tensor, &mut pick_rng) {
            let n = numeric(Entry::Param(key), i)?;
            report.record(|| format!("{}.{key}[{i}]", case.name), grad.data()[i].to_f64().unwrap(), n);
        }
    }
    for (s, din) in dins.iter().enumerate() {
        for i in pick(din.len(), opts.samples_per_tensor, &mut pick_rng) {
            let n = numeric(Entry::Input(s), i)?;
            report.record(|| format!("{}.input{s}[{i}]", case.name), din.data()[i].to_f64().unwrap(), n);
        }
    }
    Ok(report)
}

#[derive(Clone, Copy)]
enum Entry<'a> {
    Param(&'a str),
    Input(usize),
}

type LayerGrads<U> = (Vec<Tensor<U>>, NamedTensors<U>);

/// A layer case with its labels and seeds fixed, evaluable in any precision.
struct LayerProblem<'a> {
    case: &'a LayerCase,
    labels: Vec<usize>,
    dropout_seed: u64,
    projection_seed: u64,
}

impl LayerProblem<'_> {
    fn loss<U: Scalar>(&self, params: &NamedTensors<U>, inputs: &[Tensor<U>], backward: bool) -> Result<(f64, Option<LayerGrads<U>>)> {
        let layer = Layer {
            name: self.case.name,
            kind: &self.case.kind,
            params: LayerParams {
                weight: params.get(WEIGHT),
                bias: params.get(BIAS),
                gamma: params.get(GAMMA),
                beta: params.get(BETA),
                running_mean: params.get(RUNNING_MEAN),
                running_var: params.get(RUNNING_VAR),
            },
        };
        let refs: Vec<&Tensor<U>> = inputs.iter().collect();
        let mut drng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (out, cache) = forward_layer(&layer, &refs, TrainMode::Training, Some(&mut drng))?;
        let (loss, grad_out) = if self.labels.is_empty() {
            let mut prng = ChaCha8Rng::seed_from_u64(self.projection_seed);
            let r: Tensor<f64> = uniform(out.shape(), -1.0, 1.0, &mut prng);
            let loss = out.data().iter().zip(r.data()).map(|(&a, &b)| a.to_f64().unwrap() * b).sum();
            (loss, r.cast())
        } else {
            let loss = softmax_cross_entropy(&out.cast::<f64>(), &self.labels)?.0;
            (loss, softmax_cross_entropy(&out, &self.labels)?.1)
        };
        if !backward {
            return Ok((loss, None));
        }
        let (din, dp) = backward_layer(&layer, &grad_out, &cache)?;
        let named = dp.into_named().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        Ok((loss, Some((din, named))))
    }

    fn central_difference<U: Scalar>(
        &self,
        params: &NamedTensors<U>,
        inputs: &[Tensor<U>],
        entry: Entry,
        i: usize,
        eps: f64,
    ) -> Result<f64> {
        let orig = match entry {
            Entry::Param(key) => params[key].data()[i],
            Entry::Input(s) => inputs[s].data()[i],
        };
        let mut params = params.clone();
        let mut inputs = inputs.to_vec();
        let mut at = |v: U| {
            match entry {
                Entry::Param(key) => params.get_mut(key).unwrap().data_mut()[i] = v,
                Entry::Input(s) => inputs[s].data_mut()[i] = v,
            }
            self.loss(&params, &inputs, false).map(|(l, _)| l)
        };
        let (hi, lo) = (orig + U::lit(eps), orig - U::lit(eps));
        // The step actually taken differs from 2 * eps after rounding.
        Ok((at(hi)? - at(lo)?) / (hi - lo).to_f64().unwrap())
    }
}

pub const PRESET_BATCH: usize = 16;

/// Gradient check of a whole preset on a random batch.
pub fn preset_grad_check<T: Scalar>(preset: Preset, seed: u64) -> Result<GradCheckReport> {
    preset_grad_check_with::<T>(preset, PRESET_BATCH, &GradCheckOptions::for_model::<T>(seed))
}

pub fn preset_grad_check_with<T: Scalar>(preset: Preset, batch: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let classes = 3;
    let spec = preset.spec(classes);
    let model: Model<T> = build_model(&spec, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "batch"));
    let mut shape = vec![batch];
    shape.extend(&spec.input_shape);
    let mut x: Tensor<T> = uniform(&shape, -1.0, 1.0, &mut rng);
    let per_sample = x.row_len();
    for row in x.data_mut().chunks_mut(per_sample) {
        let gain = T::lit(rng.gen_range(0.25..2.0));
        let offset = T::lit(rng.gen_range(-1.5..1.5));
        for v in row {
            *v = *v * gain + offset;
        }
    }
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    grad_check(&model, &x, &labels, opts)
}
