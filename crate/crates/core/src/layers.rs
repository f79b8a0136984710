//! Forward and backward kernels for every layer kind the model zoo uses.
//!
//! Shapes passed to [`LayerKind::output_shape`] are per-sample (no batch
//! axis). Activations flowing through [`forward_layer`] always carry the batch
//! as their leading axis.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub const WEIGHT: &str = "weight";
pub const BIAS: &str = "bias";
pub const GAMMA: &str = "gamma";
pub const BETA: &str = "beta";
pub const RUNNING_MEAN: &str = "running_mean";
pub const RUNNING_VAR: &str = "running_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Convolution {
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: [usize; 2],
        /// Omitted when the output feeds straight into a BatchNorm, where a
        /// per-channel shift is cancelled by the mean subtraction.
        bias: bool,
    },
    FullyConnected {
        out_units: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    Dropout {
        rate: f64,
    },
    MaxPool {
        size: [usize; 2],
        stride: usize,
    },
    AvgPool {
        size: [usize; 2],
        stride: usize,
    },
    /// Channel-wise concatenation of earlier layer outputs, in the listed order.
    Concat {
        sources: Vec<usize>,
    },
    /// Final fully connected layer producing `classes` logits; the softmax
    /// itself is folded into the loss.
    SoftmaxOutput {
        classes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Training,
    Inference,
}

impl LayerKind {
    pub fn convolution(out_channels: usize, kh: usize, kw: usize, stride: usize, bias: bool) -> Self {
        LayerKind::Convolution {
            out_channels,
            kernel: [kh, kw],
            stride,
            padding: [kh / 2, kw / 2],
            bias,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Convolution { .. } => "conv",
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::BatchNorm => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Concat { .. } => "concat",
            LayerKind::SoftmaxOutput { .. } => "output",
        }
    }

    /// Convolution, fully connected and output layers: the stages that carry
    /// a representation of their own.
    pub fn is_stage(&self) -> bool {
        matches!(
            self,
            LayerKind::Convolution { .. } | LayerKind::FullyConnected { .. } | LayerKind::SoftmaxOutput { .. }
        )
    }

    /// Per-sample output shape given per-sample input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        let single = || -> std::result::Result<&[usize], String> {
            match inputs {
                [one] => Ok(*one),
                _ => Err(format!("exactly one input, got {}", inputs.len())),
            }
        };
        match self {
            LayerKind::Convolution {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let s = single()?;
                let [_, h, w] = chw(s)?;
                let ho = window_out(h + 2 * padding[0], kernel[0], *stride)
                    .ok_or_else(|| format!("[C, H+2*{}>={}, W+2*{}>={}]", padding[0], kernel[0], padding[1], kernel[1]))?;
                let wo = window_out(w + 2 * padding[1], kernel[1], *stride)
                    .ok_or_else(|| format!("[C, H+2*{}>={}, W+2*{}>={}]", padding[0], kernel[0], padding[1], kernel[1]))?;
                Ok(vec![*out_channels, ho, wo])
            }
            LayerKind::FullyConnected { out_units, .. } => {
                single()?;
                Ok(vec![*out_units])
            }
            LayerKind::SoftmaxOutput { classes } => {
                single()?;
                Ok(vec![*classes])
            }
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Dropout { .. } => {
                let s = single()?;
                if !(s.len() == 1 || s.len() == 3) {
                    return Err("[F] or [C, H, W]".into());
                }
                Ok(s.to_vec())
            }
            LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                let s = single()?;
                let [c, h, w] = chw(s)?;
                let ho = window_out(h, size[0], *stride).ok_or_else(|| format!("[C, H>={}, W>={}]", size[0], size[1]))?;
                let wo = window_out(w, size[1], *stride).ok_or_else(|| format!("[C, H>={}, W>={}]", size[0], size[1]))?;
                Ok(vec![c, ho, wo])
            }
            LayerKind::Concat { sources } => {
                if inputs.len() != sources.len() || inputs.is_empty() {
                    return Err(format!("{} inputs", sources.len()));
                }
                let first = inputs[0];
                let mut out = first.to_vec();
                out[0] = 0;
                for s in inputs {
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(format!("inputs agreeing on trailing extents {:?}", &first[1..]));
                    }
                    out[0] += s[0];
                }
                Ok(out)
            }
        }
    }

    /// Learnable parameter shapes for a per-sample input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerKind::Convolution {
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(WEIGHT, vec![*out_channels, input[0], kernel[0], kernel[1]])];
                if *bias {
                    v.push((BIAS, vec![*out_channels]));
                }
                v
            }
            LayerKind::FullyConnected { out_units, bias } => {
                let fan_in = input.iter().product();
                let mut v = vec![(WEIGHT, vec![*out_units, fan_in])];
                if *bias {
                    v.push((BIAS, vec![*out_units]));
                }
                v
            }
            LayerKind::SoftmaxOutput { classes } => {
                let fan_in = input.iter().product();
                vec![(WEIGHT, vec![*classes, fan_in]), (BIAS, vec![*classes])]
            }
            LayerKind::BatchNorm => vec![(GAMMA, vec![input[0]]), (BETA, vec![input[0]])],
            _ => Vec::new(),
        }
    }

    /// Non-learned state (BatchNorm running statistics).
    pub fn buffer_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerKind::BatchNorm => vec![(RUNNING_MEAN, vec![input[0]]), (RUNNING_VAR, vec![input[0]])],
            _ => Vec::new(),
        }
    }
}

fn chw(s: &[usize]) -> std::result::Result<[usize; 3], String> {
    match s {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err("[C, H, W]".into()),
    }
}

fn window_out(extent: usize, size: usize, stride: usize) -> Option<usize> {
    if stride == 0 || size == 0 || extent < size {
        None
    } else {
        Some((extent - size) / stride + 1)
    }
}

/// Borrowed parameters and buffers of one layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerParams<'a, T: Scalar> {
    pub weight: Option<&'a Tensor<T>>,
    pub bias: Option<&'a Tensor<T>>,
    pub gamma: Option<&'a Tensor<T>>,
    pub beta: Option<&'a Tensor<T>>,
    pub running_mean: Option<&'a Tensor<T>>,
    pub running_var: Option<&'a Tensor<T>>,
}

/// A layer kind bound to its position and parameters.
#[derive(Clone, Copy, Debug)]
pub struct Layer<'a, T: Scalar> {
    pub name: &'a str,
    pub kind: &'a LayerKind,
    pub params: LayerParams<'a, T>,
}

#[derive(Clone, Debug, Default)]
pub struct LayerGrads<T: Scalar> {
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn into_named(self) -> Vec<(&'static str, Tensor<T>)> {
        [(WEIGHT, self.weight), (BIAS, self.bias), (GAMMA, self.gamma), (BETA, self.beta)]
            .into_iter()
            .filter_map(|(n, t)| t.map(|t| (n, t)))
            .collect()
    }
}

/// Whatever a forward pass must remember for the matching backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T: Scalar> {
    None,
    Conv { input: Tensor<T> },
    Dense { input: Tensor<T> },
    BatchNorm(BnCache<T>),
    Relu { output: Tensor<T> },
    Dropout { mask: Vec<T> },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Concat { widths: Vec<usize>, shapes: Vec<Vec<usize>> },
}

#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics (biased variance) when the forward ran in training mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
    /// Elements reduced per channel.
    pub count: usize,
}

fn shape_err(layer: &str, expected: impl Into<String>, actual: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

fn need<'a, T: Scalar>(layer: &Layer<'a, T>, t: Option<&'a Tensor<T>>, what: &str) -> Result<&'a Tensor<T>> {
    t.ok_or_else(|| Error::UnknownParameter(format!("{}.{}", layer.name, what)))
}

pub fn forward_layer<T: Scalar>(
    layer: &Layer<'_, T>,
    inputs: &[&Tensor<T>],
    mode: TrainMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let batch = inputs.first().map(|t| t.batch()).unwrap_or(0);
    let per_sample: Vec<&[usize]> = inputs.iter().map(|t| &t.shape()[1.min(t.shape().len())..]).collect();
    if inputs.iter().any(|t| t.batch() != batch) {
        return Err(shape_err(layer.name, "inputs with equal batch size", inputs[1].shape()));
    }
    let out_sample = layer
        .kind
        .output_shape(&per_sample)
        .map_err(|e| shape_err(layer.name, e, inputs.first().map(|t| t.shape()).unwrap_or(&[])))?;
    let train = mode == TrainMode::Training;
    let cache = |c: LayerCache<T>| if train { c } else { LayerCache::None };

    match layer.kind {
        LayerKind::Convolution {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let x = inputs[0];
            let w = need(layer, layer.params.weight, WEIGHT)?;
            let geom = ConvGeom::new(x.shape(), *out_channels, *kernel, *stride, *padding);
            if w.shape() != [geom.out_c, geom.in_c, kernel[0], kernel[1]] {
                return Err(shape_err(layer.name, format!("weight [{}, {}, {}, {}]", geom.out_c, geom.in_c, kernel[0], kernel[1]), w.shape()));
            }
            let y = conv_forward(&geom, x.data(), w.data(), layer.params.bias.map(|b| b.data()));
            let out = Tensor::from_vec(vec![batch, geom.out_c, geom.out_h, geom.out_w], y)?;
            Ok((out, cache(LayerCache::Conv { input: x.clone() })))
        }
        LayerKind::FullyConnected { .. } | LayerKind::SoftmaxOutput { .. } => {
            let x = inputs[0];
            let w = need(layer, layer.params.weight, WEIGHT)?;
            let fan_in = x.row_len();
            let out_units = out_sample[0];
            if w.shape() != [out_units, fan_in] {
                return Err(shape_err(layer.name, format!("flattened input of {} features", w.shape()[1]), x.shape()));
            }
            let mut y = vec![T::zero(); batch * out_units];
            T::gemm(batch, fan_in, out_units, T::one(), x.data(), false, w.data(), true, T::zero(), &mut y);
            if let Some(b) = layer.params.bias {
                for row in y.chunks_mut(out_units) {
                    for (v, &bb) in row.iter_mut().zip(b.data()) {
                        *v = *v + bb;
                    }
                }
            }
            let out = Tensor::from_vec(vec![batch, out_units], y)?;
            let flat = x.clone().reshape(vec![batch, fan_in])?;
            Ok((out, cache(LayerCache::Dense { input: flat })))
        }
        LayerKind::BatchNorm => {
            let x = inputs[0];
            let (out, c) = batchnorm_forward(layer, x, train)?;
            Ok((out, cache(LayerCache::BatchNorm(c))))
        }
        LayerKind::Relu => {
            let out = inputs[0].map(|v| if v > T::zero() { v } else { T::zero() });
            let c = if train { LayerCache::Relu { output: out.clone() } } else { LayerCache::None };
            Ok((out, c))
        }
        LayerKind::Dropout { rate } => {
            let x = inputs[0];
            if !train || *rate == 0.0 {
                let c = if train { LayerCache::Dropout { mask: vec![T::one(); x.len()] } } else { LayerCache::None };
                return Ok((x.clone(), c));
            }
            let rng = rng.ok_or_else(|| Error::Config(format!("dropout layer {} needs an rng in training mode", layer.name)))?;
            let keep = 1.0 - rate;
            let scale = T::lit(1.0 / keep);
            let mask: Vec<T> = (0..x.len())
                .map(|_| {
                    // 53-bit uniform in [0, 1)
                    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                    if u < keep {
                        scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let y: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Ok((Tensor::from_vec(x.shape().to_vec(), y)?, LayerCache::Dropout { mask }))
        }
        LayerKind::MaxPool { size, stride } => {
            let x = inputs[0];
            let (y, argmax) = maxpool_forward(x.shape(), x.data(), *size, *stride);
            let mut shape = vec![batch];
            shape.extend_from_slice(&out_sample);
            Ok((
                Tensor::from_vec(shape, y)?,
                cache(LayerCache::MaxPool {
                    argmax,
                    input_shape: x.shape().to_vec(),
                }),
            ))
        }
        LayerKind::AvgPool { size, stride } => {
            let x = inputs[0];
            let y = avgpool_forward(x.shape(), x.data(), *size, *stride);
            let mut shape = vec![batch];
            shape.extend_from_slice(&out_sample);
            Ok((
                Tensor::from_vec(shape, y)?,
                cache(LayerCache::AvgPool {
                    input_shape: x.shape().to_vec(),
                }),
            ))
        }
        LayerKind::Concat { .. } => {
            let inner: usize = out_sample[1..].iter().product();
            let widths: Vec<usize> = per_sample.iter().map(|s| s[0]).collect();
            let total = out_sample[0];
            let mut y = Vec::with_capacity(batch * total * inner);
            for n in 0..batch {
                for (t, &c) in inputs.iter().zip(&widths) {
                    y.extend_from_slice(&t.data()[n * c * inner..(n + 1) * c * inner]);
                }
            }
            let mut shape = vec![batch];
            shape.extend_from_slice(&out_sample);
            Ok((
                Tensor::from_vec(shape, y)?,
                cache(LayerCache::Concat {
                    widths,
                    shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
                }),
            ))
        }
    }
}

/// Returns one gradient per forward input (in order) plus parameter gradients.
pub fn backward_layer<T: Scalar>(
    layer: &Layer<'_, T>,
    grad_output: &Tensor<T>,
    cache: &LayerCache<T>,
) -> Result<(Vec<Tensor<T>>, LayerGrads<T>)> {
    let missing = || Error::MissingCache(layer.name.to_string());
    let mut grads = LayerGrads::default();
    match (layer.kind, cache) {
        (
            LayerKind::Convolution {
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            },
            LayerCache::Conv { input },
        ) => {
            let w = need(layer, layer.params.weight, WEIGHT)?;
            let geom = ConvGeom::new(input.shape(), *out_channels, *kernel, *stride, *padding);
            let (dx, dw, db) = conv_backward(&geom, input.data(), w.data(), grad_output.data(), *bias);
            grads.weight = Some(Tensor::from_vec(w.shape().to_vec(), dw)?);
            grads.bias = db.map(|d| Tensor::from_vec(vec![*out_channels], d)).transpose()?;
            Ok((vec![Tensor::from_vec(input.shape().to_vec(), dx)?], grads))
        }
        (LayerKind::FullyConnected { .. } | LayerKind::SoftmaxOutput { .. }, LayerCache::Dense { input }) => {
            let w = need(layer, layer.params.weight, WEIGHT)?;
            let (n, fan_in) = (input.shape()[0], input.shape()[1]);
            let out_units = w.shape()[0];
            let dy = grad_output.data();
            let mut dw = vec![T::zero(); out_units * fan_in];
            T::gemm(out_units, n, fan_in, T::one(), dy, true, input.data(), false, T::zero(), &mut dw);
            let mut dx = vec![T::zero(); n * fan_in];
            T::gemm(n, out_units, fan_in, T::one(), dy, false, w.data(), false, T::zero(), &mut dx);
            grads.weight = Some(Tensor::from_vec(w.shape().to_vec(), dw)?);
            if layer.params.bias.is_some() {
                let mut db = vec![T::zero(); out_units];
                for row in dy.chunks(out_units) {
                    for (a, &b) in db.iter_mut().zip(row) {
                        *a = *a + b;
                    }
                }
                grads.bias = Some(Tensor::from_vec(vec![out_units], db)?);
            }
            // Gradient goes back in the caller's (possibly unflattened) shape.
            Ok((vec![Tensor::from_vec(vec![n, fan_in], dx)?], grads))
        }
        (LayerKind::BatchNorm, LayerCache::BatchNorm(c)) => {
            let gamma = need(layer, layer.params.gamma, GAMMA)?;
            let (dx, dgamma, dbeta) = batchnorm_backward(c, gamma.data(), grad_output);
            grads.gamma = Some(Tensor::from_vec(gamma.shape().to_vec(), dgamma)?);
            grads.beta = Some(Tensor::from_vec(gamma.shape().to_vec(), dbeta)?);
            Ok((vec![Tensor::from_vec(c.xhat.shape().to_vec(), dx)?], grads))
        }
        (LayerKind::Relu, LayerCache::Relu { output }) => {
            let dx: Vec<T> = output
                .data()
                .iter()
                .zip(grad_output.data())
                .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                .collect();
            Ok((vec![Tensor::from_vec(output.shape().to_vec(), dx)?], grads))
        }
        (LayerKind::Dropout { .. }, LayerCache::Dropout { mask }) => {
            let dx: Vec<T> = grad_output.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            Ok((vec![Tensor::from_vec(grad_output.shape().to_vec(), dx)?], grads))
        }
        (LayerKind::MaxPool { .. }, LayerCache::MaxPool { argmax, input_shape }) => {
            let mut dx = vec![T::zero(); input_shape.iter().product()];
            for (&i, &g) in argmax.iter().zip(grad_output.data()) {
                dx[i] = dx[i] + g;
            }
            Ok((vec![Tensor::from_vec(input_shape.clone(), dx)?], grads))
        }
        (LayerKind::AvgPool { size, stride }, LayerCache::AvgPool { input_shape }) => {
            let dx = avgpool_backward(input_shape, grad_output.data(), *size, *stride);
            Ok((vec![Tensor::from_vec(input_shape.clone(), dx)?], grads))
        }
        (LayerKind::Concat { .. }, LayerCache::Concat { widths, shapes }) => {
            let batch = grad_output.batch();
            let inner: usize = grad_output.shape()[2..].iter().product();
            let total: usize = widths.iter().sum();
            let g = grad_output.data();
            let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(batch * c * inner)).collect();
            for n in 0..batch {
                let mut off = n * total * inner;
                for (p, &c) in parts.iter_mut().zip(widths) {
                    p.extend_from_slice(&g[off..off + c * inner]);
                    off += c * inner;
                }
            }
            let out = parts
                .into_iter()
                .zip(shapes)
                .map(|(p, s)| Tensor::from_vec(s.clone(), p))
                .collect::<Result<Vec<_>>>()?;
            Ok((out, grads))
        }
        _ => Err(missing()),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn new(input: &[usize], out_c: usize, kernel: [usize; 2], stride: usize, padding: [usize; 2]) -> Self {
        let (batch, in_c, in_h, in_w) = (input[0], input[1], input[2], input[3]);
        let out_h = (in_h + 2 * padding[0] - kernel[0]) / stride + 1;
        let out_w = (in_w + 2 * padding[1] - kernel[1]) / stride + 1;
        Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kh: kernel[0],
            kw: kernel[1],
            stride,
            ph: padding[0],
            pw: padding[1],
        }
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits (column row, input offset within sample, column position) for
    /// every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for c in 0..self.in_c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + i) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + j) as isize - self.pw as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            f(row, base + ix as usize, oy * self.out_w + ox);
                        }
                    }
                }
            }
        }
    }
}

/// Unrolls every sample into one `[patch, batch * positions]` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let p = g.positions();
    let np = g.batch * p;
    let sample = g.in_c * g.in_h * g.in_w;
    let mut cols = vec![T::zero(); g.patch() * np];
    for n in 0..g.batch {
        let xs = &x[n * sample..(n + 1) * sample];
        g.for_each_tap(|r, xi, pos| cols[r * np + n * p + pos] = xs[xi]);
    }
    cols
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.positions();
    let np = g.batch * p;
    let cols = im2col(g, x);
    let mut out = vec![T::zero(); g.out_c * np];
    T::gemm(g.out_c, g.patch(), np, T::one(), w, false, &cols, false, T::zero(), &mut out);
    // [O, N*P] -> [N, O, P]
    let mut y = vec![T::zero(); g.batch * g.out_c * p];
    for o in 0..g.out_c {
        let b = bias.map(|b| b[o]).unwrap_or_else(T::zero);
        for n in 0..g.batch {
            let src = &out[o * np + n * p..o * np + (n + 1) * p];
            let dst = &mut y[(n * g.out_c + o) * p..(n * g.out_c + o + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

fn conv_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], with_bias: bool) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let p = g.positions();
    let np = g.batch * p;
    // [N, O, P] -> [O, N*P]
    let mut dyt = vec![T::zero(); g.out_c * np];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            dyt[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(&dy[(n * g.out_c + o) * p..(n * g.out_c + o + 1) * p]);
        }
    }
    let db = with_bias.then(|| dyt.chunks(np).map(|r| r.iter().copied().sum()).collect());

    let cols = im2col(g, x);
    let mut dw = vec![T::zero(); g.out_c * g.patch()];
    T::gemm(g.out_c, np, g.patch(), T::one(), &dyt, false, &cols, true, T::zero(), &mut dw);

    let mut dcols = cols;
    T::gemm(g.patch(), g.out_c, np, T::one(), w, true, &dyt, false, T::zero(), &mut dcols);
    let sample = g.in_c * g.in_h * g.in_w;
    let mut dx = vec![T::zero(); g.batch * sample];
    for n in 0..g.batch {
        let dxs = &mut dx[n * sample..(n + 1) * sample];
        g.for_each_tap(|r, xi, pos| dxs[xi] = dxs[xi] + dcols[r * np + n * p + pos]);
    }
    (dx, dw, db)
}

/// Channel layout helper: (channels, inner elements per channel per sample).
fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    (batch, channels, inner)
}

fn batchnorm_forward<T: Scalar>(layer: &Layer<'_, T>, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BnCache<T>)> {
    let (batch, channels, inner) = bn_layout(x.shape());
    let gamma = need(layer, layer.params.gamma, GAMMA)?.data();
    let beta = need(layer, layer.params.beta, BETA)?.data();
    if gamma.len() != channels {
        return Err(shape_err(layer.name, format!("{} channels", gamma.len()), x.shape()));
    }
    let count = batch * inner;
    let eps = T::lit(BN_EPS);
    let xd = x.data();
    let (mean, var, batch_stats) = if train {
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        let m = T::from_usize(count).unwrap();
        for c in 0..channels {
            let mut s = T::zero();
            for n in 0..batch {
                let off = (n * channels + c) * inner;
                s = s + xd[off..off + inner].iter().copied().sum::<T>();
            }
            mean[c] = s / m;
            let mut v = T::zero();
            for n in 0..batch {
                let off = (n * channels + c) * inner;
                v = v + xd[off..off + inner].iter().map(|&a| (a - mean[c]) * (a - mean[c])).sum::<T>();
            }
            var[c] = v / m;
        }
        (mean.clone(), var.clone(), Some((mean, var)))
    } else {
        let rm = need(layer, layer.params.running_mean, RUNNING_MEAN)?.data().to_vec();
        let rv = need(layer, layer.params.running_var, RUNNING_VAR)?.data().to_vec();
        (rm, rv, None)
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * inner;
            for k in off..off + inner {
                let h = (xd[k] - mean[c]) * inv_std[c];
                xhat[k] = h;
                y[k] = gamma[c] * h + beta[c];
            }
        }
    }
    let cache = BnCache {
        xhat: Tensor::from_vec(x.shape().to_vec(), xhat)?,
        inv_std,
        batch_stats,
        count,
    };
    Ok((Tensor::from_vec(x.shape().to_vec(), y)?, cache))
}

fn batchnorm_backward<T: Scalar>(c: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, channels, inner) = bn_layout(dy.shape());
    let dyd = dy.data();
    let xh = c.xhat.data();
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for n in 0..batch {
        for ch in 0..channels {
            let off = (n * channels + ch) * inner;
            for k in off..off + inner {
                dgamma[ch] = dgamma[ch] + dyd[k] * xh[k];
                dbeta[ch] = dbeta[ch] + dyd[k];
            }
        }
    }
    let mut dx = vec![T::zero(); dyd.len()];
    let m = T::from_usize(c.count).unwrap();
    for n in 0..batch {
        for ch in 0..channels {
            let off = (n * channels + ch) * inner;
            let scale = gamma[ch] * c.inv_std[ch];
            for k in off..off + inner {
                dx[k] = if c.batch_stats.is_some() {
                    scale * (dyd[k] - dbeta[ch] / m - xh[k] * dgamma[ch] / m)
                } else {
                    scale * dyd[k]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Running-statistic update from a training-mode BatchNorm cache: unbiased
/// batch variance, exponential moving average with [`BN_MOMENTUM`].
pub fn update_running_stats<T: Scalar>(cache: &BnCache<T>, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>) {
    let Some((mean, var)) = &cache.batch_stats else {
        return;
    };
    let mom = T::lit(BN_MOMENTUM);
    let unbias = if cache.count > 1 {
        T::from_usize(cache.count).unwrap() / T::from_usize(cache.count - 1).unwrap()
    } else {
        T::one()
    };
    for (r, &m) in running_mean.data_mut().iter_mut().zip(mean) {
        *r = (T::one() - mom) * *r + mom * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(var) {
        *r = (T::one() - mom) * *r + mom * v * unbias;
    }
}

fn maxpool_forward<T: Scalar>(shape: &[usize], x: &[T], size: [usize; 2], stride: usize) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h - size[0]) / stride + 1;
    let wo = (w - size[1]) / stride + 1;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..size[0] {
                    for j in 0..size[1] {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

fn avgpool_forward<T: Scalar>(shape: &[usize], x: &[T], size: [usize; 2], stride: usize) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h - size[0]) / stride + 1;
    let wo = (w - size[1]) / stride + 1;
    let norm = T::one() / T::from_usize(size[0] * size[1]).unwrap();
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for i in 0..size[0] {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    s = s + x[row..row + size[1]].iter().copied().sum::<T>();
                }
                y.push(s * norm);
            }
        }
    }
    y
}

fn avgpool_backward<T: Scalar>(shape: &[usize], dy: &[T], size: [usize; 2], stride: usize) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h - size[0]) / stride + 1;
    let wo = (w - size[1]) / stride + 1;
    let norm = T::one() / T::from_usize(size[0] * size[1]).unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(plane * ho + oy) * wo + ox] * norm;
                for i in 0..size[0] {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for v in &mut dx[row..row + size[1]] {
                        *v = *v + g;
                    }
                }
            }
        }
    }
    dx
}
