use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    backward_layer, forward_layer, update_running_stats, Layer, LayerCache, LayerKind, LayerParams, TrainMode, BETA,
    BIAS, GAMMA, RUNNING_MEAN, RUNNING_VAR, WEIGHT,
};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::ModelSpec;

/// Named tensors, keyed `"<layer id>.<param>"`.
pub type NamedTensors<T = f32> = BTreeMap<String, Tensor<T>>;

pub fn param_key(layer_id: &str, param: &str) -> String {
    format!("{layer_id}.{param}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub params: NamedTensors<T>,
    pub bn_running_stats: NamedTensors<T>,
}

/// Activations and caches from one forward pass.
pub struct ForwardPass<T: Scalar> {
    pub outputs: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
    first_trainable: usize,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("non-empty model")
    }

    /// Hash of the piecewise-linear branch taken: which ReLU outputs are
    /// positive and which max-pool inputs won. Passes with equal patterns lie
    /// on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        for cache in &self.caches {
            match cache {
                LayerCache::Relu { output } => output.data().iter().for_each(|&v| eat((v > T::zero()) as u64)),
                LayerCache::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| eat(i as u64)),
                _ => {}
            }
        }
        h
    }
}

/// He-uniform weights, zero biases, unit BatchNorm scale, zero shift.
fn init_layer<T: Scalar>(
    spec: &ModelSpec,
    index: usize,
    trace: &[Vec<usize>],
    rng: &mut impl Rng,
    params: &mut NamedTensors<T>,
    buffers: &mut NamedTensors<T>,
) {
    let layer = &spec.layers[index];
    let input = spec.input_shape_of(index, trace);
    for (name, shape) in layer.kind.param_shapes(&input) {
        let t = match name {
            WEIGHT => {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| T::lit(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(shape, data).expect("shape product")
            }
            GAMMA => Tensor::full(&shape, T::one()),
            _ => Tensor::zeros(&shape),
        };
        params.insert(param_key(&layer.id, name), t);
    }
    for (name, shape) in layer.kind.buffer_shapes(&input) {
        let t = if name == RUNNING_VAR {
            Tensor::full(&shape, T::one())
        } else {
            Tensor::zeros(&shape)
        };
        buffers.insert(param_key(&layer.id, name), t);
    }
}

/// Builds a freshly initialized model. Each layer draws from its own stream
/// derived from `seed` and the layer id.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let trace = spec.shape_trace()?;
    let mut params = NamedTensors::new();
    let mut buffers = NamedTensors::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &layer.id));
        init_layer(spec, i, &trace, &mut rng, &mut params, &mut buffers);
    }
    Ok(Model {
        spec: spec.clone(),
        params,
        bn_running_stats: buffers,
    })
}

impl<T: Scalar> Model<T> {
    /// Re-initializes the output layer from `seed`.
    pub fn reinit_output(&mut self, seed: u64) -> Result<()> {
        let trace = self.spec.shape_trace()?;
        let idx = self.spec.output_index();
        let id = self.spec.layers[idx].id.clone();
        self.params.retain(|k, _| !k.starts_with(&format!("{id}.")));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_layer(&self.spec, idx, &trace, &mut rng, &mut self.params, &mut self.bn_running_stats);
        Ok(())
    }

    pub fn layer(&self, i: usize) -> Layer<'_, T> {
        let spec = &self.spec.layers[i];
        let get = |p: &str| self.params.get(&param_key(&spec.id, p));
        let buf = |p: &str| self.bn_running_stats.get(&param_key(&spec.id, p));
        Layer {
            name: &spec.id,
            kind: &spec.kind,
            params: LayerParams {
                weight: get(WEIGHT),
                bias: get(BIAS),
                gamma: get(GAMMA),
                beta: get(BETA),
                running_mean: buf(RUNNING_MEAN),
                running_var: buf(RUNNING_VAR),
            },
        }
    }

    /// Layer index owning a parameter or buffer key.
    pub fn layer_of_key(&self, key: &str) -> Option<usize> {
        let (id, _) = key.rsplit_once('.')?;
        self.spec.layers.iter().position(|l| l.id == id)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Runs the network on a `[batch, ..input_shape]` tensor.
    ///
    /// Layers before `first_trainable` form the frozen prefix: in training
    /// mode their BatchNorms normalize with running statistics and keep no
    /// cache, while their Dropout layers stay active.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: TrainMode,
        first_trainable: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass<T>> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape {
                layer: "input".into(),
                expected: format!("[N, {:?}]", self.spec.input_shape),
                actual: x.shape().to_vec(),
            });
        }
        let n = self.spec.layers.len();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for i in 0..n {
            let layer = self.layer(i);
            let frozen = i < first_trainable;
            let layer_mode = match (mode, frozen, layer.kind) {
                (TrainMode::Training, true, LayerKind::Dropout { .. }) => TrainMode::Training,
                (TrainMode::Training, true, _) => TrainMode::Inference,
                (m, _, _) => m,
            };
            let sources = self.spec.sources(i);
            let inputs: Vec<&Tensor<T>> = sources
                .iter()
                .map(|s| match s {
                    Some(j) => &outputs[*j],
                    None => x,
                })
                .collect();
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let (out, cache) = forward_layer(&layer, &inputs, layer_mode, r)?;
            outputs.push(out);
            caches.push(if frozen { LayerCache::None } else { cache });
        }
        Ok(ForwardPass {
            outputs,
            caches,
            first_trainable: first_trainable.min(n),
        })
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = self.forward(x, TrainMode::Inference, 0, None)?;
        Ok(pass.outputs.pop().unwrap())
    }

    /// Inference-mode activations feeding the output layer.
    pub fn penultimate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut pass = self.forward(x, TrainMode::Inference, 0, None)?;
        pass.outputs.pop();
        Ok(pass.outputs.pop().unwrap())
    }

    /// Parameter gradients of every trainable layer given `d loss / d logits`.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: Tensor<T>) -> Result<NamedTensors<T>> {
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(grad_logits);
        let mut out = NamedTensors::new();
        for i in (pass.first_trainable..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let layer = self.layer(i);
            let (dins, dparams) = backward_layer(&layer, &g, &pass.caches[i])?;
            for (name, t) in dparams.into_named() {
                out.insert(param_key(layer.name, name), t);
            }
            for (src, d) in self.spec.sources(i).into_iter().zip(dins) {
                let Some(s) = src else { continue };
                if s < pass.first_trainable {
                    continue;
                }
                let d = d.reshape(pass.outputs[s].shape().to_vec())?;
                match &mut grads[s] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(out)
    }

    /// Folds training-mode batch statistics into the running statistics of
    /// every BatchNorm at or after the pass's first trainable layer.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) {
        for (i, cache) in pass.caches.iter().enumerate().skip(pass.first_trainable) {
            let LayerCache::BatchNorm(c) = cache else { continue };
            let id = &self.spec.layers[i].id;
            let mk = param_key(id, RUNNING_MEAN);
            let vk = param_key(id, RUNNING_VAR);
            let (Some(mut m), Some(mut v)) = (self.bn_running_stats.remove(&mk), self.bn_running_stats.remove(&vk)) else {
                continue;
            };
            update_running_stats(c, &mut m, &mut v);
            self.bn_running_stats.insert(mk, m);
            self.bn_running_stats.insert(vk, v);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            bn_running_stats: self.bn_running_stats.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl Model<f32> {
    /// Hash of every parameter and buffer not owned by `skip_layer`, used to
    /// assert that a training phase left them untouched.
    pub fn checksum_excluding(&self, skip_layer: Option<usize>) -> u64 {
        let skip = skip_layer.map(|i| format!("{}.", self.spec.layers[i].id));
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, t) in self.params.iter().chain(&self.bn_running_stats) {
            if skip.as_ref().is_some_and(|s| k.starts_with(s.as_str())) {
                continue;
            }
            eat(k.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
