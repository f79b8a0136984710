use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, NamedTensors};
use crate::surgery::FreezePlan;
use crate::tensor::{Scalar, Tensor};

/// Step multipliers: `(epoch, factor)` applies `factor * learning_rate` from
/// `epoch` onward until the next entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Vec::new(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let factor = self
            .schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map(|(_, f)| *f)
            .unwrap_or(1.0);
        self.learning_rate * factor
    }
}

/// Momentum buffers, keyed like the parameters they belong to.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T: Scalar = f32> {
    pub velocity: NamedTensors<T>,
}

/// One SGD step with momentum and L2 weight decay:
/// `v = momentum * v + grad + decay * w; w -= lr * v`.
///
/// Parameters, momentum buffers and running statistics of layers in `freeze`
/// are left untouched.
pub fn sgd_update<T: Scalar>(
    model: &mut Model<T>,
    grads: &NamedTensors<T>,
    config: &SgdConfig,
    lr: f64,
    freeze: &FreezePlan,
    state: &mut SgdState<T>,
) -> Result<()> {
    let lr = T::lit(lr);
    let mom = T::lit(config.momentum);
    let decay = T::lit(config.weight_decay);
    for (key, g) in grads {
        let layer = model.layer_of_key(key).ok_or_else(|| Error::UnknownParameter(key.clone()))?;
        let param = model.params.get_mut(key).ok_or_else(|| Error::UnknownParameter(key.clone()))?;
        if freeze.contains(layer) {
            continue;
        }
        if param.shape() != g.shape() {
            return Err(Error::Shape {
                layer: key.clone(),
                expected: format!("gradient {:?}", param.shape()),
                actual: g.shape().to_vec(),
            });
        }
        if config.momentum == 0.0 {
            for (w, &d) in param.data_mut().iter_mut().zip(g.data()) {
                *w = *w - lr * (d + decay * *w);
            }
            continue;
        }
        let v = state
            .velocity
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((w, vel), &d) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mom * *vel + d + decay * *w;
            *w = *w - lr * *vel;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::surgery::{freeze_prefix, FreezeSelector};
    use crate::zoo::{convnet_a_spec_with, SpeechWidths};

    fn tiny() -> Model {
        let spec = convnet_a_spec_with(
            3,
            vec![1, 8, 8],
            &SpeechWidths {
                conv: vec![2, 2],
                fc: 4,
            },
        );
        build_model(&spec, 3).unwrap()
    }

    fn unit_grads(model: &Model) -> NamedTensors {
        model
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::full(t.shape(), 1.0)))
            .collect()
    }

    #[test]
    fn scalar_sgd_step() {
        let mut model = tiny();
        let key = model.params.keys().next().unwrap().clone();
        let shape = model.params[&key].shape().to_vec();
        model.params.insert(key.clone(), Tensor::full(&shape, 1.0));
        let grads: NamedTensors = [(key.clone(), Tensor::full(&shape, 2.0))].into();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: vec![],
        };
        sgd_update(&mut model, &grads, &cfg, cfg.lr_at(0), &FreezePlan::none(), &mut SgdState::default()).unwrap();
        assert!(model.params[&key].data().iter().all(|&w| (w - 0.8).abs() < 1e-7));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut model = tiny();
        let before = model.clone();
        let grads = unit_grads(&model);
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        sgd_update(&mut model, &grads, &cfg, 0.0, &FreezePlan::none(), &mut SgdState::default()).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn feature_extractor_plan_only_moves_output() {
        let mut model = tiny();
        let before = model.clone();
        let plan = freeze_prefix(&model.spec, &FreezeSelector::Stages(model.spec.hidden_stages())).unwrap();
        let grads = unit_grads(&model);
        let mut state = SgdState::default();
        sgd_update(&mut model, &grads, &SgdConfig::default(), 0.1, &plan, &mut state).unwrap();
        let out = model.spec.output_index();
        for (k, t) in &model.params {
            let moved = !t.bit_eq(&before.params[k]);
            assert_eq!(moved, model.layer_of_key(k) == Some(out), "{k}");
        }
        assert!(state.velocity.keys().all(|k| model.layer_of_key(k) == Some(out)));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut model = tiny();
        let grads: NamedTensors = [("999.fc.weight".to_string(), Tensor::zeros(&[1]))].into();
        let err = sgd_update(&mut model, &grads, &SgdConfig::default(), 0.1, &FreezePlan::none(), &mut SgdState::default())
            .unwrap_err();
        assert!(matches!(err, Error::UnknownParameter(_)));
    }

    #[test]
    fn schedule_multipliers() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            schedule: vec![(5, 0.1), (10, 0.01)],
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(5) - 0.01).abs() < 1e-12);
        assert!((cfg.lr_at(12) - 0.001).abs() < 1e-12);
        assert!(SgdConfig { learning_rate: 0.0, ..cfg }.validate().is_err());
    }
}
