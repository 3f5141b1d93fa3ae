use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::models::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// `k · d_model^e · min(n^-0.5, n · warmup_n^-1.5)`.
///
/// `exponent = -0.5` is the usual transformer schedule; `+0.5` makes the
/// rate grow with model width instead.
pub fn warmup_lr(n: u64, k: f64, d_model: usize, warmup_n: u64, exponent: f64) -> Result<f64, TrainError> {
    if n == 0 {
        return Err(TrainError::Config("warmup step counter starts at 1".into()));
    }
    if warmup_n == 0 || d_model == 0 {
        return Err(TrainError::Config("warmup_n and d_model must be positive".into()));
    }
    let n = n as f64;
    let arm_decay = n.powf(-0.5);
    let arm_warm = n * (warmup_n as f64).powf(-1.5);
    Ok(k * (d_model as f64).powf(exponent) * arm_decay.min(arm_warm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    AdamFixed {
        lr: f64,
    },
    AdamWarmup {
        k: f64,
        warmup_n: u64,
        /// Width used in the schedule; the model's own width when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d_model: Option<usize>,
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
}

fn default_exponent() -> f64 {
    -0.5
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::AdamFixed { lr: 0.001 }
    }
}

impl OptimizerConfig {
    pub fn warmup() -> Self {
        Self::AdamWarmup {
            k: 0.5,
            warmup_n: 8000,
            d_model: None,
            exponent: default_exponent(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        match *self {
            Self::AdamFixed { lr } if !(lr.is_finite() && lr >= 0.0) => {
                Err(TrainError::Config(format!("learning rate {lr} must be finite and >= 0")))
            }
            Self::AdamWarmup { k, warmup_n, d_model, exponent } => {
                if !(k.is_finite() && k >= 0.0) || warmup_n == 0 || d_model == Some(0) || !exponent.is_finite() {
                    return Err(TrainError::Config(
                        "warmup needs k >= 0, warmup_n >= 1, d_model >= 1".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Rate for optimiser step `step` (1-based).
    pub fn lr_at(&self, step: u64, model_d: usize) -> Result<f64, TrainError> {
        match *self {
            Self::AdamFixed { lr } => Ok(lr),
            Self::AdamWarmup { k, warmup_n, d_model, exponent } => {
                warmup_lr(step, k, d_model.unwrap_or(model_d), warmup_n, exponent)
            }
        }
    }
}

/// Bias-corrected Adam moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for AdamState<F> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every parameter named in `grads`.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::Shape(format!("no parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::Shape(format!(
                "`{name}`: gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let c1 = F::lit(1.0 - state.beta1.powi(t));
    let c2 = F::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (F::lit(lr), F::lit(state.eps));
    let one = F::one();
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((w, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_meet_at_warmup_n() {
        let at = warmup_lr(8000, 0.5, 2048, 8000, -0.5).unwrap();
        let direct = 0.5 / 2048f64.sqrt() / 8000f64.sqrt();
        assert!((at - direct).abs() / direct < 1e-14);
        assert!(warmup_lr(0, 0.5, 2048, 8000, -0.5).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(&[2], vec![1.0f64, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[2], vec![3.0, -0.2]).unwrap());
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-8);
        assert!((w[1] + 0.99).abs() < 1e-8);
        assert_eq!(state.step, 1);
    }
}
