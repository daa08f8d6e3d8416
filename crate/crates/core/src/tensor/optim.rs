use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: OptimizerState::new(),
        }
    }

    /// Applies one update to every trainable parameter and zeroes its grad.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if params
            .iter()
            .any(|p| p.tensor.requires_grad() && p.tensor.grad().is_none())
        {
            let id = params
                .iter()
                .find(|p| p.tensor.requires_grad() && p.tensor.grad().is_none())
                .map(|p| p.id.clone())
                .unwrap_or_default();
            return Err(Error::contract(format!("parameter {id} has no gradient")));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in params.iter_mut() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let n = p.tensor.numel();
            let (m, v) = self
                .state
                .moments
                .entry(p.id.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::dim(format!("moment buffer shape for {}", p.id)));
            }
            let g = p.tensor.grad().unwrap().to_vec();
            let data = p.tensor.data_mut();
            for k in 0..n {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] -= lr * mh / (vh.sqrt() + eps);
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn quad_grad(ps: &mut ParamSet) {
        let mut tape = Tape::new();
        let x = tape.param(ps, "x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward_into(loss, ps).unwrap();
    }

    #[test]
    fn one_step_descends() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        quad_grad(&mut ps);
        opt.step(&mut ps, 0.1).unwrap();
        let x = ps.tensor("x").unwrap().data()[0];
        assert!(x < 1.0 && x > 0.0);
        assert_eq!(ps.tensor("x").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![0.7, -0.3])).unwrap();
        ps.zero_grad();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut ps, 0.1).unwrap();
        assert_eq!(ps.tensor("x").unwrap().data(), &[0.7, -0.3]);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut ps, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn converges_on_two_dim_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        for step in 0..200 {
            quad_grad(&mut ps);
            // step-decayed rate so Adam's unit-scale steps shrink to zero
            let lr = 0.1 * (1.0 - step as f64 / 200.0);
            opt.step(&mut ps, lr).unwrap();
        }
        for x in ps.tensor("x").unwrap().data() {
            assert!(x.abs() < 1e-3, "{x}");
        }
        assert_eq!(opt.state.step_count(), 200);
    }
}
