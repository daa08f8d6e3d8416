//! Fusion of cached LM states with structural representations, the residual
//! probability rule over the frozen head, and the task head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, matmul_into, ParamSet, Tape, Tensor, Var, CE_FLOOR};
use crate::util::rng;

/// Two-layer MLP `(d_model + hidden_dim) -> d_model -> d_model` with SiLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fusion {
    pub d_model: usize,
    pub hidden_dim: usize,
}

pub const FUSION_IDS: [&str; 4] = ["fuse.w1", "fuse.b1", "fuse.w2", "fuse.b2"];
pub const TASK_IDS: [&str; 2] = ["task.w", "task.b"];

impl Fusion {
    pub fn new(d_model: usize, hidden_dim: usize) -> Self {
        Fusion { d_model, hidden_dim }
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        let (d, h) = (self.d_model, self.hidden_dim);
        params.insert("fuse.w1", Tensor::init_weight(&[d + h, d], &mut rng(seed, "fuse.w1")))?;
        params.insert("fuse.b1", Tensor::zeros(&[d]))?;
        params.insert("fuse.w2", Tensor::init_weight(&[d, d], &mut rng(seed, "fuse.w2")))?;
        params.insert("fuse.b2", Tensor::zeros(&[d]))?;
        Ok(())
    }

    /// `h` is `m x d_model`, `z` is `m x hidden_dim`; returns `m x d_model`.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamSet, h: Var, z: Var) -> Result<Var> {
        let (hs, zs) = (tape.value(h).shape().to_vec(), tape.value(z).shape().to_vec());
        if hs.len() != 2 || zs.len() != 2 || hs[1] != self.d_model || zs[1] != self.hidden_dim || hs[0] != zs[0] {
            return Err(Error::Dimension(format!(
                "fusion expects [m, {}] and [m, {}], got {hs:?} and {zs:?}",
                self.d_model, self.hidden_dim
            )));
        }
        let cat = tape.concat(&[h, z], 1)?;
        let w1 = tape.param(params, "fuse.w1")?;
        let b1 = tape.param(params, "fuse.b1")?;
        let w2 = tape.param(params, "fuse.w2")?;
        let b2 = tape.param(params, "fuse.b2")?;
        let a = tape.matmul(cat, w1)?;
        let a = tape.add(a, b1)?;
        let a = tape.silu(a);
        let r = tape.matmul(a, w2)?;
        tape.add(r, b2)
    }

    /// Single-vector convenience around [`Fusion::forward_on`].
    pub fn fuse(&self, params: &ParamSet, h: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::new(vec![1, h.len()], h.to_vec())?);
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let r = self.forward_on(&mut tape, params, hv, zv)?;
        Ok(tape.value(r).data().to_vec())
    }
}

/// Linear map `d_model -> n_classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHead {
    pub d_model: usize,
    pub n_classes: usize,
}

impl TaskHead {
    pub fn new(d_model: usize, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("a task head needs at least two classes"));
        }
        Ok(TaskHead { d_model, n_classes })
    }

    pub fn init_params(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        params.insert(
            "task.w",
            Tensor::init_weight(&[self.d_model, self.n_classes], &mut rng(seed, "task.w")),
        )?;
        params.insert("task.b", Tensor::zeros(&[self.n_classes]))
    }

    pub fn forward_on(&self, tape: &mut Tape, params: &ParamSet, r: Var) -> Result<Var> {
        let w = tape.param(params, "task.w")?;
        let b = tape.param(params, "task.b")?;
        let y = tape.matmul(r, w)?;
        tape.add(y, b)
    }
}

/// `task_head(fuse(h_prompt, z))` on the tape.
pub fn downstream_logits_on(
    tape: &mut Tape,
    params: &ParamSet,
    fusion: &Fusion,
    head: &TaskHead,
    h_prompt: Var,
    z: Var,
) -> Result<Var> {
    let r = fusion.forward_on(tape, params, h_prompt, z)?;
    head.forward_on(tape, params, r)
}

/// Class logits for a single node.
pub fn downstream_logits(
    params: &ParamSet,
    fusion: &Fusion,
    head: &TaskHead,
    h_prompt: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::new(vec![1, h_prompt.len()], h_prompt.to_vec())?);
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let y = downstream_logits_on(&mut tape, params, fusion, head, hv, zv)?;
    Ok(tape.value(y).data().to_vec())
}

/// Distributions of the LM branch, the adapter branch, and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualProbs {
    pub p_lm: Vec<f64>,
    pub p_gnn: Vec<f64>,
    pub p_all: Vec<f64>,
}

fn head_probs(x: &[f64], head: &Tensor) -> Result<Vec<f64>> {
    let (d, v) = (head.rows(), head.cols());
    if x.len() != d {
        return Err(Error::dim(format!("head expects width {d}, got {}", x.len())));
    }
    let mut p = vec![0.0; v];
    matmul_into(x, head.data(), &mut p, 1, d, v, false, false, 0.0);
    softmax_in_place(&mut p);
    Ok(p)
}

/// Averages two distributions elementwise.
pub fn average_probs(p_lm: &[f64], p_gnn: &[f64]) -> Vec<f64> {
    p_lm.iter().zip(p_gnn).map(|(a, b)| (a + b) / 2.0).collect()
}

/// `softmax(Head(h))`, `softmax(Head(r))` and their mean.
pub fn residual_probs(h: &[f64], r: &[f64], head: &Tensor) -> Result<ResidualProbs> {
    let p_lm = head_probs(h, head)?;
    let p_gnn = head_probs(r, head)?;
    let p_all = average_probs(&p_lm, &p_gnn);
    Ok(ResidualProbs { p_lm, p_gnn, p_all })
}

/// `-ln(max(p[target], 1e-12))`.
pub fn pretrain_token_loss(p_all: &[f64], target: usize) -> Result<f64> {
    let p = p_all.get(target).ok_or(Error::Index {
        index: target,
        len: p_all.len(),
    })?;
    Ok(-p.max(CE_FLOOR).ln())
}

/// Summed token loss on the tape. `p_lm` rows are constants (the frozen
/// branch); `r` rows go through the frozen `head` constant. With
/// `residual = false` only the adapter branch is scored.
pub fn residual_loss_on(
    tape: &mut Tape,
    p_lm: Option<Var>,
    r: Var,
    head: Var,
    targets: &[usize],
) -> Result<Var> {
    let logits = tape.matmul(r, head)?;
    let p_gnn = tape.softmax(logits, 1)?;
    let p = match p_lm {
        Some(p_lm) => {
            let s = tape.add(p_lm, p_gnn)?;
            tape.scale(s, 0.5)
        }
        None => p_gnn,
    };
    tape.cross_entropy_from_probs(p, targets)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    fn setup(d: usize, h: usize) -> (Fusion, ParamSet) {
        let f = Fusion::new(d, h);
        let mut p = ParamSet::new();
        f.init_params(&mut p, 4).unwrap();
        (f, p)
    }

    #[test]
    fn zero_weights_give_zero() {
        let (f, mut p) = setup(4, 3);
        for id in FUSION_IDS {
            p.get_mut(id).unwrap().tensor.data_mut().fill(0.0);
        }
        assert_eq!(f.fuse(&p, &[1.0; 4], &[2.0; 3]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn z_changes_r() {
        let (f, p) = setup(4, 3);
        let mut r = rng(1, "z");
        for _ in 0..50 {
            let h = Tensor::randn(&[4], 1.0, &mut r);
            let z1 = Tensor::randn(&[3], 1.0, &mut r);
            let z2 = Tensor::randn(&[3], 1.0, &mut r);
            assert_ne!(
                f.fuse(&p, h.data(), z1.data()).unwrap(),
                f.fuse(&p, h.data(), z2.data()).unwrap()
            );
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (f, p) = setup(4, 3);
        assert!(matches!(f.fuse(&p, &[1.0; 3], &[1.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn opposing_certainties_average() {
        assert_eq!(average_probs(&[1.0, 0.0], &[0.0, 1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn token_loss_examples() {
        assert!((pretrain_token_loss(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = average_probs(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]);
        let l = pretrain_token_loss(&p, 0).unwrap();
        assert!((l - (-(0.625f64).ln())).abs() < 1e-15);
        assert!((l - 0.470).abs() < 1e-3);
        assert!(pretrain_token_loss(&p, 4).is_err());
    }

    #[test]
    fn uniform_adapter_branch_keeps_lm_argmax() {
        let mut head = Tensor::zeros(&[3, 5]);
        let mut r = rng(2, "head");
        head.data_mut().copy_from_slice(Tensor::randn(&[15], 1.0, &mut r).data());
        let h = [0.3, -1.0, 2.0];
        let rp = residual_probs(&h, &[0.0; 3], &head).unwrap();
        assert!(rp.p_gnn.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(argmax(&rp.p_all), argmax(&rp.p_lm));
        assert!((rp.p_all.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_task_head_is_uniform() {
        let (f, mut p) = setup(4, 3);
        let t = TaskHead::new(4, 3).unwrap();
        t.init_params(&mut p, 0).unwrap();
        p.get_mut("task.w").unwrap().tensor.data_mut().fill(0.0);
        let y = downstream_logits(&p, &f, &t, &[1.0; 4], &[0.5; 3]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
        let a = downstream_logits(&p, &f, &t, &[1.0, 2.0, 3.0, 4.0], &[0.5; 3]).unwrap();
        let b = downstream_logits(&p, &f, &t, &[1.0, 2.0, 3.0, 4.0], &[0.5; 3]).unwrap();
        assert_eq!(a, b);
        assert!(TaskHead::new(4, 1).is_err());
    }

    #[test]
    fn head_gradient_is_exactly_zero() {
        let (f, mut p) = setup(4, 3);
        let mut head = Tensor::randn(&[4, 6], 1.0, &mut rng(0, "h"));
        head.set_requires_grad(false);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng(1, "h")));
        let z = tape.constant(Tensor::randn(&[2, 3], 1.0, &mut rng(2, "z")));
        let hv = tape.constant(head);
        let r = f.forward_on(&mut tape, &p, h, z).unwrap();
        let l = residual_loss_on(&mut tape, None, r, hv, &[1, 4]).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(hv).is_none());
        tape.backward_into(l, &mut p).unwrap();
        assert!(p.tensor("fuse.w1").unwrap().grad().unwrap().iter().any(|&x| x != 0.0));
    }
}
