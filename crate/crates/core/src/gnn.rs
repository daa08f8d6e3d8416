//! Message-passing adapter over cached sentence representations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LN_EPS;
use crate::tensor::{Csr, ParamSet, Tape, Tensor, Var};
use crate::util::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Sage,
    GatStar,
    MlpControl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    Full,
    SelfLoopsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub kind: LayerKind,
    pub structure_mode: StructureMode,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            n_layers: 2,
            hidden_dim: 32,
            kind: LayerKind::Sage,
            structure_mode: StructureMode::Full,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::config("gnn n_layers and hidden_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Every node adjacent to itself exactly once; other edges unchanged.
pub fn add_self_loops(adj: &Csr) -> Csr {
    let lists: Vec<Vec<usize>> = (0..adj.n_nodes())
        .map(|i| {
            let mut l: Vec<usize> = adj.neighbors(i).iter().copied().filter(|&j| j != i).collect();
            l.push(i);
            l.sort_unstable();
            l
        })
        .collect();
    Csr::from_lists(&lists)
}

/// Graph with only self-loops.
pub fn self_loops_only(n: usize) -> Csr {
    Csr::from_lists(&(0..n).map(|i| vec![i]).collect::<Vec<_>>())
}

/// Adjacency the configured layers operate on.
pub fn prepare_adjacency(graph_adj: &Csr, config: &GnnConfig) -> Arc<Csr> {
    let base = match config.structure_mode {
        StructureMode::Full => graph_adj.clone(),
        StructureMode::SelfLoopsOnly => self_loops_only(graph_adj.n_nodes()),
    };
    Arc::new(match config.kind {
        LayerKind::GatStar => add_self_loops(&base),
        _ => base,
    })
}

/// Tape handles for one layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w1: Var,
    pub w2: Var,
    /// Layernorm gain and bias; `None` gives the bare linear combine.
    pub norm: Option<(Var, Var)>,
    pub activate: bool,
    /// Query and key projections for attention layers.
    pub attn: Option<(Var, Var)>,
}

fn combine(tape: &mut Tape, pooled: Var, x: Var, w: &LayerVars) -> Result<Var> {
    let cat = tape.concat(&[pooled, x], 1)?;
    let mut out = tape.matmul(cat, w.w2)?;
    if let Some((g, b)) = w.norm {
        out = tape.layernorm(out, g, b, LN_EPS)?;
    }
    if w.activate {
        out = tape.silu(out);
    }
    Ok(out)
}

/// Mean of transformed neighbor features combined with the node's own feature.
pub fn sage_layer(tape: &mut Tape, x: Var, adj: &Arc<Csr>, w: &LayerVars) -> Result<Var> {
    let msg = tape.matmul(x, w.w1)?;
    let pooled = tape.segment_mean(msg, adj, true)?;
    combine(tape, pooled, x, w)
}

/// Scaled dot-product attention over each node's segment of `adj` (which
/// should already contain self-loops), followed by the sage combine.
pub fn gat_star_layer(tape: &mut Tape, x: Var, adj: &Arc<Csr>, w: &LayerVars) -> Result<Var> {
    let (wq, wk) = w
        .attn
        .ok_or_else(|| Error::contract("attention layer needs query and key weights"))?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let d = tape.value(q).cols();
    let s = tape.edge_dot(q, k, adj)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let alpha = tape.segment_softmax(s, adj)?;
    let msg = tape.matmul(x, w.w1)?;
    let pooled = tape.segment_weighted_sum(alpha, msg, adj)?;
    combine(tape, pooled, x, w)
}

/// Builds and owns adapter parameter ids under the `gnn.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnAdapter {
    pub config: GnnConfig,
    pub d_in: usize,
    /// Widths of the control MLP's layers (last equals `hidden_dim`).
    pub mlp_widths: Vec<usize>,
}

fn pid(l: usize, s: &str) -> String {
    format!("gnn.l{l}.{s}")
}

/// Parameter count of a sage stack.
pub fn sage_param_count(d_in: usize, hidden: usize, n_layers: usize) -> usize {
    (0..n_layers)
        .map(|l| {
            let di = if l == 0 { d_in } else { hidden };
            di * hidden + (hidden + di) * hidden + 2 * hidden
        })
        .sum()
}

/// Parameter count of a control MLP with the given layer widths.
pub fn mlp_param_count(d_in: usize, widths: &[usize]) -> usize {
    let mut di = d_in;
    let mut total = 0;
    for &w in widths {
        total += di * w + 2 * w;
        di = w;
    }
    total
}

/// Hidden width whose control MLP is closest to the sage budget.
pub fn matched_mlp_widths(d_in: usize, hidden: usize, n_layers: usize) -> Result<Vec<usize>> {
    let target = sage_param_count(d_in, hidden, n_layers) as f64;
    let widths_for = |w: usize| {
        let mut v = vec![w; n_layers - 1];
        v.push(hidden);
        v
    };
    if n_layers == 1 {
        let v = vec![hidden];
        return check_budget(d_in, &v, target).map(|_| v);
    }
    let best = (1..=(target as usize).max(1))
        .take_while(|&w| (mlp_param_count(d_in, &widths_for(w)) as f64) < 2.0 * target)
        .min_by(|&a, &b| {
            let da = (mlp_param_count(d_in, &widths_for(a)) as f64 - target).abs();
            let db = (mlp_param_count(d_in, &widths_for(b)) as f64 - target).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(hidden);
    let v = widths_for(best);
    check_budget(d_in, &v, target)?;
    Ok(v)
}

fn check_budget(d_in: usize, widths: &[usize], target: f64) -> Result<()> {
    let got = mlp_param_count(d_in, widths) as f64;
    if (got - target).abs() > 0.01 * target {
        return Err(Error::config(format!(
            "control MLP has {got} parameters, sage budget is {target}"
        )));
    }
    Ok(())
}

impl GnnAdapter {
    pub fn new(config: GnnConfig, d_in: usize) -> Result<Self> {
        config.validate()?;
        let mlp_widths = if config.kind == LayerKind::MlpControl {
            matched_mlp_widths(d_in, config.hidden_dim, config.n_layers)?
        } else {
            Vec::new()
        };
        Ok(GnnAdapter {
            config,
            d_in,
            mlp_widths,
        })
    }

    /// Control MLP with explicit widths, bypassing the budget match.
    pub fn mlp_with_widths(config: GnnConfig, d_in: usize, widths: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if widths.len() != config.n_layers || widths.last() != Some(&config.hidden_dim) {
            return Err(Error::config("widths must have one entry per layer ending at hidden_dim"));
        }
        Ok(GnnAdapter {
            config: GnnConfig {
                kind: LayerKind::MlpControl,
                ..config
            },
            d_in,
            mlp_widths: widths,
        })
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.d_in
        } else if self.config.kind == LayerKind::MlpControl {
            self.mlp_widths[l - 1]
        } else {
            self.config.hidden_dim
        }
    }

    /// Seeded initial weights added to `params`.
    pub fn init_params(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        let h = self.config.hidden_dim;
        for l in 0..self.config.n_layers {
            let di = self.layer_in(l);
            let mut w = |id: String, shape: &[usize]| -> Result<()> {
                let t = Tensor::init_weight(shape, &mut rng(seed, &id));
                params.insert(id, t)
            };
            let out = match self.config.kind {
                LayerKind::MlpControl => {
                    let wo = self.mlp_widths[l];
                    w(pid(l, "m"), &[di, wo])?;
                    wo
                }
                kind => {
                    w(pid(l, "w1"), &[di, h])?;
                    w(pid(l, "w2"), &[h + di, h])?;
                    if kind == LayerKind::GatStar {
                        w(pid(l, "q"), &[di, h])?;
                        w(pid(l, "k"), &[di, h])?;
                    }
                    h
                }
            };
            params.insert(pid(l, "ln.g"), Tensor::full(&[out], 1.0))?;
            params.insert(pid(l, "ln.b"), Tensor::zeros(&[out]))?;
        }
        Ok(())
    }

    /// Number of adapter scalars `init_params` creates.
    pub fn param_count(&self) -> usize {
        let mut p = ParamSet::new();
        self.init_params(&mut p, 0).expect("fresh set");
        p.num_scalars()
    }

    /// Records the adapter on `tape`; `x` is `n x d_in`, output `n x hidden_dim`.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamSet, x: Var, adj: &Arc<Csr>) -> Result<Var> {
        if tape.value(x).cols() != self.d_in {
            return Err(Error::dim(format!(
                "adapter expects width {}, got {}",
                self.d_in,
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for l in 0..self.config.n_layers {
            let norm = Some((tape.param(params, &pid(l, "ln.g"))?, tape.param(params, &pid(l, "ln.b"))?));
            h = match self.config.kind {
                LayerKind::MlpControl => {
                    let m = tape.param(params, &pid(l, "m"))?;
                    let (g, b) = norm.unwrap();
                    let y = tape.matmul(h, m)?;
                    let y = tape.layernorm(y, g, b, LN_EPS)?;
                    tape.silu(y)
                }
                kind => {
                    let attn = if kind == LayerKind::GatStar {
                        Some((tape.param(params, &pid(l, "q"))?, tape.param(params, &pid(l, "k"))?))
                    } else {
                        None
                    };
                    let w = LayerVars {
                        w1: tape.param(params, &pid(l, "w1"))?,
                        w2: tape.param(params, &pid(l, "w2"))?,
                        norm,
                        activate: true,
                        attn,
                    };
                    if kind == LayerKind::GatStar {
                        gat_star_layer(tape, h, adj, &w)?
                    } else {
                        sage_layer(tape, h, adj, &w)?
                    }
                }
            };
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking; `adj` is the raw graph
    /// adjacency (structure mode and self-loops are applied here).
    pub fn forward(&self, params: &ParamSet, x0: &Tensor, graph_adj: &Csr) -> Result<Tensor> {
        if x0.rows() != graph_adj.n_nodes() {
            return Err(Error::dim("feature rows differ from node count"));
        }
        let adj = prepare_adjacency(graph_adj, &self.config);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let z = self.forward_on(&mut tape, params, x, &adj)?;
        Ok(tape.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_x(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, d], 1.0, &mut rng(seed, "x"))
    }

    fn lists(adj: &Csr) -> Vec<Vec<usize>> {
        adj.to_lists()
    }

    #[test]
    fn self_loop_examples() {
        let empty = Csr::from_lists(&[vec![], vec![], vec![]]);
        let a = add_self_loops(&empty);
        assert_eq!(lists(&a), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(add_self_loops(&a), a);
        let g = Csr::from_lists(&[vec![1], vec![0, 1, 2], vec![1]]);
        let s = add_self_loops(&g);
        assert_eq!(s.degree(0), g.degree(0) + 1);
        assert_eq!(s.degree(1), g.degree(1));
        assert_eq!(s.degree(2), g.degree(2) + 1);
    }

    fn sage_vars(tape: &mut Tape, w1: Tensor, w2: Tensor, plain: bool) -> LayerVars {
        let h = w1.cols();
        let norm = if plain {
            None
        } else {
            Some((tape.constant(Tensor::full(&[h], 1.0)), tape.constant(Tensor::zeros(&[h]))))
        };
        LayerVars {
            w1: tape.constant(w1),
            w2: tape.constant(w2),
            norm,
            activate: !plain,
            attn: None,
        }
    }

    #[test]
    fn degenerate_single_node() {
        // W2 = [I; I] so the plain combine returns pooled + self
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap());
        let w2 = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.], vec![1., 0.], vec![0., 1.]]).unwrap();
        let w = sage_vars(&mut tape, Tensor::identity(2), w2, true);
        let adj = Arc::new(Csr::from_lists(&[vec![0]]));
        let out = sage_layer(&mut tape, x, &adj, &w).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -3.0]);
    }

    #[test]
    fn path_graph_matches_hand_pooling() {
        let x = [[1.0, 2.0], [-1.0, 0.5], [0.25, -2.0]];
        let w1 = [[0.5, -0.25], [0.1, 0.3]];
        let w2 = [[0.2, 0.4], [-0.3, 0.1], [0.7, -0.5], [0.05, 0.6]];
        let nbrs = [vec![1usize], vec![0, 2], vec![1]];
        let mut want = Vec::new();
        for i in 0..3 {
            let mut pooled = [0.0; 2];
            for &j in &nbrs[i] {
                for c in 0..2 {
                    pooled[c] += (x[j][0] * w1[0][c] + x[j][1] * w1[1][c]) / nbrs[i].len() as f64;
                }
            }
            let cat = [pooled[0], pooled[1], x[i][0], x[i][1]];
            let pre: Vec<f64> = (0..2).map(|c| (0..4).map(|r| cat[r] * w2[r][c]).sum()).collect();
            let mu = (pre[0] + pre[1]) / 2.0;
            let var = ((pre[0] - mu).powi(2) + (pre[1] - mu).powi(2)) / 2.0;
            for v in &pre {
                let n = (v - mu) / (var + LN_EPS).sqrt();
                want.push(n / (1.0 + (-n).exp()));
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_rows(&x.map(|r| r.to_vec())).unwrap());
        let w = sage_vars(
            &mut tape,
            Tensor::from_rows(&w1.map(|r| r.to_vec())).unwrap(),
            Tensor::from_rows(&w2.map(|r| r.to_vec())).unwrap(),
            false,
        );
        let adj = Arc::new(Csr::from_lists(&nbrs));
        let out = sage_layer(&mut tape, xv, &adj, &w).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn gat_vars(tape: &mut Tape, d: usize, h: usize, seed: u64, zero_q: bool) -> LayerVars {
        let mut r = rng(seed, "gat");
        let mut q = Tensor::randn(&[d, h], 1.0, &mut r);
        if zero_q {
            q.data_mut().fill(0.0);
        }
        LayerVars {
            w1: tape.constant(Tensor::randn(&[d, h], 1.0, &mut r)),
            w2: tape.constant(Tensor::randn(&[h + d, h], 1.0, &mut r)),
            norm: None,
            activate: false,
            attn: Some((tape.constant(q), tape.constant(Tensor::randn(&[d, h], 1.0, &mut r)))),
        }
    }

    fn alphas(tape: &Tape) -> Vec<f64> {
        // the segment softmax is the node right after the scaled scores
        (0..tape.len())
            .rev()
            .map(|i| tape.value(Var(i)))
            .find(|t| t.ndim() == 1)
            .unwrap()
            .data()
            .to_vec()
    }

    #[test]
    fn attention_uniform_cases() {
        let adj = Arc::new(add_self_loops(&Csr::from_lists(&[vec![1, 2], vec![0], vec![0]])));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let w = gat_vars(&mut tape, 2, 3, 1, false);
        gat_star_layer(&mut tape, x, &adj, &w).unwrap();
        let a = alphas(&tape);
        assert!(a[..3].iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut tape = Tape::new();
        let x = tape.constant(rand_x(3, 2, 4));
        let w = gat_vars(&mut tape, 2, 3, 2, true);
        gat_star_layer(&mut tape, x, &adj, &w).unwrap();
        let a = alphas(&tape);
        assert!(a[..3].iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(a[3..].iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn star_attention_matches_explicit_alpha() {
        let (d, h) = (3, 2);
        let x = rand_x(3, d, 9);
        let nbrs = [vec![0usize, 1, 2], vec![0, 1], vec![0, 2]];
        let adj = Arc::new(Csr::from_lists(&nbrs));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = gat_vars(&mut tape, d, h, 5, false);
        let out = gat_star_layer(&mut tape, xv, &adj, &w).unwrap();
        let (wq, wk) = w.attn.unwrap();
        let get = |v: Var| tape.value(v).clone();
        let (wq, wk, w1, w2) = (get(wq), get(wk), get(w.w1), get(w.w2));
        let lin = |row: &[f64], m: &Tensor| -> Vec<f64> {
            (0..m.cols()).map(|c| (0..row.len()).map(|r| row[r] * m.data()[r * m.cols() + c]).sum()).collect()
        };
        for i in 0..3 {
            let qi = lin(x.row(i), &wq);
            let scores: Vec<f64> = nbrs[i]
                .iter()
                .map(|&j| {
                    let kj = lin(x.row(j), &wk);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (h as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let mut pooled = vec![0.0; h];
            for (e, &j) in nbrs[i].iter().enumerate() {
                let m = lin(x.row(j), &w1);
                for c in 0..h {
                    pooled[c] += scores[e].exp() / z * m[c];
                }
            }
            let mut cat = pooled.clone();
            cat.extend_from_slice(x.row(i));
            let want = lin(&cat, &w2);
            for c in 0..h {
                assert!((tape.value(out).row(i)[c] - want[c]).abs() < 1e-12);
            }
        }
    }

    fn adapter(kind: LayerKind, mode: StructureMode, d: usize) -> (GnnAdapter, ParamSet) {
        adapter_h(kind, mode, d, 4)
    }

    fn adapter_h(kind: LayerKind, mode: StructureMode, d: usize, hidden: usize) -> (GnnAdapter, ParamSet) {
        let cfg = GnnConfig {
            n_layers: 2,
            hidden_dim: hidden,
            kind,
            structure_mode: mode,
        };
        let a = GnnAdapter::new(cfg, d).unwrap();
        let mut p = ParamSet::new();
        a.init_params(&mut p, 3).unwrap();
        (a, p)
    }

    #[test]
    fn two_layer_cycle_matches_unrolled_oracle() {
        let (a, p) = adapter(LayerKind::Sage, StructureMode::Full, 3);
        let adj = Csr::from_lists(&[vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]]);
        let x = rand_x(4, 3, 1);
        let z = a.forward(&p, &x, &adj).unwrap();
        let t = |id: &str| p.tensor(id).unwrap().clone();
        let lin = |row: &[f64], m: &Tensor| -> Vec<f64> {
            (0..m.cols()).map(|c| (0..row.len()).map(|r| row[r] * m.data()[r * m.cols() + c]).sum()).collect()
        };
        let layer = |h: &Vec<Vec<f64>>, l: usize| -> Vec<Vec<f64>> {
            (0..4)
                .map(|i| {
                    let nb = adj.neighbors(i);
                    let msgs: Vec<Vec<f64>> = nb.iter().map(|&j| lin(&h[j], &t(&format!("gnn.l{l}.w1")))).collect();
                    let pooled: Vec<f64> = (0..4).map(|c| msgs.iter().map(|m| m[c]).sum::<f64>() / nb.len() as f64).collect();
                    let mut cat = pooled;
                    cat.extend_from_slice(&h[i]);
                    let pre = lin(&cat, &t(&format!("gnn.l{l}.w2")));
                    let mu = pre.iter().sum::<f64>() / 4.0;
                    let var = pre.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
                    pre.iter()
                        .map(|v| {
                            let n = (v - mu) / (var + LN_EPS).sqrt();
                            n / (1.0 + (-n).exp())
                        })
                        .collect()
                })
                .collect()
        };
        let h0: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
        let h2 = layer(&layer(&h0, 0), 1);
        for i in 0..4 {
            for c in 0..4 {
                assert!((z.row(i)[c] - h2[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_nodes_stay_finite() {
        for kind in [LayerKind::Sage, LayerKind::GatStar] {
            let (a, p) = adapter(kind, StructureMode::Full, 3);
            let adj = Csr::from_lists(&[vec![], vec![2], vec![1]]);
            let z = a.forward(&p, &rand_x(3, 3, 2), &adj).unwrap();
            assert!(z.is_finite());
        }
    }

    #[test]
    fn control_budget_matches_sage() {
        let sage = sage_param_count(64, 32, 2);
        let w = matched_mlp_widths(64, 32, 2).unwrap();
        let got = mlp_param_count(64, &w);
        assert!((got as f64 - sage as f64).abs() <= 0.01 * sage as f64);
        let (a, _) = adapter_h(LayerKind::MlpControl, StructureMode::Full, 64, 32);
        let (s, _) = adapter_h(LayerKind::Sage, StructureMode::Full, 64, 32);
        let (pa, ps) = (a.param_count() as f64, s.param_count() as f64);
        assert!((pa - ps).abs() <= 0.01 * ps, "{pa} vs {ps}");
    }

    #[test]
    fn unmatchable_budget_is_config_error() {
        let cfg = GnnConfig {
            kind: LayerKind::MlpControl,
            hidden_dim: 4,
            ..Default::default()
        };
        assert!(matches!(GnnAdapter::new(cfg, 3), Err(Error::Config(_))));
    }

    #[test]
    fn control_ignores_adjacency() {
        // integer widths can only hit the 1% budget at moderate sizes
        let (a, p) = adapter_h(LayerKind::MlpControl, StructureMode::Full, 24, 12);
        let x = rand_x(4, 24, 3);
        let z1 = a.forward(&p, &x, &Csr::from_lists(&[vec![1], vec![0], vec![3], vec![2]])).unwrap();
        let z2 = a.forward(&p, &x, &Csr::from_lists(&[vec![], vec![], vec![], vec![]])).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn control_transplant_equals_self_loop_sage() {
        let d = 3;
        let (s, ps) = adapter(LayerKind::Sage, StructureMode::SelfLoopsOnly, d);
        let cfg = s.config.clone();
        let m = GnnAdapter::mlp_with_widths(cfg, d, vec![4, 4]).unwrap();
        let mut pm = ParamSet::new();
        for l in 0..2 {
            let di = if l == 0 { d } else { 4 };
            let w1 = ps.tensor(&format!("gnn.l{l}.w1")).unwrap();
            let w2 = ps.tensor(&format!("gnn.l{l}.w2")).unwrap();
            // concat(x W1, x) W2 = x (W1 W2a + W2b)
            let mut mm = vec![0.0; di * 4];
            for r in 0..di {
                for c in 0..4 {
                    let via: f64 = (0..4).map(|k| w1.data()[r * 4 + k] * w2.data()[k * 4 + c]).sum();
                    mm[r * 4 + c] = via + w2.data()[(4 + r) * 4 + c];
                }
            }
            pm.insert(format!("gnn.l{l}.m"), Tensor::matrix(di, 4, mm).unwrap()).unwrap();
            for s in ["ln.g", "ln.b"] {
                let id = format!("gnn.l{l}.{s}");
                pm.insert(id.clone(), ps.tensor(&id).unwrap().clone()).unwrap();
            }
        }
        let x = rand_x(5, d, 8);
        let adj = Csr::from_lists(&[vec![1], vec![0, 2], vec![1], vec![4], vec![3]]);
        let zs = s.forward(&ps, &x, &adj).unwrap();
        let zm = m.forward(&pm, &x, &adj).unwrap();
        assert!(zs.max_abs_diff(&zm) < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (a, p) = adapter(LayerKind::Sage, StructureMode::Full, 3);
        let r = a.forward(&p, &rand_x(2, 4, 0), &Csr::from_lists(&[vec![1], vec![0]]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    fn random_graph(n: usize, edges: &[(usize, usize)]) -> Csr {
        let mut l = vec![Vec::new(); n];
        for &(a, b) in edges {
            let (a, b) = (a % n, b % n);
            if a != b && !l[a].contains(&b) {
                l[a].push(b);
                l[b].push(a);
            }
        }
        for v in &mut l {
            v.sort_unstable();
        }
        Csr::from_lists(&l)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permutation_equivariance(
            n in 2usize..9,
            edges in proptest::collection::vec((0usize..9, 0usize..9), 0..20),
            kind in prop_oneof![Just(LayerKind::Sage), Just(LayerKind::GatStar), Just(LayerKind::MlpControl)],
            seed in 0u64..1000,
        ) {
            let (a, p) = adapter_h(kind, StructureMode::Full, 24, 12);
            let adj = random_graph(n, &edges);
            let x = rand_x(n, 24, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng(seed, "perm"));
            // node i moves to perm[i]
            let mut pl = vec![Vec::new(); n];
            for i in 0..n {
                let mut nb: Vec<usize> = adj.neighbors(i).iter().map(|&j| perm[j]).collect();
                nb.sort_unstable();
                pl[perm[i]] = nb;
            }
            let mut px = Tensor::zeros(&[n, 24]);
            for i in 0..n {
                px.data_mut()[perm[i] * 24..perm[i] * 24 + 24].copy_from_slice(x.row(i));
            }
            let z = a.forward(&p, &x, &adj).unwrap();
            let pz = a.forward(&p, &px, &Csr::from_lists(&pl)).unwrap();
            for i in 0..n {
                prop_assert_eq!(z.row(i), pz.row(perm[i]));
            }
        }

        #[test]
        fn locality_outside_two_hops(seed in 0u64..1000, kind in prop_oneof![Just(LayerKind::Sage), Just(LayerKind::GatStar)]) {
            // path 0-1-2-3-4 plus a disconnected pair 5-6
            let adj = Csr::from_lists(&[vec![1], vec![0, 2], vec![1, 3], vec![2, 4], vec![3], vec![6], vec![5]]);
            let (a, p) = adapter(kind, StructureMode::Full, 3);
            let x = rand_x(7, 3, seed);
            let mut y = x.clone();
            for c in 0..3 {
                y.data_mut()[3 * 3 + c] += 1.0;
                y.data_mut()[4 * 3 + c] -= 2.0;
                y.data_mut()[6 * 3 + c] *= 3.0;
            }
            let zx = a.forward(&p, &x, &adj).unwrap();
            let zy = a.forward(&p, &y, &adj).unwrap();
            // node 0's two-hop ball is {0, 1, 2}
            prop_assert_eq!(zx.row(0), zy.row(0));
            prop_assert!(zx.row(1) != zy.row(1));
            prop_assert!(zx.row(5) != zy.row(5));

            let (s, ps) = adapter(kind, StructureMode::SelfLoopsOnly, 3);
            let sx = s.forward(&ps, &x, &adj).unwrap();
            let sy = s.forward(&ps, &y, &adj).unwrap();
            for i in [0, 1, 2, 5] {
                prop_assert_eq!(sx.row(i), sy.row(i));
            }
        }
    }
}
