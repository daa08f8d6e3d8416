//! Finite-difference checks for every tape op and the composed adapter
//! models.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{downstream_logits_on, residual_loss_on, Fusion, TaskHead};
use crate::gnn::{add_self_loops, gat_star_layer, sage_layer, GnnAdapter, GnnConfig, LayerKind, LayerVars};
use crate::lm::LN_EPS;
use crate::tensor::{finite_diff_grad, relative_error, Csr, GradcheckCase, GradcheckReport, ParamSet, Tape, Tensor, Var};
use crate::util::rng;

/// Central-difference step.
pub const STEP: f64 = 1e-3;
/// Instances whose layernorm rows are flatter than this are resampled;
/// finite differences are unreliable near the singular point.
const MIN_NORM_STD: f64 = 0.2;
pub const DEFAULT_CASES: usize = 100;

type Build = Box<dyn Fn(&mut Tape, &ParamSet) -> Result<Var>>;

/// One randomized instance: named inputs and a graph builder over them.
struct Instance {
    params: ParamSet,
    build: Build,
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(r, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = r.random_range(0.1..1.0);
    }
    t
}

fn probs(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = positive(r, &[rows, cols]);
    for row in t.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Random undirected graph on `2..=5` nodes, possibly with isolated nodes.
fn graph(r: &mut ChaCha8Rng) -> Csr {
    let n = r.random_range(2..=5);
    let mut lists = vec![Vec::new(); n];
    for u in 0..n {
        for v in u + 1..n {
            if r.random::<f64>() < 0.5 {
                lists[u].push(v);
                lists[v].push(u);
            }
        }
    }
    Csr::from_lists(&lists)
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.random_range(2..=4)
}

fn set(inputs: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (id, t) in inputs {
        p.insert(id, t).expect("unique ids");
    }
    p
}

macro_rules! inst {
    ($inputs:expr, |$t:ident, $p:ident| $body:expr) => {
        Instance {
            params: set($inputs),
            build: Box::new(move |$t: &mut Tape, $p: &ParamSet| $body),
        }
    };
}

fn v(t: &mut Tape, p: &ParamSet, id: &str) -> Result<Var> {
    t.param(p, id)
}

type Gen = fn(&mut ChaCha8Rng) -> Instance;

fn ops() -> Vec<(&'static str, Gen)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, k])), ("b", randn(r, &[k, n]))], |t, p| {
                let (a, b) = (v(t, p, "a")?, v(t, p, "b")?);
                t.matmul(a, b)
            })
        }),
        ("transpose", |r| {
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n]))], |t, p| {
                let a = v(t, p, "a")?;
                t.transpose(a)
            })
        }),
        ("reshape", |r| {
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n]))], |t, p| {
                let a = v(t, p, "a")?;
                t.reshape(a, vec![n, m])
            })
        }),
        ("add", |r| {
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n])), ("b", randn(r, &[n]))], |t, p| {
                let (a, b) = (v(t, p, "a")?, v(t, p, "b")?);
                t.add(a, b)
            })
        }),
        ("sub", |r| {
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n])), ("b", randn(r, &[m, n]))], |t, p| {
                let (a, b) = (v(t, p, "a")?, v(t, p, "b")?);
                t.sub(a, b)
            })
        }),
        ("mul", |r| {
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n])), ("b", randn(r, &[n]))], |t, p| {
                let (a, b) = (v(t, p, "a")?, v(t, p, "b")?);
                t.mul(a, b)
            })
        }),
        ("scale", |r| {
            let c: f64 = r.random_range(-2.0..2.0);
            inst!(vec![("a", randn(r, &[3, 2]))], |t, p| {
                let a = v(t, p, "a")?;
                Ok(t.scale(a, c))
            })
        }),
        ("silu", |r| {
            inst!(vec![("a", randn(r, &[3, 3]))], |t, p| {
                let a = v(t, p, "a")?;
                Ok(t.silu(a))
            })
        }),
        ("relu", |r| {
            inst!(vec![("a", away_from_zero(r, &[3, 3]))], |t, p| {
                let a = v(t, p, "a")?;
                Ok(t.relu(a))
            })
        }),
        ("softmax", |r| {
            let axis = r.random_range(0..2);
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n]))], |t, p| {
                let a = v(t, p, "a")?;
                t.softmax(a, axis)
            })
        }),
        ("concat", |r| {
            let axis = r.random_range(0..2);
            let (m, n, k) = (dim(r), dim(r), dim(r));
            let shape_b = if axis == 0 { [k, n] } else { [m, k] };
            inst!(vec![("a", randn(r, &[m, n])), ("b", randn(r, &shape_b))], |t, p| {
                let (a, b) = (v(t, p, "a")?, v(t, p, "b")?);
                t.concat(&[a, b], axis)
            })
        }),
        ("mean", |r| {
            let axis = r.random_range(0..2);
            let (m, n) = (dim(r), dim(r));
            inst!(vec![("a", randn(r, &[m, n]))], |t, p| {
                let a = v(t, p, "a")?;
                t.mean(a, axis)
            })
        }),
        ("sum", |r| {
            inst!(vec![("a", randn(r, &[2, 3]))], |t, p| {
                let a = v(t, p, "a")?;
                Ok(t.sum(a))
            })
        }),
        ("layernorm", |r| {
            let (m, n) = (dim(r), dim(r));
            inst!(
                vec![("x", randn(r, &[m, n])), ("g", randn(r, &[n])), ("b", randn(r, &[n]))],
                |t, p| {
                    let (x, g, b) = (v(t, p, "x")?, v(t, p, "g")?, v(t, p, "b")?);
                    t.layernorm(x, g, b, LN_EPS)
                }
            )
        }),
        ("cross_entropy_from_probs", |r| {
            let (m, n) = (dim(r), dim(r));
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            inst!(vec![("p", probs(r, m, n))], |t, p| {
                let pv = v(t, p, "p")?;
                t.cross_entropy_from_probs(pv, &targets)
            })
        }),
        ("slice_cols", |r| {
            let n = r.random_range(3..=5);
            let start = r.random_range(0..n - 1);
            let end = r.random_range(start + 1..=n);
            inst!(vec![("a", randn(r, &[3, n]))], |t, p| {
                let a = v(t, p, "a")?;
                t.slice_cols(a, start, end)
            })
        }),
        ("gather_rows", |r| {
            let m = dim(r);
            let idx: Vec<usize> = (0..r.random_range(1..=6)).map(|_| r.random_range(0..m)).collect();
            inst!(vec![("a", randn(r, &[m, 3]))], |t, p| {
                let a = v(t, p, "a")?;
                t.gather_rows(a, &idx)
            })
        }),
        ("segment_mean", |r| {
            let adj = Arc::new(graph(r));
            let fallback = r.random::<bool>();
            inst!(vec![("x", randn(r, &[adj.n_nodes(), 3]))], |t, p| {
                let x = v(t, p, "x")?;
                t.segment_mean(x, &adj, fallback)
            })
        }),
        ("edge_dot", |r| {
            let adj = Arc::new(add_self_loops(&graph(r)));
            let n = adj.n_nodes();
            inst!(vec![("q", randn(r, &[n, 3])), ("k", randn(r, &[n, 3]))], |t, p| {
                let (q, k) = (v(t, p, "q")?, v(t, p, "k")?);
                t.edge_dot(q, k, &adj)
            })
        }),
        ("segment_softmax", |r| {
            let adj = Arc::new(add_self_loops(&graph(r)));
            inst!(vec![("s", randn(r, &[adj.n_edges()]))], |t, p| {
                let s = v(t, p, "s")?;
                t.segment_softmax(s, &adj)
            })
        }),
        ("segment_weighted_sum", |r| {
            let adj = Arc::new(graph(r));
            let (e, n) = (adj.n_edges(), adj.n_nodes());
            inst!(vec![("alpha", randn(r, &[e])), ("x", randn(r, &[n, 3]))], |t, p| {
                let (alpha, x) = (v(t, p, "alpha")?, v(t, p, "x")?);
                t.segment_weighted_sum(alpha, x, &adj)
            })
        }),
    ]
}

fn layer_inputs(r: &mut ChaCha8Rng, n: usize, d: usize, h: usize, attn: bool) -> Vec<(&'static str, Tensor)> {
    let mut v = vec![
        ("x", randn(r, &[n, d])),
        ("w1", randn(r, &[d, h])),
        ("w2", randn(r, &[h + d, h])),
        ("g", randn(r, &[h])),
        ("b", randn(r, &[h])),
    ];
    if attn {
        v.push(("q", randn(r, &[d, h])));
        v.push(("k", randn(r, &[d, h])));
    }
    v
}

fn layer_vars(t: &mut Tape, p: &ParamSet) -> Result<(Var, LayerVars)> {
    let attn = if p.contains("q") {
        Some((v(t, p, "q")?, v(t, p, "k")?))
    } else {
        None
    };
    Ok((
        v(t, p, "x")?,
        LayerVars {
            w1: v(t, p, "w1")?,
            w2: v(t, p, "w2")?,
            norm: Some((v(t, p, "g")?, v(t, p, "b")?)),
            activate: true,
            attn,
        },
    ))
}

fn encoder(r: &mut ChaCha8Rng, kind: LayerKind) -> Instance {
    let adj = Arc::new(graph(r));
    let (n, d) = (adj.n_nodes(), dim(r));
    let cfg = GnnConfig {
        n_layers: 2,
        hidden_dim: 3,
        kind,
        ..GnnConfig::default()
    };
    let gnn = if kind == LayerKind::MlpControl {
        GnnAdapter::mlp_with_widths(cfg.clone(), d, vec![4, 3])
    } else {
        GnnAdapter::new(cfg.clone(), d)
    }
    .expect("valid encoder");
    let mut params = ParamSet::new();
    gnn.init_params(&mut params, r.random()).expect("fresh set");
    for p in params.iter_mut() {
        let noise = randn(r, p.tensor.shape());
        for (a, b) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *a += 0.3 * b;
        }
    }
    params.insert("x", randn(r, &[n, d])).expect("unique");
    let adj = gnn_adj(&adj, &cfg);
    Instance {
        params,
        build: Box::new(move |t, p| {
            let x = v(t, p, "x")?;
            gnn.forward_on(t, p, x, &adj)
        }),
    }
}

fn gnn_adj(adj: &Csr, cfg: &GnnConfig) -> Arc<Csr> {
    crate::gnn::prepare_adjacency(adj, cfg)
}

fn models() -> Vec<(&'static str, Gen)> {
    vec![
        ("sage", |r| {
            let adj = Arc::new(graph(r));
            let (d, h) = (dim(r), dim(r));
            inst!(layer_inputs(r, adj.n_nodes(), d, h, false), |t, p| {
                let (x, w) = layer_vars(t, p)?;
                sage_layer(t, x, &adj, &w)
            })
        }),
        ("gat_star", |r| {
            let adj = Arc::new(add_self_loops(&graph(r)));
            let (d, h) = (dim(r), dim(r));
            inst!(layer_inputs(r, adj.n_nodes(), d, h, true), |t, p| {
                let (x, w) = layer_vars(t, p)?;
                gat_star_layer(t, x, &adj, &w)
            })
        }),
        ("encoder_sage", |r| encoder(r, LayerKind::Sage)),
        ("encoder_gat_star", |r| encoder(r, LayerKind::GatStar)),
        ("encoder_mlp_control", |r| encoder(r, LayerKind::MlpControl)),
        ("fusion", |r| {
            let (m, d, h) = (dim(r), dim(r), dim(r));
            let fusion = Fusion::new(d, h);
            let mut params = ParamSet::new();
            fusion.init_params(&mut params, r.random()).expect("fresh set");
            for id in ["fuse.b1", "fuse.b2"] {
                params.get_mut(id).unwrap().tensor = randn(r, &[d]).with_grad();
            }
            params.insert("h", randn(r, &[m, d])).expect("unique");
            params.insert("z", randn(r, &[m, h])).expect("unique");
            Instance {
                params,
                build: Box::new(move |t, p| {
                    let (hv, zv) = (v(t, p, "h")?, v(t, p, "z")?);
                    fusion.forward_on(t, p, hv, zv)
                }),
            }
        }),
        ("residual_loss", |r| {
            let (m, d, n) = (dim(r), dim(r), dim(r) + 1);
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            let residual = r.random::<bool>();
            inst!(
                vec![("p_lm", probs(r, m, n)), ("r", randn(r, &[m, d])), ("head", randn(r, &[d, n]))],
                |t, p| {
                    let p_lm = if residual { Some(v(t, p, "p_lm")?) } else { None };
                    let (rv, head) = (v(t, p, "r")?, v(t, p, "head")?);
                    residual_loss_on(t, p_lm, rv, head, &targets)
                }
            )
        }),
        ("task_head", |r| {
            let (m, d, h, c) = (dim(r), dim(r), dim(r), dim(r));
            let fusion = Fusion::new(d, h);
            let head = TaskHead::new(d, c).expect("valid head");
            let mut params = ParamSet::new();
            fusion.init_params(&mut params, r.random()).expect("fresh set");
            head.init_params(&mut params, r.random()).expect("fresh set");
            params.get_mut("task.b").unwrap().tensor = randn(r, &[c]).with_grad();
            params.insert("h", randn(r, &[m, d])).expect("unique");
            params.insert("z", randn(r, &[m, h])).expect("unique");
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
            Instance {
                params,
                build: Box::new(move |t, p| {
                    let (hv, zv) = (v(t, p, "h")?, v(t, p, "z")?);
                    let logits = downstream_logits_on(t, p, &fusion, &head, hv, zv)?;
                    let probs = t.softmax(logits, 1)?;
                    t.cross_entropy_from_probs(probs, &targets)
                }),
            }
        }),
    ]
}

/// Reduces the builder output to a scalar with fixed random weights.
fn scalarize(inst: &Instance, weights: &Tensor, t: &mut Tape, p: &ParamSet) -> Result<Var> {
    let out = (inst.build)(t, p)?;
    let w = t.constant(weights.clone());
    let out = t.reshape(out, vec![weights.numel()])?;
    let prod = t.mul(out, w)?;
    Ok(t.sum(prod))
}

fn check_instance(inst: &Instance, r: &mut ChaCha8Rng) -> Result<f64> {
    let numel = {
        let mut t = Tape::new();
        let out = (inst.build)(&mut t, &inst.params)?;
        t.value(out).numel()
    };
    let weights = randn(r, &[numel]);
    let mut params = inst.params.clone();
    params.zero_grad();
    let mut t = Tape::new();
    let loss = scalarize(inst, &weights, &mut t, &params)?;
    t.backward_into(loss, &mut params)?;
    let mut worst: f64 = 0.0;
    for p in params.iter() {
        let analytic = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let id = p.id.clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = inst.params.clone();
                probe.get_mut(&id).expect("same ids").tensor.data_mut().copy_from_slice(x.data());
                let mut t = Tape::new();
                let l = scalarize(inst, &weights, &mut t, &probe).expect("builder succeeded once");
                t.value(l).item()
            },
            &p.tensor,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

fn well_conditioned(inst: &Instance) -> Result<bool> {
    let mut t = Tape::new();
    (inst.build)(&mut t, &inst.params)?;
    Ok(t.min_layernorm_std() >= MIN_NORM_STD)
}

/// Names of every checked op and model, in suite order.
pub fn suite_names() -> Vec<&'static str> {
    ops().into_iter().chain(models()).map(|(n, _)| n).collect()
}

/// Runs `cases` random instances of every entry.
pub fn run_suite(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for (name, gen) in ops().into_iter().chain(models()) {
        let mut r = rng(seed, &format!("gradcheck.{name}"));
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let inst = loop {
                let inst = gen(&mut r);
                if well_conditioned(&inst)? {
                    break inst;
                }
            };
            worst = worst.max(check_instance(&inst, &mut r)?);
        }
        report.entries.push(GradcheckCase {
            name: name.to_string(),
            cases,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_models() {
        let names = suite_names();
        for n in ["sage", "gat_star", "fusion", "residual_loss", "task_head", "layernorm", "segment_softmax"] {
            assert!(names.contains(&n), "{n}");
        }
    }

    #[test]
    fn a_few_cases_pass() {
        let rep = run_suite(3, 11).unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut r = rng(0, "wrong");
        let mut params = set(vec![("a", away_from_zero(&mut r, &[2, 2]))]);
        let mut t = Tape::new();
        let a = v(&mut t, &params, "a").unwrap();
        let y = t.relu(a);
        let loss = t.sum(y);
        t.backward_into(loss, &mut params).unwrap();
        let silu_sum = |x: &Tensor| x.data().iter().map(|&v| v / (1.0 + (-v).exp())).sum();
        let numeric = finite_diff_grad(silu_sum, params.tensor("a").unwrap(), STEP);
        let analytic = params.tensor("a").unwrap().grad().unwrap().to_vec();
        assert!(relative_error(&analytic, numeric.data()) > 1e-2);
    }
}
