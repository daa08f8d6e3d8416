//! Language-structure pretraining and prompt-aware fine-tuning.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterModel;
use crate::cache::StateCache;
use crate::data::{Splits, TagGraph};
use crate::error::{Error, Result};
use crate::fusion::{downstream_logits_on, residual_loss_on};
use crate::gnn::{GnnAdapter, GnnConfig, LayerKind, StructureMode};
use crate::lm::{sample_mask_positions, LanguageModel, LmMode};
use crate::metrics::{accuracy, argmax_rows, roc_auc};
use crate::tensor::{softmax_in_place, Adam, AdamConfig, Csr, ParamSet, Tape, Tensor, Var, CE_FLOOR};
use crate::util::{rng, Digest, Hasher};

/// Ablation switches; all off by default.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_pretrain: bool,
    pub no_res_label: bool,
    pub self_loops_only: bool,
    pub no_prompt: bool,
    pub reinit_gnn: bool,
    pub reinit_fusion: bool,
    pub mlp_control: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 7] = [
        "no_pretrain",
        "no_res_label",
        "self_loops_only",
        "no_prompt",
        "reinit_gnn",
        "reinit_fusion",
        "mlp_control",
    ];

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut a = Ablations::default();
        for n in names {
            *a.flag_mut(n.as_ref())? = true;
        }
        Ok(a)
    }

    fn flag_mut(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "no_pretrain" => &mut self.no_pretrain,
            "no_res_label" => &mut self.no_res_label,
            "self_loops_only" => &mut self.self_loops_only,
            "no_prompt" => &mut self.no_prompt,
            "reinit_gnn" => &mut self.reinit_gnn,
            "reinit_fusion" => &mut self.reinit_fusion,
            "mlp_control" => &mut self.mlp_control,
            other => return Err(Error::config(format!("unknown ablation switch {other:?}"))),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        let flags = [
            self.no_pretrain,
            self.no_res_label,
            self.self_loops_only,
            self.no_prompt,
            self.reinit_gnn,
            self.reinit_fusion,
            self.mlp_control,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    /// Encoder configuration after the structural switches.
    pub fn gnn_config(&self, base: &GnnConfig) -> GnnConfig {
        let mut c = base.clone();
        if self.self_loops_only {
            c.structure_mode = StructureMode::SelfLoopsOnly;
        }
        if self.mlp_control {
            c.kind = LayerKind::MlpControl;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Nodes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub mode: LmMode,
    pub mask_rate: f64,
    /// Fine-tuning epochs without validation improvement before stopping.
    pub patience: usize,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            warmup_frac: 0.1,
            seed: 0,
            mode: LmMode::Autoregressive,
            mask_rate: 0.2,
            patience: 10,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::config("warm-up fraction must lie in (0, 1)"));
        }
        if self.mode == LmMode::Masked && !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config("mask rate must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> Digest {
        Digest::of(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Linear ramp from 0 to `lr` over the warm-up fraction, then constant.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_frac * total_steps as f64;
    if warm <= 0.0 || step as f64 >= warm {
        cfg.lr
    } else {
        cfg.lr * step as f64 / warm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
    pub config_hash: Digest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Pretraining: mean token loss of the frozen LM branch alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_only_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_roc_auc: Option<f64>,
}

/// Applies the re-initialization switches; other switches act on the
/// training loops and leave parameters untouched.
pub fn apply_ablation(model: &AdapterModel, cfg: &TrainConfig) -> Result<AdapterModel> {
    let mut m = model.clone();
    if cfg.ablations.reinit_gnn {
        m.reinit_gnn(cfg.seed)?;
    }
    if cfg.ablations.reinit_fusion {
        m.reinit_fusion(cfg.seed)?;
    }
    Ok(m)
}

fn check_backbone(cache: &StateCache, lm: &LanguageModel) -> Result<()> {
    if !lm.is_frozen() {
        return Err(Error::contract("adapter training requires a frozen language model"));
    }
    let h = cache.header();
    if !h.is_external() && h.lm_hash != lm.content_hash() {
        return Err(Error::StaleCache(format!(
            "cache built by model {}, current model {}",
            h.lm_hash.short(),
            lm.content_hash().short()
        )));
    }
    if h.d_model != lm.config().d_model {
        return Err(Error::StaleCache("cache width differs from the model".into()));
    }
    Ok(())
}

/// Per-node prediction rows: the context state that predicts each target.
struct TokenRows {
    /// `(row index into the node's hidden states, target id)`
    rows: Vec<(usize, usize)>,
}

fn token_rows(tokens: &[usize], mode: LmMode) -> TokenRows {
    let rows = match mode {
        LmMode::Autoregressive => (1..tokens.len()).map(|k| (k - 1, tokens[k])).collect(),
        LmMode::Masked => (1..tokens.len()).map(|k| (k, tokens[k])).collect(),
    };
    TokenRows { rows }
}

fn lm_probs(h: &[f64], head: &Tensor) -> Vec<f64> {
    let (d, v) = (head.rows(), head.cols());
    let mut p = vec![0.0; v];
    crate::tensor::matmul_into(h, head.data(), &mut p, 1, d, v, false, false, 0.0);
    softmax_in_place(&mut p);
    p
}

struct PretrainData {
    d: usize,
    vocab: usize,
    /// Per node: cached context rows, LM-branch probabilities, targets.
    nodes: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)>,
}

fn pretrain_data(cache: &StateCache, lm: &LanguageModel, mode: LmMode) -> Result<PretrainData> {
    let head = lm.head();
    let (d, v) = (head.rows(), head.cols());
    let mut nodes = Vec::with_capacity(cache.len());
    for rec in cache.records() {
        if rec.tokens.iter().any(|&t| t >= v) {
            return Err(Error::Index {
                index: *rec.tokens.iter().max().unwrap(),
                len: v,
            });
        }
        let rows = token_rows(&rec.tokens, mode).rows;
        let mut h = Vec::with_capacity(rows.len() * d);
        let mut p = Vec::with_capacity(rows.len() * v);
        let mut t = Vec::with_capacity(rows.len());
        for (r, target) in rows {
            let hr = rec.hidden.row(r);
            h.extend_from_slice(hr);
            p.extend(lm_probs(hr, head));
            t.push(target);
        }
        nodes.push((h, p, t));
    }
    Ok(PretrainData { d, vocab: v, nodes })
}

/// Mean token loss of the frozen LM branch alone over all cached targets.
pub fn lm_only_loss(cache: &StateCache, lm: &LanguageModel, mode: LmMode) -> Result<f64> {
    let data = pretrain_data(cache, lm, mode)?;
    let (mut total, mut count) = (0.0, 0usize);
    for (_, p, t) in &data.nodes {
        for (k, &target) in t.iter().enumerate() {
            total -= p[k * data.vocab + target].max(CE_FLOOR).ln();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Selected positions for one node in one epoch.
fn epoch_positions(n_targets: usize, cfg: &TrainConfig, r: &mut impl rand::Rng) -> Vec<usize> {
    match cfg.mode {
        LmMode::Autoregressive => (0..n_targets).collect(),
        LmMode::Masked => sample_mask_positions(n_targets, cfg.mask_rate, r)
            .into_iter()
            .map(|p| p - 1)
            .collect(),
    }
}

/// Batched residual loss over the given `(node, positions)` selections.
/// Returns the summed loss and the number of scored tokens.
fn pretrain_batch_loss(
    tape: &mut Tape,
    model: &AdapterModel,
    data: &PretrainData,
    z: Var,
    head: Var,
    batch: &[(usize, Vec<usize>)],
    residual: bool,
) -> Result<Option<(Var, usize)>> {
    let (d, v) = (data.d, data.vocab);
    let mut z_idx = Vec::new();
    let mut h = Vec::new();
    let mut p = Vec::new();
    let mut targets = Vec::new();
    for (node, positions) in batch {
        let (hn, pn, tn) = &data.nodes[*node];
        for &k in positions {
            z_idx.push(*node);
            h.extend_from_slice(&hn[k * d..(k + 1) * d]);
            p.extend_from_slice(&pn[k * v..(k + 1) * v]);
            targets.push(tn[k]);
        }
    }
    let m = targets.len();
    if m == 0 {
        return Ok(None);
    }
    let zr = tape.gather_rows(z, &z_idx)?;
    let hv = tape.constant(Tensor::new(vec![m, d], h)?);
    let r = model.fusion.forward_on(tape, &model.params, hv, zr)?;
    let p_lm = if residual {
        Some(tape.constant(Tensor::new(vec![m, v], p)?))
    } else {
        None
    };
    let loss = residual_loss_on(tape, p_lm, r, head, &targets)?;
    Ok(Some((loss, m)))
}

/// Trains the structural encoder and fusion block to predict each node's
/// tokens through the frozen head. Returns the updated model.
pub fn pretrain_adapter(
    graph: &TagGraph,
    cache: &StateCache,
    lm: &LanguageModel,
    model: &AdapterModel,
    cfg: &TrainConfig,
) -> Result<(AdapterModel, RunRecord)> {
    cfg.validate()?;
    check_backbone(cache, lm)?;
    if cache.len() != graph.n_nodes() {
        return Err(Error::StaleCache(format!(
            "cache has {} nodes, graph has {}",
            cache.len(),
            graph.n_nodes()
        )));
    }
    let start = Instant::now();
    let mut model = model.clone();
    let mut record = RunRecord {
        stage: "pretrain".into(),
        seed: cfg.seed,
        config_hash: cfg.content_hash(),
        ..Default::default()
    };
    let data = pretrain_data(cache, lm, cfg.mode)?;
    let residual = !cfg.ablations.no_res_label;
    record.lm_only_loss = Some(lm_only_loss(cache, lm, cfg.mode)?);
    if cfg.ablations.no_pretrain || cfg.epochs == 0 {
        record.wall_time_s = start.elapsed().as_secs_f64();
        return Ok((model, record));
    }
    let x0 = cache.x0_matrix();
    let graph_adj = graph.csr();
    let adj = model.adjacency(&graph_adj);
    let head = lm.head().clone();
    let mut order_rng = rng(cfg.seed, "pretrain.order");
    let mut mask_rng = rng(cfg.seed, "pretrain.mask");
    let n = graph.n_nodes();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = Adam::new(AdamConfig::default());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut sorted = chunk.to_vec();
            sorted.sort_unstable();
            let batch: Vec<(usize, Vec<usize>)> = sorted
                .iter()
                .map(|&i| (i, epoch_positions(data.nodes[i].2.len(), cfg, &mut mask_rng)))
                .collect();
            model.params.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.constant(x0.clone());
            let z = model.z_on(&mut tape, xv, &adj)?;
            let hv = tape.constant(head.clone());
            let lr = lr_schedule(step, total, cfg);
            step += 1;
            let Some((loss_sum, m)) = pretrain_batch_loss(&mut tape, &model, &data, z, hv, &batch, residual)? else {
                continue;
            };
            let value = tape.value(loss_sum).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss at epoch {epoch}, step {step}: {value}"
                )));
            }
            sum += value;
            count += m;
            let loss = tape.scale(loss_sum, 1.0 / m as f64);
            tape.backward_into(loss, &mut model.params)?;
            opt.step(&mut model.params, lr)?;
        }
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: if count == 0 { 0.0 } else { sum / count as f64 },
            valid_metric: None,
        });
    }
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, record))
}

/// Mean per-token pretraining loss of `model` over every cached target
/// (all positions, both modes), without updating anything.
pub fn pretrain_eval_loss(
    graph: &TagGraph,
    cache: &StateCache,
    lm: &LanguageModel,
    model: &AdapterModel,
    mode: LmMode,
    residual: bool,
) -> Result<f64> {
    check_backbone(cache, lm)?;
    let data = pretrain_data(cache, lm, mode)?;
    let x0 = cache.x0_matrix();
    let adj = model.adjacency(&graph.csr());
    let mut tape = Tape::new();
    let xv = tape.constant(x0);
    let z = model.z_on(&mut tape, xv, &adj)?;
    let hv = tape.constant(lm.head().clone());
    let (mut sum, mut count) = (0.0, 0usize);
    let all: Vec<usize> = (0..graph.n_nodes()).collect();
    for chunk in all.chunks(256) {
        let batch: Vec<(usize, Vec<usize>)> = chunk
            .iter()
            .map(|&i| (i, (0..data.nodes[i].2.len()).collect()))
            .collect();
        if let Some((l, m)) = pretrain_batch_loss(&mut tape, model, &data, z, hv, &batch, residual)? {
            sum += tape.value(l).item();
            count += m;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Node features and labels shared by every classifier.
#[derive(Clone, Debug)]
pub struct NodeInputs {
    pub x0: Tensor,
    /// Prompt-augmented representations, or `x0` under `no_prompt`.
    pub h_prompt: Tensor,
    pub graph_adj: Arc<Csr>,
    pub labels: Vec<Option<usize>>,
    pub n_classes: usize,
}

impl NodeInputs {
    pub fn new(graph: &TagGraph, cache: &StateCache, no_prompt: bool) -> Result<Self> {
        if cache.len() != graph.n_nodes() {
            return Err(Error::StaleCache("cache and graph node counts differ".into()));
        }
        let x0 = cache.x0_matrix();
        let h_prompt = if no_prompt {
            x0.clone()
        } else {
            cache.prompt_matrix()
        };
        Ok(NodeInputs {
            x0,
            h_prompt,
            graph_adj: graph.csr(),
            labels: graph.labels(),
            n_classes: graph.n_classes().max(2),
        })
    }

    fn rows(t: &Tensor, nodes: &[usize]) -> Result<Tensor> {
        let d = t.cols();
        let mut data = Vec::with_capacity(nodes.len() * d);
        for &i in nodes {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new(vec![nodes.len(), d], data)
    }
}

/// Anything that maps node inputs to class logits through a parameter set.
pub trait NodeClassifier {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Logits `[nodes.len() x n_classes]` recorded on `tape`.
    fn logits_on(&self, tape: &mut Tape, inputs: &NodeInputs, nodes: &[usize]) -> Result<Var>;
}

impl NodeClassifier for AdapterModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logits_on(&self, tape: &mut Tape, inputs: &NodeInputs, nodes: &[usize]) -> Result<Var> {
        let head = self
            .task
            .ok_or_else(|| Error::contract("adapter has no task head"))?;
        let adj = self.adjacency(&inputs.graph_adj);
        let x = tape.constant(inputs.x0.clone());
        let z = self.z_on(tape, x, &adj)?;
        let zr = tape.gather_rows(z, nodes)?;
        let hp = tape.constant(NodeInputs::rows(&inputs.h_prompt, nodes)?);
        downstream_logits_on(tape, &self.params, &self.fusion, &head, hp, zr)
    }
}

/// Two-layer MLP over the prompt representation only.
#[derive(Clone, Debug, PartialEq)]
pub struct LmMlp {
    pub params: ParamSet,
}

impl LmMlp {
    pub fn new(d_model: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        params.insert("mlp.w1", Tensor::init_weight(&[d_model, d_model], &mut rng(seed, "mlp.w1")))?;
        params.insert("mlp.b1", Tensor::zeros(&[d_model]))?;
        params.insert("task.w", Tensor::init_weight(&[d_model, n_classes], &mut rng(seed, "task.w")))?;
        params.insert("task.b", Tensor::zeros(&[n_classes]))?;
        Ok(LmMlp { params })
    }
}

impl NodeClassifier for LmMlp {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logits_on(&self, tape: &mut Tape, inputs: &NodeInputs, nodes: &[usize]) -> Result<Var> {
        let x = tape.constant(NodeInputs::rows(&inputs.h_prompt, nodes)?);
        let w1 = tape.param(&self.params, "mlp.w1")?;
        let b1 = tape.param(&self.params, "mlp.b1")?;
        let w = tape.param(&self.params, "task.w")?;
        let b = tape.param(&self.params, "task.b")?;
        let a = tape.matmul(x, w1)?;
        let a = tape.add(a, b1)?;
        let a = tape.silu(a);
        let y = tape.matmul(a, w)?;
        tape.add(y, b)
    }
}

/// Structural encoder plus a linear head on `z` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnOnly {
    pub gnn: GnnAdapter,
    pub params: ParamSet,
}

impl GnnOnly {
    pub fn new(config: GnnConfig, d_model: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let gnn = GnnAdapter::new(config, d_model)?;
        let mut params = ParamSet::new();
        gnn.init_params(&mut params, seed)?;
        Self::with_head(gnn, params, n_classes, seed)
    }

    /// Reuses the encoder weights of a (pretrained) adapter.
    pub fn from_adapter(model: &AdapterModel, n_classes: usize, seed: u64) -> Result<Self> {
        Self::with_head(model.gnn.clone(), model.params.subset("gnn."), n_classes, seed)
    }

    fn with_head(gnn: GnnAdapter, mut params: ParamSet, n_classes: usize, seed: u64) -> Result<Self> {
        let h = gnn.config.hidden_dim;
        params.insert("task.w", Tensor::init_weight(&[h, n_classes], &mut rng(seed, "task.w")))?;
        params.insert("task.b", Tensor::zeros(&[n_classes]))?;
        Ok(GnnOnly { gnn, params })
    }
}

impl NodeClassifier for GnnOnly {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn logits_on(&self, tape: &mut Tape, inputs: &NodeInputs, nodes: &[usize]) -> Result<Var> {
        let adj = crate::gnn::prepare_adjacency(&inputs.graph_adj, &self.gnn.config);
        let x = tape.constant(inputs.x0.clone());
        let z = self.gnn.forward_on(tape, &self.params, x, &adj)?;
        let zr = tape.gather_rows(z, nodes)?;
        let w = tape.param(&self.params, "task.w")?;
        let b = tape.param(&self.params, "task.b")?;
        let y = tape.matmul(zr, w)?;
        tape.add(y, b)
    }
}

/// Logits for `nodes` without tracking gradients.
pub fn predict_logits(clf: &dyn NodeClassifier, inputs: &NodeInputs, nodes: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let y = clf.logits_on(&mut tape, inputs, nodes)?;
    Ok(tape.value(y).clone())
}

/// Accuracy and (binary tasks) ROC-AUC of the positive-class probability.
pub fn evaluate(clf: &dyn NodeClassifier, inputs: &NodeInputs, nodes: &[usize]) -> Result<(f64, Option<f64>)> {
    let labels = labels_of(inputs, nodes)?;
    let logits = predict_logits(clf, inputs, nodes)?;
    let c = inputs.n_classes;
    let preds = argmax_rows(logits.data(), c);
    let acc = accuracy(&preds, &labels)?;
    let auc = if c == 2 {
        let scores: Vec<f64> = logits
            .data()
            .chunks_exact(2)
            .map(|row| {
                let mut p = row.to_vec();
                softmax_in_place(&mut p);
                p[1]
            })
            .collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        roc_auc(&scores, &bin).ok()
    } else {
        None
    };
    Ok((acc, auc))
}

fn labels_of(inputs: &NodeInputs, nodes: &[usize]) -> Result<Vec<usize>> {
    nodes
        .iter()
        .map(|&i| {
            let l = inputs
                .labels
                .get(i)
                .copied()
                .flatten()
                .ok_or_else(|| Error::contract(format!("node {i} has no label")))?;
            if l >= inputs.n_classes {
                return Err(Error::Index {
                    index: l,
                    len: inputs.n_classes,
                });
            }
            Ok(l)
        })
        .collect()
}

/// Supervised training on the train split with early stopping on validation
/// accuracy; the best validation parameters are kept and scored on test.
pub fn finetune(
    clf: &mut dyn NodeClassifier,
    inputs: &NodeInputs,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    splits.validate(inputs.x0.rows())?;
    for (name, s) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        if s.is_empty() {
            return Err(Error::config(format!("{name} split is empty")));
        }
    }
    let train_labels = labels_of(inputs, &splits.train)?;
    labels_of(inputs, &splits.valid)?;
    labels_of(inputs, &splits.test)?;
    let start = Instant::now();
    let mut record = RunRecord {
        stage: "finetune".into(),
        seed: cfg.seed,
        config_hash: cfg.content_hash(),
        ..Default::default()
    };
    let label_of: std::collections::HashMap<usize, usize> =
        splits.train.iter().copied().zip(train_labels).collect();
    let mut order_rng = rng(cfg.seed, "finetune.order");
    let steps_per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = Adam::new(AdamConfig::default());
    let mut best = (evaluate(clf, inputs, &splits.valid)?.0, clf.params().clone(), 0usize);
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = splits.train.clone();
        order.shuffle(&mut order_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut nodes = chunk.to_vec();
            nodes.sort_unstable();
            let targets: Vec<usize> = nodes.iter().map(|i| label_of[i]).collect();
            clf.params_mut().zero_grad();
            let mut tape = Tape::new();
            let logits = clf.logits_on(&mut tape, inputs, &nodes)?;
            let p = tape.softmax(logits, 1)?;
            let loss_sum = tape.cross_entropy_from_probs(p, &targets)?;
            let value = tape.value(loss_sum).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}: {value}")));
            }
            sum += value;
            count += nodes.len();
            let loss = tape.scale(loss_sum, 1.0 / nodes.len() as f64);
            tape.backward_into(loss, clf.params_mut())?;
            let lr = lr_schedule(step, total, cfg);
            step += 1;
            opt.step(clf.params_mut(), lr)?;
        }
        let (valid, _) = evaluate(clf, inputs, &splits.valid)?;
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            valid_metric: Some(valid),
        });
        if valid > best.0 {
            best = (valid, clf.params().clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let mut restored = best.1;
    restored.zero_grad();
    *clf.params_mut() = restored;
    record.best_epoch = Some(best.2);
    let (acc, auc) = evaluate(clf, inputs, &splits.test)?;
    record.test_accuracy = Some(acc);
    record.test_roc_auc = auc;
    record.wall_time_s = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Adds a task head when missing and fine-tunes the full adapter.
pub fn finetune_adapter(
    model: &AdapterModel,
    inputs: &NodeInputs,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<(AdapterModel, RunRecord)> {
    let mut m = model.clone();
    if m.task.is_none() {
        m.add_task_head(inputs.n_classes, cfg.seed)?;
    }
    m.params.set_trainable(true);
    let rec = finetune(&mut m, inputs, splits, cfg)?;
    Ok((m, rec))
}

/// Digest of several serializable pieces, for config hashes.
pub fn hash_json<T: Serialize>(parts: &[&T]) -> Digest {
    let mut h = Hasher::new();
    for p in parts {
        h.bytes(&serde_json::to_vec(p).expect("serializable"));
    }
    h.finish()
}
