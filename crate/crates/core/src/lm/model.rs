use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, MASK};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, CE_FLOOR, Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use crate::util::{rng, Digest, Hasher};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmMode {
    Autoregressive,
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMode {
    Last,
    First,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub mode: LmMode,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            vocab_size: 512,
            seed: 0,
            mode: LmMode::Autoregressive,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::config("n_layers, d_ff and max_seq_len must be positive"));
        }
        if self.vocab_size < 6 {
            return Err(Error::config("vocab_size must cover the specials plus one word"));
        }
        Ok(())
    }

    pub fn default_rep(&self) -> RepMode {
        match self.mode {
            LmMode::Autoregressive => RepMode::Last,
            LmMode::Masked => RepMode::First,
        }
    }
}

/// Token suffix appended to node text before reading the last hidden state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub ids: Vec<usize>,
}

impl PromptSpec {
    pub fn new(text: &str, vocab: &Vocab) -> Self {
        PromptSpec {
            text: text.to_string(),
            ids: vocab.encode_words(text),
        }
    }

    pub fn empty() -> Self {
        PromptSpec {
            text: String::new(),
            ids: Vec::new(),
        }
    }

    pub fn content_hash(&self) -> Digest {
        Digest::of(self.text.as_bytes())
    }
}

/// Summary of a backbone training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig {
            steps: 300,
            lr: 3e-3,
            batch_size: 16,
            mask_rate: 0.2,
        }
    }
}

/// Small pre-LN transformer used as the frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: LmConfig,
    vocab: Vocab,
    params: ParamSet,
    frozen: bool,
    positional: Tensor,
}

struct Bound {
    vars: std::collections::HashMap<String, Var>,
}

impl Bound {
    fn get(&self, id: &str) -> Var {
        self.vars[id]
    }
}

fn sinusoidal(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d]);
    for pos in 0..max_len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// `floor(rate * n_words)` distinct positions in `1..=n_words`, sorted.
pub fn sample_mask_positions<R: Rng>(n_words: usize, rate: f64, r: &mut R) -> Vec<usize> {
    let count = (rate * n_words as f64).floor() as usize;
    let mut pos: Vec<usize> = (1..=n_words).collect();
    pos.shuffle(r);
    pos.truncate(count);
    pos.sort_unstable();
    pos
}

impl LanguageModel {
    /// Seeded initialization. `config.vocab_size` is set from `vocab`.
    pub fn new(mut config: LmConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut params = ParamSet::new();
        let mut add = |id: String, t: Tensor| params.insert(id, t);
        let init = |id: &str, shape: &[usize]| {
            Tensor::init_weight(shape, &mut rng(config.seed, &format!("lm.{id}")))
        };
        add("emb".into(), Tensor::randn(&[v, d], 1.0, &mut rng(config.seed, "lm.emb")))?;
        for l in 0..config.n_layers {
            let p = |s: &str| format!("l{l}.{s}");
            add(p("ln1.g"), Tensor::full(&[d], 1.0))?;
            add(p("ln1.b"), Tensor::zeros(&[d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                add(p(w), init(&p(w), &[d, d]))?;
            }
            add(p("ln2.g"), Tensor::full(&[d], 1.0))?;
            add(p("ln2.b"), Tensor::zeros(&[d]))?;
            add(p("w1"), init(&p("w1"), &[d, f]))?;
            add(p("b1"), Tensor::zeros(&[f]))?;
            add(p("w2"), init(&p("w2"), &[f, d]))?;
            add(p("b2"), Tensor::zeros(&[d]))?;
        }
        add("lnf.g".into(), Tensor::full(&[d], 1.0))?;
        add("lnf.b".into(), Tensor::zeros(&[d]))?;
        add("head".into(), init("head", &[d, v]))?;
        let positional = sinusoidal(config.max_seq_len, d);
        Ok(LanguageModel {
            config,
            vocab,
            params,
            frozen: false,
            positional,
        })
    }

    pub(crate) fn from_parts(config: LmConfig, vocab: Vocab, params: ParamSet, frozen: bool) -> Result<Self> {
        let reference = LanguageModel::new(config.clone(), vocab.clone())?;
        let ids: Vec<_> = reference.params.iter().map(|p| (&p.id, p.tensor.shape())).collect();
        let got: Vec<_> = params.iter().map(|p| (&p.id, p.tensor.shape())).collect();
        if ids != got {
            return Err(Error::contract("parameter layout does not match config"));
        }
        let mut lm = LanguageModel {
            params,
            frozen: false,
            ..reference
        };
        if frozen {
            lm.freeze();
        } else {
            lm.params.set_trainable(true);
        }
        Ok(lm)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable weights; only available before the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::contract("language model is frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the backbone frozen; all weights stop requiring gradients.
    pub fn freeze(&mut self) -> Digest {
        self.frozen = true;
        self.params.set_trainable(false);
        self.content_hash()
    }

    /// Digest of config, vocabulary and every weight.
    pub fn content_hash(&self) -> Digest {
        let c = &self.config;
        let mut h = Hasher::new();
        h.bytes(b"GALM");
        for v in [
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.d_ff,
            c.max_seq_len,
            c.vocab_size,
        ] {
            h.u64(v as u64);
        }
        h.u64(c.seed);
        h.u64(c.mode as u64);
        h.bytes(&self.vocab.content_hash().0);
        h.bytes(&self.params.content_hash().0);
        h.finish()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text, self.config.max_seq_len)
    }

    pub fn prompt(&self, text: &str) -> PromptSpec {
        PromptSpec::new(text, &self.vocab)
    }

    /// The frozen output projection as a `d_model x vocab` matrix.
    pub fn head(&self) -> &Tensor {
        self.params.tensor("head").expect("head exists")
    }

    fn bind(&self, tape: &mut Tape, track: bool) -> Result<Bound> {
        let mut vars = std::collections::HashMap::new();
        for p in self.params.iter() {
            let v = if track {
                tape.param(&self.params, &p.id)?
            } else {
                tape.constant(p.tensor.clone())
            };
            vars.insert(p.id.clone(), v);
        }
        Ok(Bound { vars })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Index {
                index: bad,
                len: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the transformer on `tape`, returning hidden states `[T x d]`.
    fn forward_on(&self, tape: &mut Tape, w: &Bound, ids: &[usize], causal: bool) -> Result<Var> {
        self.check_ids(ids)?;
        let c = &self.config;
        let (t, d) = (ids.len(), c.d_model);
        let dh = d / c.n_heads;
        let emb = tape.gather_rows(w.get("emb"), ids)?;
        let pe = Tensor::new(vec![t, d], self.positional.data()[..t * d].to_vec())?;
        let pe = tape.constant(pe);
        let mut x = tape.add(emb, pe)?;
        let mask = if causal {
            let mut m = Tensor::zeros(&[t, t]);
            for i in 0..t {
                for j in i + 1..t {
                    m.data_mut()[i * t + j] = f64::NEG_INFINITY;
                }
            }
            Some(tape.constant(m))
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..c.n_layers {
            let p = |s: &str| w.get(&format!("l{l}.{s}"));
            let a = tape.layernorm(x, p("ln1.g"), p("ln1.b"), LN_EPS)?;
            let q = tape.matmul(a, p("wq"))?;
            let k = tape.matmul(a, p("wk"))?;
            let v = tape.matmul(a, p("wv"))?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for h in 0..c.n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let mut s = tape.scale(s, scale);
                if let Some(m) = mask {
                    s = tape.add(s, m)?;
                }
                let pr = tape.softmax(s, 1)?;
                heads.push(tape.matmul(pr, vh)?);
            }
            let cat = tape.concat(&heads, 1)?;
            let o = tape.matmul(cat, p("wo"))?;
            x = tape.add(x, o)?;
            let m = tape.layernorm(x, p("ln2.g"), p("ln2.b"), LN_EPS)?;
            let m = tape.matmul(m, p("w1"))?;
            let m = tape.add(m, p("b1"))?;
            let m = tape.silu(m);
            let m = tape.matmul(m, p("w2"))?;
            let m = tape.add(m, p("b2"))?;
            x = tape.add(x, m)?;
        }
        tape.layernorm(x, w.get("lnf.g"), w.get("lnf.b"), LN_EPS)
    }

    fn causal(&self) -> bool {
        self.config.mode == LmMode::Autoregressive
    }

    /// Hidden states `[len(ids) x d_model]` for a BOS-prefixed sequence.
    pub fn lm_forward(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false)?;
        let h = self.forward_on(&mut tape, &w, ids, self.causal())?;
        Ok(tape.value(h).clone())
    }

    /// Non-causal forward with `mask_positions` replaced by the MASK token.
    pub fn masked_forward(&self, ids: &[usize], mask_positions: &[usize]) -> Result<Tensor> {
        if self.config.mode != LmMode::Masked {
            return Err(Error::contract("masked_forward requires a masked-mode model"));
        }
        let mut masked = ids.to_vec();
        for &p in mask_positions {
            if p >= ids.len() {
                return Err(Error::Index {
                    index: p,
                    len: ids.len(),
                });
            }
            masked[p] = MASK;
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false)?;
        let h = self.forward_on(&mut tape, &w, &masked, false)?;
        Ok(tape.value(h).clone())
    }

    /// Per-position context states used for token prediction: the plain
    /// forward in autoregressive mode; in masked mode row `k >= 1` is the
    /// state at `k` with only position `k` masked.
    pub fn context_states(&self, ids: &[usize]) -> Result<Tensor> {
        let plain = self.lm_forward(ids)?;
        if self.causal() {
            return Ok(plain);
        }
        let d = self.config.d_model;
        let mut out = plain.clone();
        for k in 1..ids.len() {
            let h = self.masked_forward(ids, &[k])?;
            out.data_mut()[k * d..(k + 1) * d].copy_from_slice(h.row(k));
        }
        Ok(out)
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let head = self.params.tensor("head").expect("head exists");
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut out = vec![0.0; v];
        crate::tensor::matmul_into(h, head.data(), &mut out, 1, d, v, false, false, 0.0);
        out
    }

    /// `softmax(Head(h))`.
    pub fn next_token_probs(&self, h: &[f64]) -> Vec<f64> {
        let mut p = self.logits(h);
        softmax_in_place(&mut p);
        p
    }

    /// Sum over k = 1..L of cross-entropy of the prediction at k-1 against ids[k].
    pub fn lm_sequence_loss(&self, ids: &[usize]) -> Result<f64> {
        if ids.len() < 2 {
            return Err(Error::contract("sequence loss needs at least two tokens"));
        }
        let h = self.lm_forward(ids)?;
        let mut loss = 0.0;
        for k in 1..ids.len() {
            let p = self.next_token_probs(h.row(k - 1));
            loss -= p[ids[k]].max(CE_FLOOR).ln();
        }
        Ok(loss)
    }

    pub fn sentence_rep(&self, ids: &[usize], mode: RepMode) -> Result<Vec<f64>> {
        let h = self.lm_forward(ids)?;
        Ok(select_rep(&h, mode))
    }

    /// BOS-prefixed text ids with the prompt appended; the text tail is
    /// dropped when the combination exceeds `max_seq_len`.
    pub fn with_prompt(&self, ids: &[usize], prompt: &PromptSpec) -> Result<Vec<usize>> {
        let max = self.config.max_seq_len;
        if prompt.ids.len() + 1 > max {
            return Err(Error::config(format!(
                "prompt of {} tokens does not fit max_seq_len {max}",
                prompt.ids.len()
            )));
        }
        let keep = ids.len().min(max - prompt.ids.len());
        let mut out = ids[..keep].to_vec();
        out.extend_from_slice(&prompt.ids);
        Ok(out)
    }

    /// Last-token hidden state of `[text, prompt]`.
    pub fn prompt_rep(&self, ids: &[usize], prompt: &PromptSpec) -> Result<Vec<f64>> {
        let combined = self.with_prompt(ids, prompt)?;
        self.sentence_rep(&combined, RepMode::Last)
    }

    fn sequence_loss_on(&self, tape: &mut Tape, w: &Bound, ids: &[usize], mask_rate: f64, r: &mut impl Rng) -> Result<Option<(Var, usize)>> {
        let head = w.get("head");
        match self.config.mode {
            LmMode::Autoregressive => {
                if ids.len() < 2 {
                    return Ok(None);
                }
                let h = self.forward_on(tape, w, &ids[..ids.len() - 1], true)?;
                let logits = tape.matmul(h, head)?;
                let p = tape.softmax(logits, 1)?;
                let loss = tape.cross_entropy_from_probs(p, &ids[1..])?;
                Ok(Some((loss, ids.len() - 1)))
            }
            LmMode::Masked => {
                let pos = sample_mask_positions(ids.len() - 1, mask_rate, r);
                if pos.is_empty() {
                    return Ok(None);
                }
                let mut masked = ids.to_vec();
                for &p in &pos {
                    masked[p] = MASK;
                }
                let h = self.forward_on(tape, w, &masked, false)?;
                let rows = tape.gather_rows(h, &pos)?;
                let logits = tape.matmul(rows, head)?;
                let p = tape.softmax(logits, 1)?;
                let targets: Vec<usize> = pos.iter().map(|&k| ids[k]).collect();
                let loss = tape.cross_entropy_from_probs(p, &targets)?;
                Ok(Some((loss, pos.len())))
            }
        }
    }

    /// Trains all weights on `corpus` (BOS-prefixed id sequences) with Adam.
    pub fn train_backbone(&mut self, corpus: &[Vec<usize>], cfg: &BackboneTrainConfig) -> Result<BackboneReport> {
        if self.frozen {
            return Err(Error::contract("cannot train a frozen language model"));
        }
        let mut report = BackboneReport {
            steps: cfg.steps,
            ..Default::default()
        };
        if cfg.steps == 0 || corpus.is_empty() {
            return Ok(report);
        }
        let mut opt = Adam::new(AdamConfig::default());
        let mut r = rng(self.config.seed, "lm.train");
        let mut order: Vec<usize> = Vec::new();
        for step in 0..cfg.steps {
            self.params.zero_grad();
            let mut tape = Tape::new();
            let w = self.bind(&mut tape, true)?;
            let mut terms = Vec::new();
            let mut count = 0;
            for _ in 0..cfg.batch_size.max(1) {
                if order.is_empty() {
                    order = (0..corpus.len()).collect();
                    order.shuffle(&mut r);
                }
                let idx = order.pop().unwrap();
                if let Some((l, n)) = self.sequence_loss_on(&mut tape, &w, &corpus[idx], cfg.mask_rate, &mut r)? {
                    terms.push(l);
                    count += n;
                }
            }
            if terms.is_empty() {
                continue;
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            let loss = tape.scale(total, 1.0 / count as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("backbone loss at step {step}")));
            }
            if step == 0 {
                report.initial_loss = value;
            }
            report.final_loss = value;
            tape.backward_into(loss, &mut self.params)?;
            // linear decay keeps the final steps stable
            let lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64);
            opt.step(&mut self.params, lr)?;
        }
        Ok(report)
    }

    /// Mean per-token loss over a corpus under the model's own objective
    /// (masked mode uses every non-BOS position masked one at a time).
    pub fn mean_token_loss(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for ids in corpus {
            if ids.len() < 2 {
                continue;
            }
            let h = self.context_states(ids)?;
            for k in 1..ids.len() {
                let row = if self.causal() { k - 1 } else { k };
                let p = self.next_token_probs(h.row(row));
                total -= p[ids[k]].max(CE_FLOOR).ln();
                count += 1;
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }
}

pub fn select_rep(h: &Tensor, mode: RepMode) -> Vec<f64> {
    match mode {
        RepMode::First => h.row(0).to_vec(),
        RepMode::Last => h.row(h.rows() - 1).to_vec(),
        RepMode::Mean => {
            let (n, d) = (h.rows(), h.cols());
            (0..d)
                .map(|c| (0..n).map(|r| h.data()[r * d + c]).sum::<f64>() / n as f64)
                .collect()
        }
    }
}

/// Corpus of BOS-prefixed sequences from raw texts.
pub fn encode_corpus<'a>(lm: &LanguageModel, texts: impl IntoIterator<Item = &'a str>) -> Vec<Vec<usize>> {
    texts.into_iter().map(|t| lm.tokenize(t)).collect()
}
