//! Persistent per-node backbone outputs.
//!
//! File layout (little-endian u64 integers, binary64 floats): magic `GADC`,
//! version, d_model, vocab hash, LM hash, node count, prompt hash, flags,
//! representation mode; then one record per node in ascending id order:
//! node id, token count L, L token ids, L x d_model hidden states, x0,
//! h_prompt.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TagGraph;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, PromptSpec, RepMode};
use crate::tensor::Tensor;
use crate::util::{put_f64s, put_u64, rng, write_atomic, Digest, Reader};

const MAGIC: &[u8; 4] = b"GADC";
const VERSION: u64 = 1;
/// Header flag: records come from an external tool and hashes are not checked.
pub const FLAG_EXTERNAL: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub version: u64,
    pub d_model: usize,
    pub vocab_hash: Digest,
    pub lm_hash: Digest,
    pub n_nodes: usize,
    pub prompt_hash: Digest,
    pub flags: u64,
    pub rep_mode: RepMode,
}

impl CacheHeader {
    pub fn is_external(&self) -> bool {
        self.flags & FLAG_EXTERNAL != 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeStateRecord {
    pub node: usize,
    pub tokens: Vec<usize>,
    /// `tokens.len() x d_model` context states.
    pub hidden: Tensor,
    pub x0: Vec<f64>,
    pub h_prompt: Vec<f64>,
}

/// Loaded cache; immutable and indexed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct StateCache {
    header: CacheHeader,
    records: Vec<NodeStateRecord>,
}

fn rep_code(m: RepMode) -> u64 {
    match m {
        RepMode::Last => 0,
        RepMode::First => 1,
        RepMode::Mean => 2,
    }
}

fn encode(header: &CacheHeader, records: &[NodeStateRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, header.version);
    put_u64(&mut out, header.d_model as u64);
    out.extend_from_slice(&header.vocab_hash.0);
    out.extend_from_slice(&header.lm_hash.0);
    put_u64(&mut out, header.n_nodes as u64);
    out.extend_from_slice(&header.prompt_hash.0);
    put_u64(&mut out, header.flags);
    put_u64(&mut out, rep_code(header.rep_mode));
    for r in records {
        put_u64(&mut out, r.node as u64);
        put_u64(&mut out, r.tokens.len() as u64);
        for &t in &r.tokens {
            put_u64(&mut out, t as u64);
        }
        put_f64s(&mut out, r.hidden.data());
        put_f64s(&mut out, &r.x0);
        put_f64s(&mut out, &r.h_prompt);
    }
    out
}

fn decode(bytes: &[u8]) -> std::result::Result<StateCache, String> {
    let short = || "truncated".to_string();
    let mut r = Reader::new(bytes);
    if r.take(4).ok_or_else(short)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u64().ok_or_else(short)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let d = r.u64().ok_or_else(short)? as usize;
    let vocab_hash = r.digest().ok_or_else(short)?;
    let lm_hash = r.digest().ok_or_else(short)?;
    let n = r.u64().ok_or_else(short)? as usize;
    let prompt_hash = r.digest().ok_or_else(short)?;
    let flags = r.u64().ok_or_else(short)?;
    let rep_mode = match r.u64().ok_or_else(short)? {
        0 => RepMode::Last,
        1 => RepMode::First,
        2 => RepMode::Mean,
        m => return Err(format!("unknown representation mode {m}")),
    };
    if d == 0 {
        return Err("zero d_model".into());
    }
    let header = CacheHeader {
        version,
        d_model: d,
        vocab_hash,
        lm_hash,
        n_nodes: n,
        prompt_hash,
        flags,
        rep_mode,
    };
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for expect in 0..n {
        let node = r.u64().ok_or_else(short)? as usize;
        if node != expect {
            return Err(format!("record {expect} carries node id {node}"));
        }
        let len = r.u64().ok_or_else(short)? as usize;
        if len == 0 || len > bytes.len() {
            return Err(format!("implausible token count {len} for node {node}"));
        }
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(r.u64().ok_or_else(short)? as usize);
        }
        let hidden = r.f64s(len * d).ok_or_else(short)?;
        let hidden = Tensor::new(vec![len, d], hidden).map_err(|e| e.to_string())?;
        let x0 = r.f64s(d).ok_or_else(short)?;
        let h_prompt = r.f64s(d).ok_or_else(short)?;
        records.push(NodeStateRecord {
            node,
            tokens,
            hidden,
            x0,
            h_prompt,
        });
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", bytes.len() - r.position()));
    }
    Ok(StateCache { header, records })
}

fn compute_record(lm: &LanguageModel, node: usize, text: &str, prompt: &PromptSpec, mode: RepMode) -> Result<NodeStateRecord> {
    let tokens = lm.tokenize(text);
    let hidden = lm.context_states(&tokens)?;
    let x0 = lm.sentence_rep(&tokens, mode)?;
    let h_prompt = lm.prompt_rep(&tokens, prompt)?;
    Ok(NodeStateRecord {
        node,
        tokens,
        hidden,
        x0,
        h_prompt,
    })
}

/// Runs the frozen backbone over every node, keeping the result in memory.
pub fn compute_cache(graph: &TagGraph, lm: &LanguageModel, prompt: &PromptSpec) -> Result<StateCache> {
    if !lm.is_frozen() {
        return Err(Error::contract("cache requires a frozen language model"));
    }
    let mode = lm.config().default_rep();
    let records = graph
        .nodes()
        .iter()
        .map(|n| compute_record(lm, n.id, &n.text, prompt, mode))
        .collect::<Result<Vec<_>>>()?;
    let header = CacheHeader {
        version: VERSION,
        d_model: lm.config().d_model,
        vocab_hash: lm.vocab().content_hash(),
        lm_hash: lm.content_hash(),
        n_nodes: records.len(),
        prompt_hash: prompt.content_hash(),
        flags: 0,
        rep_mode: mode,
    };
    Ok(StateCache { header, records })
}

/// Runs the frozen backbone over every node and writes the cache atomically.
pub fn build_cache(graph: &TagGraph, lm: &LanguageModel, prompt: &PromptSpec, path: &Path) -> Result<CacheHeader> {
    let cache = compute_cache(graph, lm, prompt)?;
    cache.save(path)?;
    Ok(cache.header)
}

/// Writes an arbitrary record set; used for imports produced elsewhere.
pub fn write_cache(header: &CacheHeader, records: &[NodeStateRecord], path: &Path) -> Result<()> {
    if header.n_nodes != records.len() {
        return Err(Error::contract("header node count differs from records"));
    }
    for (i, r) in records.iter().enumerate() {
        if r.node != i {
            return Err(Error::contract("records must be in ascending node order"));
        }
        if r.hidden.shape() != [r.tokens.len(), header.d_model]
            || r.x0.len() != header.d_model
            || r.h_prompt.len() != header.d_model
        {
            return Err(Error::dim(format!("record {i} does not match d_model {}", header.d_model)));
        }
    }
    write_atomic(path, &encode(header, records))
}

/// Reads a cache without checking it against any model.
pub fn read_cache(path: &Path) -> Result<StateCache> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|msg| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    })
}

/// Reads a cache and checks it was produced by `lm`. External caches skip
/// the hash checks but must still match `d_model`.
pub fn load_cache(path: &Path, lm: &LanguageModel) -> Result<StateCache> {
    let cache = read_cache(path)?;
    let h = &cache.header;
    if h.d_model != lm.config().d_model {
        return Err(Error::StaleCache(format!(
            "cache d_model {} vs model {}",
            h.d_model,
            lm.config().d_model
        )));
    }
    if !h.is_external() {
        if h.lm_hash != lm.content_hash() {
            return Err(Error::StaleCache(format!(
                "cache built by model {}, current model {}",
                h.lm_hash.short(),
                lm.content_hash().short()
            )));
        }
        if h.vocab_hash != lm.vocab().content_hash() {
            return Err(Error::StaleCache("vocabulary hash differs".into()));
        }
    }
    Ok(cache)
}

impl StateCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_cache(&self.header, &self.records, path)
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, node: usize) -> Result<&NodeStateRecord> {
        self.records.get(node).ok_or(Error::Index {
            index: node,
            len: self.records.len(),
        })
    }

    pub fn records(&self) -> &[NodeStateRecord] {
        &self.records
    }

    /// Errors unless the cache was built with `prompt` (external caches pass).
    pub fn expect_prompt(&self, prompt: &PromptSpec) -> Result<()> {
        if !self.header.is_external() && self.header.prompt_hash != prompt.content_hash() {
            return Err(Error::StaleCache("prompt hash differs".into()));
        }
        Ok(())
    }

    /// Stacked sentence representations, `n x d_model`.
    pub fn x0_matrix(&self) -> Tensor {
        self.stack(|r| &r.x0)
    }

    /// Stacked prompt representations, `n x d_model`.
    pub fn prompt_matrix(&self) -> Tensor {
        self.stack(|r| &r.h_prompt)
    }

    fn stack(&self, f: impl Fn(&NodeStateRecord) -> &Vec<f64>) -> Tensor {
        let d = self.header.d_model;
        let mut data = Vec::with_capacity(self.records.len() * d);
        for r in &self.records {
            data.extend_from_slice(f(r));
        }
        Tensor::new(vec![self.records.len(), d], data).expect("records match d_model")
    }

    pub fn total_floats(&self) -> usize {
        let d = self.header.d_model;
        self.records
            .iter()
            .map(|r| r.hidden.numel() + 2 * d)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: Vec<usize>,
    pub max_abs_diff: f64,
    /// Nodes whose recomputation differs, with their worst deviation.
    pub mismatches: Vec<(usize, f64)>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d.is_nan() {
                f64::INFINITY
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}

/// Recomputes a seeded sample of `ceil(fraction * n)` distinct nodes and
/// compares every stored value.
pub fn verify_cache(
    cache: &StateCache,
    graph: &TagGraph,
    lm: &LanguageModel,
    prompt: &PromptSpec,
    fraction: f64,
    seed: u64,
) -> Result<VerifyReport> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("sample fraction must lie in [0, 1]"));
    }
    let n = cache.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng(seed, "cache.verify"));
    ids.truncate(k);
    ids.sort_unstable();
    let mut report = VerifyReport {
        checked: ids.clone(),
        max_abs_diff: 0.0,
        mismatches: Vec::new(),
    };
    for id in ids {
        let stored = cache.record(id)?;
        let text = graph.nodes().get(id).map(|n| n.text.as_str()).unwrap_or("");
        let fresh = compute_record(lm, id, text, prompt, cache.header.rep_mode)?;
        let diff = if fresh.tokens != stored.tokens {
            f64::INFINITY
        } else {
            max_diff(fresh.hidden.data(), stored.hidden.data())
                .max(max_diff(&fresh.x0, &stored.x0))
                .max(max_diff(&fresh.h_prompt, &stored.h_prompt))
        };
        report.max_abs_diff = report.max_abs_diff.max(diff);
        if diff != 0.0 {
            report.mismatches.push((id, diff));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TagNode;
    use crate::lm::{LmConfig, Vocab};

    fn lm(seed: u64) -> LanguageModel {
        let vocab = Vocab::build(["a b c d e f g h"], 64);
        let cfg = LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            seed,
            ..Default::default()
        };
        let mut m = LanguageModel::new(cfg, vocab).unwrap();
        m.freeze();
        m
    }

    fn graph(texts: &[&str]) -> TagGraph {
        let nodes = texts
            .iter()
            .enumerate()
            .map(|(id, t)| TagNode {
                id,
                text: t.to_string(),
                label: Some(0),
            })
            .collect();
        let edges: Vec<(usize, usize)> = (1..texts.len()).map(|i| (i - 1, i)).collect();
        TagGraph::new(nodes, &edges).unwrap()
    }

    #[test]
    fn single_node_matches_fresh_forward() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gadc");
        let m = lm(1);
        let g = graph(&["a b c"]);
        let h = build_cache(&g, &m, &PromptSpec::empty(), &p).unwrap();
        assert_eq!(h.n_nodes, 1);
        let c = load_cache(&p, &m).unwrap();
        let r = c.record(0).unwrap();
        assert_eq!(r.hidden, m.lm_forward(&m.tokenize("a b c")).unwrap());
        assert_eq!(r.x0, r.hidden.row(r.tokens.len() - 1));
    }

    #[test]
    fn empty_text_has_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gadc");
        let m = lm(1);
        build_cache(&graph(&["", "a"]), &m, &PromptSpec::empty(), &p).unwrap();
        let c = load_cache(&p, &m).unwrap();
        assert_eq!(c.record(0).unwrap().hidden.rows(), 1);
    }

    #[test]
    fn unfrozen_model_is_rejected() {
        let vocab = Vocab::build(["a"], 16);
        let cfg = LmConfig { d_model: 8, n_heads: 2, d_ff: 8, n_layers: 1, ..Default::default() };
        let m = LanguageModel::new(cfg, vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = build_cache(&graph(&["a"]), &m, &PromptSpec::empty(), &dir.path().join("c"));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn stale_and_external() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gadc");
        let g = graph(&["a b", "c"]);
        build_cache(&g, &lm(1), &PromptSpec::empty(), &p).unwrap();
        assert!(matches!(load_cache(&p, &lm(2)), Err(Error::StaleCache(_))));
        let mut c = read_cache(&p).unwrap();
        c.header.flags |= FLAG_EXTERNAL;
        write_cache(&c.header, &c.records, &p).unwrap();
        assert!(load_cache(&p, &lm(2)).is_ok());
    }

    #[test]
    fn prompt_hash_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gadc");
        let m = lm(1);
        let prompt = m.prompt("g h");
        build_cache(&graph(&["a"]), &m, &prompt, &p).unwrap();
        let c = load_cache(&p, &m).unwrap();
        assert!(c.expect_prompt(&prompt).is_ok());
        assert!(c.expect_prompt(&PromptSpec::empty()).is_err());
    }

    #[test]
    fn every_truncation_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gadc");
        let m = lm(1);
        build_cache(&graph(&["a b", "c d e"]), &m, &PromptSpec::empty(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let q = dir.path().join("t.gadc");
        for cut in (0..bytes.len()).step_by(7) {
            std::fs::write(&q, &bytes[..cut]).unwrap();
            assert!(matches!(load_cache(&q, &m), Err(Error::Corrupt { .. })), "cut {cut}");
        }
    }

    #[test]
    fn full_fraction_visits_each_node_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gadc");
        let m = lm(1);
        let g = graph(&["a", "b", "c", "d", "e"]);
        build_cache(&g, &m, &PromptSpec::empty(), &p).unwrap();
        let c = load_cache(&p, &m).unwrap();
        let r = verify_cache(&c, &g, &m, &PromptSpec::empty(), 1.0, 0).unwrap();
        assert_eq!(r.checked, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.ok());
    }
}
