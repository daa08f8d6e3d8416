//! Synthetic text-attributed graphs with a planted text bit and structure bit.
//!
//! Each community `c` carries two independent bits: `a(c) = c & 1` and
//! `b(c) = (c >> 1) & 1`. Blocks are paired by swapping those bits
//! (`partner(c)`), and the block model links a node to its partner block with
//! probability `p_in` and to every other block with `p_out`. Consequently the
//! text bits of a node's neighbors reveal `b` of its own community, which its
//! own text only hints at through a few topic words.
//!
//! * text bit `t = a(c) ^ flip(rho_text)`, realized as tokens;
//! * structure bit `s = a(majority neighbor community) ^ flip(rho_struct)`;
//! * label `y = rule(t, s)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{TagGraph, TagNode};
use crate::error::{Error, Result};
use crate::util::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    Xor,
    And,
    TextOnly,
    StructOnly,
}

impl LabelRule {
    pub fn apply(self, text_bit: bool, struct_bit: bool) -> bool {
        match self {
            LabelRule::Xor => text_bit ^ struct_bit,
            LabelRule::And => text_bit & struct_bit,
            LabelRule::TextOnly => text_bit,
            LabelRule::StructOnly => struct_bit,
        }
    }
}

/// Per-position token mixture for node texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenModel {
    /// Words per text-bit value (`ta*` / `tb*`).
    pub signal_words: usize,
    /// Words per structure-topic side (`sa*` / `sb*`).
    pub topic_words: usize,
    pub filler_words: usize,
    /// Probability that a position draws from the text-bit words.
    pub p_signal: f64,
    /// Probability that a position draws from the topic words of `b(c)`.
    pub p_topic: f64,
    /// Probability that a topic word matches `b(c)` rather than its complement.
    pub topic_fidelity: f64,
}

impl Default for TokenModel {
    fn default() -> Self {
        TokenModel {
            signal_words: 6,
            topic_words: 6,
            filler_words: 12,
            p_signal: 0.35,
            p_topic: 0.25,
            topic_fidelity: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub text_len_min: usize,
    pub text_len_max: usize,
    pub rho_text: f64,
    pub rho_struct: f64,
    pub rule: LabelRule,
    pub tokens: TokenModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 2000,
            n_communities: 4,
            p_in: 0.012,
            p_out: 0.0008,
            text_len_min: 6,
            text_len_max: 12,
            rho_text: 0.15,
            rho_struct: 0.15,
            rule: LabelRule::And,
            tokens: TokenModel::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_in,
            self.p_out,
            self.rho_text,
            self.rho_struct,
            self.tokens.p_signal,
            self.tokens.p_topic,
            self.tokens.topic_fidelity,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.tokens.p_signal + self.tokens.p_topic > 1.0 {
            return Err(Error::config("p_signal + p_topic must not exceed 1"));
        }
        if self.n_communities == 0 || self.n_nodes < self.n_communities {
            return Err(Error::config("need 1 <= n_communities <= n_nodes"));
        }
        if self.text_len_min > self.text_len_max {
            return Err(Error::config("text_len_min > text_len_max"));
        }
        let t = &self.tokens;
        let need = |p: f64, n: usize| p == 0.0 || n > 0;
        if !need(t.p_signal, t.signal_words)
            || !need(t.p_topic, t.topic_words)
            || !need(1.0 - t.p_signal - t.p_topic, t.filler_words)
        {
            return Err(Error::config("a token source with positive mass has no words"));
        }
        Ok(())
    }

    pub fn partner(&self, c: usize) -> usize {
        let p = (c & !3) | ((c & 1) << 1) | ((c >> 1) & 1);
        if p < self.n_communities {
            p
        } else {
            c
        }
    }
}

/// Planted latent variables of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latent {
    pub community: usize,
    pub text_bit: bool,
    pub struct_bit: bool,
}

/// Bayes-optimal accuracies of observers of the planted bits, computed by
/// exact enumeration of the realized (text bit, structure bit, label) cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesReport {
    pub n_nodes: usize,
    pub text_only: f64,
    pub structure_only: f64,
    pub joint: f64,
    pub positive_rate: f64,
}

impl BayesReport {
    pub fn from_latents(latents: &[Latent], rule: LabelRule) -> Self {
        // counts[t][s][y]
        let mut counts = [[[0usize; 2]; 2]; 2];
        for l in latents {
            let y = rule.apply(l.text_bit, l.struct_bit);
            counts[l.text_bit as usize][l.struct_bit as usize][y as usize] += 1;
        }
        let n = latents.len().max(1) as f64;
        let text_only: usize = (0..2)
            .map(|t| {
                let y0 = counts[t][0][0] + counts[t][1][0];
                let y1 = counts[t][0][1] + counts[t][1][1];
                y0.max(y1)
            })
            .sum();
        let structure_only: usize = (0..2)
            .map(|s| {
                let y0 = counts[0][s][0] + counts[1][s][0];
                let y1 = counts[0][s][1] + counts[1][s][1];
                y0.max(y1)
            })
            .sum();
        let joint: usize = (0..2)
            .flat_map(|t| (0..2).map(move |s| (t, s)))
            .map(|(t, s)| counts[t][s][0].max(counts[t][s][1]))
            .sum();
        let positives: usize = (0..2)
            .flat_map(|t| (0..2).map(move |s| (t, s)))
            .map(|(t, s)| counts[t][s][1])
            .sum();
        BayesReport {
            n_nodes: latents.len(),
            text_only: text_only as f64 / n,
            structure_only: structure_only as f64 / n,
            joint: joint as f64 / n,
            positive_rate: positives as f64 / n,
        }
    }
}

pub struct SynthOutput {
    pub graph: TagGraph,
    pub latents: Vec<Latent>,
    pub bayes: BayesReport,
}

fn flip(r: &mut ChaCha8Rng, bit: bool, p: f64) -> bool {
    if r.random::<f64>() < p {
        !bit
    } else {
        bit
    }
}

fn word(prefix: &str, r: &mut ChaCha8Rng, n: usize) -> String {
    format!("{prefix}{}", r.random_range(0..n))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let mut r_comm = rng(cfg.seed, "synth.community");
    let community: Vec<usize> = (0..n)
        .map(|_| r_comm.random_range(0..cfg.n_communities))
        .collect();

    let mut r_edge = rng(cfg.seed, "synth.edges");
    let mut edges = Vec::new();
    for u in 0..n {
        let pu = cfg.partner(community[u]);
        for v in u + 1..n {
            let p = if community[v] == pu { cfg.p_in } else { cfg.p_out };
            if r_edge.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut adjacency = vec![Vec::new(); n];
    for &(u, v) in &edges {
        adjacency[u].push(v);
        adjacency[v].push(u);
    }

    let a_bit = |c: usize| c & 1 == 1;
    let b_bit = |c: usize| (c >> 1) & 1 == 1;
    let mut r_bits = rng(cfg.seed, "synth.bits");
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let text_bit = flip(&mut r_bits, a_bit(community[i]), cfg.rho_text);
        let mut tally = vec![0usize; cfg.n_communities];
        for &j in &adjacency[i] {
            tally[community[j]] += 1;
        }
        let majority = if adjacency[i].is_empty() {
            cfg.partner(community[i])
        } else {
            // ties resolve to the lowest community id
            let best = *tally.iter().max().unwrap();
            tally.iter().position(|&c| c == best).unwrap()
        };
        let struct_bit = flip(&mut r_bits, a_bit(majority), cfg.rho_struct);
        latents.push(Latent {
            community: community[i],
            text_bit,
            struct_bit,
        });
    }

    let tm = &cfg.tokens;
    let mut r_text = rng(cfg.seed, "synth.text");
    let mut nodes = Vec::with_capacity(n);
    for (i, lat) in latents.iter().enumerate() {
        let len = r_text.random_range(cfg.text_len_min..=cfg.text_len_max);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = r_text.random();
            let w = if u < tm.p_signal {
                let prefix = if lat.text_bit { "tb" } else { "ta" };
                word(prefix, &mut r_text, tm.signal_words)
            } else if u < tm.p_signal + tm.p_topic {
                let side = flip(&mut r_text, b_bit(lat.community), 1.0 - tm.topic_fidelity);
                let prefix = if side { "sb" } else { "sa" };
                word(prefix, &mut r_text, tm.topic_words)
            } else {
                word("f", &mut r_text, tm.filler_words)
            };
            words.push(w);
        }
        nodes.push(TagNode {
            id: i,
            text: words.join(" "),
            label: Some(cfg.rule.apply(lat.text_bit, lat.struct_bit) as usize),
        });
    }

    let graph = TagGraph::new(nodes, &edges)?;
    let bayes = BayesReport::from_latents(&latents, cfg.rule);
    Ok(SynthOutput {
        graph,
        latents,
        bayes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rule: LabelRule, rho: f64) -> SynthConfig {
        SynthConfig {
            n_nodes: 600,
            rule,
            rho_text: rho,
            rho_struct: rho,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn partner_is_an_involution() {
        let cfg = SynthConfig {
            n_communities: 8,
            ..SynthConfig::default()
        };
        for c in 0..8 {
            assert_eq!(cfg.partner(cfg.partner(c)), c);
        }
        assert_eq!(cfg.partner(1), 2);
        assert_eq!(cfg.partner(3), 3);
    }

    #[test]
    fn text_only_rule_without_noise() {
        let out = synth_generate(&small(LabelRule::TextOnly, 0.0)).unwrap();
        assert_eq!(out.bayes.joint, 1.0);
        assert_eq!(out.bayes.text_only, 1.0);
        assert!((out.bayes.structure_only - 0.5).abs() < 3.0 / (600f64).sqrt());
    }

    #[test]
    fn xor_marginals_are_uninformative() {
        let out = synth_generate(&small(LabelRule::Xor, 0.0)).unwrap();
        let bound = 0.5 + 3.0 / (600f64).sqrt();
        assert_eq!(out.bayes.joint, 1.0);
        assert!(out.bayes.text_only <= bound, "{:?}", out.bayes);
        assert!(out.bayes.structure_only <= bound, "{:?}", out.bayes);
    }

    #[test]
    fn joint_dominates_single_modalities() {
        for rule in [LabelRule::And, LabelRule::Xor, LabelRule::StructOnly] {
            let out = synth_generate(&small(rule, 0.15)).unwrap();
            let b = &out.bayes;
            assert!(b.joint >= b.text_only.max(b.structure_only));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = small(LabelRule::And, 0.15);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.latents, b.latents);
        let c = synth_generate(&SynthConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn graph_is_valid_and_homophilous_in_partner_blocks() {
        let cfg = small(LabelRule::And, 0.15);
        let out = synth_generate(&cfg).unwrap();
        out.graph.validate().unwrap();
        let (mut partner_edges, mut total) = (0, 0);
        for (u, v) in out.graph.edges() {
            total += 1;
            if out.latents[v].community == cfg.partner(out.latents[u].community) {
                partner_edges += 1;
            }
        }
        assert!(partner_edges as f64 > 0.6 * total as f64);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            p_in: 1.5,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg).is_err());
        let cfg = SynthConfig {
            n_nodes: 2,
            n_communities: 4,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }
}
