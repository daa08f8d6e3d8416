//! Experiment plans, variant runners and metric reports.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterModel;
use crate::cache::{compute_cache, StateCache};
use crate::data::{make_splits, synth_generate, BayesReport, Splits, SynthConfig, TagGraph};
use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::lm::{encode_corpus, BackboneTrainConfig, LanguageModel, LmConfig, PromptSpec, Vocab};
use crate::metrics::{median, spread};
use crate::training::{
    apply_ablation, finetune, finetune_adapter, pretrain_adapter, Ablations, GnnOnly, LmMlp,
    NodeInputs, RunRecord, TrainConfig,
};
use crate::util::{Digest, Hasher};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LmMlp,
    GnnOnly,
    GraphadapterNoPre,
    Graphadapter,
    MlpControl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::LmMlp,
        Variant::GnnOnly,
        Variant::GraphadapterNoPre,
        Variant::Graphadapter,
        Variant::MlpControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LmMlp => "lm_mlp",
            Variant::GnnOnly => "gnn_only",
            Variant::GraphadapterNoPre => "graphadapter_no_pre",
            Variant::Graphadapter => "graphadapter",
            Variant::MlpControl => "mlp_control",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Everything needed to go from a synthetic graph to metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub lm: LmConfig,
    pub lm_train: BackboneTrainConfig,
    /// Task prompt appended to node text at fine-tuning time.
    pub prompt: String,
    pub gnn: GnnConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub split_ratios: [f64; 3],
    pub seeds: Vec<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: SynthConfig::default(),
            lm: LmConfig::default(),
            lm_train: BackboneTrainConfig::default(),
            prompt: "this node is".into(),
            gnn: GnnConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 100,
                batch_size: 64,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            split_ratios: [0.03, 0.03, 0.94],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.lm.validate()?;
        self.gnn.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> Digest {
        Digest::of(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// One row of an experiment plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub variant: Variant,
    #[serde(default)]
    pub ablations: Ablations,
    /// For `gnn_only`: start the encoder from pretrained adapter weights.
    #[serde(default)]
    pub pretrained_gnn: bool,
}

impl PlanEntry {
    pub fn new(variant: Variant) -> Self {
        PlanEntry {
            variant,
            ablations: Ablations::default(),
            pretrained_gnn: false,
        }
    }

    pub fn with(variant: Variant, switches: &[&str]) -> Result<Self> {
        Ok(PlanEntry {
            variant,
            ablations: Ablations::from_names(switches)?,
            pretrained_gnn: false,
        })
    }

    /// Row label, e.g. `graphadapter+no_prompt`.
    pub fn label(&self) -> String {
        let mut s = self.variant.name().to_string();
        if self.pretrained_gnn {
            s.push_str("+pretrained");
        }
        for n in self.ablations.names() {
            s.push('+');
            s.push_str(n);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub entries: Vec<PlanEntry>,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    /// The five variants over the given seeds.
    pub fn default_matrix(seeds: &[u64]) -> Self {
        ExperimentPlan {
            entries: Variant::ALL.into_iter().map(PlanEntry::new).collect(),
            seeds: seeds.to_vec(),
        }
    }

    /// Ablation rows: the switched GraphAdapter variants plus the control
    /// MLP with and without pretraining.
    pub fn ablation_matrix(seeds: &[u64]) -> Self {
        let mut entries = vec![PlanEntry::new(Variant::Graphadapter), PlanEntry::new(Variant::GraphadapterNoPre)];
        for s in ["self_loops_only", "no_res_label", "no_prompt", "reinit_fusion", "reinit_gnn"] {
            entries.push(PlanEntry::with(Variant::Graphadapter, &[s]).expect("known switch"));
        }
        entries.push(PlanEntry::new(Variant::MlpControl));
        entries.push(PlanEntry::with(Variant::MlpControl, &["no_pretrain"]).expect("known switch"));
        ExperimentPlan {
            entries,
            seeds: seeds.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("plan needs at least one seed"));
        }
        if self.entries.is_empty() {
            return Err(Error::config("plan needs at least one entry"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub seed: u64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    pub train_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub seeds: Vec<SeedMetric>,
    /// Median test accuracy over seeds.
    pub median: f64,
    /// Population standard deviation of test accuracy over seeds.
    pub spread: f64,
    pub config_hash: Digest,
}

impl MetricReport {
    pub fn from_seeds(variant: String, seeds: Vec<SeedMetric>, config_hash: Digest) -> Self {
        let acc: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
        MetricReport {
            variant,
            median: median(&acc),
            spread: spread(&acc),
            seeds,
            config_hash,
        }
    }

    pub fn median_roc_auc(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.seeds.iter().map(|s| s.roc_auc).collect();
        v.filter(|v| !v.is_empty()).map(|v| median(&v))
    }

    /// Copy with wall-time fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for s in &mut r.seeds {
            s.train_time_s = 0.0;
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub reports: Vec<MetricReport>,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayes: Option<BayesReport>,
}

impl MatrixReport {
    pub fn get(&self, label: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.variant == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table of medians and spreads.
    pub fn render_table(&self) -> String {
        let width = self
            .reports
            .iter()
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>5}", "variant", "median", "spread", "auc", "seeds");
        for r in &self.reports {
            let auc = r
                .median_roc_auc()
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8}  {:>5}",
                r.variant,
                r.median,
                r.spread,
                auc,
                r.seeds.len()
            );
        }
        for f in &self.failures {
            let _ = writeln!(out, "FAILED {} seed {}: {}", f.variant, f.seed, f.error);
        }
        if let Some(b) = &self.bayes {
            let _ = writeln!(
                out,
                "bayes: text-only {:.4}, structure-only {:.4}, joint {:.4}",
                b.text_only, b.structure_only, b.joint
            );
        }
        out
    }
}

/// Shared inputs of every cell in a matrix: graph, frozen LM and cache.
pub struct Workspace {
    pub graph: TagGraph,
    pub bayes: Option<BayesReport>,
    pub lm: LanguageModel,
    pub cache: StateCache,
    pub prompt: PromptSpec,
    pretrained: RefCell<BTreeMap<String, (AdapterModel, RunRecord)>>,
}

/// Trains and freezes the backbone on the node texts.
pub fn train_lm(graph: &TagGraph, cfg: &PipelineConfig) -> Result<LanguageModel> {
    let texts: Vec<&str> = graph.nodes().iter().map(|n| n.text.as_str()).collect();
    let vocab = Vocab::build(
        texts.iter().copied().chain(std::iter::once(cfg.prompt.as_str())),
        cfg.lm.vocab_size,
    );
    let mut lm = LanguageModel::new(cfg.lm.clone(), vocab)?;
    let corpus = encode_corpus(&lm, texts.iter().copied());
    lm.train_backbone(&corpus, &cfg.lm_train)?;
    lm.freeze();
    Ok(lm)
}

impl Workspace {
    pub fn new(graph: TagGraph, bayes: Option<BayesReport>, lm: LanguageModel, cache: StateCache, prompt: PromptSpec) -> Result<Self> {
        if cache.len() != graph.n_nodes() {
            return Err(Error::StaleCache("cache and graph node counts differ".into()));
        }
        cache.expect_prompt(&prompt)?;
        Ok(Workspace {
            graph,
            bayes,
            lm,
            cache,
            prompt,
            pretrained: RefCell::new(BTreeMap::new()),
        })
    }

    /// Generates the synthetic graph, trains the backbone and fills the cache.
    pub fn synthetic(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = synth_generate(&cfg.synth)?;
        let lm = train_lm(&out.graph, cfg)?;
        let prompt = lm.prompt(&cfg.prompt);
        let cache = compute_cache(&out.graph, &lm, &prompt)?;
        Workspace::new(out.graph, Some(out.bayes), lm, cache, prompt)
    }

    fn splits(&self, cfg: &PipelineConfig, seed: u64) -> Result<Splits> {
        match &self.graph.splits {
            Some(s) => Ok(s.clone()),
            None => make_splits(self.graph.n_nodes(), cfg.split_ratios, seed),
        }
    }

    /// Pretrained adapter for `(seed, encoder config, loss switch)`, memoized.
    pub fn pretrained(&self, cfg: &PipelineConfig, ablations: &Ablations, seed: u64) -> Result<(AdapterModel, RunRecord)> {
        let gnn_cfg = ablations.gnn_config(&cfg.gnn);
        let key = format!(
            "{seed}|{}|{}",
            serde_json::to_string(&gnn_cfg).expect("serializable"),
            ablations.no_res_label
        );
        if let Some(hit) = self.pretrained.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let init = AdapterModel::new(gnn_cfg, self.lm.config().d_model, seed)?;
        let pcfg = TrainConfig {
            seed,
            ablations: Ablations {
                no_res_label: ablations.no_res_label,
                ..Ablations::default()
            },
            ..cfg.pretrain.clone()
        };
        let (model, rec) = pretrain_adapter(&self.graph, &self.cache, &self.lm, &init, &pcfg)?;
        let entry = (model, rec);
        self.pretrained.borrow_mut().insert(key, entry.clone());
        Ok(entry)
    }
}

/// Trains and scores one plan entry for one seed.
pub fn run_variant(ws: &Workspace, cfg: &PipelineConfig, entry: &PlanEntry, seed: u64) -> Result<SeedMetric> {
    let start = Instant::now();
    let splits = ws.splits(cfg, seed)?;
    let mut ab = entry.ablations.clone();
    if entry.variant == Variant::MlpControl {
        ab.mlp_control = true;
    }
    if entry.variant == Variant::GraphadapterNoPre {
        ab.no_pretrain = true;
    }
    let inputs = NodeInputs::new(&ws.graph, &ws.cache, ab.no_prompt)?;
    let ft = TrainConfig {
        seed,
        ablations: ab.clone(),
        ..cfg.finetune.clone()
    };
    let d = ws.lm.config().d_model;
    let mut extra_time = 0.0;
    let record = match entry.variant {
        Variant::LmMlp => {
            let mut clf = LmMlp::new(d, inputs.n_classes, seed)?;
            finetune(&mut clf, &inputs, &splits, &ft)?
        }
        Variant::GnnOnly => {
            let mut clf = if entry.pretrained_gnn {
                let (m, rec) = ws.pretrained(cfg, &ab, seed)?;
                extra_time = rec.wall_time_s;
                GnnOnly::from_adapter(&m, inputs.n_classes, seed)?
            } else {
                GnnOnly::new(ab.gnn_config(&cfg.gnn), d, inputs.n_classes, seed)?
            };
            finetune(&mut clf, &inputs, &splits, &ft)?
        }
        Variant::Graphadapter | Variant::GraphadapterNoPre | Variant::MlpControl => {
            let base = if ab.no_pretrain {
                AdapterModel::new(ab.gnn_config(&cfg.gnn), d, seed)?
            } else {
                let (m, rec) = ws.pretrained(cfg, &ab, seed)?;
                extra_time = rec.wall_time_s;
                m
            };
            let model = apply_ablation(&base, &ft)?;
            finetune_adapter(&model, &inputs, &splits, &ft)?.1
        }
    };
    Ok(SeedMetric {
        seed,
        accuracy: record.test_accuracy.expect("finetune scores the test split"),
        roc_auc: record.test_roc_auc,
        train_time_s: start.elapsed().as_secs_f64() + extra_time,
    })
}

fn entry_hash(cfg: &PipelineConfig, entry: &PlanEntry) -> Digest {
    let mut h = Hasher::new();
    h.bytes(&cfg.content_hash().0);
    h.bytes(&serde_json::to_vec(entry).expect("serializable"));
    h.finish()
}

/// Runs every entry for every seed; failures are recorded and skipped.
pub fn run_matrix(ws: &Workspace, cfg: &PipelineConfig, plan: &ExperimentPlan) -> Result<MatrixReport> {
    plan.validate()?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for entry in &plan.entries {
        let mut seeds = Vec::new();
        for &seed in &plan.seeds {
            match run_variant(ws, cfg, entry, seed) {
                Ok(m) => seeds.push(m),
                Err(e) => failures.push(RunFailure {
                    variant: entry.label(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
        if !seeds.is_empty() {
            reports.push(MetricReport::from_seeds(entry.label(), seeds, entry_hash(cfg, entry)));
        }
    }
    Ok(MatrixReport {
        reports,
        failures,
        bayes: ws.bayes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!(Variant::parse("glem").is_err());
    }

    #[test]
    fn labels_include_switches() {
        let e = PlanEntry::with(Variant::Graphadapter, &["no_prompt"]).unwrap();
        assert_eq!(e.label(), "graphadapter+no_prompt");
    }

    #[test]
    fn report_json_round_trips() {
        let r = MetricReport::from_seeds(
            "lm_mlp".into(),
            vec![
                SeedMetric { seed: 0, accuracy: 0.1 + 0.2, roc_auc: Some(2.0 / 3.0), train_time_s: 1.25 },
                SeedMetric { seed: 1, accuracy: 0.7, roc_auc: None, train_time_s: 0.5 },
            ],
            Digest::of(b"x"),
        );
        let m = MatrixReport { reports: vec![r], failures: vec![], bayes: None };
        let text = m.to_json();
        let back: MatrixReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let p = ExperimentPlan { entries: vec![PlanEntry::new(Variant::LmMlp)], seeds: vec![] };
        assert!(p.validate().is_err());
    }
}
