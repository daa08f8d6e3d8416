use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gadk::adapter::AdapterModel;
use gadk::cache::{build_cache, load_cache, verify_cache, StateCache};
use gadk::data::{load_tag, make_splits, synth_generate, BayesReport, Splits, TagGraph};
use gadk::eval::{
    run_matrix, train_lm, ExperimentPlan, MatrixReport, MetricReport, PipelineConfig, PlanEntry,
    SeedMetric, Variant, Workspace,
};
use gadk::gradsuite::{run_suite, DEFAULT_CASES};
use gadk::lm::{load_lm, save_lm, LanguageModel};
use gadk::training::{
    apply_ablation, evaluate, finetune_adapter, pretrain_adapter, NodeInputs, RunRecord,
};
use gadk::util::write_atomic;

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "gadk", version, about = "Graph adapters for a frozen language model")]
struct Cli {
    /// Seed for generation and training; GADK_SEED takes precedence.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory for all artifacts.
    #[arg(long, global = true, default_value = "gadk-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic text-attributed graph with splits.
    GenData,
    /// Train and freeze the language model on the node texts.
    TrainLm,
    /// Run the frozen model over every node and store its hidden states.
    BuildCache,
    /// Recompute a sample of cached nodes and compare.
    VerifyCache {
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
    /// Language-structure pretraining of the adapter.
    Pretrain,
    /// Prompt-aware fine-tuning on the labeled split.
    Finetune {
        /// Start from a fresh adapter instead of the pretrained checkpoint.
        #[arg(long)]
        no_pretrain: bool,
    },
    /// Score the fine-tuned checkpoint, or run a variant matrix.
    Eval(EvalArgs),
    /// Run the ablation matrix.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Finite-difference checks of every op and model.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Run the variant matrix instead of scoring a checkpoint.
    #[arg(long)]
    matrix: bool,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

enum Failure {
    Usage(String),
    Invalid(String),
}

impl From<gadk::Error> for Failure {
    fn from(e: gadk::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    cfg: PipelineConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, what: &str) -> Result<PathBuf, Failure> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Failure::Invalid(format!("{what} required: {} not found", p.display())))
        }
    }

    fn graph(&self) -> Result<TagGraph, Failure> {
        let nodes = self.require("nodes.jsonl", "node file")?;
        let edges = self.require("edges.txt", "edge file")?;
        let mut g = load_tag(&nodes, &edges)?;
        let sp = self.path("splits.json");
        if sp.exists() {
            g.set_splits(Splits::load(&sp)?)?;
        }
        Ok(g)
    }

    fn lm(&self) -> Result<LanguageModel, Failure> {
        Ok(load_lm(&self.require("lm.galm", "language model")?)?)
    }

    fn cache(&self, lm: &LanguageModel) -> Result<StateCache, Failure> {
        let cache = load_cache(&self.require("cache.gadc", "cache")?, lm)?;
        cache.expect_prompt(&lm.prompt(&self.cfg.prompt))?;
        Ok(cache)
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Outcome {
        let text = serde_json::to_string_pretty(value)?;
        write_atomic(&self.path(name), text.as_bytes())?;
        Ok(())
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    match std::env::var("GADK_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("GADK_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(flag),
    }
}

fn context(cli: &Cli) -> Result<Ctx, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let seed = resolve_seed(cli.seed)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
        cfg.lm.seed = s;
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    Ok(Ctx {
        seed: seed.unwrap_or(cfg.finetune.seed),
        cfg,
        out: cli.out.clone(),
    })
}

fn gen_data(ctx: &Ctx) -> Outcome {
    let out = synth_generate(&ctx.cfg.synth)?;
    out.graph.save(&ctx.path("nodes.jsonl"), &ctx.path("edges.txt"))?;
    let splits = make_splits(out.graph.n_nodes(), ctx.cfg.split_ratios, ctx.cfg.synth.seed)?;
    splits.save(&ctx.path("splits.json"))?;
    ctx.write_json("bayes.json", &out.bayes)?;
    println!(
        "{} nodes, {} edges; bayes text-only {:.4}, structure-only {:.4}, joint {:.4}",
        out.graph.n_nodes(),
        out.graph.n_edges(),
        out.bayes.text_only,
        out.bayes.structure_only,
        out.bayes.joint
    );
    Ok(())
}

fn train_lm_cmd(ctx: &Ctx) -> Outcome {
    let graph = ctx.graph()?;
    let lm = train_lm(&graph, &ctx.cfg)?;
    save_lm(&lm, &ctx.path("lm.galm"))?;
    println!("frozen language model {}", lm.content_hash().short());
    Ok(())
}

fn build_cache_cmd(ctx: &Ctx) -> Outcome {
    let graph = ctx.graph()?;
    let lm = ctx.lm()?;
    let prompt = lm.prompt(&ctx.cfg.prompt);
    let header = build_cache(&graph, &lm, &prompt, &ctx.path("cache.gadc"))?;
    println!("cached {} nodes for model {}", header.n_nodes, header.lm_hash.short());
    Ok(())
}

fn verify_cache_cmd(ctx: &Ctx, fraction: f64) -> Outcome {
    let graph = ctx.graph()?;
    let lm = ctx.lm()?;
    let cache = ctx.cache(&lm)?;
    let prompt = lm.prompt(&ctx.cfg.prompt);
    let report = verify_cache(&cache, &graph, &lm, &prompt, fraction, ctx.seed)?;
    println!(
        "checked {} nodes, max |diff| {:e}, {} mismatches",
        report.checked.len(),
        report.max_abs_diff,
        report.mismatches.len()
    );
    if report.ok() {
        Ok(())
    } else {
        Err(Failure::Invalid("cache does not match the model".into()))
    }
}

fn pretrain_cmd(ctx: &Ctx) -> Outcome {
    let cache_path = ctx.path("cache.gadc");
    if !cache_path.exists() {
        return Err(Failure::Invalid(format!("cache required: run build-cache first ({} missing)", cache_path.display())));
    }
    let graph = ctx.graph()?;
    let lm = ctx.lm()?;
    let cache = ctx.cache(&lm)?;
    let cfg = &ctx.cfg.pretrain;
    let gnn_cfg = cfg.ablations.gnn_config(&ctx.cfg.gnn);
    let init = AdapterModel::new(gnn_cfg, lm.config().d_model, cfg.seed)?;
    let (model, mut record) = pretrain_adapter(&graph, &cache, &lm, &init, cfg)?;
    let ckpt = ctx.path("pretrained.gadp");
    model.save(&ckpt, &record.config_hash)?;
    record.checkpoint = Some(ckpt.display().to_string());
    ctx.write_json("pretrain_record.json", &record)?;
    let last = record.epochs.last().map_or(f64::NAN, |e| e.train_loss);
    println!(
        "pretrained {} epochs: loss {last:.4}, frozen-model loss {:.4}",
        record.epochs.len(),
        record.lm_only_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn finetune_cmd(ctx: &Ctx, no_pretrain: bool) -> Outcome {
    let graph = ctx.graph()?;
    let splits = graph.splits()?.clone();
    let lm = ctx.lm()?;
    let cache = ctx.cache(&lm)?;
    let mut cfg = ctx.cfg.finetune.clone();
    cfg.ablations.no_pretrain |= no_pretrain;
    let base = if cfg.ablations.no_pretrain {
        AdapterModel::new(cfg.ablations.gnn_config(&ctx.cfg.gnn), lm.config().d_model, cfg.seed)?
    } else {
        AdapterModel::load(&ctx.require("pretrained.gadp", "pretrained adapter")?)?.0
    };
    let model = apply_ablation(&base, &cfg)?;
    let inputs = NodeInputs::new(&graph, &cache, cfg.ablations.no_prompt)?;
    let (model, mut record) = finetune_adapter(&model, &inputs, &splits, &cfg)?;
    let ckpt = ctx.path("finetuned.gadp");
    model.save(&ckpt, &record.config_hash)?;
    record.checkpoint = Some(ckpt.display().to_string());
    ctx.write_json("finetune_record.json", &record)?;
    println!(
        "fine-tuned: best epoch {}, test accuracy {:.4}",
        record.best_epoch.unwrap_or(0),
        record.test_accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn workspace(ctx: &Ctx) -> Result<Workspace, Failure> {
    let graph = ctx.graph()?;
    let lm = ctx.lm()?;
    let cache = ctx.cache(&lm)?;
    let bayes_path = ctx.path("bayes.json");
    let bayes: Option<BayesReport> = if bayes_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(bayes_path)?)?)
    } else {
        None
    };
    let prompt = lm.prompt(&ctx.cfg.prompt);
    Ok(Workspace::new(graph, bayes, lm, cache, prompt)?)
}

fn emit_matrix(ctx: &Ctx, report: &MatrixReport, name: &str) -> Outcome {
    write_atomic(&ctx.path(name), report.to_json().as_bytes())?;
    print!("{}", report.render_table());
    if report.reports.is_empty() {
        return Err(Failure::Invalid("every run failed".into()));
    }
    Ok(())
}

fn eval_cmd(ctx: &Ctx, args: &EvalArgs) -> Outcome {
    if args.matrix || args.variants.is_some() {
        let seeds = args.seeds.clone().unwrap_or_else(|| ctx.cfg.seeds.clone());
        let entries = match &args.variants {
            Some(names) => names
                .iter()
                .map(|n| Variant::parse(n).map(PlanEntry::new))
                .collect::<gadk::Result<Vec<_>>>()?,
            None => ExperimentPlan::default_matrix(&seeds).entries,
        };
        let ws = workspace(ctx)?;
        let report = run_matrix(&ws, &ctx.cfg, &ExperimentPlan { entries, seeds })?;
        return emit_matrix(ctx, &report, "matrix.json");
    }
    let graph = ctx.graph()?;
    let splits = graph.splits()?.clone();
    let lm = ctx.lm()?;
    let cache = ctx.cache(&lm)?;
    let (model, config_hash) = AdapterModel::load(&ctx.require("finetuned.gadp", "fine-tuned adapter")?)?;
    if model.task.is_none() {
        return Err(Failure::Invalid("checkpoint has no task head; run finetune".into()));
    }
    let inputs = NodeInputs::new(&graph, &cache, ctx.cfg.finetune.ablations.no_prompt)?;
    let (accuracy, roc_auc) = evaluate(&model, &inputs, &splits.test)?;
    let rec_path = ctx.path("finetune_record.json");
    let record: Option<RunRecord> = if rec_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(rec_path)?)?)
    } else {
        None
    };
    let seed = record.as_ref().map_or(ctx.seed, |r| r.seed);
    let report = MetricReport::from_seeds(
        "graphadapter".into(),
        vec![SeedMetric {
            seed,
            accuracy,
            roc_auc,
            train_time_s: record.map_or(0.0, |r| r.wall_time_s),
        }],
        config_hash,
    );
    ctx.write_json("report.json", &report)?;
    match roc_auc {
        Some(a) => println!("test accuracy {accuracy:.4}, roc_auc {a:.4}"),
        None => println!("test accuracy {accuracy:.4}"),
    }
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, seeds: Option<Vec<u64>>) -> Outcome {
    let seeds = seeds.unwrap_or_else(|| ctx.cfg.seeds.clone());
    let ws = workspace(ctx)?;
    let report = run_matrix(&ws, &ctx.cfg, &ExperimentPlan::ablation_matrix(&seeds))?;
    emit_matrix(ctx, &report, "ablation.json")
}

fn gradcheck_cmd(seed: u64, cases: usize) -> Outcome {
    if cases == 0 {
        return Err(Failure::Usage("--cases must be positive".into()));
    }
    let report = run_suite(cases, seed)?;
    for e in &report.entries {
        println!("{:<26} {:>4} cases  max rel err {:.3e}", e.name, e.cases, e.max_rel_error);
    }
    println!("max relative error: {:.3e}", report.max_rel_error());
    if report.passed(GRAD_TOL) {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("gradient check exceeded {GRAD_TOL:e}")))
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    if let Command::Gradcheck { cases } = cli.command {
        return gradcheck_cmd(resolve_seed(cli.seed)?.unwrap_or(0), cases);
    }
    let ctx = context(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainLm => train_lm_cmd(&ctx),
        Command::BuildCache => build_cache_cmd(&ctx),
        Command::VerifyCache { fraction } => verify_cache_cmd(&ctx, *fraction),
        Command::Pretrain => pretrain_cmd(&ctx),
        Command::Finetune { no_pretrain } => finetune_cmd(&ctx, *no_pretrain),
        Command::Eval(args) => eval_cmd(&ctx, args),
        Command::Ablate { seeds } => ablate_cmd(&ctx, seeds.clone()),
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
