//! Text-attributed graph ingestion, splits, and the synthetic generator.

mod graph;
mod synth;

pub use graph::{load_tag, make_splits, Splits, TagGraph, TagNode};
pub use synth::{synth_generate, BayesReport, LabelRule, Latent, SynthConfig, SynthOutput, TokenModel};
