//! Word-level tokenizer and the small transformer that serves as the frozen
//! backbone.

mod checkpoint;
mod model;
mod vocab;

pub use checkpoint::{load_lm, peek_lm_hash, save_lm};
pub use model::{
    encode_corpus, sample_mask_positions, select_rep, BackboneReport, BackboneTrainConfig,
    LanguageModel, LmConfig, LmMode, PromptSpec, RepMode, LN_EPS,
};
pub use vocab::{Vocab, BOS, EOS, MASK, PAD, UNK};
