//! Toy masked-language-model pretraining: a deterministic tokenizer, the
//! 15% / 80-10-10 corruption recipe, decoupled-weight-decay Adam with global
//! gradient clipping, a linear warmup/decay schedule, and a single-threaded
//! training loop with CSV logging and periodic checkpoints.
//!
//! A synthetic corpus generator (Zipf-distributed pseudo-words with local
//! repetition) keeps every training test self-contained.

mod corpus;
mod masking;
mod optimizer;
mod schedule;
mod trainer;
mod vocab;

pub use corpus::{
    generate_corpus, generated_vocab, pack_corpus, sample_windows, word_list, CorpusSpec,
};
pub use masking::{apply_masking, MaskingPolicy, IGNORE_LABEL};
pub use optimizer::AdamW;
pub use schedule::{lr_at, LrSchedule};
pub use trainer::{moving_average, StepRecord, TrainRun, Trainer, TrainerConfig};
pub use vocab::{Vocab, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, SPECIALS, UNK_ID};
