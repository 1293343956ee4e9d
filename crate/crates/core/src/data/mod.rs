//! Alpaca-format data: loading, splitting, mixing, byte tokenization and
//! teacher-forcing batches.

mod alpaca;
mod batch;
mod tokenizer;

pub use alpaca::{
    load_alpaca, mix_alpaca, parse_alpaca, save_alpaca, split, AlpacaDataset, AlpacaExample, DatasetConfig, Mixed,
    Split,
};
pub use batch::{build_batch, render_prompt, TokenBatch};
pub use tokenizer::{detokenize, detokenize_bytes, tokenize, tokenize_bytes, BOS, BYTE_OFFSET, EOS, PAD, VOCAB_SIZE};
