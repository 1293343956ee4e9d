//! Prompt rendering and teacher-forcing batches.

use crate::data::{tokenize, AlpacaExample, BOS, EOS, PAD};
use crate::error::{Error, Result};

const PREAMBLE_WITH_INPUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";
const PREAMBLE: &str = "Below is an instruction that describes a task. Write a response that appropriately completes the request.";

/// The prompt text preceding the response.
pub fn render_prompt(example: &AlpacaExample) -> String {
    match &example.input {
        Some(input) => format!(
            "{PREAMBLE_WITH_INPUT}\n\n### Instruction:\n{}\n\n### Input:\n{input}\n\n### Response:\n",
            example.instruction
        ),
        None => format!("{PREAMBLE}\n\n### Instruction:\n{}\n\n### Response:\n", example.instruction),
    }
}

/// Right-padded rows of next-token pairs.
///
/// Row `b` has `lengths[b]` real positions; `target_ids[b][t]` is the token
/// following `input_ids[b][t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub target_ids: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    /// Examples cut short by `max_len`.
    pub truncated: usize,
}

impl TokenBatch {
    pub fn rows(&self) -> usize {
        self.input_ids.len()
    }

    /// Padded row width.
    pub fn width(&self) -> usize {
        self.input_ids.first().map_or(0, Vec::len)
    }

    /// The unpadded part of row `b`: (inputs, targets, mask).
    pub fn row(&self, b: usize) -> (&[u32], &[u32], &[bool]) {
        let n = self.lengths[b];
        (&self.input_ids[b][..n], &self.target_ids[b][..n], &self.loss_mask[b][..n])
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// `BOS + prompt + output + EOS`, cut to `max_len` tokens, split into
/// inputs and shifted targets. With `mask_prompt`, only targets inside the
/// output and the EOS count toward the loss.
pub fn build_batch(examples: &[AlpacaExample], max_len: usize, mask_prompt: bool) -> Result<TokenBatch> {
    if max_len < 2 {
        return Err(Error::InvalidConfig(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut batch = TokenBatch {
        input_ids: Vec::with_capacity(examples.len()),
        target_ids: Vec::with_capacity(examples.len()),
        loss_mask: Vec::with_capacity(examples.len()),
        lengths: Vec::with_capacity(examples.len()),
        truncated: 0,
    };
    for (index, ex) in examples.iter().enumerate() {
        let mut seq = vec![BOS];
        seq.extend(tokenize(&render_prompt(ex)));
        let prompt_len = seq.len();
        if mask_prompt && prompt_len >= max_len {
            return Err(Error::PromptTooLong {
                index,
                prompt_len,
                max_len,
            });
        }
        seq.extend(tokenize(&ex.output));
        seq.push(EOS);
        if seq.len() > max_len {
            seq.truncate(max_len);
            batch.truncated += 1;
        }
        let n = seq.len() - 1;
        batch.input_ids.push(seq[..n].to_vec());
        batch.target_ids.push(seq[1..].to_vec());
        batch.loss_mask.push((0..n).map(|t| !mask_prompt || t + 1 >= prompt_len).collect());
        batch.lengths.push(n);
    }
    if batch.truncated > 0 {
        log::warn!("{} of {} examples truncated to {max_len} tokens", batch.truncated, examples.len());
    }
    let width = batch.lengths.iter().copied().max().unwrap_or(0);
    for b in 0..batch.rows() {
        batch.input_ids[b].resize(width, PAD);
        batch.target_ids[b].resize(width, PAD);
        batch.loss_mask[b].resize(width, false);
    }
    Ok(batch)
}
