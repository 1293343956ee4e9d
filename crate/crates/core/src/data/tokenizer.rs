//! Byte-level tokenizer: three special ids followed by one id per byte.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Id of byte 0; byte `b` maps to `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| BYTE_OFFSET + b as u32).collect()
}

/// Bytes for every byte id; special and out-of-range ids are skipped.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id))
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// Lossy UTF-8 decoding of [`detokenize_bytes`].
pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}
