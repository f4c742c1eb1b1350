//! Tokenization interface and the byte-level tokenizer used at desk scale.

/// Minimal tokenizer interface; injected wherever token counts or token ids
/// are needed so the corpus pipeline stays agnostic of the model family.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, tokens: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    /// End-of-sequence id, if the tokenizer reserves one.
    fn eos_id(&self) -> Option<u32>;

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

/// Byte-level tokenizer: ids 0..=255 are raw bytes, 256 is EOS.
///
/// Encoding is total (any UTF-8 string round-trips exactly), which makes
/// token round-trip contracts trivial to honor and keeps the toy vocabulary
/// at 257.
#[derive(Debug, Clone, Default)]
pub struct ByteTokenizer;

pub const BYTE_EOS: u32 = 256;
pub const BYTE_VOCAB: usize = 257;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }

    fn eos_id(&self) -> Option<u32> {
        Some(BYTE_EOS)
    }
}
