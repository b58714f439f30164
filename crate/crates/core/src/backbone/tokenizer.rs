//! Byte-level tokenizer with two special tokens appended after the byte range.

/// Maps strings to byte token ids. Ids `0..vocab_size` are bytes, followed by
/// the separator and end-of-sequence tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteTokenizer {
    vocab_size: usize,
}

impl ByteTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= 256, "byte tokenizer needs at least 256 ids");
        Self { vocab_size }
    }

    /// Separator between instruction and answer; the answer span starts after it.
    pub fn sep(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> usize {
        self.vocab_size + 1
    }

    /// Total number of ids including specials.
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.vocab_size
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Inverse of [`tokenize`](Self::tokenize); special and out-of-byte ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_any_string(s in ".*") {
            let tok = ByteTokenizer::new(256);
            prop_assert_eq!(tok.detokenize(&tok.tokenize(&s)), s);
        }
    }

    #[test]
    fn specials_follow_byte_range() {
        let tok = ByteTokenizer::new(256);
        assert_eq!(tok.sep(), 256);
        assert_eq!(tok.eos(), 257);
        assert_eq!(tok.total_vocab(), 258);
        assert_eq!(tok.detokenize(&[104, 256, 105, 257]), "hi");
    }
}
