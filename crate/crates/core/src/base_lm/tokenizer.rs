/// Ids 0..=255 are raw bytes; three special ids follow.
pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Byte-level tokenizer with BOS/EOS framing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    max_seq_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { max_seq_len: 128 }
    }
}

impl Tokenizer {
    /// # Panics
    /// If `max_seq_len < 3`, which leaves no room for a byte between the
    /// framing tokens.
    pub fn new(max_seq_len: usize) -> Self {
        assert!(max_seq_len >= 3, "max_seq_len must fit BOS, one byte and EOS");
        Self { max_seq_len }
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Bytes a single framed sequence can carry.
    pub fn payload_len(&self) -> usize {
        self.max_seq_len - 2
    }

    /// `BOS bytes.. EOS`; input beyond `max_seq_len - 2` bytes is dropped so
    /// the framing always survives.
    pub fn tokenize(&self, text: &[u8]) -> Vec<u32> {
        let body = &text[..text.len().min(self.payload_len())];
        let mut out = Vec::with_capacity(body.len() + 2);
        out.push(BOS);
        out.extend(body.iter().map(|&b| u32::from(b)));
        out.push(EOS);
        out
    }

    /// `BOS bytes..` without EOS, for use as a generation prefix.
    pub fn encode_prompt(&self, prompt: &[u8]) -> Vec<u32> {
        let body = &prompt[..prompt.len().min(self.max_seq_len - 1)];
        std::iter::once(BOS)
            .chain(body.iter().map(|&b| u32::from(b)))
            .collect()
    }

    /// Byte tokens in order; special tokens are skipped.
    pub fn detokenize(&self, tokens: &[u32]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }

    /// Splits `text` into consecutive framed windows of at most
    /// `max_seq_len` tokens. Empty input yields a single `[BOS, EOS]`.
    pub fn chunk(&self, text: &[u8]) -> Vec<Vec<u32>> {
        if text.is_empty() {
            return vec![self.tokenize(text)];
        }
        text.chunks(self.payload_len())
            .map(|c| self.tokenize(c))
            .collect()
    }
}
