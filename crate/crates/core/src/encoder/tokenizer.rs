/// Begin-of-sequence id.
pub const BOS: usize = 256;
/// End-of-sequence id; always the last token.
pub const EOS: usize = 257;
/// Bytes plus the two markers.
pub const BYTE_VOCAB: usize = 258;

/// Token ids of one input, `1 ≤ len ≤ max_seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<usize>) -> Option<Self> {
        (!ids.is_empty()).then_some(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte-level tokenization: `[BOS, bytes..., EOS]`, truncated to
/// `max_seq_len` with the end marker kept.
pub fn tokenize(text: &str, max_seq_len: usize) -> TokenSequence {
    let max_seq_len = max_seq_len.max(1);
    if max_seq_len == 1 {
        return TokenSequence { ids: vec![EOS] };
    }
    let body = (max_seq_len - 2).min(text.len());
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(BOS);
    ids.extend(text.as_bytes()[..body].iter().map(|&b| b as usize));
    ids.push(EOS);
    TokenSequence { ids }
}

/// Query-side instruction wrapping.
pub fn wrap_query(instruction: &str, text: &str) -> String {
    format!("Instruct: {instruction}\nQuery: {text}")
}

/// Printable rendering of a token id.
pub fn render_token(id: usize) -> String {
    match id {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        b if b < 256 => {
            let c = b as u8;
            if c.is_ascii_graphic() {
                (c as char).to_string()
            } else if c == b' ' {
                "␠".into()
            } else {
                format!("\\x{c:02x}")
            }
        }
        other => format!("<{other}>"),
    }
}
