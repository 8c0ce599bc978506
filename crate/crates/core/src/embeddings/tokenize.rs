use crate::embeddings::vocab::{Vocabulary, CLS, IMG, PAD, SEP};
use crate::error::{Error, Result};

/// Tokenized text: content ids only, structural tokens are added at assembly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub text: String,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, text: impl Into<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| is_structural(id)) {
            return Err(Error::Argument(format!("structural token id {bad} inside text")));
        }
        Ok(TokenSequence { ids, text: text.into() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[PAD]`, `[CLS]`, `[SEP]` and `[IMG]` never appear among content ids.
fn is_structural(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP | IMG)
}

/// Lowercases and splits on every non-alphanumeric character (keeping `;` as
/// its own word); unknown words map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::EmptyInput(format!("no tokens in {text:?}")));
    }
    let ids = words.iter().map(|w| vocab.id_or_unk(w)).collect();
    TokenSequence::new(ids, text)
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            if ch == ';' {
                words.push(";".to_string());
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Maps pre-split words to ids without further normalization.
pub fn ids_for_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Vec<usize> {
    words.iter().map(|w| vocab.id_or_unk(w.as_ref())).collect()
}
