use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const IMG: usize = 5;

/// Reserved tokens, in id order. A vocabulary file must start with these lines.
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[IMG]"];

/// Token separating question, answer and rationale segments.
pub const SEMICOLON: &str = ";";

/// Fixed word-level vocabulary with dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved tokens followed by `words`
    /// (duplicates and reserved spellings are skipped).
    pub fn from_words<I, T>(words: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut v = Vocabulary { tokens: Vec::new(), ids: HashMap::new() };
        for r in RESERVED {
            v.push(r);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, tok: &str) {
        if !self.ids.contains_key(tok) {
            self.ids.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    /// Parses one-token-per-line text; line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            match tokens.get(i) {
                Some(t) if t == r => {}
                other => {
                    return Err(Error::Parse {
                        path: "vocabulary".into(),
                        line: i + 1,
                        msg: format!("expected reserved token {r}, found {other:?}"),
                    })
                }
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Parse { path: "vocabulary".into(), line: i + 1, msg: "empty token".into() });
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse { path: "vocabulary".into(), line: i + 1, msg: format!("duplicate token {t}") });
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { path: path.display().to_string(), line, msg },
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}
