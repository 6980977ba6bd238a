use std::collections::HashMap;

use crate::error::{Error, Result};

/// End-of-sequence token, also the washing target of EOS-style edits.
pub const EOS: &str = "<|endoftext|>";

pub type TokenId = usize;

/// Word-level vocabulary. Every token is atomic, including multi-part
/// entity names such as `James_Gobbo`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate token {t:?}")));
            }
        }
        let eos = *index
            .get(EOS)
            .ok_or_else(|| Error::VocabMismatch(format!("vocabulary lacks {EOS}")))?;
        Ok(Self { tokens, index, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.tokens.len() })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Decodes and joins with single spaces.
    pub fn decode_string(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode(ids)?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(words: &[&str]) -> Result<Vocab> {
        Vocab::new(words.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn eos_required_once() {
        assert!(v(&["a", "b"]).is_err());
        assert!(v(&[EOS, "a", EOS]).is_err());
        let vocab = v(&["a", EOS]).unwrap();
        assert_eq!(vocab.eos(), 1);
    }

    #[test]
    fn encode_decode() {
        let vocab = v(&[EOS, "James_Gobbo", "resides", "in"]).unwrap();
        let ids = vocab.encode(&["James_Gobbo", "resides", "in"]).unwrap();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(vocab.decode_string(&ids).unwrap(), "James_Gobbo resides in");
        assert!(matches!(vocab.id("Toorak"), Err(Error::UnknownToken(_))));
        assert!(matches!(vocab.token(9), Err(Error::TokenOutOfRange { .. })));
    }
}
