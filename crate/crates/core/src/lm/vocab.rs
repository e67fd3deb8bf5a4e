use std::collections::HashMap;
use std::path::Path;

use super::{TokenId, BOS, UNK};
use crate::error::{Error, Result};

const BOS_STR: &str = "<s>";
const UNK_STR: &str = "<unk>";

/// Bidirectional token/id map. Ids are dense; `0` is BOS and `1` is UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.insert(BOS_STR);
        v.insert(UNK_STR);
        v
    }

    /// Vocabulary over the whitespace tokens of `texts`, in first-seen order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for text in texts {
            for tok in text.split_whitespace() {
                v.insert(tok);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = TokenId(self.tokens.len() as u32);
        self.tokens.push(token.to_owned());
        self.ids.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        BOS
    }

    pub fn unk(&self) -> TokenId {
        UNK
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary line {}: expected a single token, got {line:?}",
                    i + 1
                )));
            }
            if ids.insert(line.to_owned(), TokenId(i as u32)).is_some() {
                return Err(Error::InvalidInput(format!(
                    "vocabulary line {}: duplicate token {line:?}",
                    i + 1
                )));
            }
            tokens.push(line.to_owned());
        }
        if tokens.first().map(String::as_str) != Some(BOS_STR)
            || tokens.get(1).map(String::as_str) != Some(UNK_STR)
        {
            return Err(Error::InvalidInput(format!(
                "vocabulary must start with {BOS_STR} and {UNK_STR}"
            )));
        }
        Ok(Self { tokens, ids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_inverse() {
        let v = Vocabulary::from_texts(["the cat", "the dog"]);
        assert_eq!(v.get("<s>"), Some(BOS));
        assert_eq!(v.get("<unk>"), Some(UNK));
        assert_eq!(v.len(), 5);
        for i in 0..v.len() as u32 {
            let id = TokenId(i);
            assert_eq!(v.get(v.token(id).unwrap()), Some(id));
        }
        assert_eq!(v.id_or_unk("bird"), UNK);
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocabulary::from_texts(["x y z x"]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert!(Vocabulary::from_text("<s>\n<unk>\nx\nx\n").is_err());
    }
}
