use std::borrow::Cow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TokenId, Vocabulary};
use crate::error::Result;

/// How contexts are formed across document boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ContextPolicy {
    /// Each document starts a fresh BOS-padded sequence.
    #[default]
    PerDocument,
    /// Documents are concatenated into a single BOS-padded stream.
    Continuous,
}

/// Tokenized corpus: one document per input line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn new(docs: Vec<Vec<TokenId>>) -> Self {
        Self { docs }
    }

    /// Whitespace-tokenize `text`, one document per non-empty line.
    /// Tokens missing from `vocab` map to UNK.
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Self {
        let docs = text
            .lines()
            .map(|line| {
                line.split_whitespace()
                    .map(|t| vocab.id_or_unk(t))
                    .collect::<Vec<_>>()
            })
            .filter(|d| !d.is_empty())
            .collect();
        Self { docs }
    }

    pub fn read(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?, vocab))
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_tokens() == 0
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.docs.iter().flatten().copied()
    }

    /// The independent sequences contexts are drawn from under `policy`.
    pub fn sequences(&self, policy: ContextPolicy) -> Cow<'_, [Vec<TokenId>]> {
        match policy {
            ContextPolicy::PerDocument => Cow::Borrowed(&self.docs),
            ContextPolicy::Continuous => Cow::Owned(vec![self.tokens().collect()]),
        }
    }

    /// Visit every `(context, target)` pair in corpus order.
    pub fn for_each_position(&self, policy: ContextPolicy, mut f: impl FnMut(&[TokenId], TokenId)) {
        for seq in self.sequences(policy).iter() {
            for t in 0..seq.len() {
                f(&seq[..t], seq[t]);
            }
        }
    }

    /// Split documents into a leading part holding `fraction` of the
    /// documents (rounded down, at least one) and the remainder.
    pub fn split_docs(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = ((self.docs.len() as f64 * fraction).floor() as usize).clamp(1, self.docs.len());
        (
            Corpus::new(self.docs[..n].to_vec()),
            Corpus::new(self.docs[n..].to_vec()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_per_document_and_continuous() {
        let vocab = Vocabulary::from_texts(["a b", "c"]);
        let corpus = Corpus::from_text("a b\n\nc\n", &vocab);
        assert_eq!(corpus.docs.len(), 2);
        let mut per_doc = Vec::new();
        corpus.for_each_position(ContextPolicy::PerDocument, |c, t| per_doc.push((c.len(), t)));
        assert_eq!(per_doc.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 0]);
        let mut cont = Vec::new();
        corpus.for_each_position(ContextPolicy::Continuous, |c, _| cont.push(c.len()));
        assert_eq!(cont, vec![0, 1, 2]);
    }
}
