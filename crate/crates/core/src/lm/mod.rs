//! The parametric side of the model: vocabulary, corpora, a smoothed count
//! LM standing in for a pretrained network, the context encoder used as the
//! datastore key function, and n-gram suffix statistics.
//!
//! Every sequence is treated as left-padded with an unbounded run of
//! [`BOS`] tokens, so any position (including the first) has a context of
//! any requested length.

mod corpus;
mod count;
mod encoder;
mod suffix;
mod vocab;

use serde::{Deserialize, Serialize};

pub use corpus::{ContextPolicy, Corpus};
pub use count::{CountLm, CountLmParams};
pub use encoder::{ContextEncoder, EncoderParams};
pub use suffix::{SuffixStat, SuffixTables, SUFFIX_ORDERS};
pub use vocab::Vocabulary;

use crate::dist::DenseDist;

/// Dense index into a [`Vocabulary`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Sequence-start padding token.
pub const BOS: TokenId = TokenId(0);
/// Replacement for tokens missing from the vocabulary.
pub const UNK: TokenId = TokenId(1);

/// The `j`-th most recent token of `context` (1-based), or [`BOS`] when the
/// position falls before the start of the sequence.
#[inline]
pub fn recent(context: &[TokenId], j: usize) -> TokenId {
    debug_assert!(j >= 1);
    if j <= context.len() {
        context[context.len() - j]
    } else {
        BOS
    }
}

/// Everything the parametric model produces for one position.
#[derive(Debug, Clone)]
pub struct LmStep {
    pub p_nlm: DenseDist,
    pub ctx_vec: Vec<f32>,
    /// max of `p_nlm`
    pub conf: f64,
    /// entropy of `p_nlm` in nats
    pub ent: f64,
}

/// Run the count LM and the encoder on one context.
pub fn lm_step(lm: &CountLm, encoder: &ContextEncoder, context: &[TokenId]) -> LmStep {
    let p_nlm = lm.next_distribution(context);
    let conf = p_nlm.max();
    let ent = p_nlm.entropy();
    LmStep {
        p_nlm,
        ctx_vec: encoder.encode(context),
        conf,
        ent,
    }
}
