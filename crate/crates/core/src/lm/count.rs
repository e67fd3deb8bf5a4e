use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{recent, ContextPolicy, Corpus, TokenId};
use crate::dist::DenseDist;
use crate::error::{invalid, Result};

/// Fitting options for [`CountLm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountLmParams {
    /// Highest n-gram order, 1..=3.
    pub order: usize,
    /// Additive smoothing constant applied at every order.
    pub smoothing: f64,
    /// Interpolation weights, lowest order first. `None` picks the defaults
    /// for `order`.
    pub weights: Option<Vec<f64>>,
    pub policy: ContextPolicy,
}

impl Default for CountLmParams {
    fn default() -> Self {
        Self {
            order: 3,
            smoothing: 0.1,
            weights: None,
            policy: ContextPolicy::PerDocument,
        }
    }
}

fn default_weights(order: usize) -> Vec<f64> {
    match order {
        1 => vec![1.0],
        2 => vec![0.3, 0.7],
        _ => vec![0.1, 0.3, 0.6],
    }
}

// Histories of up to two tokens packed as (older << 32) | newer.
fn history_key(context: &[TokenId], len: usize) -> u64 {
    let mut key = 0u64;
    for j in (1..=len).rev() {
        key = (key << 32) | recent(context, j).0 as u64;
    }
    key
}

#[derive(Debug, Clone, Default, PartialEq)]
struct History {
    total: u64,
    /// (token, count), ascending by token
    next: Vec<(u32, u64)>,
}

/// Interpolated additive-smoothing n-gram model:
/// `p(w|h) = Σ_n weight_n · (c(h_n, w) + α) / (c(h_n) + α·V)`.
///
/// Strictly positive over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CountLm {
    vocab_size: usize,
    order: usize,
    smoothing: f64,
    weights: Vec<f64>,
    policy: ContextPolicy,
    unigram: Vec<u64>,
    total: u64,
    /// `histories[n - 2]` holds order-`n` statistics.
    histories: Vec<HashMap<u64, History>>,
    /// weight_1 · unigram probability, precomputed.
    unigram_part: Vec<f64>,
}

impl CountLm {
    pub fn fit(corpus: &Corpus, params: &CountLmParams, vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return invalid("cannot fit a count LM on an empty corpus");
        }
        if !(1..=3).contains(&params.order) {
            return invalid(format!("order must be 1..=3, got {}", params.order));
        }
        if !(params.smoothing > 0.0) {
            return invalid("smoothing must be positive");
        }
        let weights = params
            .weights
            .clone()
            .unwrap_or_else(|| default_weights(params.order));
        if weights.len() != params.order
            || weights.iter().any(|w| *w < 0.0)
            || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return invalid("interpolation weights must be non-negative, one per order, summing to 1");
        }
        if let Some(t) = corpus.tokens().find(|t| t.index() >= vocab_size) {
            return invalid(format!("token {} outside vocabulary of size {vocab_size}", t.0));
        }

        let mut unigram = vec![0u64; vocab_size];
        let mut raw: Vec<HashMap<u64, HashMap<u32, u64>>> = vec![HashMap::new(); params.order - 1];
        let mut total = 0u64;
        corpus.for_each_position(params.policy, |ctx, w| {
            unigram[w.index()] += 1;
            total += 1;
            for (i, table) in raw.iter_mut().enumerate() {
                let key = history_key(ctx, i + 1);
                *table.entry(key).or_default().entry(w.0).or_default() += 1;
            }
        });
        let histories = raw
            .into_iter()
            .map(|table| {
                table
                    .into_iter()
                    .map(|(k, nexts)| {
                        let mut next: Vec<(u32, u64)> = nexts.into_iter().collect();
                        next.sort_unstable();
                        let total = next.iter().map(|p| p.1).sum();
                        (k, History { total, next })
                    })
                    .collect()
            })
            .collect();
        Ok(Self::assemble(
            vocab_size,
            params.order,
            params.smoothing,
            weights,
            params.policy,
            unigram,
            total,
            histories,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        vocab_size: usize,
        order: usize,
        smoothing: f64,
        weights: Vec<f64>,
        policy: ContextPolicy,
        unigram: Vec<u64>,
        total: u64,
        histories: Vec<HashMap<u64, History>>,
    ) -> Self {
        let denom = total as f64 + smoothing * vocab_size as f64;
        let unigram_part = unigram
            .iter()
            .map(|&c| weights[0] * (c as f64 + smoothing) / denom)
            .collect();
        Self {
            vocab_size,
            order,
            smoothing,
            weights,
            policy,
            unigram,
            total,
            histories,
            unigram_part,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn policy(&self) -> ContextPolicy {
        self.policy
    }

    /// Full next-token distribution after `context`.
    pub fn next_distribution(&self, context: &[TokenId]) -> DenseDist {
        let v = self.vocab_size as f64;
        let mut probs = self.unigram_part.clone();
        let mut flat = 0.0;
        for (i, table) in self.histories.iter().enumerate() {
            let weight = self.weights[i + 1];
            match table.get(&history_key(context, i + 1)) {
                Some(h) => {
                    let denom = h.total as f64 + self.smoothing * v;
                    flat += weight * self.smoothing / denom;
                    let scale = weight / denom;
                    for &(w, c) in &h.next {
                        probs[w as usize] += scale * c as f64;
                    }
                }
                None => flat += weight / v,
            }
        }
        for p in &mut probs {
            *p += flat;
        }
        DenseDist::new_unchecked(probs)
    }

    /// Probability of a single token, evaluated term by term.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let v = self.vocab_size as f64;
        let mut p = self.unigram_part[token.index()];
        for (i, table) in self.histories.iter().enumerate() {
            let (c_hw, c_h) = match table.get(&history_key(context, i + 1)) {
                Some(h) => {
                    let c = h
                        .next
                        .binary_search_by_key(&token.0, |p| p.0)
                        .map(|j| h.next[j].1)
                        .unwrap_or(0);
                    (c as f64, h.total as f64)
                }
                None => (0.0, 0.0),
            };
            p += self.weights[i + 1] * (c_hw + self.smoothing) / (c_h + self.smoothing * v);
        }
        p
    }

    /// exp of the mean negative log-likelihood of `corpus`.
    pub fn perplexity(&self, corpus: &Corpus) -> f64 {
        let mut nll = 0.0;
        let mut n = 0usize;
        corpus.for_each_position(self.policy, |ctx, w| {
            nll -= self.prob(ctx, w).ln();
            n += 1;
        });
        (nll / n.max(1) as f64).exp()
    }

    pub fn to_json(&self) -> Result<String> {
        let histories = self
            .histories
            .iter()
            .map(|table| {
                let mut rows: Vec<HistoryRepr> = table
                    .iter()
                    .map(|(&key, h)| HistoryRepr {
                        key,
                        next: h.next.clone(),
                    })
                    .collect();
                rows.sort_unstable_by_key(|r| r.key);
                rows
            })
            .collect();
        let repr = CountLmRepr {
            vocab_size: self.vocab_size,
            order: self.order,
            smoothing: self.smoothing,
            weights: self.weights.clone(),
            continuous: self.policy == ContextPolicy::Continuous,
            unigram: self.unigram.clone(),
            histories,
        };
        Ok(serde_json::to_string(&repr)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let repr: CountLmRepr = serde_json::from_str(s)?;
        let total = repr.unigram.iter().sum();
        let histories = repr
            .histories
            .into_iter()
            .map(|rows| {
                rows.into_iter()
                    .map(|r| {
                        let total = r.next.iter().map(|p| p.1).sum();
                        (r.key, History { total, next: r.next })
                    })
                    .collect()
            })
            .collect();
        let policy = if repr.continuous {
            ContextPolicy::Continuous
        } else {
            ContextPolicy::PerDocument
        };
        Ok(Self::assemble(
            repr.vocab_size,
            repr.order,
            repr.smoothing,
            repr.weights,
            policy,
            repr.unigram,
            total,
            histories,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct HistoryRepr {
    key: u64,
    next: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct CountLmRepr {
    vocab_size: usize,
    order: usize,
    smoothing: f64,
    weights: Vec<f64>,
    continuous: bool,
    unigram: Vec<u64>,
    histories: Vec<Vec<HistoryRepr>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Vocabulary, BOS};

    fn toy() -> (Vocabulary, Corpus) {
        let text = "a b c a b d\nb c a a b c d d a\nc a b";
        let vocab = Vocabulary::from_texts([text]);
        let corpus = Corpus::from_text(text, &vocab);
        (vocab, corpus)
    }

    #[test]
    fn unigram_argmax_is_most_frequent() {
        let vocab = Vocabulary::from_texts(["a a a"]);
        let corpus = Corpus::from_text("a a a", &vocab);
        let params = CountLmParams {
            order: 1,
            ..Default::default()
        };
        let lm = CountLm::fit(&corpus, &params, vocab.len()).unwrap();
        let d = lm.next_distribution(&[]);
        let a = vocab.get("a").unwrap();
        assert_eq!(d.argmax(), a);
    }

    #[test]
    fn distribution_positive_normalized_and_matches_scalar_prob() {
        let (vocab, corpus) = toy();
        let lm = CountLm::fit(&corpus, &CountLmParams::default(), vocab.len()).unwrap();
        for doc in &corpus.docs {
            for t in 0..=doc.len() {
                let ctx = &doc[..t];
                let d = lm.next_distribution(ctx);
                assert!(d.probs().iter().all(|&p| p > 0.0));
                assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for w in 0..vocab.len() as u32 {
                    let p = lm.prob(ctx, TokenId(w));
                    assert!((p - d.probs()[w as usize]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn errors() {
        let vocab = Vocabulary::new();
        assert!(CountLm::fit(&Corpus::default(), &CountLmParams::default(), vocab.len()).is_err());
        let corpus = Corpus::new(vec![vec![TokenId(9)]]);
        assert!(CountLm::fit(&corpus, &CountLmParams::default(), 3).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let (vocab, corpus) = toy();
        let lm = CountLm::fit(&corpus, &CountLmParams::default(), vocab.len()).unwrap();
        let back = CountLm::from_json(&lm.to_json().unwrap()).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.to_json().unwrap(), lm.to_json().unwrap());
    }

    #[test]
    fn first_position_uses_bos_history() {
        let (vocab, corpus) = toy();
        let lm = CountLm::fit(&corpus, &CountLmParams::default(), vocab.len()).unwrap();
        // Every document start is preceded by (BOS, BOS).
        assert_eq!(history_key(&[], 2), (BOS.0 as u64) << 32 | BOS.0 as u64);
        let starts = lm.histories[1].get(&history_key(&[], 2)).unwrap();
        assert_eq!(starts.total, corpus.docs.len() as u64);
    }
}
