use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{recent, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub dim: usize,
    /// Geometric decay applied per step back in the context, in (0, 1).
    pub decay: f64,
    /// Number of most recent tokens that contribute.
    pub window: usize,
    pub seed: u64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            dim: 64,
            decay: 0.5,
            window: 8,
            seed: 0,
        }
    }
}

/// Deterministic key function:
/// `f(c) = normalize(Σ_{j=1..W} decay^(j-1) · emb(c[-j]))`.
///
/// Contexts that agree on their last `window` tokens map to the same key,
/// and all keys have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    params: EncoderParams,
    emb: Vec<f32>,
}

impl ContextEncoder {
    pub fn new(params: EncoderParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let emb = (0..params.vocab_size * params.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { params, emb }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    pub fn embedding(&self, token: TokenId) -> &[f32] {
        let d = self.params.dim;
        &self.emb[token.index() * d..(token.index() + 1) * d]
    }

    pub fn encode(&self, context: &[TokenId]) -> Vec<f32> {
        let mut acc = vec![0f64; self.params.dim];
        let mut w = 1.0;
        for j in 1..=self.params.window {
            for (a, &e) in acc.iter_mut().zip(self.embedding(recent(context, j))) {
                *a += w * e as f64;
            }
            w *= self.params.decay;
        }
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        acc.into_iter().map(|a| (a * scale) as f32).collect()
    }
}
