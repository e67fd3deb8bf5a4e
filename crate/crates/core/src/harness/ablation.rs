//! Mask/weight ablation: at each pruning fraction, compare the adaptor's
//! own gate against a random gate of the same size, each combined with the
//! adaptor's per-token λ or a constant λ.
//!
//! A fraction `f` skips exactly `round(f·n)` of the `n` tokens in every cell,
//! so all four cells spend the same retrieval budget. The learned mask skips
//! the tokens with the smallest predicted λ (ties by position); the random
//! mask skips a seeded uniform subset.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::eval::{LmRecord, TokenProbs};
use crate::adaptor::Adaptor;
use crate::error::{invalid, Result};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Learned,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Learned,
    Constant,
}

/// One cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub fraction: f64,
    pub mask: MaskKind,
    pub weight: WeightKind,
    /// Mean over `seed_perplexities` for random masks.
    pub perplexity: f64,
    /// One entry per random-mask seed; empty for the learned mask.
    pub seed_perplexities: Vec<f64>,
    pub retrieval_fraction: f64,
}

/// Number of skipped tokens at `fraction`.
pub fn skipped_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Token positions ordered by ascending λ, ties by position.
pub fn lambda_order(lambdas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]).then(a.cmp(&b)));
    order
}

/// Skip mask with the `count` smallest-λ tokens set.
pub fn learned_mask(order: &[usize], count: usize) -> Vec<bool> {
    let mut skip = vec![false; order.len()];
    for &i in &order[..count] {
        skip[i] = true;
    }
    skip
}

/// Skip mask with a seeded uniform subset of exactly `count` tokens set.
pub fn random_mask(n: usize, count: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut skip = vec![false; n];
    for i in sample(&mut rng, n, count) {
        skip[i] = true;
    }
    skip
}

fn masked_perplexity(probs: &TokenProbs, skip: &[bool], weight: impl Fn(usize) -> f64) -> f64 {
    probs.perplexity_with(|i| if skip[i] { 0.0 } else { weight(i) })
}

/// Evaluate the four cells at every fraction from cached per-token
/// probabilities and the adaptor's ungated λ per token.
pub fn run_ablation_grid(
    probs: &TokenProbs,
    lambdas: &[f64],
    constant_lambda: f64,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    let n = probs.len();
    if lambdas.len() != n {
        return invalid(format!("{} adaptor weights for {n} tokens", lambdas.len()));
    }
    if seeds.is_empty() {
        return invalid("ablation needs at least one random-mask seed");
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return invalid(format!("ablation fraction {f} outside [0, 1]"));
    }
    let order = lambda_order(lambdas);
    let mut cells = Vec::with_capacity(fractions.len() * 4);
    for &fraction in fractions {
        let count = skipped_count(n, fraction);
        let retrieval_fraction = (n - count) as f64 / n.max(1) as f64;
        let learned = learned_mask(&order, count);
        let random: Vec<Vec<bool>> = seeds.iter().map(|&s| random_mask(n, count, s)).collect();
        for weight in [WeightKind::Learned, WeightKind::Constant] {
            let w = |i: usize| match weight {
                WeightKind::Learned => lambdas[i],
                WeightKind::Constant => constant_lambda,
            };
            cells.push(AblationCell {
                fraction,
                mask: MaskKind::Learned,
                weight,
                perplexity: masked_perplexity(probs, &learned, w),
                seed_perplexities: Vec::new(),
                retrieval_fraction,
            });
            let per_seed: Vec<f64> = random.iter().map(|m| masked_perplexity(probs, m, w)).collect();
            cells.push(AblationCell {
                fraction,
                mask: MaskKind::Random,
                weight,
                perplexity: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                seed_perplexities: per_seed,
                retrieval_fraction,
            });
        }
    }
    Ok(cells)
}

/// The adaptor's ungated λ at every record.
pub fn adaptor_lambdas(adaptor: &Adaptor, records: &[LmRecord]) -> Result<Vec<f64>> {
    records.par_iter().map(|r| adaptor.lambda(&r.features)).collect()
}

/// The cell matching `(fraction, mask, weight)`.
pub fn find_cell(
    cells: &[AblationCell],
    fraction: f64,
    mask: MaskKind,
    weight: WeightKind,
) -> Option<&AblationCell> {
    cells
        .iter()
        .find(|c| c.fraction == fraction && c.mask == mask && c.weight == weight)
}
