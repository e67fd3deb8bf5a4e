//! Next-token distributions: the kNN distribution over retrieved values, its
//! record-weighted form, and interpolation with the parametric model.

use crate::error::{invalid, Result};
use crate::index::NeighborHit;
use crate::lm::TokenId;

/// Probability vector over the full vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDist(Vec<f64>);

impl DenseDist {
    /// Wrap `probs`, checking non-negativity and normalization to 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return invalid("dense distribution entries must be finite and non-negative");
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return invalid(format!("dense distribution sums to {s}"));
        }
        Ok(Self(probs))
    }

    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[token.index()]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Lowest-id token with maximal probability.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Distribution supported on the retrieved tokens only.
///
/// Entries are sorted by token id; every probability is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDist {
    entries: Vec<(TokenId, f64)>,
}

impl SparseDist {
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Probability of `token`; zero when it was not retrieved.
    pub fn prob(&self, token: TokenId) -> f64 {
        self.entries
            .binary_search_by_key(&token, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }
}

/// `p(y) ∝ Σ_{hits with value y} exp(-distance)`.
///
/// Record weights are ignored; see [`weighted_knn_distribution`].
pub fn knn_distribution(hits: &[NeighborHit]) -> Result<SparseDist> {
    if hits.is_empty() {
        return invalid("no neighbors retrieved; fall back to the parametric distribution");
    }
    aggregate(hits.iter().map(|h| (h.value, h.distance as f64, 1.0)))
}

/// `p(y) ∝ Σ_{hits with value y} s_i · exp(-distance)`, where `s_i` is the
/// record weight. Equal to [`knn_distribution`] when every weight is 1.
pub fn weighted_knn_distribution(hits: &[NeighborHit]) -> Result<SparseDist> {
    if hits.is_empty() {
        return invalid("no neighbors retrieved; fall back to the parametric distribution");
    }
    if hits.iter().any(|h| !(h.weight >= 0.0)) {
        return invalid("record weights must be non-negative");
    }
    if hits.iter().all(|h| h.weight == 0.0) {
        return invalid("all retrieved records have zero weight");
    }
    aggregate(hits.iter().map(|h| (h.value, h.distance as f64, h.weight as f64)))
}

fn aggregate(items: impl Iterator<Item = (TokenId, f64, f64)> + Clone) -> Result<SparseDist> {
    // exp(-(d - d_min)) keeps the largest term at exactly 1.
    let d_min = items.clone().map(|i| i.1).fold(f64::INFINITY, f64::min);
    if !d_min.is_finite() {
        return invalid("neighbor distances must be finite");
    }
    let mut mass: Vec<(TokenId, f64)> = items
        .filter(|i| i.2 > 0.0)
        .map(|(tok, d, w)| (tok, w * (-(d - d_min)).exp()))
        .collect();
    mass.sort_by_key(|m| m.0);
    let mut entries: Vec<(TokenId, f64)> = Vec::with_capacity(mass.len());
    for (tok, m) in mass {
        match entries.last_mut() {
            Some(last) if last.0 == tok => last.1 += m,
            _ => entries.push((tok, m)),
        }
    }
    let z: f64 = entries.iter().map(|e| e.1).sum();
    entries.retain(|e| e.1 > 0.0);
    for e in &mut entries {
        e.1 /= z;
    }
    Ok(SparseDist { entries })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("interpolation weight {lambda} outside [0, 1]"));
    }
    Ok(())
}

/// `p(y) = λ·p_knn(y) + (1 - λ)·p_nlm(y)` with `p_knn(y) = 0` off its support.
pub fn interpolate(p_knn: &SparseDist, p_nlm: &DenseDist, lambda: f64) -> Result<DenseDist> {
    check_lambda(lambda)?;
    let mut out: Vec<f64> = p_nlm.probs().iter().map(|p| (1.0 - lambda) * p).collect();
    for &(tok, p) in &p_knn.entries {
        out[tok.index()] += lambda * p;
    }
    Ok(DenseDist(out))
}

/// Log-probability of one target under the interpolated model, given the
/// two component probabilities of that target.
///
/// Returns `-inf` when the mixture assigns zero mass.
#[inline]
pub fn interpolated_log_prob(p_knn: f64, p_nlm: f64, lambda: f64) -> f64 {
    (lambda * p_knn + (1.0 - lambda) * p_nlm).ln()
}
