//! Datastore pruning: random subsampling, target-aware k-means, greedy
//! merging of same-token neighbors, and rank-based pruning by importance.
//!
//! Merging strategies emit weighted records; searching the result should use
//! [`weighted_knn_distribution`](crate::dist::weighted_knn_distribution).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::datastore::Datastore;
use crate::error::{invalid, Result};
use crate::index::SearchIndex;
use crate::kmeans::{kmeans, KMeansParams};
use crate::lm::TokenId;

/// Summary of one pruning run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub method: String,
    pub input_count: usize,
    pub output_count: usize,
    /// `output_count / input_count`.
    pub retention: f64,
    pub total_weight_before: f64,
    pub total_weight_after: f64,
    pub wall_seconds: f64,
}

impl PruneReport {
    fn new(method: String, before: &Datastore, after: &Datastore, start: Instant) -> Self {
        Self {
            method,
            input_count: before.len(),
            output_count: after.len(),
            retention: after.len() as f64 / before.len() as f64,
            total_weight_before: before.total_weight(),
            total_weight_after: after.total_weight(),
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// `⌈f·n⌉` clamped to `1..=n`, tolerant of binary rounding in `f·n`.
pub fn retained_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("retain fraction must be in (0, 1], got {fraction}"));
    }
    Ok(())
}

/// Keep a uniform random subset of `⌈retain·N⌉` records, in id order.
pub fn random_prune(ds: &Datastore, retain: f64, seed: u64) -> Result<Datastore> {
    check_fraction(retain)?;
    let n = ds.len();
    let keep = retained_count(n, retain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = sample(&mut rng, n, keep).into_vec();
    ids.sort_unstable();
    ds.select(&ids, &format!("prune: random retain={retain} seed={seed}"))
}

/// Replace the records of the `top_m` most frequent target tokens by k-means
/// centroids of their keys, weighted by cluster mass. Other records pass
/// through unchanged, ahead of the centroids.
pub fn kmeans_prune(ds: &Datastore, top_m: usize, ratio: f64, seed: u64) -> Result<Datastore> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return invalid(format!("cluster ratio must be in (0, 1], got {ratio}"));
    }
    let mut by_token: BTreeMap<TokenId, Vec<usize>> = BTreeMap::new();
    for (i, &v) in ds.values().iter().enumerate() {
        by_token.entry(v).or_default().push(i);
    }
    let mut ranked: Vec<(TokenId, usize)> = by_token.iter().map(|(&t, ids)| (t, ids.len())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_m);
    let clustered: std::collections::BTreeSet<TokenId> = ranked.iter().map(|r| r.0).collect();

    let dim = ds.dim();
    // Per token: centroid keys, centroid weights, token.
    type Group = (Vec<f32>, Vec<f32>, TokenId);
    let groups: Vec<Result<Group>> = ranked
        .par_iter()
        .map(|&(token, count)| {
            let ids = &by_token[&token];
            let mut data = Vec::with_capacity(count * dim);
            for &i in ids {
                data.extend_from_slice(ds.key(i));
            }
            let k = retained_count(count, ratio);
            let km = kmeans(
                &data,
                dim,
                &KMeansParams::new(k, seed.wrapping_add(token.0 as u64)),
            )?;
            let mut mass = vec![0f64; k];
            for (&i, &a) in ids.iter().zip(&km.assignments) {
                mass[a as usize] += ds.weight(i) as f64;
            }
            let mut keys = Vec::new();
            let mut weights = Vec::new();
            for (c, &m) in mass.iter().enumerate() {
                if m > 0.0 {
                    keys.extend_from_slice(km.centroid(c));
                    weights.push(m as f32);
                }
            }
            Ok((keys, weights, token))
        })
        .collect();

    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut weights = Vec::new();
    for i in 0..ds.len() {
        if !clustered.contains(&ds.value(i)) {
            keys.extend_from_slice(ds.key(i));
            values.push(ds.value(i));
            weights.push(ds.weight(i));
        }
    }
    for g in groups {
        let (k, w, token) = g?;
        values.extend(std::iter::repeat_n(token, w.len()));
        keys.extend_from_slice(&k);
        weights.extend_from_slice(&w);
    }
    let mut out = Datastore::from_parts(dim, keys, values, weights, ds.provenance())?;
    if let Some(t) = ds.transform() {
        out.set_transform(t.clone());
    }
    Ok(out.with_note(&format!(
        "prune: kmeans top_m={top_m} ratio={ratio} seed={seed}"
    )))
}

/// One absorption performed by greedy merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Merge {
    pub absorber: u32,
    pub absorbed: u32,
    /// 1-based position of `absorbed` in the absorber's neighbor list.
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub datastore: Datastore,
    /// Input ids of the surviving records, ascending; row `j` of the output
    /// is input record `kept[j]`.
    pub kept: Vec<usize>,
    /// Merge counters `s_i` of the survivors.
    pub counts: Vec<u32>,
    pub merges: Vec<Merge>,
}

/// Greedy merging of same-token neighbors.
///
/// Every record starts with count 1. Records are visited in id order; a
/// record whose count is still positive looks at its `k` nearest neighbors
/// and absorbs each neighbor that has the same value and count exactly 1.
/// Survivors carry the summed weight of what they absorbed, so the total
/// weight is unchanged.
pub fn greedy_merge(ds: &Datastore, index: &dyn SearchIndex, k: usize) -> Result<MergeOutcome> {
    if k < 2 {
        return invalid(format!("greedy merge needs K >= 2, got {k}"));
    }
    let n = ds.len();
    // The index never changes during the scan, so neighbor lists can be
    // fetched up front.
    let neighbors: Result<Vec<Vec<u32>>> = (0..n)
        .into_par_iter()
        .map(|i| Ok(index.search(ds, ds.key(i), k)?.into_iter().map(|h| h.id).collect()))
        .collect();
    let neighbors = neighbors?;
    let mut counts = vec![1u32; n];
    let mut mass: Vec<f64> = ds.weights().iter().map(|&w| w as f64).collect();
    let mut merges = Vec::new();
    for i in 0..n {
        if counts[i] == 0 {
            continue;
        }
        for (r, &t) in neighbors[i].iter().enumerate() {
            let t = t as usize;
            if t != i && counts[t] == 1 && ds.value(t) == ds.value(i) {
                counts[i] += 1;
                counts[t] -= 1;
                mass[i] += mass[t];
                mass[t] = 0.0;
                merges.push(Merge {
                    absorber: i as u32,
                    absorbed: t as u32,
                    rank: r as u32 + 1,
                });
            }
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
    let weights: Vec<f32> = kept.iter().map(|&i| mass[i] as f32).collect();
    let datastore = ds
        .select(&kept, &format!("prune: greedy-merge K={k}"))?
        .reweighted(weights, "")?;
    Ok(MergeOutcome {
        datastore,
        counts: kept.iter().map(|&i| counts[i]).collect(),
        kept,
        merges,
    })
}

const SCORE_CHUNK: usize = 1024;

fn accumulate_scores<F>(n: usize, num_queries: usize, run: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    // Fixed-size chunks summed in chunk order keep the result independent of
    // the thread count.
    let partials: Result<Vec<Vec<f64>>> = (0..num_queries.div_ceil(SCORE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut local = vec![0f64; n];
            for q in c * SCORE_CHUNK..((c + 1) * SCORE_CHUNK).min(num_queries) {
                run(q, &mut local)?;
            }
            Ok(local)
        })
        .collect();
    let mut scores = vec![0f64; n];
    for p in partials? {
        for (s, v) in scores.iter_mut().zip(p) {
            *s += v;
        }
    }
    Ok(scores)
}

/// `g(i) = Σ 1/rank` over every query's `k` retrieved records.
/// `queries` is row-major with the datastore's dimension.
pub fn importance_scores(
    ds: &Datastore,
    index: &dyn SearchIndex,
    queries: &[f32],
    k: usize,
) -> Result<Vec<f64>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let dim = ds.dim();
    if !queries.len().is_multiple_of(dim) {
        return invalid("query matrix length is not a multiple of the dimension");
    }
    accumulate_scores(ds.len(), queries.len() / dim, |q, local| {
        for (r, h) in index.search(ds, &queries[q * dim..(q + 1) * dim], k)?.iter().enumerate() {
            local[h.id as usize] += 1.0 / (r + 1) as f64;
        }
        Ok(())
    })
}

/// Importance scores using every record's own key as a query. A record's
/// hit on itself is not counted; other hits keep their list positions.
pub fn self_importance_scores(ds: &Datastore, index: &dyn SearchIndex, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    accumulate_scores(ds.len(), ds.len(), |q, local| {
        for (r, h) in index.search(ds, ds.key(q), k)?.iter().enumerate() {
            if h.id as usize != q {
                local[h.id as usize] += 1.0 / (r + 1) as f64;
            }
        }
        Ok(())
    })
}

/// Keep the `⌈retain·N⌉` highest-scoring records (ties to the lower id),
/// in id order.
pub fn rank_prune(ds: &Datastore, scores: &[f64], retain: f64) -> Result<Datastore> {
    check_fraction(retain)?;
    if scores.len() != ds.len() {
        return invalid(format!(
            "{} scores for {} records",
            scores.len(),
            ds.len()
        ));
    }
    let keep = retained_count(ds.len(), retain);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    ds.select(&order, &format!("prune: rank retain={retain}"))
}

/// A pruning strategy with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneMethod {
    Random { retain: f64 },
    KMeans { top_m: usize, ratio: f64 },
    GreedyMerge { k: usize },
    /// Importance from the datastore's own keys with `k` neighbors.
    Rank { retain: f64, k: usize },
}

impl PruneMethod {
    pub fn name(&self) -> String {
        match self {
            Self::Random { retain } => format!("random(retain={retain})"),
            Self::KMeans { top_m, ratio } => format!("kmeans(top_m={top_m},ratio={ratio})"),
            Self::GreedyMerge { k } => format!("greedy-merge(K={k})"),
            Self::Rank { retain, k } => format!("rank(retain={retain},k={k})"),
        }
    }
}

/// Run `method`; `index` must be built over `ds` and is used by the
/// neighbor-based methods only.
pub fn prune(
    ds: &Datastore,
    method: PruneMethod,
    index: &dyn SearchIndex,
    seed: u64,
) -> Result<(Datastore, PruneReport)> {
    let start = Instant::now();
    let out = match method {
        PruneMethod::Random { retain } => random_prune(ds, retain, seed)?,
        PruneMethod::KMeans { top_m, ratio } => kmeans_prune(ds, top_m, ratio, seed)?,
        PruneMethod::GreedyMerge { k } => greedy_merge(ds, index, k)?.datastore,
        PruneMethod::Rank { retain, k } => {
            let scores = self_importance_scores(ds, index, k)?;
            rank_prune(ds, &scores, retain)?
        }
    };
    let report = PruneReport::new(method.name(), ds, &out, start);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::FlatIndex;

    fn line_ds(values: &[u32]) -> Datastore {
        let n = values.len();
        let keys = (0..n).map(|i| i as f32).collect();
        Datastore::from_parts(
            1,
            keys,
            values.iter().map(|&v| TokenId(v)).collect(),
            vec![1.0; n],
            "",
        )
        .unwrap()
    }

    #[test]
    fn random_counts() {
        let ds = line_ds(&[0; 100]);
        let half = random_prune(&ds, 0.5, 3).unwrap();
        assert_eq!(half.len(), 50);
        assert!(half.weights().iter().all(|&w| w == 1.0));
        assert_eq!(half, random_prune(&ds, 0.5, 3).unwrap());
        let all = random_prune(&ds, 1.0, 3).unwrap();
        assert_eq!(all.keys(), ds.keys());
        assert!(random_prune(&ds, 0.0, 3).is_err());
        assert!(random_prune(&ds, 1.5, 3).is_err());
        assert_eq!(retained_count(100, 0.6), 60);
    }

    #[test]
    fn kmeans_identity_and_degenerate() {
        let ds = line_ds(&[1, 2, 3, 1]);
        let same = kmeans_prune(&ds, 0, 0.5, 0).unwrap();
        assert_eq!(same.keys(), ds.keys());
        let ds = Datastore::from_parts(2, [0.5f32, -1.0].repeat(20), vec![TokenId(7); 20], vec![1.0; 20], "")
            .unwrap();
        let one = kmeans_prune(&ds, 1, 1.0 / 20.0, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.weight(0), 20.0);
        assert_eq!(one.key(0), &[0.5, -1.0]);
    }

    #[test]
    fn gm_two_records() {
        let ds = line_ds(&[4, 4]);
        let out = greedy_merge(&ds, &FlatIndex, 2).unwrap();
        assert_eq!(out.kept, vec![0]);
        assert_eq!(out.datastore.weights(), &[2.0]);
        assert_eq!(out.merges, vec![Merge { absorber: 0, absorbed: 1, rank: 2 }]);
    }

    #[test]
    fn gm_distinct_tokens_is_identity() {
        let ds = line_ds(&[0, 1, 2, 3, 4]);
        let out = greedy_merge(&ds, &FlatIndex, 3).unwrap();
        assert_eq!(out.kept, vec![0, 1, 2, 3, 4]);
        assert!(out.merges.is_empty());
        assert!(greedy_merge(&ds, &FlatIndex, 1).is_err());
    }

    #[test]
    fn rank_prune_keeps_top() {
        let ds = line_ds(&[0, 1, 2]);
        let out = rank_prune(&ds, &[3.0, 2.0, 1.0], 2.0 / 3.0).unwrap();
        assert_eq!(out.keys(), &[0.0, 1.0]);
        assert!(rank_prune(&ds, &[1.0], 0.5).is_err());
    }

    #[test]
    fn self_scores_skip_self() {
        let ds = line_ds(&[0, 0, 0]);
        // Key 0: hits 0 (self), 1. Key 1: 1 (self), 0 (tie with 2, lower id).
        // Key 2: 2 (self), 1.
        let s = self_importance_scores(&ds, &FlatIndex, 2).unwrap();
        assert_eq!(s, vec![0.5, 1.0, 0.0]);
    }
}
