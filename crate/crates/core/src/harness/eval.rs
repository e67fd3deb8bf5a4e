//! Perplexity evaluation, both as a token-level stream (the real inference
//! path, timed) and from per-token caches (for sweeps over λ and gating).
//!
//! Both routes compute a token's log-probability with the same arithmetic,
//! so their perplexities agree exactly.

use std::borrow::Cow;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::adaptor::{adaptive_predict, Adaptor, Features};
use crate::datastore::Datastore;
use crate::dist::{interpolate, interpolated_log_prob, weighted_knn_distribution, SparseDist};
use crate::error::{invalid, Result};
use crate::index::{CountingIndex, SearchIndex};
use crate::lm::{lm_step, ContextEncoder, ContextPolicy, CountLm, Corpus, SuffixTables, TokenId};

/// Per-token log-probability floor applied when reporting perplexity.
pub const LOG_PROB_FLOOR: f64 = -50.0;

/// `{0.10, 0.15, …, 0.90}`.
pub fn lambda_grid() -> Vec<f64> {
    (0..17).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

/// Parametric side of the model: count LM, key encoder and the n-gram
/// statistics used as gating features.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub lm: CountLm,
    pub encoder: ContextEncoder,
    pub suffix: SuffixTables,
    pub policy: ContextPolicy,
}

/// A datastore with its search index and retrieval settings.
pub struct Retriever {
    pub datastore: Datastore,
    pub index: Box<dyn SearchIndex>,
    pub k: usize,
    pub distance_power: f64,
}

impl Retriever {
    pub fn new(datastore: Datastore, index: Box<dyn SearchIndex>, k: usize) -> Self {
        Self {
            datastore,
            index,
            k,
            distance_power: 1.0,
        }
    }

    /// The search key for a context vector, mapped through the datastore's
    /// reduction transform when it has one.
    pub fn query<'a>(&self, ctx_vec: &'a [f32]) -> Result<Cow<'a, [f32]>> {
        match self.datastore.transform() {
            Some(t) => Ok(Cow::Owned(t.apply(ctx_vec)?)),
            None => Ok(Cow::Borrowed(ctx_vec)),
        }
    }

    /// Neighbor distribution for one context, searching through `index`.
    pub fn knn_with(&self, index: &dyn SearchIndex, ctx_vec: &[f32]) -> Result<SparseDist> {
        let q = self.query(ctx_vec)?;
        let mut hits = index.search(&self.datastore, &q, self.k)?;
        if self.distance_power != 1.0 {
            for h in &mut hits {
                h.distance = h.distance.powf(self.distance_power as f32);
            }
        }
        weighted_knn_distribution(&hits)
    }

    pub fn knn(&self, ctx_vec: &[f32]) -> Result<SparseDist> {
        self.knn_with(&*self.index, ctx_vec)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} records, dim {}, k={}, {}",
            self.datastore.len(),
            self.datastore.dim(),
            self.k,
            self.index.describe()
        )
    }
}

/// Parametric quantities of one evaluation position.
#[derive(Debug, Clone, PartialEq)]
pub struct LmRecord {
    pub target: TokenId,
    pub p_nlm: f64,
    pub features: Features,
}

impl BaseModel {
    /// One record per position of `corpus`, in corpus order.
    pub fn records(&self, corpus: &Corpus) -> Vec<LmRecord> {
        let seqs = corpus.sequences(self.policy);
        let per_seq: Vec<Vec<LmRecord>> = seqs
            .par_iter()
            .map(|seq| {
                (0..seq.len())
                    .map(|t| {
                        let ctx = &seq[..t];
                        let step = lm_step(&self.lm, &self.encoder, ctx);
                        LmRecord {
                            target: seq[t],
                            p_nlm: step.p_nlm.prob(seq[t]),
                            features: Features::from_step(&step, &self.suffix, ctx),
                        }
                    })
                    .collect()
            })
            .collect();
        per_seq.into_iter().flatten().collect()
    }
}

/// `p_kNN(target)` for every record.
pub fn knn_probs(retriever: &Retriever, records: &[LmRecord]) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| Ok(retriever.knn(&r.features.ctx)?.prob(r.target)))
        .collect()
}

/// Cached component probabilities of the targets of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProbs {
    pub p_knn: Vec<f64>,
    pub p_nlm: Vec<f64>,
}

impl TokenProbs {
    pub fn new(records: &[LmRecord], p_knn: Vec<f64>) -> Self {
        Self {
            p_nlm: records.iter().map(|r| r.p_nlm).collect(),
            p_knn,
        }
    }

    pub fn len(&self) -> usize {
        self.p_nlm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_nlm.is_empty()
    }

    /// Perplexity with weight `lambdas[i]` at token `i`; weight 0 means the
    /// parametric model alone.
    pub fn perplexity_with(&self, lambdas: impl Fn(usize) -> f64) -> f64 {
        let mut acc = PerplexityAccumulator::default();
        for i in 0..self.len() {
            let l = lambdas(i);
            let lp = if l == 0.0 {
                self.p_nlm[i].ln()
            } else {
                interpolated_log_prob(self.p_knn[i], self.p_nlm[i], l)
            };
            acc.add(lp);
        }
        acc.perplexity()
    }

    pub fn perplexity(&self, lambda: f64) -> f64 {
        self.perplexity_with(|_| lambda)
    }

    /// Fraction of tokens where the neighbor distribution gives the target
    /// at least as much mass as the parametric model.
    pub fn knn_wins(&self) -> f64 {
        let wins = self
            .p_knn
            .iter()
            .zip(&self.p_nlm)
            .filter(|(k, n)| k >= n)
            .count();
        wins as f64 / self.len().max(1) as f64
    }
}

/// Running mean of floored log-probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PerplexityAccumulator {
    sum: f64,
    count: usize,
    floored: usize,
}

impl PerplexityAccumulator {
    pub fn add(&mut self, log_prob: f64) {
        if log_prob < LOG_PROB_FLOOR || log_prob.is_nan() {
            self.floored += 1;
            self.sum += LOG_PROB_FLOOR;
        } else {
            self.sum += log_prob;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn floored(&self) -> usize {
        self.floored
    }

    /// `exp(mean negative log-likelihood)`.
    pub fn perplexity(&self) -> f64 {
        (-self.sum / self.count.max(1) as f64).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaTuning {
    pub lambda: f64,
    pub perplexity: f64,
    /// `(λ, validation perplexity)` for every grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Grid search over [`lambda_grid`]; ties go to the smaller λ.
pub fn tune_lambda(probs: &TokenProbs) -> Result<LambdaTuning> {
    if probs.is_empty() {
        return invalid("cannot tune λ on an empty split");
    }
    let grid: Vec<(f64, f64)> = lambda_grid()
        .into_iter()
        .map(|l| (l, probs.perplexity(l)))
        .collect();
    let best = grid
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |b, g| if g.1 < b.1 { g } else { b });
    Ok(LambdaTuning {
        lambda: best.0,
        perplexity: best.1,
        grid,
    })
}

/// How the stream evaluator mixes in the neighbor distribution.
#[derive(Clone, Copy)]
pub enum Weighting<'a> {
    /// Parametric model only; the index is never queried.
    Parametric,
    /// Retrieve at every token and mix with a fixed λ.
    Constant(f64),
    /// Let the adaptor decide per token whether to retrieve and with what λ.
    Adaptive(&'a Adaptor),
}

/// Result of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub perplexity: f64,
    pub tokens: usize,
    /// Tokens whose log-probability hit the reporting floor.
    pub floored_tokens: usize,
    pub tokens_per_second: f64,
    /// Throughput relative to the benchmark baseline, when one is set.
    pub speedup: Option<f64>,
    /// Index queries issued per token.
    pub retrieval_fraction: f64,
    pub datastore_records: Option<usize>,
    /// Records relative to the unpruned datastore, when known.
    pub retention: Option<f64>,
    pub key_dim: Option<usize>,
    pub lambda: Option<f64>,
    pub config_hash: String,
    pub threads: usize,
    pub wall_seconds: f64,
    /// Time in the parametric model and key encoder.
    pub nlm_seconds: f64,
    /// Time in gating, search and distribution mixing.
    pub knn_seconds: f64,
}

/// Token-level evaluation: per position run the LM and encoder, optionally
/// gate, search and mix, and accumulate the target's log-probability.
pub fn eval_stream(
    base: &BaseModel,
    retriever: Option<&Retriever>,
    weighting: Weighting<'_>,
    corpus: &Corpus,
    label: &str,
    max_tokens: Option<usize>,
) -> Result<EvalReport> {
    let needs_index = !matches!(weighting, Weighting::Parametric);
    if needs_index && retriever.is_none() {
        return invalid("retrieval mode requested without a datastore");
    }
    let counter = retriever.map(|r| CountingIndex::new(&*r.index));
    let mut acc = PerplexityAccumulator::default();
    let limit = max_tokens.unwrap_or(usize::MAX);
    let mut nlm_time = 0.0;
    let mut knn_time = 0.0;
    let start = Instant::now();
    'outer: for seq in corpus.sequences(base.policy).iter() {
        for t in 0..seq.len() {
            if acc.count() >= limit {
                break 'outer;
            }
            let ctx = &seq[..t];
            let target = seq[t];
            let t0 = Instant::now();
            let step = lm_step(&base.lm, &base.encoder, ctx);
            let t1 = Instant::now();
            nlm_time += (t1 - t0).as_secs_f64();
            let log_prob = match weighting {
                Weighting::Parametric => step.p_nlm.prob(target).ln(),
                Weighting::Constant(lambda) => {
                    let r = retriever.unwrap();
                    let p_knn = r.knn_with(counter.as_ref().unwrap(), &step.ctx_vec)?;
                    interpolate(&p_knn, &step.p_nlm, lambda)?.prob(target).ln()
                }
                Weighting::Adaptive(adaptor) => {
                    let r = retriever.unwrap();
                    let features = Features::from_step(&step, &base.suffix, ctx);
                    let pred = adaptive_gate(adaptor, &features, &step.p_nlm, r, counter.as_ref().unwrap())?;
                    pred.prob(target).ln()
                }
            };
            knn_time += t1.elapsed().as_secs_f64();
            acc.add(log_prob);
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let queries = counter.as_ref().map_or(0, |c| c.queries());
    Ok(EvalReport {
        label: label.to_string(),
        perplexity: acc.perplexity(),
        tokens: acc.count(),
        floored_tokens: acc.floored(),
        tokens_per_second: acc.count() as f64 / wall.max(1e-12),
        speedup: None,
        retrieval_fraction: queries as f64 / acc.count().max(1) as f64,
        datastore_records: retriever.map(|r| r.datastore.len()),
        retention: None,
        key_dim: retriever.map(|r| r.datastore.dim()),
        lambda: match weighting {
            Weighting::Constant(l) => Some(l),
            _ => None,
        },
        config_hash: String::new(),
        threads: rayon::current_num_threads(),
        wall_seconds: wall,
        nlm_seconds: nlm_time,
        knn_seconds: knn_time,
    })
}

fn adaptive_gate(
    adaptor: &Adaptor,
    features: &Features,
    p_nlm: &crate::dist::DenseDist,
    r: &Retriever,
    index: &dyn SearchIndex,
) -> Result<crate::dist::DenseDist> {
    let q = r.query(&features.ctx)?;
    if r.distance_power == 1.0 {
        return Ok(adaptive_predict(adaptor, features, p_nlm, &q, index, &r.datastore, r.k)?.dist);
    }
    let lambda = adaptor.lambda(features)?;
    if lambda <= adaptor.threshold {
        return Ok(p_nlm.clone());
    }
    interpolate(&r.knn_with(index, &features.ctx)?, p_nlm, lambda)
}

/// Per-token adaptor weights with gating applied: 0 where the gate skips.
pub fn gated_lambdas(adaptor: &Adaptor, records: &[LmRecord]) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| {
            let l = adaptor.lambda(&r.features)?;
            Ok(if l <= adaptor.threshold { 0.0 } else { l })
        })
        .collect()
}
