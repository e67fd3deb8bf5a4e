//! Hyperparameter selection for the combined model: for each method, the
//! most aggressive setting whose validation perplexity stays within a budget
//! of vanilla retrieval.
//!
//! Greedy merging and dimension reduction are scored on the validation split
//! with λ re-tuned per candidate. The adaptive-retrieval skip fraction is
//! scored on the adaptor's own held-out tail of the validation split, which
//! the adaptor never trains on.

use serde::Serialize;

use super::ablation::adaptor_lambdas;
use super::eval::{tune_lambda, TokenProbs};
use super::pipeline::{Variant, Workspace};
use crate::adaptor::{gated_perplexity, holdout_count, select_lambda_threshold, PreparedExample};
use crate::error::{invalid, Result};

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub method: &'static str,
    /// K for greedy merging, the key dimension for reduction, the skip
    /// fraction for adaptive retrieval.
    pub setting: f64,
    pub valid_perplexity: f64,
    /// Same-split perplexity of vanilla retrieval.
    pub vanilla_perplexity: f64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub budget: f64,
    pub gm_k: Option<usize>,
    pub dr_dim: Option<usize>,
    pub ar_fraction: Option<f64>,
    pub candidates: Vec<Candidate>,
}

/// The last setting in `candidates` (ordered from least to most aggressive)
/// whose perplexity is at most `vanilla + budget`.
pub fn most_aggressive<T: Copy>(candidates: &[(T, f64)], vanilla: f64, budget: f64) -> Option<T> {
    candidates
        .iter()
        .rev()
        .find(|c| c.1 <= vanilla + budget)
        .map(|c| c.0)
}

fn tuned_valid_ppl(ws: &Workspace, variant: &Variant) -> Result<f64> {
    let r = ws.retriever(variant)?;
    Ok(tune_lambda(&ws.valid_probs(&r)?)?.perplexity)
}

/// Score every candidate and pick the most aggressive setting per method.
/// `gm_ks` ascends (more merging), `dims` descends (fewer dimensions) and
/// `fractions` ascends (more skipping).
pub fn select_settings(
    ws: &Workspace,
    gm_ks: &[usize],
    dims: &[usize],
    fractions: &[f64],
    budget: f64,
) -> Result<Selection> {
    if !(budget >= 0.0) {
        return invalid("selection budget must be non-negative");
    }
    let vanilla = tuned_valid_ppl(ws, &Variant::default())?;
    let mut candidates = Vec::new();
    let mut push = |method, setting: f64, ppl: f64, base: f64| {
        candidates.push(Candidate {
            method,
            setting,
            valid_perplexity: ppl,
            vanilla_perplexity: base,
            within_budget: ppl <= base + budget,
        })
    };

    let mut gm = Vec::new();
    for &k in gm_ks {
        let ppl = tuned_valid_ppl(ws, &Variant { gm_k: Some(k), ..Variant::default() })?;
        push("gm", k as f64, ppl, vanilla);
        gm.push((k, ppl));
    }
    let mut dr = Vec::new();
    for &d in dims {
        let ppl = tuned_valid_ppl(ws, &Variant { dr_dim: Some(d), ..Variant::default() })?;
        push("dr", d as f64, ppl, vanilla);
        dr.push((d, ppl));
    }

    let mut ar = Vec::new();
    let mut ar_base = vanilla;
    if !fractions.is_empty() {
        let r = ws.retriever(&Variant::default())?;
        let config = ws.config.adaptor_config();
        let (adaptor, _) = ws.train_adaptor(&r, &config)?;
        let records = ws.valid_records();
        let probs = ws.valid_probs(&r)?;
        let tail = records.len() - holdout_count(records.len(), config.holdout);
        let hold = TokenProbs {
            p_knn: probs.p_knn[tail..].to_vec(),
            p_nlm: probs.p_nlm[tail..].to_vec(),
        };
        let lambdas = adaptor_lambdas(&adaptor, &records[tail..])?;
        let examples: Vec<PreparedExample> = hold
            .p_knn
            .iter()
            .zip(&hold.p_nlm)
            .map(|(&p_knn, &p_nlm)| PreparedExample {
                ctx: Vec::new(),
                scalars: Vec::new(),
                p_knn,
                p_nlm,
            })
            .collect();
        ar_base = tune_lambda(&hold)?.perplexity;
        for &f in fractions {
            let ppl = gated_perplexity(&lambdas, &examples, select_lambda_threshold(&lambdas, f)?);
            push("ar", f, ppl, ar_base);
            ar.push((f, ppl));
        }
    }
    Ok(Selection {
        budget,
        gm_k: most_aggressive(&gm, vanilla, budget),
        dr_dim: most_aggressive(&dr, vanilla, budget),
        ar_fraction: most_aggressive(&ar, ar_base, budget),
        candidates,
    })
}
