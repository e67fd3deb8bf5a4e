//! Throughput benchmark: median tokens/s over repeated streaming passes,
//! with speedup relative to vanilla retrieval at every token.

use serde::Serialize;

use super::eval::EvalReport;
use super::pipeline::{Mode, Model, Workspace};
use crate::error::{invalid, Result};

/// Tokens in the warmup pass that precedes timing.
pub const WARMUP_TOKENS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    /// Report of the first timed repetition with `tokens_per_second` replaced
    /// by the median and `speedup` filled in when vanilla was benchmarked.
    pub report: EvalReport,
    /// Throughput of every repetition, in run order.
    pub samples: Vec<f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Time already-built models.
pub fn bench_models(
    ws: &Workspace,
    models: &[Model],
    repetitions: usize,
    max_tokens: Option<usize>,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return invalid("benchmark needs at least one repetition");
    }
    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        ws.evaluate(model, Some(WARMUP_TOKENS.min(max_tokens.unwrap_or(usize::MAX))))?;
        let mut first = None;
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let r = ws.evaluate(model, max_tokens)?;
            samples.push(r.tokens_per_second);
            first.get_or_insert(r);
        }
        let mut report = first.unwrap();
        report.tokens_per_second = median(&samples);
        rows.push(BenchRow { report, samples });
    }
    let baseline = models
        .iter()
        .position(|m| m.mode == Mode::Knnlm)
        .map(|i| rows[i].report.tokens_per_second);
    if let Some(base) = baseline {
        for row in &mut rows {
            row.report.speedup = Some(row.report.tokens_per_second / base);
        }
    }
    Ok(rows)
}

/// Build every requested mode, warm up, then time `repetitions` passes.
pub fn bench_speed(
    ws: &Workspace,
    modes: &[Mode],
    repetitions: usize,
    max_tokens: Option<usize>,
) -> Result<Vec<BenchRow>> {
    let models = modes
        .iter()
        .map(|&m| ws.build_model(m))
        .collect::<Result<Vec<_>>>()?;
    bench_models(ws, &models, repetitions, max_tokens)
}
