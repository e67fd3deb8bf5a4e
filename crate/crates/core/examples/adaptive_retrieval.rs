//! Train the retrieval gate, then trade retrieval calls for perplexity by
//! moving its threshold. A counting index confirms how many searches ran.
//!
//! `cargo run --release --example adaptive_retrieval -- [scale]`

use knnlm::adaptor::{adaptive_predict, select_lambda_threshold};
use knnlm::harness::ablation::adaptor_lambdas;
use knnlm::harness::{PipelineConfig, Workspace};
use knnlm::index::CountingIndex;
use knnlm::lm::{lm_step, ContextPolicy};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    let r = ws.retriever_for(ws.datastore()?.clone())?;
    let (adaptor, log) = ws.train_adaptor(&r, &ws.config.adaptor_config())?;
    println!(
        "trained {} parameters, best epoch {} of {}, held-out ppl {:.3}",
        adaptor.net.num_params(),
        log.best_epoch,
        log.epochs.len(),
        log.best_holdout_ppl
    );

    let lambdas = adaptor_lambdas(&adaptor, ws.test_records())?;
    let probs = ws.test_probs(&r)?;
    println!("{:>9}  {:>9}  {:>9}", "skipped", "searches", "test ppl");
    for fraction in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let gate = adaptor.clone().with_threshold(select_lambda_threshold(&lambdas, fraction)?);
        let ppl = probs.perplexity_with(|i| if lambdas[i] <= gate.threshold { 0.0 } else { lambdas[i] });
        println!("{:>8.0}%  {:>9}  {ppl:>9.3}", 100.0 * fraction, searches(&ws, &gate, &r, 500)?);
    }
    Ok(())
}

/// Run the gated predictor over the first `limit` test tokens and count the
/// index queries it issued.
fn searches(
    ws: &Workspace,
    gate: &knnlm::adaptor::Adaptor,
    r: &knnlm::harness::Retriever,
    limit: usize,
) -> knnlm::Result<usize> {
    let counter = CountingIndex::new(r.index.as_ref());
    let base = &ws.base;
    let mut seen = 0;
    let mut result = Ok(());
    ws.splits.test.for_each_position(ContextPolicy::PerDocument, |ctx, _| {
        if seen >= limit || result.is_err() {
            return;
        }
        seen += 1;
        let step = lm_step(&base.lm, &base.encoder, ctx);
        let features = knnlm::adaptor::Features::from_step(&step, &base.suffix, ctx);
        result = r.query(&step.ctx_vec).and_then(|q| {
            adaptive_predict(gate, &features, &step.p_nlm, &q, &counter, &r.datastore, r.k).map(|_| ())
        });
    });
    result?;
    Ok(counter.queries())
}
