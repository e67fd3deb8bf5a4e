//! Which tokens to skip and which weight to use: learned against random skip
//! masks, crossed with learned against constant λ, at several skip rates.
//!
//! `cargo run --release --example ablation -- [scale]`

use knnlm::harness::ablation::adaptor_lambdas;
use knnlm::harness::report::ablation_table;
use knnlm::harness::{run_ablation_grid, PipelineConfig, Workspace};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    let r = ws.retriever_for(ws.datastore()?.clone())?;
    let (lambda, _) = ws.lambda_for(&r)?;
    let (adaptor, _) = ws.train_adaptor(&r, &ws.config.adaptor_config())?;
    let lambdas = adaptor_lambdas(&adaptor, ws.test_records())?;
    let cells = run_ablation_grid(&ws.test_probs(&r)?, &lambdas, lambda, &ws.config.ablate_fractions, &[0, 1, 2])?;
    print!("{}", ablation_table(&cells));
    Ok(())
}
