//! Pick the global interpolation weight on validation data and check it on
//! the test split.
//!
//! `cargo run --release --example tune_lambda -- [scale]`

use knnlm::harness::{tune_lambda, PipelineConfig, Workspace};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    let r = ws.retriever_for(ws.datastore()?.clone())?;
    let valid = ws.valid_probs(&r)?;
    let test = ws.test_probs(&r)?;
    let t = tune_lambda(&valid)?;
    println!("{:>6}  {:>10}  {:>10}", "λ", "valid ppl", "test ppl");
    for &(lambda, ppl) in &t.grid {
        let mark = if lambda == t.lambda { " <" } else { "" };
        println!("{lambda:>6.2}  {ppl:>10.3}  {:>10.3}{mark}", test.perplexity(lambda));
    }
    println!(
        "chosen λ = {:.2}; the neighbor distribution beats the parametric one on {:.1}% of test tokens",
        t.lambda,
        100.0 * test.knn_wins()
    );
    Ok(())
}
