//! Choose the most aggressive merge K, key dimension and skip fraction whose
//! validation perplexity stays within 0.1 of vanilla retrieval.
//!
//! `cargo run --release --example select_hyperparameters -- [scale] [budget]`

use knnlm::harness::report::table;
use knnlm::harness::{select_settings, PipelineConfig, Workspace};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let mut args = std::env::args().skip(1);
    let scale: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let budget: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    let s = select_settings(&ws, &[2, 4, 8, 16], &[48, 32, 16, 8], &[0.1, 0.2, 0.3, 0.4, 0.5], budget)?;
    let rows: Vec<Vec<String>> = s
        .candidates
        .iter()
        .map(|c| {
            vec![
                c.method.to_string(),
                c.setting.to_string(),
                format!("{:.3}", c.valid_perplexity),
                format!("{:+.3}", c.valid_perplexity - c.vanilla_perplexity),
                if c.within_budget { "yes" } else { "no" }.to_string(),
            ]
        })
        .collect();
    print!("{}", table(&["method", "setting", "valid ppl", "vs vanilla", "within budget"], &rows));
    println!(
        "selected: gm K = {:?}, dr dim = {:?}, ar fraction = {:?} (budget {budget})",
        s.gm_k, s.dr_dim, s.ar_fraction
    );
    Ok(())
}
