//! End-to-end run on the synthetic domain-shift benchmark: every mode,
//! evaluated on the test split, printed as a table.
//!
//! `cargo run --release --example toy_benchmark -- [scale]`

use std::time::Instant;

use knnlm::harness::report::eval_table;
use knnlm::harness::{Mode, PipelineConfig, Workspace};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let start = Instant::now();
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    println!("vocabulary {} tokens, datastore {} records", ws.vocab.len(), ws.datastore()?.len());
    let mut reports = Vec::new();
    for mode in Mode::ALL_MODES {
        let t = Instant::now();
        let (model, report) = ws.eval_mode(mode)?;
        if let Some(log) = &model.train_log {
            println!(
                "{}: adaptor best epoch {} of {}, held-out ppl {:.3}",
                mode.label(),
                log.best_epoch,
                log.epochs.len(),
                log.best_holdout_ppl
            );
        }
        println!("{} built and evaluated in {:.1}s", mode.label(), t.elapsed().as_secs_f64());
        reports.push(report);
    }
    print!("{}", eval_table(&reports));
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
