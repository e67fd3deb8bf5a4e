//! PCA on datastore keys: explained variance per output size and the
//! perplexity of retrieval in the reduced space.
//!
//! `cargo run --release --example reduce_dimension -- [scale]`

use knnlm::harness::report::table;
use knnlm::harness::{PipelineConfig, Weighting, Workspace};
use knnlm::pca::{reduce_datastore, PcaParams};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    let ds = ws.datastore()?.clone();
    let full = ws.retriever_for(ds.clone())?;
    let (lambda, _) = ws.lambda_for(&full)?;

    let mut rows = vec![vec![
        ds.dim().to_string(),
        "1.000".into(),
        format!("{:.3}", ws.cached_perplexity(&full, Weighting::Constant(lambda))?),
    ]];
    for dim in [32, 16, 8, 4] {
        let (reduced, t) = reduce_datastore(&ds, &PcaParams::new(dim, ws.config.seed))?;
        let explained: f64 = t.explained_variance().iter().sum();
        // The retriever maps each query through the transform stored with the keys.
        let r = ws.retriever_for(reduced)?;
        rows.push(vec![
            dim.to_string(),
            format!("{explained:.3}"),
            format!("{:.3}", ws.cached_perplexity(&r, Weighting::Constant(lambda))?),
        ]);
    }
    print!("{}", table(&["key dim", "explained variance", "test ppl"], &rows));
    Ok(())
}
