//! Shrink a datastore with each pruning method and compare test perplexity
//! at the resulting size.
//!
//! `cargo run --release --example prune_datastore -- [scale]`

use knnlm::harness::report::table;
use knnlm::harness::{PipelineConfig, Weighting, Workspace};
use knnlm::pruning::{prune, retained_count, PruneMethod};
use knnlm::synth::{generate, ToyParams};

fn main() -> knnlm::Result<()> {
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let c = generate(&ToyParams::default().scaled(scale));
    let ws = Workspace::from_texts(PipelineConfig::toy(), &c.generic, &c.datastore, &c.valid, &c.test)?;
    let ds = ws.datastore()?.clone();
    let full = ws.retriever_for(ds.clone())?;
    let (lambda, _) = ws.lambda_for(&full)?;

    // Greedy merging decides its own size; the other methods match it.
    let merged = ws.merged_datastore(ws.config.gm_k)?;
    let retain = merged.len() as f64 / ds.len() as f64;
    let methods = [
        PruneMethod::GreedyMerge { k: ws.config.gm_k },
        PruneMethod::Random { retain },
        PruneMethod::KMeans {
            top_m: ws.config.kmeans_top_m,
            ratio: retain,
        },
        PruneMethod::Rank {
            retain,
            k: ws.config.rank_k,
        },
    ];
    println!("full datastore {} records, target {} records", ds.len(), retained_count(ds.len(), retain));
    let mut rows = vec![vec![
        "full".to_string(),
        ds.len().to_string(),
        format!("{:.0}", ds.total_weight()),
        format!("{:.3}", ws.cached_perplexity(&full, Weighting::Constant(lambda))?),
    ]];
    for method in methods {
        let (out, report) = prune(&ds, method, full.index.as_ref(), ws.config.seed)?;
        let r = ws.retriever_for(out)?;
        rows.push(vec![
            report.method,
            report.output_count.to_string(),
            format!("{:.0}", report.total_weight_after),
            format!("{:.3}", ws.cached_perplexity(&r, Weighting::Constant(lambda))?),
        ]);
    }
    print!("{}", table(&["datastore", "records", "weight", "test ppl"], &rows));
    Ok(())
}
