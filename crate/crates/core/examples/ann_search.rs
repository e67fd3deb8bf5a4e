//! Exact flat search against inverted-file search with and without product
//! quantization: recall of the true neighbors and query throughput.
//!
//! `cargo run --release --example ann_search`

use std::collections::HashSet;
use std::time::Instant;

use knnlm::index::{flat_search, FlatIndex, IvfIndex, IvfParams, PqParams};
use knnlm::lm::TokenId;
use knnlm::{Datastore, SearchIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 20_000;
const DIM: usize = 32;
const K: usize = 16;
const QUERIES: usize = 300;

/// Clustered keys, as produced by a context encoder.
fn clustered(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let centers: Vec<f32> = (0..64 * DIM).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    let mut keys = Vec::with_capacity(n * DIM);
    for _ in 0..n {
        let c = rng.random_range(0..64);
        keys.extend(centers[c * DIM..(c + 1) * DIM].iter().map(|x| x + 0.2 * (rng.random::<f32>() - 0.5)));
    }
    keys
}

fn recall(index: &dyn SearchIndex, ds: &Datastore, queries: &[f32]) -> knnlm::Result<(f64, f64)> {
    let mut found = 0;
    let start = Instant::now();
    let mut approx = Vec::new();
    for q in queries.chunks_exact(DIM) {
        approx.push(index.search(ds, q, K)?);
    }
    let qps = QUERIES as f64 / start.elapsed().as_secs_f64();
    for (q, hits) in queries.chunks_exact(DIM).zip(approx) {
        let truth: HashSet<u32> = flat_search(ds, q, K)?.iter().map(|h| h.id).collect();
        found += hits.iter().filter(|h| truth.contains(&h.id)).count();
    }
    Ok((found as f64 / (QUERIES * K) as f64, qps))
}

fn main() -> knnlm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let keys = clustered(&mut rng, N);
    let values = (0..N).map(|i| TokenId((i % 100) as u32)).collect();
    let ds = Datastore::from_parts(DIM, keys, values, vec![1.0; N], "example")?;
    let queries = clustered(&mut rng, QUERIES);

    let (r, qps) = recall(&FlatIndex, &ds, &queries)?;
    println!("{:<28} recall@{K} {r:.3}  {qps:>9.0} queries/s", FlatIndex.describe());
    for nprobe in [1, 4, 16] {
        let mut p = IvfParams::new(128, 0);
        p.nprobe = nprobe;
        let ivf = IvfIndex::build(&ds, &p)?;
        let (r, qps) = recall(&ivf, &ds, &queries)?;
        println!("{:<28} recall@{K} {r:.3}  {qps:>9.0} queries/s", ivf.describe());
    }
    // PQ codes score candidates approximately; inside a tight cluster they
    // cannot order neighbors the way exact distances do.
    let mut p = IvfParams::new(128, 0);
    p.nprobe = 16;
    p.pq = Some(PqParams::new(8, 8, 0));
    let ivfpq = IvfIndex::build(&ds, &p)?;
    let (r, qps) = recall(&ivfpq, &ds, &queries)?;
    println!("{:<28} recall@{K} {r:.3}  {qps:>9.0} queries/s", ivfpq.describe());
    Ok(())
}
