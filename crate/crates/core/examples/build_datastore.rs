//! Build a datastore from a corpus, inspect it and round-trip it through the
//! binary format in full and half precision.
//!
//! `cargo run --release --example build_datastore`

use knnlm::datastore::{build_datastore, SaveOptions};
use knnlm::lm::{ContextEncoder, ContextPolicy, Corpus, EncoderParams, Vocabulary};
use knnlm::synth::{generate, ToyParams};
use knnlm::Datastore;

fn main() -> knnlm::Result<()> {
    let c = generate(&ToyParams::default().scaled(0.1));
    let vocab = Vocabulary::from_texts([c.generic.as_str(), c.datastore.as_str()]);
    let corpus = Corpus::from_text(&c.datastore, &vocab);
    let encoder = ContextEncoder::new(EncoderParams {
        vocab_size: vocab.len(),
        dim: 32,
        ..EncoderParams::default()
    });
    let ds = build_datastore(&corpus, &encoder, ContextPolicy::PerDocument)?;
    let stats = ds.stats();
    println!("{} records of dim {}, {} bytes in memory", stats.count, stats.dim, stats.bytes);
    println!("distinct next tokens: {}", stats.value_histogram.len());
    println!("provenance: {}", ds.provenance());

    let r = ds.record(0);
    println!(
        "record 0: value {:?}, weight {}, key[..4] {:?}",
        vocab.token(r.value),
        r.weight,
        &r.key[..4]
    );

    let full = ds.to_bytes(SaveOptions::default());
    let half = ds.to_bytes(SaveOptions { half_precision: true });
    println!("file size: {} bytes (f32 keys), {} bytes (f16 keys)", full.len(), half.len());
    assert_eq!(Datastore::from_bytes(&full)?, ds);
    let back = Datastore::from_bytes(&half)?;
    let worst = ds
        .keys()
        .iter()
        .zip(back.keys())
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    println!("f32 round-trip exact; f16 round-trip max key error {worst:.2e}");
    Ok(())
}
