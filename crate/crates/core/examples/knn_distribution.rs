//! From retrieved neighbors to a next-token distribution, and interpolation
//! with the parametric model.
//!
//! `cargo run --example knn_distribution`

use knnlm::dist::{interpolate, knn_distribution, weighted_knn_distribution};
use knnlm::lm::TokenId;
use knnlm::{DenseDist, NeighborHit};

fn hit(id: u32, distance: f32, value: u32, weight: f32) -> NeighborHit {
    NeighborHit {
        id,
        distance,
        value: TokenId(value),
        weight,
    }
}

fn main() -> knnlm::Result<()> {
    // Token 2 is retrieved twice; the second record stands for 3 merged ones.
    let hits = [hit(7, 0.1, 2, 1.0), hit(3, 0.4, 1, 1.0), hit(9, 0.9, 2, 3.0)];

    let plain = knn_distribution(&hits)?;
    let weighted = weighted_knn_distribution(&hits)?;
    println!("p_kNN ignoring weights: {:?}", plain.entries());
    println!("p_kNN with weights:     {:?}", weighted.entries());

    // Shifting every distance by a constant leaves the distribution unchanged,
    // up to the f32 rounding of the shifted distances.
    let shifted: Vec<NeighborHit> = hits.iter().map(|h| NeighborHit { distance: h.distance + 5.0, ..*h }).collect();
    let again = weighted_knn_distribution(&shifted)?;
    for (a, b) in weighted.entries().iter().zip(again.entries()) {
        assert!((a.1 - b.1).abs() < 1e-6);
    }

    let p_nlm = DenseDist::new(vec![0.1, 0.6, 0.2, 0.1])?;
    for lambda in [0.0, 0.25, 0.5, 1.0] {
        let p = interpolate(&weighted, &p_nlm, lambda)?;
        let probs: Vec<String> = p.probs().iter().map(|x| format!("{x:.3}")).collect();
        println!("λ = {lambda:<4}  p = [{}]  sum {:.6}", probs.join(", "), p.probs().iter().sum::<f64>());
    }
    Ok(())
}
