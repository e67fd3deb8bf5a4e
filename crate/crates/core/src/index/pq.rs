use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::squared_l2;
use crate::error::{invalid, Result};
use crate::kmeans::{kmeans, nearest, KMeansParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PqParams {
    /// Number of subspaces; must divide the key dimension.
    pub m: usize,
    /// Bits per sub-code, 4 or 8.
    pub bits: u32,
    pub seed: u64,
    pub max_iters: usize,
    /// Train each sub-quantizer on at most this many sampled rows.
    pub train_sample_cap: Option<usize>,
}

impl PqParams {
    pub fn new(m: usize, bits: u32, seed: u64) -> Self {
        Self {
            m,
            bits,
            seed,
            max_iters: 25,
            train_sample_cap: Some(64 << bits),
        }
    }
}

/// Product quantizer: `m` independent codebooks of `2^bits` codewords, one
/// per contiguous `dim / m` slice of the key.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    bits: u32,
    /// `m × ksub × dsub`
    codewords: Vec<f32>,
}

impl PqCodebook {
    pub(crate) fn from_parts(dim: usize, m: usize, bits: u32, codewords: Vec<f32>) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) || !(bits == 4 || bits == 8) {
            return invalid("invalid PQ shape");
        }
        if codewords.len() != dim << bits {
            return invalid("PQ codeword table has the wrong size");
        }
        Ok(Self {
            dim,
            m,
            bits,
            codewords,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn ksub(&self) -> usize {
        1 << self.bits
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    pub(crate) fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn codeword(&self, sub: usize, code: u8) -> &[f32] {
        let dsub = self.dsub();
        let start = (sub * self.ksub() + code as usize) * dsub;
        &self.codewords[start..start + dsub]
    }

    fn sub_table(&self, sub: usize) -> &[f32] {
        let span = self.ksub() * self.dsub();
        &self.codewords[sub * span..(sub + 1) * span]
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        let dsub = self.dsub();
        (0..self.m)
            .map(|s| nearest(self.sub_table(s), dsub, &v[s * dsub..(s + 1) * dsub]).0 as u8)
            .collect()
    }

    /// Codes for every row of `keys`, `m` bytes per row.
    pub fn encode_all(&self, keys: &[f32]) -> Vec<u8> {
        keys.chunks_exact(self.dim).flat_map(|v| self.encode(v)).collect()
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim);
        for (s, &c) in code.iter().enumerate() {
            out.extend_from_slice(self.codeword(s, c));
        }
        out
    }

    /// Squared distances from each query slice to every codeword:
    /// `m × ksub` entries.
    pub fn distance_table(&self, query: &[f32]) -> Vec<f32> {
        let dsub = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.ksub());
        for s in 0..self.m {
            let q = &query[s * dsub..(s + 1) * dsub];
            for cw in self.sub_table(s).chunks_exact(dsub) {
                table.push(squared_l2(q, cw));
            }
        }
        table
    }

    /// Asymmetric distance of one code using a precomputed table.
    #[inline]
    pub fn table_distance(&self, table: &[f32], code: &[u8]) -> f32 {
        let ksub = self.ksub();
        code.iter()
            .enumerate()
            .map(|(s, &c)| table[s * ksub + c as usize])
            .sum()
    }
}

/// Asymmetric PQ distance: Σ over subspaces of the squared L2 between the
/// query slice and the record's codeword.
pub fn pq_distance(codebook: &PqCodebook, code: &[u8], query: &[f32]) -> f32 {
    let dsub = codebook.dsub();
    code.iter()
        .enumerate()
        .map(|(s, &c)| squared_l2(&query[s * dsub..(s + 1) * dsub], codebook.codeword(s, c)))
        .sum()
}

/// Train one k-means codebook per subspace.
pub fn train_pq(keys: &[f32], dim: usize, params: &PqParams) -> Result<PqCodebook> {
    if params.m == 0 || !dim.is_multiple_of(params.m) {
        return invalid(format!("dimension {dim} is not divisible by m = {}", params.m));
    }
    if !(params.bits == 4 || params.bits == 8) {
        return invalid(format!("PQ bits must be 4 or 8, got {}", params.bits));
    }
    if keys.is_empty() || !keys.len().is_multiple_of(dim) {
        return invalid("PQ training data is empty or ragged");
    }
    let n = keys.len() / dim;
    let rows: Vec<usize> = match params.train_sample_cap {
        Some(cap) if cap < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9);
            let mut r = sample(&mut rng, n, cap).into_vec();
            r.sort_unstable();
            r
        }
        _ => (0..n).collect(),
    };
    let dsub = dim / params.m;
    let ksub = 1usize << params.bits;
    let mut codewords = Vec::with_capacity(dim * ksub);
    for s in 0..params.m {
        let mut sub = Vec::with_capacity(rows.len() * dsub);
        for &r in &rows {
            sub.extend_from_slice(&keys[r * dim + s * dsub..r * dim + (s + 1) * dsub]);
        }
        let k = ksub.min(rows.len());
        let km = kmeans(
            &sub,
            dsub,
            &KMeansParams {
                k,
                max_iters: params.max_iters,
                seed: params.seed.wrapping_add(s as u64),
            },
        )?;
        codewords.extend_from_slice(&km.centroids);
        // Pad unused codewords with copies of codeword 0; ties never pick them.
        for _ in k..ksub {
            codewords.extend_from_slice(&km.centroids[..dsub]);
        }
    }
    PqCodebook::from_parts(dim, params.m, params.bits, codewords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn data(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn lossless_when_every_value_has_a_codeword() {
        // 4 distinct values per coordinate, 16 codewords per 1-dim subspace.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 6;
        let keys: Vec<f32> = (0..300 * dim).map(|_| rng.random_range(0..4) as f32 * 0.5).collect();
        let cb = train_pq(&keys, dim, &PqParams::new(dim, 4, 1)).unwrap();
        let q = data(1, dim, 9);
        for v in keys.chunks_exact(dim).take(50) {
            let code = cb.encode(v);
            assert_eq!(cb.decode(&code), v);
            let exact = squared_l2(v, &q);
            assert!((pq_distance(&cb, &code, &q) - exact).abs() < 1e-5);
        }
    }

    #[test]
    fn reconstruction_query_has_zero_distance() {
        let dim = 8;
        let keys = data(500, dim, 2);
        let cb = train_pq(&keys, dim, &PqParams::new(4, 4, 0)).unwrap();
        let code = cb.encode(&keys[..dim]);
        let recon = cb.decode(&code);
        assert_eq!(pq_distance(&cb, &code, &recon), 0.0);
        assert_eq!(cb.encode(&recon), code);
        let table = cb.distance_table(&recon);
        assert_eq!(cb.table_distance(&table, &code), 0.0);
    }

    #[test]
    fn table_matches_direct() {
        let dim = 8;
        let keys = data(300, dim, 3);
        let cb = train_pq(&keys, dim, &PqParams::new(2, 8, 0)).unwrap();
        let q = data(1, dim, 4);
        let table = cb.distance_table(&q);
        for v in keys.chunks_exact(dim).take(20) {
            let code = cb.encode(v);
            let a = cb.table_distance(&table, &code);
            let b = pq_distance(&cb, &code, &q);
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let keys = data(10, 6, 0);
        assert!(train_pq(&keys, 6, &PqParams::new(4, 8, 0)).is_err());
        assert!(train_pq(&keys, 6, &PqParams::new(3, 5, 0)).is_err());
    }
}
