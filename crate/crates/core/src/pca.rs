//! Principal-component projection of datastore keys, with an optional random
//! rotation of the reduced space.
//!
//! The transform maps `x ↦ R·C·(x − μ)` where `C` holds the top eigenvectors
//! of the sample covariance as rows and `R` is orthogonal (identity when
//! rotation is off). No whitening is applied, so with `d_out = d` and any `R`
//! the map is an isometry up to float rounding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::datastore::Datastore;
use crate::error::{invalid, Result};

const SECTION: &[u8; 4] = b"KNNT";
const SECTION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    input_dim: usize,
    output_dim: usize,
    mean: Vec<f64>,
    /// `output_dim × input_dim`, orthonormal rows, descending variance.
    components: Vec<f64>,
    /// `output_dim × output_dim` orthogonal matrix.
    rotation: Option<Vec<f64>>,
    /// Covariance eigenvalues of the kept components.
    variances: Vec<f64>,
    /// Trace of the covariance.
    total_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcaParams {
    pub output_dim: usize,
    /// Fit on at most this many uniformly sampled rows.
    pub sample_cap: Option<usize>,
    pub rotate: bool,
    pub seed: u64,
}

impl PcaParams {
    pub fn new(output_dim: usize, seed: u64) -> Self {
        Self {
            output_dim,
            sample_cap: Some(100_000),
            rotate: true,
            seed,
        }
    }
}

impl PcaTransform {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn rotation(&self) -> Option<&[f64]> {
        self.rotation.as_deref()
    }

    /// Eigenvalues of the kept components, non-increasing.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Fraction of total variance captured by each kept component.
    pub fn explained_variance(&self) -> Vec<f64> {
        if self.total_variance > 0.0 {
            self.variances.iter().map(|v| v / self.total_variance).collect()
        } else {
            vec![0.0; self.variances.len()]
        }
    }

    /// `C·(x − μ)` before rotation.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return invalid(format!(
                "transform expects dimension {}, got {}",
                self.input_dim,
                x.len()
            ));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&a, m)| a as f64 - m).collect();
        Ok(self
            .components
            .chunks_exact(self.input_dim)
            .map(|row| dot(row, &centered))
            .collect())
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        let y = self.project(x)?;
        let out = match &self.rotation {
            Some(r) => r.chunks_exact(self.output_dim).map(|row| dot(row, &y)).collect::<Vec<_>>(),
            None => y,
        };
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    /// Row-wise [`apply`](Self::apply) over a row-major matrix.
    pub fn apply_batch(&self, xs: &[f32]) -> Result<Vec<f32>> {
        if !xs.len().is_multiple_of(self.input_dim) {
            return invalid("batch length is not a multiple of the input dimension");
        }
        let rows: Result<Vec<Vec<f32>>> = xs
            .par_chunks_exact(self.input_dim)
            .map(|x| self.apply(x))
            .collect();
        Ok(rows?.concat())
    }

    /// Inverse map back to the input space: `Cᵀ·Rᵀ·y + μ`.
    pub fn reconstruct(&self, y: &[f32]) -> Result<Vec<f64>> {
        if y.len() != self.output_dim {
            return invalid("reduced vector has the wrong dimension");
        }
        let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let unrotated: Vec<f64> = match &self.rotation {
            Some(r) => (0..self.output_dim)
                .map(|j| (0..self.output_dim).map(|i| r[i * self.output_dim + j] * y[i]).sum())
                .collect(),
            None => y,
        };
        let mut x = self.mean.clone();
        for (row, &c) in self.components.chunks_exact(self.input_dim).zip(&unrotated) {
            for (xi, &w) in x.iter_mut().zip(row) {
                *xi += w * c;
            }
        }
        Ok(x)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.bytes(SECTION);
        w.u32(SECTION_VERSION);
        w.u32(self.input_dim as u32);
        w.u32(self.output_dim as u32);
        w.u32(self.rotation.is_some() as u32);
        w.f64s(&self.mean);
        w.f64s(&self.components);
        if let Some(r) = &self.rotation {
            w.f64s(r);
        }
        w.f64s(&self.variances);
        w.f64(self.total_variance);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(SECTION)?;
        let version = r.u32()?;
        if version != SECTION_VERSION {
            return r.err(format!("unsupported transform version {version}"));
        }
        let input_dim = r.u32()? as usize;
        let output_dim = r.u32()? as usize;
        let rotated = r.u32()?;
        if input_dim == 0 || output_dim == 0 || output_dim > input_dim || rotated > 1 {
            return r.err("inconsistent transform header");
        }
        let mean = r.f64s(input_dim)?;
        let components = r.f64s(output_dim * input_dim)?;
        let rotation = if rotated == 1 {
            Some(r.f64s(output_dim * output_dim)?)
        } else {
            None
        };
        let variances = r.f64s(output_dim)?;
        let total_variance = r.f64()?;
        Ok(Self {
            input_dim,
            output_dim,
            mean,
            components,
            rotation,
            variances,
            total_variance,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit a PCA transform on the rows of `keys`.
pub fn fit_pca(keys: &[f32], dim: usize, params: &PcaParams) -> Result<PcaTransform> {
    if dim == 0 || !keys.len().is_multiple_of(dim) {
        return invalid("PCA input length is not a multiple of the dimension");
    }
    let d_out = params.output_dim;
    if d_out == 0 || d_out > dim {
        return invalid(format!("output dimension must be in 1..={dim}, got {d_out}"));
    }
    let n = keys.len() / dim;
    let rows: Vec<usize> = match params.sample_cap {
        Some(cap) if cap < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut r = sample(&mut rng, n, cap).into_vec();
            r.sort_unstable();
            r
        }
        _ => (0..n).collect(),
    };
    if rows.len() < d_out + 1 {
        return invalid(format!(
            "PCA to {d_out} dimensions needs at least {} samples, got {}",
            d_out + 1,
            rows.len()
        ));
    }
    let row = |i: usize| &keys[i * dim..(i + 1) * dim];
    let mut mean = vec![0f64; dim];
    for &i in &rows {
        for (m, &x) in mean.iter_mut().zip(row(i)) {
            *m += x as f64;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    let mut cov = vec![0f64; dim * dim];
    let mut centered = vec![0f64; dim];
    for &i in &rows {
        for ((c, &x), m) in centered.iter_mut().zip(row(i)).zip(&mean) {
            *c = x as f64 - m;
        }
        for a in 0..dim {
            let ca = centered[a];
            let out = &mut cov[a * dim..(a + 1) * dim];
            for b in a..dim {
                out[b] += ca * centered[b];
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    for a in 0..dim {
        for b in a..dim {
            let v = cov[a * dim + b] / denom;
            cov[a * dim + b] = v;
            cov[b * dim + a] = v;
        }
    }
    let total_variance = (0..dim).map(|a| cov[a * dim + a]).sum();
    let (values, vectors) = symmetric_eigen(cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(d_out * dim);
    let mut variances = Vec::with_capacity(d_out);
    for &c in order.iter().take(d_out) {
        let mut v: Vec<f64> = (0..dim).map(|r| vectors[r * dim + c]).collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend_from_slice(&v);
        variances.push(values[c].max(0.0));
    }
    let rotation = params
        .rotate
        .then(|| random_rotation(d_out, params.seed.wrapping_add(1)));
    Ok(PcaTransform {
        input_dim: dim,
        output_dim: d_out,
        mean,
        components,
        rotation,
        variances,
        total_variance,
    })
}

/// Eigen-decomposition of a symmetric `n × n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and the eigenvectors as matrix columns.
pub fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut v = vec![0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= scale * 1e-32 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Seeded `d × d` rotation (orthogonal, determinant +1), row-major.
pub fn random_rotation(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Columns of a Gaussian matrix, orthonormalized by Gram-Schmidt.
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..d {
        for _ in 0..2 {
            for i in 0..j {
                let proj = dot(&cols[i], &cols[j]);
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut q = vec![0f64; d * d];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            q[i * d + j] = x;
        }
    }
    if determinant(&q, d) < 0.0 {
        for i in 0..d {
            q[i * d] = -q[i * d];
        }
    }
    q
}

/// Determinant by LU with partial pivoting.
fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
            .unwrap();
        if a[p * n + c] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                a.swap(p * n + k, c * n + k);
            }
            det = -det;
        }
        let pivot = a[c * n + c];
        det *= pivot;
        for r in c + 1..n {
            let f = a[r * n + c] / pivot;
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
        }
    }
    det
}

/// Fit on the datastore's keys and return a copy whose keys live in the
/// reduced space and which carries the transform for query mapping.
pub fn reduce_datastore(ds: &Datastore, params: &PcaParams) -> Result<(Datastore, PcaTransform)> {
    if ds.transform().is_some() {
        return invalid("datastore keys are already reduced");
    }
    let t = fit_pca(ds.keys(), ds.dim(), params)?;
    let out = apply_to_datastore(ds, &t)?;
    Ok((out, t))
}

/// Map every key through `t` and attach `t` to the result.
pub fn apply_to_datastore(ds: &Datastore, t: &PcaTransform) -> Result<Datastore> {
    if ds.transform().is_some() {
        return invalid("datastore keys are already reduced");
    }
    if t.input_dim() != ds.dim() {
        return invalid("transform input dimension does not match datastore");
    }
    let keys = t.apply_batch(ds.keys())?;
    let note = format!(
        "reduce: {} -> {} rotate={}",
        t.input_dim(),
        t.output_dim(),
        t.rotation().is_some()
    );
    let mut out = ds.with_keys(t.output_dim(), keys, &note)?;
    out.set_transform(t.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * (1.0 + (i % d) as f64)) as f32
            })
            .collect()
    }

    #[test]
    fn rank_one_line() {
        let dir = [1.0f32, 2.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys: Vec<f32> = (0..50)
            .flat_map(|_| {
                let t: f32 = rng.random_range(-2.0..2.0);
                dir.map(|x| x * t / 3.0 + 1.0)
            })
            .collect();
        let mut p = PcaParams::new(1, 0);
        p.rotate = false;
        let t = fit_pca(&keys, 3, &p).unwrap();
        let c = t.component(0);
        for (a, b) in c.iter().zip([1.0, 2.0, 2.0]) {
            assert!((a - b / 3.0).abs() < 1e-6);
        }
        assert!((t.explained_variance()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mean_maps_to_zero() {
        let keys = gaussian(200, 6, 1);
        let t = fit_pca(&keys, 6, &PcaParams::new(3, 2)).unwrap();
        let mean: Vec<f32> = t.mean().iter().map(|&m| m as f32).collect();
        for v in t.apply(&mean).unwrap() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn batch_matches_single() {
        let keys = gaussian(100, 8, 4);
        let t = fit_pca(&keys, 8, &PcaParams::new(4, 5)).unwrap();
        let batch = t.apply_batch(&keys).unwrap();
        for (i, x) in keys.chunks_exact(8).enumerate() {
            assert_eq!(t.apply(x).unwrap(), batch[i * 4..(i + 1) * 4]);
        }
    }

    #[test]
    fn rotation_is_special_orthogonal() {
        for d in [1, 2, 5, 16] {
            let r = random_rotation(d, 9);
            for i in 0..d {
                for j in 0..d {
                    let s: f64 = (0..d).map(|k| r[k * d + i] * r[k * d + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((s - want).abs() < 1e-12);
                }
            }
            assert!((determinant(&r, d) - 1.0).abs() < 1e-9);
        }
        assert_eq!(random_rotation(4, 1), random_rotation(4, 1));
        assert_ne!(random_rotation(4, 1), random_rotation(4, 2));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(a.clone(), 3);
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a[r * 3 + k] * vecs[k * 3 + c]).sum();
                assert!((av - vals[c] * vecs[r * 3 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let keys = gaussian(3, 4, 0);
        assert!(fit_pca(&keys, 4, &PcaParams::new(3, 0)).is_err());
        assert!(fit_pca(&keys, 4, &PcaParams::new(5, 0)).is_err());
        let t = fit_pca(&keys, 4, &PcaParams::new(2, 0)).unwrap();
        assert!(t.apply(&[0.0; 3]).is_err());
    }

    #[test]
    fn section_roundtrip() {
        let keys = gaussian(60, 5, 7);
        let t = fit_pca(&keys, 5, &PcaParams::new(3, 1)).unwrap();
        let mut w = Writer::new();
        t.write(&mut w);
        let mut r = Reader::new(&w.buf);
        assert_eq!(PcaTransform::read(&mut r).unwrap(), t);
        assert!(r.is_empty());
    }
}
