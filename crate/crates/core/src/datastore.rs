//! Key/value datastore of `(context vector, next token, weight)` records and
//! its binary file format.
//!
//! # File layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      b"KNND"
//! version    u32            (1)
//! dim        u32
//! count      u64
//! flags      u32            bit 0: weights present, bit 1: f16 keys
//! keys       count × dim    f32 (or f16 when bit 1 is set), row-major
//! values     count × u32
//! weights    count × f32    only when bit 0 is set, otherwise all 1
//! provenance u32 length + UTF-8 bytes
//! [transform section, optional]
//!   magic    b"KNNT"
//!   ...      see `PcaTransform`
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::Serialize;

use crate::binio::{Reader, Writer};
use crate::error::{invalid, Result};
use crate::lm::{ContextEncoder, ContextPolicy, Corpus, TokenId};
use crate::pca::PcaTransform;

const MAGIC: &[u8; 4] = b"KNND";
const VERSION: u32 = 1;
const FLAG_WEIGHTS: u32 = 1;
const FLAG_HALF: u32 = 2;

/// One `(key, value, weight)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreRecord {
    pub key: Vec<f32>,
    pub value: TokenId,
    /// Number of source tokens this record stands for; 1 when freshly built.
    pub weight: f32,
}

/// Immutable collection of records sharing one key dimension.
///
/// Record ids are positions `0..len()`. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    weights: Vec<f32>,
    provenance: String,
    transform: Option<PcaTransform>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaveOptions {
    /// Store keys as IEEE half floats. Lossy.
    pub half_precision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatastoreStats {
    pub count: usize,
    pub dim: usize,
    pub total_weight: f64,
    /// In-memory payload: keys, values and weights.
    pub bytes: usize,
    /// `(token id, number of records)`, ascending by token.
    pub value_histogram: Vec<(u32, usize)>,
}

impl Datastore {
    pub fn from_parts(
        dim: usize,
        keys: Vec<f32>,
        values: Vec<TokenId>,
        weights: Vec<f32>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return invalid("datastore dimension must be positive");
        }
        if values.is_empty() {
            return invalid("datastore must hold at least one record");
        }
        if keys.len() != values.len() * dim || weights.len() != values.len() {
            return invalid(format!(
                "inconsistent datastore parts: {} keys floats, {} values, {} weights, dim {dim}",
                keys.len(),
                values.len(),
                weights.len()
            ));
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return invalid("datastore keys must be finite");
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return invalid("datastore weights must be finite and non-negative");
        }
        Ok(Self {
            dim,
            keys,
            values,
            weights,
            provenance: provenance.into(),
            transform: None,
        })
    }

    pub fn from_records(
        dim: usize,
        records: impl IntoIterator<Item = DatastoreRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for r in records {
            if r.key.len() != dim {
                return invalid(format!("record key has dim {}, expected {dim}", r.key.len()));
            }
            keys.extend_from_slice(&r.key);
            values.push(r.value);
            weights.push(r.weight);
        }
        Self::from_parts(dim, keys, values, weights, provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn key(&self, id: usize) -> &[f32] {
        &self.keys[id * self.dim..(id + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, id: usize) -> TokenId {
        self.values[id]
    }

    #[inline]
    pub fn weight(&self, id: usize) -> f32 {
        self.weights[id]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn record(&self, id: usize) -> DatastoreRecord {
        DatastoreRecord {
            key: self.key(id).to_vec(),
            value: self.values[id],
            weight: self.weights[id],
        }
    }

    pub fn records(&self) -> impl Iterator<Item = DatastoreRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// The dimension-reduction transform already applied to the keys, if any.
    /// Queries must go through it before searching.
    pub fn transform(&self) -> Option<&PcaTransform> {
        self.transform.as_ref()
    }

    pub(crate) fn set_transform(&mut self, t: PcaTransform) {
        self.transform = Some(t);
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }

    /// Append one line to the provenance notes.
    pub fn with_note(mut self, note: &str) -> Self {
        if note.is_empty() {
            return self;
        }
        if !self.provenance.is_empty() {
            self.provenance.push('\n');
        }
        self.provenance.push_str(note);
        self
    }

    /// New datastore holding the given records, in the given order.
    pub fn select(&self, ids: &[usize], note: &str) -> Result<Self> {
        let mut keys = Vec::with_capacity(ids.len() * self.dim);
        let mut values = Vec::with_capacity(ids.len());
        let mut weights = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.len() {
                return invalid(format!("record id {i} out of range"));
            }
            keys.extend_from_slice(self.key(i));
            values.push(self.values[i]);
            weights.push(self.weights[i]);
        }
        let mut out = Self::from_parts(self.dim, keys, values, weights, self.provenance.clone())?;
        out.transform = self.transform.clone();
        Ok(out.with_note(note))
    }

    /// Same records with different weights.
    pub fn reweighted(&self, weights: Vec<f32>, note: &str) -> Result<Self> {
        let mut out = Self::from_parts(
            self.dim,
            self.keys.clone(),
            self.values.clone(),
            weights,
            self.provenance.clone(),
        )?;
        out.transform = self.transform.clone();
        Ok(out.with_note(note))
    }

    pub(crate) fn with_keys(&self, dim: usize, keys: Vec<f32>, note: &str) -> Result<Self> {
        let out = Self::from_parts(
            dim,
            keys,
            self.values.clone(),
            self.weights.clone(),
            self.provenance.clone(),
        )?;
        Ok(out.with_note(note))
    }

    pub fn stats(&self) -> DatastoreStats {
        let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
        for v in &self.values {
            *hist.entry(v.0).or_default() += 1;
        }
        DatastoreStats {
            count: self.len(),
            dim: self.dim,
            total_weight: self.total_weight(),
            bytes: self.keys.len() * 4 + self.values.len() * 4 + self.weights.len() * 4,
            value_histogram: hist.into_iter().collect(),
        }
    }

    pub fn to_bytes(&self, opts: SaveOptions) -> Vec<u8> {
        let has_weights = self.weights.iter().any(|&w| w != 1.0);
        let mut flags = 0;
        if has_weights {
            flags |= FLAG_WEIGHTS;
        }
        if opts.half_precision {
            flags |= FLAG_HALF;
        }
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.u32(flags);
        if opts.half_precision {
            for &k in &self.keys {
                w.bytes(&f16::from_f32(k).to_le_bytes());
            }
        } else {
            w.f32s(&self.keys);
        }
        for v in &self.values {
            w.u32(v.0);
        }
        if has_weights {
            w.f32s(&self.weights);
        }
        w.blob(self.provenance.as_bytes());
        if let Some(t) = &self.transform {
            t.write(&mut w);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return r.err(format!("unsupported datastore version {version}"));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let flags = r.u32()?;
        if flags & !(FLAG_WEIGHTS | FLAG_HALF) != 0 {
            return r.err(format!("unknown flag bits {flags:#x}"));
        }
        if dim == 0 || count == 0 {
            return r.err("datastore header declares zero dim or zero records");
        }
        let n_keys = match count.checked_mul(dim) {
            Some(n) => n,
            None => return r.err("key matrix size overflows"),
        };
        let keys = if flags & FLAG_HALF != 0 {
            let raw = r.take(n_keys.saturating_mul(2))?;
            raw.chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect()
        } else {
            r.f32s(n_keys)?
        };
        let values: Vec<TokenId> = r.u32s(count)?.into_iter().map(TokenId).collect();
        let weights = if flags & FLAG_WEIGHTS != 0 {
            r.f32s(count)?
        } else {
            vec![1.0; count]
        };
        let at = r.offset();
        let provenance = match std::str::from_utf8(r.blob()?) {
            Ok(s) => s.to_owned(),
            Err(_) => {
                return Err(crate::Error::Format {
                    offset: at,
                    message: "provenance is not valid UTF-8".into(),
                })
            }
        };
        let transform = if r.is_empty() {
            None
        } else {
            Some(PcaTransform::read(&mut r)?)
        };
        if !r.is_empty() {
            return r.err("trailing bytes after datastore");
        }
        let mut ds = Self::from_parts(dim, keys, values, weights, provenance).map_err(|e| {
            crate::Error::Format {
                offset: at,
                message: e.to_string(),
            }
        })?;
        if let Some(t) = transform {
            if t.output_dim() != dim {
                return r.err("transform output dimension does not match datastore");
            }
            ds.transform = Some(t);
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with(path, SaveOptions::default())
    }

    pub fn save_with(&self, path: impl AsRef<Path>, opts: SaveOptions) -> Result<()> {
        std::fs::write(path, self.to_bytes(opts))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One record per corpus position: key = encoder(context), value = next
/// token, weight = 1.
pub fn build_datastore(
    corpus: &Corpus,
    encoder: &ContextEncoder,
    policy: ContextPolicy,
) -> Result<Datastore> {
    let n = corpus.num_tokens();
    if n == 0 {
        return invalid("cannot build a datastore from an empty corpus");
    }
    if let Some(t) = corpus.tokens().find(|t| t.index() >= encoder.vocab_size()) {
        return invalid(format!(
            "token {} outside vocabulary of size {}",
            t.0,
            encoder.vocab_size()
        ));
    }
    let dim = encoder.dim();
    let mut keys = Vec::with_capacity(n * dim);
    let mut values = Vec::with_capacity(n);
    corpus.for_each_position(policy, |ctx, w| {
        keys.extend_from_slice(&encoder.encode(ctx));
        values.push(w);
    });
    let p = encoder.params();
    let provenance = format!(
        "build: tokens={n} dim={dim} decay={} window={} encoder_seed={} policy={policy:?}",
        p.decay, p.window, p.seed
    );
    Datastore::from_parts(dim, keys, values, vec![1.0; n], provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{EncoderParams, Vocabulary};

    fn small() -> Datastore {
        Datastore::from_records(
            2,
            vec![
                DatastoreRecord {
                    key: vec![0.0, 1.0],
                    value: TokenId(3),
                    weight: 1.0,
                },
                DatastoreRecord {
                    key: vec![1.5, -2.0],
                    value: TokenId(4),
                    weight: 2.0,
                },
                DatastoreRecord {
                    key: vec![0.25, 0.5],
                    value: TokenId(3),
                    weight: 0.0,
                },
            ],
            "unit test",
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_small() {
        let ds = small();
        let back = Datastore::from_bytes(&ds.to_bytes(SaveOptions::default())).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unit_weights_are_not_written() {
        let ds = small().reweighted(vec![1.0; 3], "reset").unwrap();
        let bytes = ds.to_bytes(SaveOptions::default());
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0);
        assert_eq!(Datastore::from_bytes(&bytes).unwrap(), ds);
    }

    #[test]
    fn half_precision_is_close() {
        let ds = small();
        let back = Datastore::from_bytes(&ds.to_bytes(SaveOptions {
            half_precision: true,
        }))
        .unwrap();
        for (a, b) in ds.keys().iter().zip(back.keys()) {
            assert!((a - b).abs() <= 1e-3 * a.abs().max(1.0));
        }
        assert_eq!(back.values(), ds.values());
        assert_eq!(back.weights(), ds.weights());
    }

    #[test]
    fn corrupt_files() {
        let good = small().to_bytes(SaveOptions::default());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            Datastore::from_bytes(&bad),
            Err(crate::Error::Format { offset: 0, .. })
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Datastore::from_bytes(&bad_version),
            Err(crate::Error::Format { offset: 8, .. })
        ));
        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            Datastore::from_bytes(truncated),
            Err(crate::Error::Format { .. })
        ));
        let mut trailing = good.clone();
        trailing.extend_from_slice(b"zz");
        assert!(Datastore::from_bytes(&trailing).is_err());
    }

    #[test]
    fn build_counts_and_errors() {
        let vocab = Vocabulary::from_texts(["w"]);
        let enc = ContextEncoder::new(EncoderParams {
            vocab_size: vocab.len(),
            dim: 4,
            ..Default::default()
        });
        let w = vocab.get("w").unwrap();
        let ds = build_datastore(&Corpus::new(vec![vec![w]]), &enc, ContextPolicy::PerDocument)
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.value(0), w);
        assert_eq!(ds.weight(0), 1.0);
        assert_eq!(ds.key(0), enc.encode(&[]).as_slice());
        assert!(build_datastore(&Corpus::default(), &enc, ContextPolicy::PerDocument).is_err());
        let oov = Corpus::new(vec![vec![TokenId(99)]]);
        assert!(build_datastore(&oov, &enc, ContextPolicy::PerDocument).is_err());
    }

    #[test]
    fn stats() {
        let s = small().stats();
        assert_eq!(s.count, 3);
        assert_eq!(s.total_weight, 3.0);
        assert_eq!(s.value_histogram, vec![(3, 2), (4, 1)]);
        assert_eq!(s.bytes, 3 * 2 * 4 + 3 * 4 + 3 * 4);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(Datastore::from_parts(2, vec![], vec![], vec![], "").is_err());
        assert!(Datastore::from_parts(2, vec![f32::NAN, 0.0], vec![TokenId(0)], vec![1.0], "").is_err());
        assert!(Datastore::from_parts(2, vec![0.0, 0.0], vec![TokenId(0)], vec![-1.0], "").is_err());
    }
}
