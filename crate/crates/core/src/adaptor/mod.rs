//! Adaptive retrieval: a small network predicts a per-context interpolation
//! weight λ(c) from the context vector and scalar statistics of the
//! parametric distribution and of the training n-grams. Contexts whose λ
//! falls at or below a threshold skip the datastore query.
//!
//! # Checkpoint layout
//!
//! ```text
//! magic      b"KNNA"
//! version    u32  (1)
//! ctx_dim, scalars, embed_dim, hidden_layers, hidden_width   u32 each
//! mask       u32 bitfield (ctx, conf, ent, freq, fert)
//! n_params   u64
//! params     n_params × f32
//! mean, std  10 × f64 each
//! threshold  f64
//! ```

mod net;
mod train;

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::datastore::Datastore;
use crate::dist::{interpolate, weighted_knn_distribution, DenseDist};
use crate::error::{invalid, Error, Result};
use crate::index::SearchIndex;
use crate::lm::{LmStep, SuffixTables, TokenId};

pub use net::{log_softmax, AdaptorNet, Dropout, NetShape, Trace};
pub use train::{
    gated_perplexity, holdout_count, loss_and_grad, train_adaptor, AdaptorConfig, AdaptorExample, EpochLog,
    PreparedExample, TrainLog,
};

/// Number of scalar features: confidence, entropy, four log-frequencies and
/// four log-fertilities.
pub const NUM_SCALARS: usize = 10;

/// Width of each scalar embedder for a context vector of length `ctx_dim`.
pub fn embed_dim(ctx_dim: usize) -> usize {
    (ctx_dim / NUM_SCALARS).max(4)
}

/// Inputs to the gating network for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub ctx: Vec<f32>,
    /// max of the parametric distribution
    pub conf: f64,
    /// entropy of the parametric distribution, nats
    pub ent: f64,
    /// `ln(count + 1)` of the last 1..=4 context tokens in training data
    pub log_freq: [f64; 4],
    /// `ln(distinct successors + 1)` of the same suffixes
    pub log_fert: [f64; 4],
}

impl Features {
    pub fn scalars(&self) -> [f64; NUM_SCALARS] {
        let mut s = [0.0; NUM_SCALARS];
        s[0] = self.conf;
        s[1] = self.ent;
        s[2..6].copy_from_slice(&self.log_freq);
        s[6..10].copy_from_slice(&self.log_fert);
        s
    }

    pub fn from_step(step: &LmStep, suffix: &SuffixTables, context: &[TokenId]) -> Self {
        let (log_freq, log_fert) = suffix.log_features(context);
        Self {
            ctx: step.ctx_vec.clone(),
            conf: step.conf,
            ent: step.ent,
            log_freq,
            log_fert,
        }
    }
}

/// Features for one position from the parametric distribution, the context
/// vector and the suffix tables.
pub fn extract_features(
    p_nlm: &DenseDist,
    ctx_vec: &[f32],
    suffix: &SuffixTables,
    context: &[TokenId],
) -> Features {
    let (log_freq, log_fert) = suffix.log_features(context);
    Features {
        ctx: ctx_vec.to_vec(),
        conf: p_nlm.max(),
        ent: p_nlm.entropy(),
        log_freq,
        log_fert,
    }
}

/// Which feature groups feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask {
    pub ctx: bool,
    pub conf: bool,
    pub ent: bool,
    pub freq: bool,
    pub fert: bool,
}

impl FeatureMask {
    pub const ALL: Self = Self {
        ctx: true,
        conf: true,
        ent: true,
        freq: true,
        fert: true,
    };

    /// Everything except the n-gram frequencies.
    pub const NO_FREQ: Self = Self {
        freq: false,
        ..Self::ALL
    };

    pub fn bits(&self) -> u32 {
        self.ctx as u32
            | (self.conf as u32) << 1
            | (self.ent as u32) << 2
            | (self.freq as u32) << 3
            | (self.fert as u32) << 4
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits & !0x1f != 0 || bits == 0 {
            return invalid(format!("invalid feature mask {bits:#x}"));
        }
        Ok(Self {
            ctx: bits & 1 != 0,
            conf: bits & 2 != 0,
            ent: bits & 4 != 0,
            freq: bits & 8 != 0,
            fert: bits & 16 != 0,
        })
    }

    /// Parse a preset name (`all`, `no-freq`) or a `+`-joined list of groups
    /// such as `ctx+conf+ent`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => return Ok(Self::ALL),
            "no-freq" => return Ok(Self::NO_FREQ),
            _ => {}
        }
        let mut m = Self {
            ctx: false,
            conf: false,
            ent: false,
            freq: false,
            fert: false,
        };
        for part in s.split('+') {
            match part.trim() {
                "ctx" => m.ctx = true,
                "conf" => m.conf = true,
                "ent" => m.ent = true,
                "freq" => m.freq = true,
                "fert" => m.fert = true,
                other => return invalid(format!("unknown feature group `{other}`")),
            }
        }
        Self::from_bits(m.bits())
    }

    fn scalar_active(&self) -> [bool; NUM_SCALARS] {
        let mut a = [false; NUM_SCALARS];
        a[0] = self.conf;
        a[1] = self.ent;
        a[2..6].fill(self.freq);
        a[6..10].fill(self.fert);
        a
    }

    pub fn num_scalars(&self) -> usize {
        self.scalar_active().iter().filter(|&&a| a).count()
    }

    /// Network inputs: the context vector (empty when off) and the active
    /// standardized scalars.
    pub fn inputs(&self, f: &Features, std: &Standardizer) -> Result<(Vec<f64>, Vec<f64>)> {
        let ctx = if self.ctx {
            f.ctx.iter().map(|&v| v as f64).collect()
        } else {
            Vec::new()
        };
        let z = std.apply(&f.scalars());
        let scalars = z
            .iter()
            .zip(self.scalar_active())
            .filter(|(_, a)| *a)
            .map(|(v, _)| *v)
            .collect();
        Ok((ctx, scalars))
    }
}

/// Per-scalar affine standardization fitted on training features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; NUM_SCALARS],
    /// Zero-variance features get 1.
    pub std: [f64; NUM_SCALARS],
}

impl Standardizer {
    pub fn fit<'a>(features: impl Iterator<Item = &'a Features>) -> Self {
        let rows: Vec<[f64; NUM_SCALARS]> = features.map(|f| f.scalars()).collect();
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; NUM_SCALARS];
        for r in &rows {
            for j in 0..NUM_SCALARS {
                mean[j] += r[j] / n;
            }
        }
        let mut std = [0.0; NUM_SCALARS];
        for r in &rows {
            for j in 0..NUM_SCALARS {
                std[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64; NUM_SCALARS]) -> [f64; NUM_SCALARS] {
        let mut out = [0.0; NUM_SCALARS];
        for j in 0..NUM_SCALARS {
            out[j] = (x[j] - self.mean[j]) / self.std[j];
        }
        out
    }
}

/// The λ value at quantile `fraction`: with `k = round(fraction·n)`, the
/// `k`-th smallest value, so that `k` values lie at or below it. `-∞` when
/// `k = 0`.
pub fn select_lambda_threshold(lambdas: &[f64], fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&fraction) {
        return invalid(format!("prune fraction must be in [0, 1), got {fraction}"));
    }
    if lambdas.iter().any(|l| l.is_nan()) {
        return invalid("λ values must not be NaN");
    }
    let k = (fraction * lambdas.len() as f64).round() as usize;
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// A trained gate: network, input normalization and retrieval threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptor {
    pub net: AdaptorNet,
    pub mask: FeatureMask,
    pub standardizer: Standardizer,
    /// Retrieval is skipped when `λ(c) <= threshold`.
    pub threshold: f64,
}

const MAGIC: &[u8; 4] = b"KNNA";
const VERSION: u32 = 1;

impl Adaptor {
    pub fn log_lambdas(&self, f: &Features) -> Result<(f64, f64)> {
        let (ctx, scalars) = self.mask.inputs(f, &self.standardizer)?;
        Ok(self.net.forward(&ctx, &scalars, None)?.log_lambdas())
    }

    pub fn lambda(&self, f: &Features) -> Result<f64> {
        Ok(self.log_lambdas(f)?.0.exp())
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.net.shape();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in [s.ctx_dim, s.scalars, s.embed_dim, s.hidden_layers, s.hidden_width] {
            w.u32(v as u32);
        }
        w.u32(self.mask.bits());
        w.u64(self.net.num_params() as u64);
        for &p in self.net.params() {
            w.f32(p as f32);
        }
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.std);
        w.f64(self.threshold);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return r.err(format!("unsupported adaptor version {version}"));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = NetShape {
            ctx_dim: dims[0],
            scalars: dims[1],
            embed_dim: dims[2],
            hidden_layers: dims[3],
            hidden_width: dims[4],
        };
        let at = r.offset();
        let mask = FeatureMask::from_bits(r.u32()?).map_err(|e| format_at(at, e))?;
        if mask.num_scalars() != shape.scalars || (mask.ctx != (shape.ctx_dim > 0)) {
            return r.err("feature mask does not match the network inputs");
        }
        let n = r.u64()? as usize;
        let at = r.offset();
        let params = r.f32s(n)?.into_iter().map(|p| p as f64).collect();
        let net = AdaptorNet::from_params(shape, params).map_err(|e| format_at(at, e))?;
        let mut mean = [0.0; NUM_SCALARS];
        mean.copy_from_slice(&r.f64s(NUM_SCALARS)?);
        let mut std = [0.0; NUM_SCALARS];
        std.copy_from_slice(&r.f64s(NUM_SCALARS)?);
        let threshold = r.f64()?;
        if !r.is_empty() {
            return r.err("trailing bytes after adaptor checkpoint");
        }
        Ok(Self {
            net,
            mask,
            standardizer: Standardizer { mean, std },
            threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn format_at(offset: u64, e: Error) -> Error {
    Error::Format {
        offset,
        message: e.to_string(),
    }
}

/// Outcome of one gated prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptivePrediction {
    pub dist: DenseDist,
    pub lambda: f64,
    pub retrieved: bool,
}

/// Predict the next-token distribution, querying `index` only when the
/// adaptor's λ exceeds its threshold. `query` is the search key, already in
/// the datastore's key space.
pub fn adaptive_predict(
    adaptor: &Adaptor,
    features: &Features,
    p_nlm: &DenseDist,
    query: &[f32],
    index: &dyn SearchIndex,
    ds: &Datastore,
    k: usize,
) -> Result<AdaptivePrediction> {
    let lambda = adaptor.lambda(features)?;
    if lambda <= adaptor.threshold {
        return Ok(AdaptivePrediction {
            dist: p_nlm.clone(),
            lambda: 0.0,
            retrieved: false,
        });
    }
    let hits = index.search(ds, query, k)?;
    let p_knn = weighted_knn_distribution(&hits)?;
    Ok(AdaptivePrediction {
        dist: interpolate(&p_knn, p_nlm, lambda)?,
        lambda,
        retrieved: true,
    })
}
