//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! unparsable values are configuration errors. [`PipelineConfig::to_text`]
//! writes every key in a fixed order, and its SHA-256 is the config hash
//! carried by reports.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adaptor::{AdaptorConfig, FeatureMask};
use crate::error::{Error, Result};
use crate::lm::ContextPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Flat,
    Ivf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// Directory holding the stage artifacts.
    pub work_dir: PathBuf,
    pub corpus_lm: Option<PathBuf>,
    pub corpus_datastore: Option<PathBuf>,
    pub corpus_valid: Option<PathBuf>,
    pub corpus_test: Option<PathBuf>,
    pub policy: ContextPolicy,

    pub lm_order: usize,
    pub lm_smoothing: f64,
    pub encoder_dim: usize,
    pub encoder_decay: f64,
    pub encoder_window: usize,

    pub k: usize,
    /// Global interpolation weight; `None` means tune on validation data.
    pub lambda: Option<f64>,
    /// Retrieved distances are raised to this power before `exp(-d)`.
    pub distance_power: f64,

    pub index_kind: IndexKind,
    /// 0 picks `round(4·√N)`.
    pub nlist: usize,
    /// 0 picks `min(32, nlist)`.
    pub nprobe: usize,
    /// PQ subspaces; 0 disables PQ.
    pub pq_m: usize,
    pub pq_bits: u32,
    pub index_sample_cap: usize,

    pub gm_k: usize,
    pub prune_retain: f64,
    pub kmeans_top_m: usize,
    pub kmeans_ratio: f64,
    pub rank_k: usize,

    pub dr_dim: usize,
    pub dr_rotate: bool,
    pub dr_sample_cap: usize,

    /// Fraction of retrievals skipped by adaptive retrieval.
    pub ar_fraction: f64,
    pub adaptor: AdaptorConfig,

    pub ablate_fractions: Vec<f64>,
    pub ablate_seeds: usize,
    pub bench_repetitions: usize,
    /// Limit on benchmark tokens; 0 uses the whole test split.
    pub bench_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            work_dir: PathBuf::from("."),
            corpus_lm: None,
            corpus_datastore: None,
            corpus_valid: None,
            corpus_test: None,
            policy: ContextPolicy::PerDocument,
            lm_order: 3,
            lm_smoothing: 0.1,
            encoder_dim: 64,
            encoder_decay: 0.5,
            encoder_window: 8,
            k: 1024,
            lambda: None,
            distance_power: 1.0,
            index_kind: IndexKind::Ivf,
            nlist: 0,
            nprobe: 0,
            pq_m: 0,
            pq_bits: 8,
            index_sample_cap: 65_536,
            gm_k: 8,
            prune_retain: 0.6,
            kmeans_top_m: 5000,
            kmeans_ratio: 0.05,
            rank_k: 64,
            dr_dim: 16,
            dr_rotate: true,
            dr_sample_cap: 100_000,
            ar_fraction: 0.5,
            adaptor: AdaptorConfig::default(),
            ablate_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ablate_seeds: 3,
            bench_repetitions: 3,
            bench_tokens: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("expected on/off for `{key}`, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn policy_name(p: ContextPolicy) -> &'static str {
    match p {
        ContextPolicy::PerDocument => "per-document",
        ContextPolicy::Continuous => "continuous",
    }
}

fn mask_name(m: FeatureMask) -> String {
    if m == FeatureMask::ALL {
        return "all".into();
    }
    if m == FeatureMask::NO_FREQ {
        return "no-freq".into();
    }
    let names = [
        (m.ctx, "ctx"),
        (m.conf, "conf"),
        (m.ent, "ent"),
        (m.freq, "freq"),
        (m.fert, "fert"),
    ];
    names
        .iter()
        .filter(|n| n.0)
        .map(|n| n.1)
        .collect::<Vec<_>>()
        .join("+")
}

impl PipelineConfig {
    /// Settings sized for the synthetic benchmark on a single core.
    pub fn toy() -> Self {
        let mut c = Self {
            k: 32,
            nlist: 64,
            nprobe: 8,
            dr_dim: 16,
            gm_k: 8,
            ..Self::default()
        };
        c.adaptor.hidden_width = 64;
        c.adaptor.epochs = 12;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "work_dir" => self.work_dir = PathBuf::from(v),
            "corpus.lm" => self.corpus_lm = opt_path(v),
            "corpus.datastore" => self.corpus_datastore = opt_path(v),
            "corpus.valid" => self.corpus_valid = opt_path(v),
            "corpus.test" => self.corpus_test = opt_path(v),
            "policy" => {
                self.policy = match v {
                    "per-document" => ContextPolicy::PerDocument,
                    "continuous" => ContextPolicy::Continuous,
                    _ => return Err(Error::Config(format!("unknown policy `{v}`"))),
                }
            }
            "lm.order" => self.lm_order = parse(key, v)?,
            "lm.smoothing" => self.lm_smoothing = parse(key, v)?,
            "encoder.dim" => self.encoder_dim = parse(key, v)?,
            "encoder.decay" => self.encoder_decay = parse(key, v)?,
            "encoder.window" => self.encoder_window = parse(key, v)?,
            "knn.k" => self.k = parse(key, v)?,
            "knn.lambda" => {
                self.lambda = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "knn.distance_power" => self.distance_power = parse(key, v)?,
            "index.kind" => {
                self.index_kind = match v {
                    "flat" => IndexKind::Flat,
                    "ivf" => IndexKind::Ivf,
                    _ => return Err(Error::Config(format!("unknown index kind `{v}`"))),
                }
            }
            "index.nlist" => self.nlist = parse(key, v)?,
            "index.nprobe" => self.nprobe = parse(key, v)?,
            "index.pq_m" => self.pq_m = parse(key, v)?,
            "index.pq_bits" => self.pq_bits = parse(key, v)?,
            "index.sample_cap" => self.index_sample_cap = parse(key, v)?,
            "prune.gm_k" => self.gm_k = parse(key, v)?,
            "prune.retain" => self.prune_retain = parse(key, v)?,
            "prune.kmeans_top_m" => self.kmeans_top_m = parse(key, v)?,
            "prune.kmeans_ratio" => self.kmeans_ratio = parse(key, v)?,
            "prune.rank_k" => self.rank_k = parse(key, v)?,
            "dr.dim" => self.dr_dim = parse(key, v)?,
            "dr.rotate" => self.dr_rotate = parse_bool(key, v)?,
            "dr.sample_cap" => self.dr_sample_cap = parse(key, v)?,
            "ar.fraction" => self.ar_fraction = parse(key, v)?,
            "adaptor.l1" => self.adaptor.l1 = parse(key, v)?,
            "adaptor.lr" => self.adaptor.learning_rate = parse(key, v)?,
            "adaptor.epochs" => self.adaptor.epochs = parse(key, v)?,
            "adaptor.batch" => self.adaptor.batch_size = parse(key, v)?,
            "adaptor.patience" => self.adaptor.patience = parse(key, v)?,
            "adaptor.holdout" => self.adaptor.holdout = parse(key, v)?,
            "adaptor.layers" => self.adaptor.hidden_layers = parse(key, v)?,
            "adaptor.width" => self.adaptor.hidden_width = parse(key, v)?,
            "adaptor.dropout" => self.adaptor.dropout = parse(key, v)?,
            "adaptor.mask" => {
                self.adaptor.mask =
                    FeatureMask::parse(v).map_err(|e| Error::Config(e.to_string()))?
            }
            "ablate.fractions" => {
                self.ablate_fractions = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "ablate.seeds" => self.ablate_seeds = parse(key, v)?,
            "bench.repetitions" => self.bench_repetitions = parse(key, v)?,
            "bench.tokens" => self.bench_tokens = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str, base: Self) -> Result<Self> {
        let mut c = base;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`",
                    n + 1
                )));
            };
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_text(&text, Self::default())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(1..=3).contains(&self.lm_order) {
            return bad("lm.order must be 1, 2 or 3");
        }
        if !(self.lm_smoothing > 0.0) {
            return bad("lm.smoothing must be positive");
        }
        if self.encoder_dim == 0 || self.encoder_window == 0 {
            return bad("encoder.dim and encoder.window must be positive");
        }
        if !(self.encoder_decay > 0.0 && self.encoder_decay < 1.0) {
            return bad("encoder.decay must be in (0, 1)");
        }
        if self.k == 0 {
            return bad("knn.k must be positive");
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad("knn.lambda must be in [0, 1] or `auto`");
            }
        }
        if !(self.distance_power > 0.0) {
            return bad("knn.distance_power must be positive");
        }
        if self.pq_m > 0 && !(self.pq_bits == 4 || self.pq_bits == 8) {
            return bad("index.pq_bits must be 4 or 8");
        }
        if self.gm_k < 2 {
            return bad("prune.gm_k must be at least 2");
        }
        if !(self.prune_retain > 0.0 && self.prune_retain <= 1.0) {
            return bad("prune.retain must be in (0, 1]");
        }
        if !(self.kmeans_ratio > 0.0 && self.kmeans_ratio <= 1.0) {
            return bad("prune.kmeans_ratio must be in (0, 1]");
        }
        if self.dr_dim == 0 {
            return bad("dr.dim must be positive");
        }
        if !(0.0..1.0).contains(&self.ar_fraction) {
            return bad("ar.fraction must be in [0, 1)");
        }
        if self.ablate_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("ablate.fractions must lie in [0, 1]");
        }
        if self.bench_repetitions == 0 {
            return bad("bench.repetitions must be positive");
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let a = &self.adaptor;
        let fr: Vec<String> = self.ablate_fractions.iter().map(|f| f.to_string()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("work_dir", self.work_dir.display().to_string()),
            ("corpus.lm", show_path(&self.corpus_lm)),
            ("corpus.datastore", show_path(&self.corpus_datastore)),
            ("corpus.valid", show_path(&self.corpus_valid)),
            ("corpus.test", show_path(&self.corpus_test)),
            ("policy", policy_name(self.policy).into()),
            ("lm.order", self.lm_order.to_string()),
            ("lm.smoothing", self.lm_smoothing.to_string()),
            ("encoder.dim", self.encoder_dim.to_string()),
            ("encoder.decay", self.encoder_decay.to_string()),
            ("encoder.window", self.encoder_window.to_string()),
            ("knn.k", self.k.to_string()),
            (
                "knn.lambda",
                self.lambda.map_or("auto".into(), |l| l.to_string()),
            ),
            ("knn.distance_power", self.distance_power.to_string()),
            (
                "index.kind",
                match self.index_kind {
                    IndexKind::Flat => "flat".into(),
                    IndexKind::Ivf => "ivf".into(),
                },
            ),
            ("index.nlist", self.nlist.to_string()),
            ("index.nprobe", self.nprobe.to_string()),
            ("index.pq_m", self.pq_m.to_string()),
            ("index.pq_bits", self.pq_bits.to_string()),
            ("index.sample_cap", self.index_sample_cap.to_string()),
            ("prune.gm_k", self.gm_k.to_string()),
            ("prune.retain", self.prune_retain.to_string()),
            ("prune.kmeans_top_m", self.kmeans_top_m.to_string()),
            ("prune.kmeans_ratio", self.kmeans_ratio.to_string()),
            ("prune.rank_k", self.rank_k.to_string()),
            ("dr.dim", self.dr_dim.to_string()),
            ("dr.rotate", if self.dr_rotate { "on" } else { "off" }.into()),
            ("dr.sample_cap", self.dr_sample_cap.to_string()),
            ("ar.fraction", self.ar_fraction.to_string()),
            ("adaptor.l1", a.l1.to_string()),
            ("adaptor.lr", a.learning_rate.to_string()),
            ("adaptor.epochs", a.epochs.to_string()),
            ("adaptor.batch", a.batch_size.to_string()),
            ("adaptor.patience", a.patience.to_string()),
            ("adaptor.holdout", a.holdout.to_string()),
            ("adaptor.layers", a.hidden_layers.to_string()),
            ("adaptor.width", a.hidden_width.to_string()),
            ("adaptor.dropout", a.dropout.to_string()),
            ("adaptor.mask", mask_name(a.mask)),
            ("ablate.fractions", fr.join(",")),
            ("ablate.seeds", self.ablate_seeds.to_string()),
            ("bench.repetitions", self.bench_repetitions.to_string()),
            ("bench.tokens", self.bench_tokens.to_string()),
        ];
        lines
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`to_text`](Self::to_text),
    /// ignoring `threads` and `work_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = 0;
        c.work_dir = PathBuf::from(".");
        let digest = Sha256::digest(c.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Adaptor settings with the pipeline seed and skip fraction applied.
    pub fn adaptor_config(&self) -> AdaptorConfig {
        AdaptorConfig {
            seed: self.seed,
            select_prune_fraction: self.ar_fraction,
            ..self.adaptor.clone()
        }
    }
}
