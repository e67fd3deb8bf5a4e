//! In-memory pipeline over four corpus splits: fit the parametric side on the
//! generic split, build datastores from the datastore split, tune on the
//! validation split and report on the test split.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::Serialize;

use super::config::{IndexKind, PipelineConfig};
use super::eval::{
    eval_stream, gated_lambdas, knn_probs, tune_lambda, BaseModel, EvalReport, LambdaTuning,
    LmRecord, Retriever, TokenProbs, Weighting,
};
use crate::adaptor::{train_adaptor, Adaptor, AdaptorConfig, AdaptorExample, TrainLog};
use crate::datastore::{build_datastore, Datastore};
use crate::error::Result;
use crate::index::{
    default_nlist, default_nprobe, FlatIndex, IvfIndex, IvfParams, PqParams, SearchIndex,
};
use crate::lm::{ContextEncoder, CountLm, CountLmParams, Corpus, EncoderParams, SuffixTables, Vocabulary};
use crate::pca::{reduce_datastore, PcaParams};
use crate::pruning::{greedy_merge, random_prune};

/// The evaluation modes of the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// Parametric model only.
    Nlm,
    /// Retrieval at every token with a global λ.
    Knnlm,
    /// Adaptive retrieval.
    Ar,
    /// Greedy-merged datastore.
    Gm,
    /// Dimension-reduced keys.
    Dr,
    /// Greedy merging, then reduction, then adaptive retrieval.
    All,
}

impl Mode {
    pub const ALL_MODES: [Mode; 6] = [Mode::Nlm, Mode::Knnlm, Mode::Ar, Mode::Gm, Mode::Dr, Mode::All];

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Nlm => "nlm",
            Mode::Knnlm => "knnlm",
            Mode::Ar => "knnlm+AR",
            Mode::Gm => "knnlm+GM",
            Mode::Dr => "knnlm+DR",
            Mode::All => "knnlm+All",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Self::ALL_MODES
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s) || format!("{m:?}").eq_ignore_ascii_case(s))
    }
}

/// Corpora of one benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub lm_train: Corpus,
    pub datastore: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Datastore-side transforms applied before indexing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Variant {
    /// Greedy-merge neighbor count.
    pub gm_k: Option<usize>,
    /// Random pruning retain fraction.
    pub random_retain: Option<f64>,
    /// Reduced key dimension.
    pub dr_dim: Option<usize>,
}

impl Variant {
    pub fn for_mode(mode: Mode, config: &PipelineConfig) -> Self {
        match mode {
            Mode::Gm => Self {
                gm_k: Some(config.gm_k),
                ..Self::default()
            },
            Mode::Dr => Self {
                dr_dim: Some(config.dr_dim),
                ..Self::default()
            },
            Mode::All => Self {
                gm_k: Some(config.gm_k),
                dr_dim: Some(config.dr_dim),
                ..Self::default()
            },
            _ => Self::default(),
        }
    }
}

/// Everything needed to evaluate a retrieval configuration.
pub struct Workspace {
    pub config: PipelineConfig,
    pub vocab: Vocabulary,
    pub base: BaseModel,
    pub splits: Splits,
    datastore: OnceLock<Datastore>,
    valid_records: OnceLock<Vec<LmRecord>>,
    test_records: OnceLock<Vec<LmRecord>>,
    /// Greedy-merged full datastore per neighbor count.
    merged: Mutex<HashMap<usize, Datastore>>,
}

/// Index for `ds` according to the config.
pub fn build_index(ds: &Datastore, config: &PipelineConfig) -> Result<Box<dyn SearchIndex>> {
    Ok(match config.index_kind {
        IndexKind::Flat => Box::new(FlatIndex),
        IndexKind::Ivf => Box::new(build_ivf(ds, config)?),
    })
}

pub fn ivf_params(n: usize, dim: usize, config: &PipelineConfig) -> IvfParams {
    let nlist = if config.nlist == 0 {
        default_nlist(n)
    } else {
        config.nlist.min(n)
    };
    let mut p = IvfParams::new(nlist, config.seed);
    p.nprobe = if config.nprobe == 0 {
        default_nprobe(nlist)
    } else {
        config.nprobe.min(nlist)
    };
    p.train_sample_cap = Some(config.index_sample_cap.max(nlist));
    if config.pq_m > 0 && dim.is_multiple_of(config.pq_m) {
        p.pq = Some(PqParams::new(config.pq_m, config.pq_bits, config.seed));
    }
    p
}

pub fn build_ivf(ds: &Datastore, config: &PipelineConfig) -> Result<IvfIndex> {
    IvfIndex::build(ds, &ivf_params(ds.len(), ds.dim(), config))
}

/// Fit the count LM on `lm_train`, build the encoder, and collect suffix
/// statistics from `datastore_corpus`.
pub fn build_base(
    config: &PipelineConfig,
    vocab_size: usize,
    lm_train: &Corpus,
    datastore_corpus: &Corpus,
) -> Result<BaseModel> {
    let lm = CountLm::fit(
        lm_train,
        &CountLmParams {
            order: config.lm_order,
            smoothing: config.lm_smoothing,
            weights: None,
            policy: config.policy,
        },
        vocab_size,
    )?;
    Ok(BaseModel {
        lm,
        encoder: ContextEncoder::new(encoder_params(config, vocab_size)),
        suffix: SuffixTables::build(datastore_corpus, config.policy),
        policy: config.policy,
    })
}

pub fn encoder_params(config: &PipelineConfig, vocab_size: usize) -> EncoderParams {
    EncoderParams {
        vocab_size,
        dim: config.encoder_dim,
        decay: config.encoder_decay,
        window: config.encoder_window,
        seed: config.seed,
    }
}

impl Workspace {
    /// Build the vocabulary over all four texts and fit the parametric side.
    pub fn from_texts(
        config: PipelineConfig,
        lm_train: &str,
        datastore: &str,
        valid: &str,
        test: &str,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::from_texts([lm_train, datastore, valid, test]);
        let splits = Splits {
            lm_train: Corpus::from_text(lm_train, &vocab),
            datastore: Corpus::from_text(datastore, &vocab),
            valid: Corpus::from_text(valid, &vocab),
            test: Corpus::from_text(test, &vocab),
        };
        let base = build_base(&config, vocab.len(), &splits.lm_train, &splits.datastore)?;
        Ok(Self {
            config,
            vocab,
            base,
            splits,
            datastore: OnceLock::new(),
            valid_records: OnceLock::new(),
            test_records: OnceLock::new(),
            merged: Mutex::new(HashMap::new()),
        })
    }

    /// Assemble from an already fitted parametric side.
    pub fn from_parts(config: PipelineConfig, vocab: Vocabulary, base: BaseModel, splits: Splits) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            vocab,
            base,
            splits,
            datastore: OnceLock::new(),
            valid_records: OnceLock::new(),
            test_records: OnceLock::new(),
            merged: Mutex::new(HashMap::new()),
        })
    }

    /// Use `ds` as the full datastore instead of building one.
    pub fn with_datastore(self, ds: Datastore) -> Self {
        let _ = self.datastore.set(ds);
        self
    }

    /// Full datastore over the datastore split, built once.
    pub fn datastore(&self) -> Result<&Datastore> {
        if let Some(ds) = self.datastore.get() {
            return Ok(ds);
        }
        let ds = build_datastore(&self.splits.datastore, &self.base.encoder, self.config.policy)?;
        Ok(self.datastore.get_or_init(|| ds))
    }

    pub fn valid_records(&self) -> &[LmRecord] {
        self.valid_records
            .get_or_init(|| self.base.records(&self.splits.valid))
    }

    pub fn test_records(&self) -> &[LmRecord] {
        self.test_records
            .get_or_init(|| self.base.records(&self.splits.test))
    }

    /// Apply `variant` to the full datastore and index the result.
    pub fn retriever(&self, variant: &Variant) -> Result<Retriever> {
        let mut ds = match variant.gm_k {
            Some(k) => self.merged_datastore(k)?,
            None => self.datastore()?.clone(),
        };
        if let Some(r) = variant.random_retain {
            ds = random_prune(&ds, r, self.config.seed)?;
        }
        if let Some(d) = variant.dr_dim {
            let mut p = PcaParams::new(d.min(ds.dim()), self.config.seed);
            p.rotate = self.config.dr_rotate;
            p.sample_cap = Some(self.config.dr_sample_cap);
            ds = reduce_datastore(&ds, &p)?.0;
        }
        self.retriever_for(ds)
    }

    /// The full datastore after greedy merging with `k` neighbors, computed
    /// once per `k`.
    pub fn merged_datastore(&self, k: usize) -> Result<Datastore> {
        if let Some(ds) = self.merged.lock().unwrap().get(&k) {
            return Ok(ds.clone());
        }
        let full = self.datastore()?;
        let index = build_index(full, &self.config)?;
        let ds = greedy_merge(full, &*index, k)?.datastore;
        self.merged.lock().unwrap().insert(k, ds.clone());
        Ok(ds)
    }

    pub fn retriever_for(&self, ds: Datastore) -> Result<Retriever> {
        let index = build_index(&ds, &self.config)?;
        let mut r = Retriever::new(ds, index, self.config.k);
        r.distance_power = self.config.distance_power;
        Ok(r)
    }

    pub fn valid_probs(&self, r: &Retriever) -> Result<TokenProbs> {
        let recs = self.valid_records();
        Ok(TokenProbs::new(recs, knn_probs(r, recs)?))
    }

    pub fn test_probs(&self, r: &Retriever) -> Result<TokenProbs> {
        let recs = self.test_records();
        Ok(TokenProbs::new(recs, knn_probs(r, recs)?))
    }

    /// The configured λ, or the validation-tuned one.
    pub fn lambda_for(&self, r: &Retriever) -> Result<(f64, Option<LambdaTuning>)> {
        match self.config.lambda {
            Some(l) => Ok((l, None)),
            None => {
                let t = tune_lambda(&self.valid_probs(r)?)?;
                Ok((t.lambda, Some(t)))
            }
        }
    }

    /// Adaptor examples from the validation split under retriever `r`.
    pub fn adaptor_examples(&self, r: &Retriever) -> Result<Vec<AdaptorExample>> {
        let recs = self.valid_records();
        let p_knn = knn_probs(r, recs)?;
        Ok(recs
            .iter()
            .zip(p_knn)
            .map(|(rec, pk)| AdaptorExample {
                features: rec.features.clone(),
                p_knn: pk,
                p_nlm: rec.p_nlm,
            })
            .collect())
    }

    pub fn train_adaptor(&self, r: &Retriever, config: &AdaptorConfig) -> Result<(Adaptor, TrainLog)> {
        train_adaptor(&self.adaptor_examples(r)?, config)
    }

    /// Assemble the model for `mode`: variant datastore and index, tuned
    /// λ, and a trained adaptor for the adaptive modes.
    pub fn build_model(&self, mode: Mode) -> Result<Model> {
        if mode == Mode::Nlm {
            return Ok(Model {
                mode,
                retriever: None,
                adaptor: None,
                lambda: 0.0,
                tuning: None,
                train_log: None,
                retention: None,
            });
        }
        let full = self.datastore()?.len();
        let r = self.retriever(&Variant::for_mode(mode, &self.config))?;
        let (lambda, tuning) = self.lambda_for(&r)?;
        let (adaptor, train_log) = if matches!(mode, Mode::Ar | Mode::All) {
            let (a, log) = self.train_adaptor(&r, &self.config.adaptor_config())?;
            (Some(a), Some(log))
        } else {
            (None, None)
        };
        Ok(Model {
            mode,
            retention: Some(r.datastore.len() as f64 / full as f64),
            retriever: Some(r),
            adaptor,
            lambda,
            tuning,
            train_log,
        })
    }

    /// Streaming evaluation of `model` on the test split.
    pub fn evaluate(&self, model: &Model, max_tokens: Option<usize>) -> Result<EvalReport> {
        let mut report = eval_stream(
            &self.base,
            model.retriever.as_ref(),
            model.weighting(),
            &self.splits.test,
            model.mode.label(),
            max_tokens,
        )?;
        report.config_hash = self.config.hash();
        report.retention = model.retention;
        if model.mode != Mode::Nlm && model.adaptor.is_none() {
            report.lambda = Some(model.lambda);
        }
        Ok(report)
    }

    pub fn eval_mode(&self, mode: Mode) -> Result<(Model, EvalReport)> {
        let model = self.build_model(mode)?;
        let report = self.evaluate(&model, None)?;
        Ok((model, report))
    }

    /// Test perplexity from the cache, with an optional gate.
    pub fn cached_perplexity(&self, r: &Retriever, weighting: Weighting<'_>) -> Result<f64> {
        let probs = self.test_probs(r)?;
        Ok(match weighting {
            Weighting::Parametric => probs.perplexity(0.0),
            Weighting::Constant(l) => probs.perplexity(l),
            Weighting::Adaptive(a) => {
                let ls = gated_lambdas(a, self.test_records())?;
                probs.perplexity_with(|i| ls[i])
            }
        })
    }
}

/// A fully assembled model for one [`Mode`].
pub struct Model {
    pub mode: Mode,
    pub retriever: Option<Retriever>,
    pub adaptor: Option<Adaptor>,
    /// Global λ used when no adaptor is present.
    pub lambda: f64,
    pub tuning: Option<LambdaTuning>,
    pub train_log: Option<TrainLog>,
    pub retention: Option<f64>,
}

impl Model {
    pub fn weighting(&self) -> Weighting<'_> {
        match (&self.retriever, &self.adaptor) {
            (None, _) => Weighting::Parametric,
            (Some(_), Some(a)) => Weighting::Adaptive(a),
            (Some(_), None) => Weighting::Constant(self.lambda),
        }
    }
}
