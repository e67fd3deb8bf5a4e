//! Command-line front end for the pipeline stages.
//!
//! Every report goes to stdout as one JSON object per line; a readable table
//! goes to stderr. Exit codes: 0 success, 2 configuration or missing
//! artifact, 3 malformed file, 1 anything else.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use knnlm::adaptor::Adaptor;
use knnlm::datastore::{build_datastore, Datastore, SaveOptions};
use knnlm::harness::ablation::adaptor_lambdas;
use knnlm::harness::bench::bench_models;
use knnlm::harness::pipeline::{build_index, build_ivf, encoder_params};
use knnlm::harness::report::{ablation_table, eval_table, table, write_jsonl};
use knnlm::harness::{
    run_ablation_grid, tune_lambda, BaseModel, EvalReport, IndexKind, Mode, Model,
    PipelineConfig, Retriever, Splits, Workspace,
};
use knnlm::index::{IvfIndex, SearchIndex};
use knnlm::lm::{ContextEncoder, CountLm, CountLmParams, Corpus, SuffixTables};
use knnlm::pca::{reduce_datastore, PcaParams};
use knnlm::pruning::{prune, PruneMethod};
use knnlm::synth::{generate, ToyParams};
use knnlm::{Error, Result, Vocabulary};

#[derive(Parser)]
#[command(name = "knnlm", version, about = "Nearest-neighbor LM pipeline")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `threads`; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy benchmark corpora and a matching config.
    Synth {
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the count LM and write the vocabulary.
    BuildLm,
    /// Encode the datastore corpus into key/value records.
    BuildDatastore {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Store keys as half floats.
        #[arg(long)]
        half: bool,
    },
    /// Build an inverted-file index over a datastore.
    BuildIndex(DatastoreArg),
    /// Prune a datastore.
    Prune {
        #[arg(long, value_enum)]
        method: PruneKind,
        /// Overrides `prune.retain` (random and rank).
        #[arg(long)]
        retain: Option<f64>,
        /// Overrides `prune.gm_k`.
        #[arg(long)]
        gm_k: Option<usize>,
        /// Overrides `prune.kmeans_top_m`.
        #[arg(long)]
        kmeans_top_m: Option<usize>,
        /// Overrides `prune.kmeans_ratio`.
        #[arg(long)]
        kmeans_ratio: Option<f64>,
        /// Find neighbors with the exact flat index instead of the configured one.
        #[arg(long)]
        exact: bool,
        #[command(flatten)]
        ds: DatastoreArg,
    },
    /// Fit PCA on the keys and project the datastore.
    Reduce {
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        ds: DatastoreArg,
    },
    /// Train the retrieval adaptor on the validation split.
    TrainAdaptor(DatastoreArg),
    /// Grid-search λ on the validation split.
    TuneLambda(DatastoreArg),
    /// Streaming test-set evaluation.
    Eval {
        #[arg(long, default_value = "knnlm")]
        mode: String,
        /// Build the mode's datastore variant in memory instead of loading artifacts.
        #[arg(long)]
        in_memory: bool,
        #[arg(long)]
        adaptor: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[command(flatten)]
        ds: DatastoreArg,
    },
    /// Throughput of several modes, built in memory.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "nlm,knnlm,knnlm+DR,knnlm+All")]
        modes: Vec<String>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Learned-or-random mask × learned-or-constant weight grid.
    Ablate,
}

#[derive(Args)]
struct DatastoreArg {
    /// Input datastore; defaults to `datastore.knnd` in the work directory.
    #[arg(long)]
    datastore: Option<PathBuf>,
    /// Output path; defaults depend on the stage.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PruneKind {
    Random,
    Kmeans,
    Gm,
    Rank,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::MissingArtifact { .. } => 2,
                Error::Format { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) if !p.exists() => {
            return Err(Error::Config(format!("config file {} not found", p.display())))
        }
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Synth { scale, out } => synth(&config, scale, out, stdout),
        Command::BuildLm => build_lm(&config, stdout),
        Command::BuildDatastore { out, half } => {
            let art = Artifacts::load(&config)?;
            let ds = build_datastore(&art.splits.datastore, &art.base.encoder, config.policy)?;
            let path = out.unwrap_or_else(|| default_datastore(&config));
            ds.save_with(&path, SaveOptions { half_precision: half })?;
            emit_stage(stdout, "build-datastore", &path, json!(ds.stats()))
        }
        Command::BuildIndex(a) => {
            let ds = load_datastore(&config, &a)?;
            let index = build_ivf(&ds, &config)?;
            let path = a.out.clone().unwrap_or_else(|| index_path(&datastore_path(&config, &a)));
            index.save(&path)?;
            emit_stage(
                stdout,
                "build-index",
                &path,
                json!({"describe": index.describe(), "nlist": index.nlist(), "nprobe": index.nprobe()}),
            )
        }
        Command::Prune {
            method,
            retain,
            gm_k,
            kmeans_top_m,
            kmeans_ratio,
            exact,
            ds: a,
        } => {
            let mut config = config;
            config.prune_retain = retain.unwrap_or(config.prune_retain);
            config.gm_k = gm_k.unwrap_or(config.gm_k);
            config.kmeans_top_m = kmeans_top_m.unwrap_or(config.kmeans_top_m);
            config.kmeans_ratio = kmeans_ratio.unwrap_or(config.kmeans_ratio);
            if exact {
                config.index_kind = IndexKind::Flat;
            }
            config.validate()?;
            let ds = load_datastore(&config, &a)?;
            let method = match method {
                PruneKind::Random => PruneMethod::Random { retain: config.prune_retain },
                PruneKind::Kmeans => PruneMethod::KMeans {
                    top_m: config.kmeans_top_m,
                    ratio: config.kmeans_ratio,
                },
                PruneKind::Gm => PruneMethod::GreedyMerge { k: config.gm_k },
                PruneKind::Rank => PruneMethod::Rank {
                    retain: config.prune_retain,
                    k: config.rank_k,
                },
            };
            let index = build_index(&ds, &config)?;
            let (out, report) = prune(&ds, method, &*index, config.seed)?;
            let path = a.out.unwrap_or_else(|| config.work_dir.join("datastore.pruned.knnd"));
            out.save(&path)?;
            emit_stage(stdout, "prune", &path, json!(report))
        }
        Command::Reduce { dim, ds: a } => {
            let ds = load_datastore(&config, &a)?;
            let mut p = PcaParams::new(dim.unwrap_or(config.dr_dim), config.seed);
            p.rotate = config.dr_rotate;
            p.sample_cap = Some(config.dr_sample_cap);
            let (out, t) = reduce_datastore(&ds, &p)?;
            let path = a.out.unwrap_or_else(|| config.work_dir.join("datastore.reduced.knnd"));
            out.save(&path)?;
            emit_stage(
                stdout,
                "reduce",
                &path,
                json!({
                    "input_dim": t.input_dim(),
                    "output_dim": t.output_dim(),
                    "explained_variance": t.explained_variance(),
                    "rotated": t.rotation().is_some(),
                }),
            )
        }
        Command::TrainAdaptor(a) => {
            let ws = artifact_workspace(&config, &a)?;
            let r = artifact_retriever(&ws, &config, &a)?;
            let (adaptor, log) = ws.train_adaptor(&r, &config.adaptor_config())?;
            let path = a.out.unwrap_or_else(|| default_adaptor(&config));
            adaptor.save(&path)?;
            write_jsonl(stdout, &log.epochs)?;
            emit_stage(
                stdout,
                "train-adaptor",
                &path,
                json!({
                    "best_epoch": log.best_epoch,
                    "best_holdout_ppl": log.best_holdout_ppl,
                    "threshold": adaptor.threshold,
                    "num_params": log.num_params,
                    "num_train": log.num_train,
                    "num_holdout": log.num_holdout,
                }),
            )
        }
        Command::TuneLambda(a) => {
            let ws = artifact_workspace(&config, &a)?;
            let r = artifact_retriever(&ws, &config, &a)?;
            let t = tune_lambda(&ws.valid_probs(&r)?)?;
            write_jsonl(stdout, &[&t])?;
            let rows: Vec<Vec<String>> = t
                .grid
                .iter()
                .map(|(l, p)| vec![format!("{l:.2}"), format!("{p:.4}")])
                .collect();
            eprint!("{}", table(&["lambda", "valid_ppl"], &rows));
            eprintln!("selected lambda = {:.2}", t.lambda);
            Ok(())
        }
        Command::Eval {
            mode,
            in_memory,
            adaptor,
            max_tokens,
            ds: a,
        } => {
            let mode = Mode::parse(&mode)
                .ok_or_else(|| Error::Config(format!("unknown mode `{mode}`")))?;
            let ws = artifact_workspace(&config, &a)?;
            let model = if in_memory || mode == Mode::Nlm {
                ws.build_model(mode)?
            } else {
                artifact_model(&ws, &config, &a, mode, adaptor)?
            };
            let report = ws.evaluate(&model, max_tokens)?;
            emit_reports(stdout, &[report])
        }
        Command::Bench { modes, repetitions } => {
            let modes = modes
                .iter()
                .map(|m| Mode::parse(m).ok_or_else(|| Error::Config(format!("unknown mode `{m}`"))))
                .collect::<Result<Vec<_>>>()?;
            let ws = artifact_workspace(&config, &DatastoreArg { datastore: None, out: None })?;
            let models = modes
                .iter()
                .map(|&m| ws.build_model(m))
                .collect::<Result<Vec<_>>>()?;
            let max_tokens = (config.bench_tokens > 0).then_some(config.bench_tokens);
            let rows = bench_models(
                &ws,
                &models,
                repetitions.unwrap_or(config.bench_repetitions),
                max_tokens,
            )?;
            let reports: Vec<EvalReport> = rows.iter().map(|r| r.report.clone()).collect();
            write_jsonl(stdout, &rows)?;
            eprint!("{}", eval_table(&reports));
            Ok(())
        }
        Command::Ablate => {
            let ws = artifact_workspace(&config, &DatastoreArg { datastore: None, out: None })?;
            let model = ws.build_model(Mode::Ar)?;
            let r = model.retriever.as_ref().expect("adaptive mode has a retriever");
            let adaptor = model.adaptor.as_ref().expect("adaptive mode has an adaptor");
            let probs = ws.test_probs(r)?;
            let lambdas = adaptor_lambdas(adaptor, ws.test_records())?;
            let seeds: Vec<u64> = (0..config.ablate_seeds as u64).map(|s| config.seed + s).collect();
            let cells = run_ablation_grid(&probs, &lambdas, model.lambda, &config.ablate_fractions, &seeds)?;
            write_jsonl(stdout, &cells)?;
            eprint!("{}", ablation_table(&cells));
            Ok(())
        }
    }
}

fn emit_stage(out: &mut impl Write, stage: &str, path: &Path, details: serde_json::Value) -> Result<()> {
    #[derive(Serialize)]
    struct Stage<'a> {
        stage: &'a str,
        path: String,
        details: serde_json::Value,
    }
    let s = Stage {
        stage,
        path: path.display().to_string(),
        details,
    };
    write_jsonl(out, &[&s])?;
    eprintln!("{stage}: wrote {}", s.path);
    Ok(())
}

fn emit_reports(out: &mut impl Write, reports: &[EvalReport]) -> Result<()> {
    write_jsonl(out, reports)?;
    eprint!("{}", eval_table(reports));
    Ok(())
}

fn synth(config: &PipelineConfig, scale: f64, out: Option<PathBuf>, stdout: &mut impl Write) -> Result<()> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let dir = out.unwrap_or_else(|| config.work_dir.clone());
    std::fs::create_dir_all(&dir)?;
    let corpora = generate(&ToyParams {
        seed: config.seed,
        ..ToyParams::default().scaled(scale)
    });
    let mut cfg = PipelineConfig::toy();
    cfg.seed = config.seed;
    cfg.work_dir = dir.clone();
    for (name, text) in corpora.splits() {
        let path = dir.join(format!("{name}.txt"));
        std::fs::write(&path, text)?;
        let key = match name {
            "generic" => "corpus.lm",
            other => &format!("corpus.{other}"),
        };
        cfg.set(key, &path.display().to_string())?;
    }
    let cfg_path = dir.join("knnlm.conf");
    std::fs::write(&cfg_path, cfg.to_text())?;
    emit_stage(stdout, "synth", &cfg_path, json!({"scale": scale, "seed": config.seed}))
}

fn require_path(stage: &'static str, key: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
    let p = p
        .clone()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")))?;
    if !p.exists() {
        return Err(Error::MissingArtifact { stage, path: p });
    }
    Ok(p)
}

fn read_text(stage: &'static str, key: &str, p: &Option<PathBuf>) -> Result<String> {
    Ok(std::fs::read_to_string(require_path(stage, key, p)?)?)
}

fn require_file(stage: &'static str, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { stage, path })
    }
}

fn build_lm(config: &PipelineConfig, stdout: &mut impl Write) -> Result<()> {
    let texts = [
        read_text("corpus", "corpus.lm", &config.corpus_lm)?,
        read_text("corpus", "corpus.datastore", &config.corpus_datastore)?,
        read_text("corpus", "corpus.valid", &config.corpus_valid)?,
        read_text("corpus", "corpus.test", &config.corpus_test)?,
    ];
    let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
    let train = Corpus::from_text(&texts[0], &vocab);
    let valid = Corpus::from_text(&texts[2], &vocab);
    let lm = CountLm::fit(
        &train,
        &CountLmParams {
            order: config.lm_order,
            smoothing: config.lm_smoothing,
            weights: None,
            policy: config.policy,
        },
        vocab.len(),
    )?;
    std::fs::create_dir_all(&config.work_dir)?;
    vocab.save(config.work_dir.join("vocab.txt"))?;
    let path = config.work_dir.join("lm.json");
    lm.save(&path)?;
    emit_stage(
        stdout,
        "build-lm",
        &path,
        json!({
            "vocab": vocab.len(),
            "order": lm.order(),
            "train_tokens": train.num_tokens(),
            "valid_ppl": lm.perplexity(&valid),
        }),
    )
}

/// Parametric side and corpus splits loaded from `build-lm` artifacts.
struct Artifacts {
    vocab: Vocabulary,
    base: BaseModel,
    splits: Splits,
}

impl Artifacts {
    fn load(config: &PipelineConfig) -> Result<Self> {
        let vocab = Vocabulary::load(require_file("build-lm", config.work_dir.join("vocab.txt"))?)?;
        let lm = CountLm::load(require_file("build-lm", config.work_dir.join("lm.json"))?)?;
        if lm.vocab_size() != vocab.len() {
            return Err(Error::Config(
                "lm.json and vocab.txt disagree on vocabulary size; rerun build-lm".into(),
            ));
        }
        let read = |key: &str, p: &Option<PathBuf>| -> Result<Corpus> {
            Ok(Corpus::from_text(&read_text("corpus", key, p)?, &vocab))
        };
        let splits = Splits {
            lm_train: read("corpus.lm", &config.corpus_lm)?,
            datastore: read("corpus.datastore", &config.corpus_datastore)?,
            valid: read("corpus.valid", &config.corpus_valid)?,
            test: read("corpus.test", &config.corpus_test)?,
        };
        let base = BaseModel {
            lm,
            encoder: ContextEncoder::new(encoder_params(config, vocab.len())),
            suffix: SuffixTables::build(&splits.datastore, config.policy),
            policy: config.policy,
        };
        Ok(Self { vocab, base, splits })
    }
}

fn default_datastore(config: &PipelineConfig) -> PathBuf {
    config.work_dir.join("datastore.knnd")
}

fn default_adaptor(config: &PipelineConfig) -> PathBuf {
    config.work_dir.join("adaptor.knna")
}

fn datastore_path(config: &PipelineConfig, a: &DatastoreArg) -> PathBuf {
    a.datastore.clone().unwrap_or_else(|| default_datastore(config))
}

/// Index file written next to a datastore.
fn index_path(ds: &Path) -> PathBuf {
    ds.with_extension("knni")
}

fn load_datastore(config: &PipelineConfig, a: &DatastoreArg) -> Result<Datastore> {
    Datastore::load(require_file("build-datastore", datastore_path(config, a))?)
}

/// Workspace over the `build-lm` artifacts, with the datastore loaded when
/// one exists.
fn artifact_workspace(config: &PipelineConfig, a: &DatastoreArg) -> Result<Workspace> {
    let art = Artifacts::load(config)?;
    let ws = Workspace::from_parts(config.clone(), art.vocab, art.base, art.splits)?;
    let path = datastore_path(config, a);
    if path.exists() {
        let ds = Datastore::load(&path)?;
        if ds.transform().is_some() || a.datastore.is_some() {
            // Transformed or pruned stores are retrieval variants, not the full store.
            return Ok(ws);
        }
        Ok(ws.with_datastore(ds))
    } else if a.datastore.is_some() {
        Err(Error::MissingArtifact {
            stage: "build-datastore",
            path,
        })
    } else {
        Ok(ws)
    }
}

/// Retriever over `ds`, loading the index written by `build-index` when the
/// config asks for an inverted file and one exists.
fn artifact_retriever(ws: &Workspace, config: &PipelineConfig, a: &DatastoreArg) -> Result<Retriever> {
    let ipath = index_path(&datastore_path(config, a));
    let ds = match &a.datastore {
        Some(p) => Datastore::load(require_file("build-datastore", p.clone())?)?,
        None => ws.datastore()?.clone(),
    };
    let index: Box<dyn SearchIndex> = if config.index_kind == IndexKind::Ivf && ipath.exists() {
        let idx = IvfIndex::load(&ipath)?;
        if idx.len() != ds.len() || idx.dim() != ds.dim() {
            return Err(Error::Config(format!(
                "index {} does not match the datastore; rerun build-index",
                ipath.display()
            )));
        }
        Box::new(idx)
    } else {
        build_index(&ds, config)?
    };
    let mut r = Retriever::new(ds, index, config.k);
    r.distance_power = config.distance_power;
    Ok(r)
}

fn artifact_model(
    ws: &Workspace,
    config: &PipelineConfig,
    a: &DatastoreArg,
    mode: Mode,
    adaptor: Option<PathBuf>,
) -> Result<Model> {
    let r = artifact_retriever(ws, config, a)?;
    let retention = Some(r.datastore.len() as f64 / ws.splits.datastore.num_tokens() as f64);
    let (lambda, tuning) = ws.lambda_for(&r)?;
    let adaptor = if matches!(mode, Mode::Ar | Mode::All) {
        let path = adaptor.unwrap_or_else(|| default_adaptor(config));
        Some(Adaptor::load(require_file("train-adaptor", path)?)?)
    } else {
        None
    };
    Ok(Model {
        mode,
        retriever: Some(r),
        adaptor,
        lambda,
        tuning,
        train_log: None,
        retention,
    })
}
