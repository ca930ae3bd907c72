//! `severity`: prepare corpora, train and evaluate severity models, and
//! produce comparator reports.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 training error.

mod config;
mod embed;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use severity_core::backbones::{Architecture, BackboneConfig, FeatureStore};
use severity_core::corpus::{
    corpus_stats, filter_by_votes, format_split, load_corpus, read_split, stratified_split, write_atomic, write_corpus,
    Aspect, AspectDataset, Part, ScriptDocument, SeverityLevel, SplitRatios,
};
use severity_core::eval::{cross_validate, evaluate};
use severity_core::interpret::{comparator_report_features, load_popularity, select_comparators, Pool, DEFAULT_MIN_POPULARITY};
use severity_core::seed::derive;
use severity_core::siamese::{train, SiameseModel, TrainConfig};
use severity_core::synthetic::{generate, popularity, SyntheticConfig};

use embed::{EmbedArgs, Loaded};

#[derive(Debug, Parser)]
#[command(name = "severity", version, about = "Ordinal content-severity prediction from movie scripts")]
struct Cli {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter by votes, split 80/10/10 per aspect, write splits and statistics.
    Prepare(PrepareArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Train a model on a prepared split.
    Train(TrainArgs),
    /// Score a model on one split part.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Crossval(CrossvalArgs),
    /// Rank one movie against another.
    Compare(CompareArgs),
    /// Compare movies with popular comparators from each severity level.
    Report(ReportArgs),
    /// Write a planted-signal synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct CorpusArgs {
    /// Tab-separated manifest with movie_id, title and <aspect>_label/_votes columns.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding <movie_id>.txt scripts.
    #[arg(long)]
    scripts: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct PrepareArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 5)]
    min_votes: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only this aspect (default: all).
    #[arg(long)]
    aspect: Option<Aspect>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct StatsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 1)]
    min_votes: u32,
    #[arg(long)]
    aspect: Option<Aspect>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value = "rnn_trans")]
    arch: Architecture,
    /// Recurrent width per direction.
    #[arg(long, default_value_t = 200)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// TextRCNN projection width.
    #[arg(long, default_value_t = 200)]
    projection: usize,
    /// TextCNN channels per kernel size.
    #[arg(long, default_value_t = 10)]
    channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    kernel_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
}

impl ModelArgs {
    fn backbone(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            architecture: self.arch,
            input_dim,
            hidden_dim: self.hidden,
            layers: self.layers,
            projection_dim: self.projection,
            kernel_sizes: self.kernel_sizes.clone(),
            channels: self.channels,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainingArgs {
    /// Train the ranking head jointly with classification.
    #[arg(long)]
    multitask: bool,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Default: half the training set, rounded up.
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    rank_weight: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainingArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            pairs_per_epoch: self.pairs_per_epoch,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            rank_weight: self.rank_weight,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output directory of `prepare`.
    #[arg(long)]
    prepared: PathBuf,
    #[arg(long)]
    aspect: Aspect,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    prepared: PathBuf,
    /// Must match the model's aspect (default: the model's).
    #[arg(long)]
    aspect: Option<Aspect>,
    #[arg(long, default_value = "test")]
    part: Part,
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct CrossvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    prepared: PathBuf,
    #[arg(long)]
    aspect: Aspect,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Movie whose relative severity is reported.
    #[arg(long)]
    left: String,
    #[arg(long)]
    right: String,
    #[command(flatten)]
    embed: EmbedArgs,
    /// Also write compare.txt and compare.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    prepared: PathBuf,
    /// Two-column TSV: movie_id, rating_count.
    #[arg(long)]
    popularity: PathBuf,
    /// Movies to report on (default: every test movie).
    #[arg(long = "movie", value_delimiter = ',')]
    movies: Vec<String>,
    /// Comparator pool: train, dev, test, train+dev or all.
    #[arg(long, default_value = "train+dev")]
    pool: Pool,
    #[arg(long, default_value_t = DEFAULT_MIN_POPULARITY)]
    min_popularity: u64,
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    documents: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Input data that does not fit the request (exit code 2).
#[derive(Debug)]
struct DataError(String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn data_error(msg: impl Into<String>) -> anyhow::Error {
    DataError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<severity_core::Error>() {
            return match e {
                severity_core::Error::Training(_) => 3,
                e if e.is_data_error() => 2,
                _ => 1,
            };
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

/// Hex SHA-256 of a command's resolved arguments.
fn run_hash<T: Serialize>(command: &str, args: &T) -> String {
    let canonical = json!({ "command": command, "args": args });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn split_path(prepared: &Path, aspect: Aspect) -> PathBuf {
    prepared.join(aspect.name()).join("split.tsv")
}

/// The aspect's filtered dataset as recorded by `prepare`, with its split.
fn load_prepared(corpus: &CorpusArgs, prepared: &Path, aspect: Aspect) -> Result<AspectDataset> {
    let mut all = load_corpus(&corpus.manifest, &corpus.scripts)?;
    let full = all.remove(&aspect).expect("every aspect present");
    let path = split_path(prepared, aspect);
    let split = read_split(&path)?;
    let keep: Vec<usize> = (0..full.len())
        .filter(|&i| split.contains_key(full.instances[i].movie_id()))
        .collect();
    if keep.len() != split.len() {
        return Err(data_error(format!(
            "{} lists {} movies but only {} are in the corpus",
            path.display(),
            split.len(),
            keep.len()
        )));
    }
    Ok(full.subset(&keep).with_split(&split)?)
}

fn documents(corpus: &CorpusArgs) -> Result<BTreeMap<String, Arc<ScriptDocument>>> {
    let all = load_corpus(&corpus.manifest, &corpus.scripts)?;
    let mut docs = BTreeMap::new();
    for ds in all.values() {
        for inst in &ds.instances {
            docs.entry(inst.movie_id().to_string()).or_insert_with(|| Arc::clone(&inst.document));
        }
    }
    Ok(docs)
}

fn check_embedder(model: &SiameseModel, embedder: &Loaded) -> Result<()> {
    if model.meta().embedder_id != embedder.id() {
        return Err(data_error(format!(
            "model was trained on `{}` features but `{}` was given",
            model.meta().embedder_id,
            embedder.id()
        )));
    }
    Ok(())
}

fn feature_store<'d>(
    docs: impl IntoIterator<Item = &'d ScriptDocument>,
    embedder: &Loaded,
    architecture: Architecture,
) -> Result<FeatureStore> {
    Ok(FeatureStore::build(docs, architecture, embedder.for_architecture(architecture)?)?)
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let hash = run_hash("prepare", args);
    let corpus = load_corpus(&args.corpus.manifest, &args.corpus.scripts)?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let mut summary = serde_json::Map::new();
    for (aspect, dataset) in &corpus {
        if args.aspect.is_some_and(|a| a != *aspect) {
            continue;
        }
        let filtered = filter_by_votes(dataset, args.min_votes)?;
        if filtered.is_empty() {
            log::warn!("{aspect}: no movies with at least {} votes, skipping", args.min_votes);
            continue;
        }
        let split = stratified_split(&filtered, SplitRatios::default(), derive(args.seed, &format!("split/{aspect}")))?;
        let stats = corpus_stats(&filtered)?;
        let sizes = [Part::Train, Part::Dev, Part::Test].map(|p| split.part(p).len());
        println!(
            "{aspect}: {} movies (train {}, dev {}, test {})",
            filtered.len(),
            sizes[0],
            sizes[1],
            sizes[2]
        );
        let dir = args.out.join(aspect.name());
        files.push((dir.join("split.tsv"), format_split(split.split.as_ref().expect("split set"))));
        files.push((dir.join("stats.txt"), format!("# config_hash {hash}\n{stats}")));
        let stats_json = json!({ "config_hash": hash, "seed": args.seed, "stats": stats });
        files.push((dir.join("stats.json"), serde_json::to_string_pretty(&stats_json)? + "\n"));
        summary.insert(
            aspect.name().into(),
            json!({ "instances": filtered.len(), "train": sizes[0], "dev": sizes[1], "test": sizes[2] }),
        );
    }
    if summary.is_empty() {
        return Err(data_error(format!("no aspect has movies with at least {} votes", args.min_votes)));
    }
    let manifest = json!({
        "config_hash": hash,
        "seed": args.seed,
        "min_votes": args.min_votes,
        "aspects": summary,
    });
    files.push((args.out.join("prepare.json"), serde_json::to_string_pretty(&manifest)? + "\n"));
    for (path, text) in &files {
        write_text(path, text)?;
    }
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus.manifest, &args.corpus.scripts)?;
    let mut all = Vec::new();
    for (aspect, dataset) in &corpus {
        if args.aspect.is_some_and(|a| a != *aspect) {
            continue;
        }
        let filtered = filter_by_votes(dataset, args.min_votes)?;
        if filtered.is_empty() {
            log::warn!("{aspect}: no movies with at least {} votes", args.min_votes);
            continue;
        }
        let stats = corpus_stats(&filtered)?;
        if args.json {
            all.push(stats);
        } else {
            println!("{stats}");
        }
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&all)?);
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let hash = run_hash("train", args);
    let dataset = load_prepared(&args.corpus, &args.prepared, args.aspect)?;
    let embedder = args.embed.load()?;
    let backbone = args.model.backbone(embedder.dim());
    let config = args.training.config();
    let store = feature_store(dataset.instances.iter().map(|i| i.document.as_ref()), &embedder, backbone.architecture)?;
    log::info!("featurized {} documents", store.len());
    let outcome = train(&config, &dataset, &backbone, args.training.multitask, &store, &embedder.id())?;
    let meta = outcome.model.meta();

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    outcome.model.save(&args.out.join("model.bin"))?;
    let log = format!("# config_hash {} seed {}\n{}", meta.config_hash, meta.seed, outcome.metrics_log());
    write_text(&args.out.join("metrics.log"), &log)?;
    write_json(
        &args.out.join("train.json"),
        &json!({
            "config_hash": meta.config_hash,
            "run_hash": hash,
            "seed": meta.seed,
            "aspect": meta.aspect,
            "multitask": meta.multitask,
            "best_epoch": meta.best_epoch,
            "best_dev_macro_f1": meta.best_dev_macro_f1,
            "epochs_run": outcome.log.len(),
        }),
    )?;
    println!(
        "{}: best dev macro F1 {:.4} at epoch {} ({} epochs run)",
        meta.aspect,
        meta.best_dev_macro_f1.unwrap_or(f64::NAN),
        meta.best_epoch,
        outcome.log.len()
    );
    Ok(())
}

fn model_aspect_check(model: &SiameseModel, requested: Option<Aspect>) -> Result<Aspect> {
    let aspect = requested.unwrap_or(model.aspect());
    if aspect != model.aspect() {
        return Err(data_error(format!(
            "model predicts {} but {aspect} data was requested",
            model.aspect()
        )));
    }
    Ok(aspect)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = SiameseModel::load(&args.model)?;
    let aspect = model_aspect_check(&model, args.aspect)?;
    let embedder = args.embed.load()?;
    check_embedder(&model, &embedder)?;
    let dataset = load_prepared(&args.corpus, &args.prepared, aspect)?;
    let instances = dataset.part(args.part);
    if instances.is_empty() {
        return Err(data_error(format!("the {} part is empty", args.part)));
    }
    let arch = model.meta().backbone.architecture;
    let store = feature_store(instances.iter().map(|i| i.document.as_ref()), &embedder, arch)?;
    let report = evaluate(&model, &instances, &store)?;
    let meta = model.meta();
    let text = format!(
        "model config_hash {}\nseed {}\naspect {aspect}\npart {}\n{report}",
        meta.config_hash, meta.seed, args.part
    );
    print!("{text}");
    if let (Part::Dev, Some(best)) = (args.part, meta.best_dev_macro_f1) {
        println!("stored best dev macro F1 {best:.6}");
    }
    write_text(&args.out.join("eval.txt"), &text)?;
    write_json(
        &args.out.join("eval.json"),
        &json!({
            "config_hash": meta.config_hash,
            "run_hash": run_hash("eval", args),
            "seed": meta.seed,
            "aspect": aspect,
            "part": args.part,
            "report": report,
        }),
    )
}

fn cmd_crossval(args: &CrossvalArgs) -> Result<()> {
    let hash = run_hash("crossval", args);
    let dataset = load_prepared(&args.corpus, &args.prepared, args.aspect)?;
    let embedder = args.embed.load()?;
    let backbone = args.model.backbone(embedder.dim());
    let store = feature_store(dataset.instances.iter().map(|i| i.document.as_ref()), &embedder, backbone.architecture)?;
    let config = args.training.config();
    let report = cross_validate(
        &config,
        &dataset,
        &backbone,
        args.training.multitask,
        &store,
        &embedder.id(),
        args.folds,
        config.seed,
    )?;
    println!("{report}");
    write_text(&args.out.join("cv.tsv"), &report.to_tsv())?;
    write_text(
        &args.out.join("cv.txt"),
        &format!("config_hash {hash}\nseed {}\n{report}\n", config.seed),
    )?;
    write_json(
        &args.out.join("cv.json"),
        &json!({ "config_hash": hash, "seed": config.seed, "aspect": args.aspect, "report": report }),
    )
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let model = SiameseModel::load(&args.model)?;
    let embedder = args.embed.load()?;
    check_embedder(&model, &embedder)?;
    let docs = documents(&args.corpus)?;
    let find = |id: &str| docs.get(id).cloned().ok_or_else(|| data_error(format!("movie `{id}` is not in the corpus")));
    let (a, b) = (find(&args.left)?, find(&args.right)?);
    let arch = model.meta().backbone.architecture;
    let cmp = model.compare(&a, &b, embedder.for_architecture(arch)?)?;
    let text = format!(
        "{} {} {}  ({})\np(LOWER) {:.4}  p(EQUAL) {:.4}  p(HIGHER) {:.4}\n",
        args.left,
        cmp.label.symbol(),
        args.right,
        cmp.label,
        cmp.probabilities[0],
        cmp.probabilities[1],
        cmp.probabilities[2]
    );
    print!("{text}");
    if let Some(out) = &args.out {
        let meta = model.meta();
        write_text(&out.join("compare.txt"), &format!("config_hash {}\n{text}", meta.config_hash))?;
        write_json(
            &out.join("compare.json"),
            &json!({
                "config_hash": meta.config_hash,
                "seed": meta.seed,
                "aspect": meta.aspect,
                "left": args.left,
                "right": args.right,
                "comparison": cmp,
            }),
        )?;
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let model = SiameseModel::load(&args.model)?;
    let embedder = args.embed.load()?;
    check_embedder(&model, &embedder)?;
    let dataset = load_prepared(&args.corpus, &args.prepared, model.aspect())?;
    let popularity = load_popularity(&args.popularity)?;
    let comparators = select_comparators(&dataset, &popularity, args.min_popularity, args.pool)?;

    let docs = documents(&args.corpus)?;
    let gold: BTreeMap<&str, SeverityLevel> = dataset.instances.iter().map(|i| (i.movie_id(), i.label)).collect();
    let movie_ids: Vec<String> = if args.movies.is_empty() {
        dataset.part(Part::Test).iter().map(|i| i.movie_id().to_string()).collect()
    } else {
        args.movies.clone()
    };
    let mut targets = Vec::new();
    for id in &movie_ids {
        let doc = docs.get(id).ok_or_else(|| data_error(format!("movie `{id}` is not in the corpus")))?;
        targets.push(Arc::clone(doc));
    }

    let arch = model.meta().backbone.architecture;
    let needed: BTreeSet<&str> = comparators.iter().map(|c| c.movie_id()).chain(movie_ids.iter().map(String::as_str)).collect();
    let store = feature_store(needed.iter().map(|id| docs[*id].as_ref()), &embedder, arch)?;
    let meta = model.meta();
    let mut text = format!(
        "config_hash {}\nseed {}\naspect {}\npool {}\n",
        meta.config_hash, meta.seed, meta.aspect, args.pool
    );
    for w in &comparators.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    let mut reports = Vec::new();
    for doc in &targets {
        let x = store.get(&doc.movie_id).expect("featurized");
        let report = comparator_report_features(&model, doc, gold.get(doc.movie_id.as_str()).copied(), x.view(), &comparators, &store)?;
        text.push('\n');
        text.push_str(&report.to_string());
        reports.push(report);
    }
    print!("{text}");
    write_text(&args.out.join("report.txt"), &text)?;
    write_json(
        &args.out.join("report.json"),
        &json!({
            "config_hash": meta.config_hash,
            "run_hash": run_hash("report", args),
            "seed": meta.seed,
            "aspect": meta.aspect,
            "pool": args.pool,
            "warnings": comparators.warnings,
            "comparators": comparators.levels.iter().map(|l| l.iter().map(|c| c.movie_id()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "reports": reports,
        }),
    )
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        documents: args.documents,
        seed: args.seed,
        ..Default::default()
    };
    let dataset = generate(&cfg)?;
    write_corpus([&dataset], &args.out.join("manifest.tsv"), &args.out.join("scripts"))?;
    let pop: String = popularity(&dataset, DEFAULT_MIN_POPULARITY)
        .iter()
        .map(|(id, n)| format!("{id}\t{n}\n"))
        .collect();
    write_text(&args.out.join("popularity.tsv"), &format!("movie_id\trating_count\n{pop}"))?;
    println!("wrote {} synthetic {} scripts to {}", dataset.len(), cfg.aspect, args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Splice values from `--config FILE` into the argument list.
fn apply_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        a.strip_prefix("--config=")
            .map(PathBuf::from)
            .or_else(|| (a == "--config").then(|| strs.get(i + 1).map(PathBuf::from)).flatten())
    });
    let Some(path) = path else {
        return Ok(args);
    };
    let values = config::load(&path)?;
    let command = Cli::command();
    let names: Vec<&str> = command.get_subcommands().map(|s| s.get_name()).collect();
    let Some(position) = strs.iter().skip(1).position(|a| names.contains(&a.as_str())).map(|p| p + 1) else {
        return Ok(args);
    };
    let mut known = BTreeSet::new();
    let mut accepted = BTreeMap::new();
    for sub in command.get_subcommands() {
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            known.insert(long.to_string());
            if sub.get_name() == strs[position] {
                let kind = if arg.get_action().takes_values() {
                    config::FlagKind::Value
                } else {
                    config::FlagKind::Switch
                };
                accepted.insert(long.to_string(), kind);
            }
        }
    }
    config::merge(args, &values, &accepted, &known, position + 1)
}

fn main() -> ExitCode {
    let args = match apply_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
