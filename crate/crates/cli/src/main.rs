use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use linefl::adapter::{AdapterConfig, Checkpoint};
use linefl::corpus::{self, assign_folds, DatasetManifest, SourceDocument};
use linefl::eval::{self, EvalReport, LineScores};
use linefl::par::{self, Exec};
use linefl::sbfl::{ochiai, CoverageMatrix};
use linefl::states::{self, MockEncoder};
use linefl::synth::{SynthConfig, SynthCorpus};
use linefl::training::{self, Dataset, TrainConfig};
use linefl::windowing::WindowConfig;
use linefl::{Error, ErrorCategory, Result};

#[derive(Parser, Debug)]
#[command(name = "linefl", version, about = "Line-level fault localization over frozen encoder states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-signal synthetic corpus (sources and fixing diffs)
    Synth(SynthArgs),
    /// Label buggy sources from their fixing diffs and write a manifest
    Ingest(IngestArgs),
    /// Produce one state file per manifest record
    Encode(EncodeArgs),
    /// Train an adapter and keep the best validation checkpoint
    Train(TrainArgs),
    /// k-fold cross-validation with per-fold and pooled reports
    Crossval(CrossvalArgs),
    /// Score every line of every state file in a directory
    Predict(PredictArgs),
    /// Top-N, ROC and AUC of a scores file against manifest labels
    Evaluate(EvaluateArgs),
    /// Ochiai suspiciousness from a test-coverage matrix
    Ochiai(OchiaiArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    min_lines: usize,
    #[arg(long, default_value_t = 60)]
    max_lines: usize,
    #[arg(long, default_value_t = 1)]
    min_faults: usize,
    #[arg(long, default_value_t = 4)]
    max_faults: usize,
    /// Move labels to random lines, seeded by this value (control corpus)
    #[arg(long)]
    random_labels: Option<u64>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    diffs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also tag records with k folds
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EncoderKind {
    /// Built-in deterministic causal encoder
    Mock,
    /// State files already written by an external extractor; only verified
    File,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = EncoderKind::Mock)]
    encoder: EncoderKind,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Full-size schedule: lr 1e-4, batch 32, up to 300 epochs
    Full,
    /// Short schedule for small synthetic corpora
    Desk,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// JSON training config; replaces the preset
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Window capacity in lines
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 512)]
    model_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

impl ModelArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&read_text(path)?)?,
            None => match self.preset {
                Preset::Full => TrainConfig::full(),
                Preset::Desk => TrainConfig::desk(),
            },
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.window {
            cfg.window = WindowConfig { capacity: v, ..cfg.window };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn adapter(&self, input_dim: usize) -> Result<AdapterConfig> {
        let cfg = AdapterConfig {
            dropout: self.dropout,
            max_positions: self.window.unwrap_or(linefl::windowing::DEFAULT_CAPACITY),
            ..AdapterConfig::small(input_dim, self.model_dim, self.layers, self.heads)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    states: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history CSV
    #[arg(long)]
    history: Option<PathBuf>,
    /// Hold out this fold for validation; otherwise validate on the training set
    #[arg(long)]
    val_fold: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    states: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Worker threads for parallel folds
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write each fold's best checkpoint
    #[arg(long)]
    save_checkpoints: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    states: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = linefl::windowing::DEFAULT_CAPACITY)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    #[arg(long)]
    roc_svg: Option<PathBuf>,
    /// Scores of a second technique; adds a Wilcoxon signed-rank comparison
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OchiaiArgs {
    #[arg(long)]
    coverage: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Document id for the scores; defaults to the coverage file stem
    #[arg(long)]
    doc_id: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Reference(format!("{} not found", path.display())),
        _ => e.into(),
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn load_sources(manifest: &DatasetManifest) -> Result<Vec<SourceDocument>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = Path::new(&r.path);
            if !path.is_file() {
                return Err(Error::Reference(format!("source {} of record {:?} not found", r.path, r.id)));
            }
            SourceDocument::load(r.id.clone(), path)
        })
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        docs: a.docs,
        min_lines: a.min_lines,
        max_lines: a.max_lines,
        min_faults: a.min_faults,
        max_faults: a.max_faults,
        seed: a.seed,
    };
    let mut corpus = SynthCorpus::generate(&cfg)?;
    if let Some(seed) = a.random_labels {
        corpus = corpus.with_random_labels(seed);
    }
    corpus.write(&a.out)?;
    log::info!("wrote {} documents to {}", corpus.docs.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let docs = corpus::load_source_dir(&a.src)?;
    let diffs = corpus::load_diff_dir(&a.diffs)?;
    let mut manifest = corpus::build_manifest(&docs, &diffs)?;
    if let Some(k) = a.folds {
        manifest = assign_folds(&manifest, k, a.seed)?;
    }
    write_file(&a.out, manifest.to_bytes())?;
    log::info!("{} records, {} unlabeled", manifest.len(), manifest.unlabeled().count());
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let docs = load_sources(&manifest)?;
    match a.encoder {
        EncoderKind::Mock => {
            let enc = MockEncoder::new(a.dim, a.seed)?;
            fs::create_dir_all(&a.out)?;
            par::try_map(Exec::default(), &docs, |d| {
                let sm = enc.encode(d)?;
                states::write_states(&sm, states::state_path(&a.out, &d.id))
            })?;
        }
        EncoderKind::File => {
            for d in &docs {
                let path = states::state_path(&a.out, &d.id);
                if !path.is_file() {
                    return Err(Error::Reference(format!("no state file for record {:?}", d.id)));
                }
                let sm = states::read_states(&path)?;
                if sm.line_count() != d.line_count() {
                    return Err(Error::Reference(format!(
                        "state file for {:?} has {} rows, source has {} lines",
                        d.id,
                        sm.line_count(),
                        d.line_count()
                    )));
                }
            }
        }
    }
    Ok(())
}

fn load_dataset(manifest: &DatasetManifest, states_dir: &Path) -> Result<(Dataset, usize)> {
    let data = Dataset::load(manifest, states_dir, Exec::default())?;
    let dim = data.dim()?.ok_or_else(|| Error::Config("manifest has no records".into()))?;
    Ok((data, dim))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let cfg = a.model.train_config()?;
    let (data, dim) = load_dataset(&manifest, &a.states)?;
    let (train_set, val_set) = match a.val_fold {
        Some(f) => {
            if manifest.fold_count().is_none() {
                return Err(Error::Config("--val-fold needs a manifest with fold tags".into()));
            }
            let folds: Vec<Option<usize>> = manifest.records.iter().map(|r| r.fold).collect();
            (data.subset(|i, _| folds[i] != Some(f)), data.subset(|i, _| folds[i] == Some(f)))
        }
        None => {
            log::warn!("no --val-fold: validating on the training set");
            (data.clone(), data)
        }
    };
    let adapter = a.model.adapter(dim)?;
    let out = training::train_from_scratch(&adapter, &train_set, &val_set, &cfg, None, Exec::default())?;
    write_file(&a.out, out.checkpoint.to_bytes()?)?;
    if let Some(h) = &a.history {
        write_file(h, out.history.to_csv())?;
    }
    log::info!("best epoch {} of {}", out.history.best_epoch, out.history.epochs.len());
    Ok(())
}

fn cmd_crossval(a: CrossvalArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let cfg = a.model.train_config()?;
    let (data, dim) = load_dataset(&manifest, &a.states)?;
    let folds = training::fold_assignment(&manifest, a.k, cfg.seed)?;
    let adapter = a.model.adapter(dim)?;
    let result = par::with_threads(a.jobs, || training::crossval(&data, &folds, &adapter, &cfg, Exec::default()))?;

    fs::create_dir_all(&a.out)?;
    let mut all_scores = Vec::new();
    for f in &result.folds {
        let stem = format!("fold-{:02}", f.fold);
        f.report.write(a.out.join(format!("{stem}.report.json")))?;
        write_file(&a.out.join(format!("{stem}.history.csv")), f.history.to_csv())?;
        if a.save_checkpoints {
            write_file(&a.out.join(format!("{stem}.ckpt")), f.checkpoint.to_bytes()?)?;
        }
        all_scores.extend(f.scores.iter().cloned());
    }
    result.aggregate.write(a.out.join("aggregate.report.json"))?;
    eval::write_scores_file(&all_scores, a.out.join("scores.jsonl"))?;
    write_file(&a.out.join("roc.csv"), eval::roc_csv(&result.aggregate.roc_points))?;
    let agg = &result.aggregate;
    println!(
        "top-1 {} top-3 {} top-5 {} of {} bugs, auc {}",
        agg.top_n(1),
        agg.top_n(3),
        agg.top_n(5),
        agg.total_bugs,
        agg.auc.map_or("undefined".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let window = WindowConfig { capacity: a.window, inference_overlap: a.overlap, ..WindowConfig::default() };
    window.validate()?;
    let files = states::list_state_files(&a.states)?;
    let scores = par::try_map(Exec::default(), &files, |(id, path)| {
        let mut sm = states::read_states(path)?;
        sm.doc_id = id.clone();
        training::predict_document(&ckpt.model, &sm, &window, Exec::Sequential)
    })?;
    eval::write_scores_file(&scores, &a.out)
}

fn scored_pairs(
    scores: Vec<LineScores>,
    manifest: &DatasetManifest,
) -> Result<Vec<(LineScores, linefl::corpus::LineLabels)>> {
    let labels: HashMap<&str, _> = manifest.records.iter().map(|r| (r.id.as_str(), r.labels())).collect();
    scores
        .into_iter()
        .map(|s| {
            let l = labels
                .get(s.doc_id.as_str())
                .ok_or_else(|| Error::Reference(format!("scores for unknown document {:?}", s.doc_id)))?
                .clone();
            Ok((s, l))
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let pairs = scored_pairs(eval::read_scores_file(&a.scores)?, &manifest)?;
    let mut report = eval::evaluate(&pairs, &eval::DEFAULT_TOP_N)?;
    if let Some(b) = &a.baseline {
        let base_pairs = scored_pairs(eval::read_scores_file(b)?, &manifest)?;
        let base = eval::evaluate(&base_pairs, &eval::DEFAULT_TOP_N)?;
        report.significance = Some(eval::compare_ranks(&report, &base)?);
    }
    report.write(&a.out)?;
    if let Some(p) = &a.roc_csv {
        write_file(p, eval::roc_csv(&report.roc_points))?;
    }
    if let Some(p) = &a.roc_svg {
        write_file(p, eval::roc_svg(&report.roc_points, report.auc))?;
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(r: &EvalReport) {
    let counts: Vec<String> = r.top_n_counts.iter().map(|(n, c)| format!("top-{n} {c}")).collect();
    println!(
        "{} of {} bugs, auc {}",
        counts.join(" "),
        r.total_bugs,
        r.auc.map_or("undefined".into(), |v| format!("{v:.4}"))
    );
}

fn cmd_ochiai(a: OchiaiArgs) -> Result<()> {
    let mut cov = CoverageMatrix::read(&a.coverage)?;
    if let Some(id) = a.doc_id {
        cov.doc_id = id;
    }
    let r = ochiai(&cov)?;
    eval::write_scores_file(&[r.scores], &a.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Train(a) => cmd_train(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ochiai(a) => cmd_ochiai(a),
    }
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Format => 3,
        ErrorCategory::Reference => 4,
        ErrorCategory::Numeric => 5,
        ErrorCategory::Io => 1,
    }
}

fn report_error(category: &str, message: &str) {
    let err = serde_json::json!({ "error": category, "message": message });
    eprintln!("{err}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error(ErrorCategory::Config.as_str(), e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            report_error(category.as_str(), &e.to_string());
            ExitCode::from(exit_code(category))
        }
    }
}
