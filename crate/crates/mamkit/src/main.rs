use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mamkit::augment::{lossy_roundtrip, AugmentConfig};
use mamkit::config::{self, AppConfig};
use mamkit::gradcheck;
use mamkit::labels::{
    manifest_counts, psnr, reduced_sampling, validate_manifest, ManifestRecord, Psnr,
    SplitAssignment,
};
use mamkit::metrics::{aggregate, average_reports, MetricsReport, PredictionLine};
use mamkit::model::MamModel;
use mamkit::synth::{generate, SyntheticSpec};
use mamkit::train::{evaluate, train, Corpus};
use mamkit::RngStream;

#[derive(Parser)]
#[command(name = "mamkit", about = "Face-retouching detection toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus tooling.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Train a model on a manifest corpus.
    Train(TrainArgs),
    /// Multi-trial evaluation of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Metric computation from stored predictions.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Manifest validation, splitting and statistics.
    Manifest {
        #[command(subcommand)]
        command: ManifestCommand,
    },
    /// Apply the lossy augmentation protocol to a directory of images.
    Augment(AugmentArgs),
    /// Run the finite-difference gradient suite over every operator.
    Gradcheck,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Render a four-factor corpus plus its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 400)]
        test: usize,
    },
}

/// Config-file keys exposed as flags; flags override file values and
/// MAMKIT_SEED overrides both.
#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_cnn: Option<f64>,
    #[arg(long)]
    lr_transformer: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Four comma-separated cluster rates, fractions allowed (e.g. 1/64).
    #[arg(long)]
    rates: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    model_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square input side in pixels.
    #[arg(long)]
    input: Option<usize>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<AppConfig> {
        let mut cfg = config::load(self.config.as_deref())?;
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lr_cnn", self.lr_cnn.map(|v| v.to_string()));
        put("lr_transformer", self.lr_transformer.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("rates", self.rates.clone());
        put("temperature", self.temperature.map(|v| v.to_string()));
        put("model_width", self.model_width.map(|v| v.to_string()));
        put("depth", self.depth.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("input", self.input.map(|v| v.to_string()));
        config::apply(&map, &mut cfg)?;
        config::env_seed_override(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root containing manifest.jsonl and the image paths it names.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at the best validation epoch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON-lines run log, one record per epoch.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-trial predictions as JSON-lines.
    #[arg(long)]
    pred_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Aggregate stored predictions into the indicator report.
    Eval {
        /// JSON-lines of {id, pred, truth}; trials are consecutive
        /// equal-length groups of lines.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

#[derive(Subcommand)]
enum ManifestCommand {
    /// Check every record invariant and cross-record uniqueness.
    Validate { file: PathBuf },
    /// Assign 80/10/10 splits by original-image id and print the records.
    Split {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also apply 1/3 reduced sampling to the eligible records.
        #[arg(long, default_value_t = false)]
        reduce: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-(api, subset) counts, plus PSNR averages when images resolve.
    Stats {
        file: PathBuf,
        /// Directory the manifest paths are relative to.
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut records = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord =
            serde_json::from_str(&line).with_context(|| format!("manifest line {}", ln + 1))?;
        records.push(r);
    }
    Ok(records)
}

fn load_corpus(root: &Path) -> Result<Corpus> {
    let records = read_manifest(&root.join("manifest.jsonl"))?;
    let report = validate_manifest(records.iter().map(|r| serde_json::to_string(r).unwrap()));
    if !report.is_clean() {
        for (ln, msg) in &report.diagnostics {
            eprintln!("manifest record {ln}: {msg}");
        }
        bail!("manifest failed validation");
    }
    Corpus::load(root, records)
}

fn print_report(report: &MetricsReport) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let corpus = load_corpus(&args.data)?;
    let mut model =
        MamModel::new(cfg.model.clone(), cfg.train.seed).map_err(anyhow::Error::msg)?;
    let outcome = train(
        &mut model,
        &corpus,
        &cfg.train,
        &AugmentConfig::default(),
        args.checkpoint.as_deref(),
    )?;
    for entry in &outcome.log {
        let line = serde_json::to_string(entry)?;
        println!("{line}");
    }
    if let Some(path) = &args.log {
        let mut out = fs::File::create(path)?;
        for entry in &outcome.log {
            writeln!(out, "{}", serde_json::to_string(entry)?)?;
        }
    }
    eprintln!(
        "best epoch {} val_loss {:.6}",
        outcome.best_epoch, outcome.best_val_loss
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let corpus = load_corpus(&args.data)?;
    let model = MamModel::load(&args.checkpoint)?;
    let (averaged, _, predictions) = evaluate(
        &model,
        &corpus,
        args.seed,
        args.trials,
        &AugmentConfig::default(),
    )?;
    if let Some(path) = &args.pred_out {
        let mut out = fs::File::create(path)?;
        for trial in &predictions {
            for p in trial {
                writeln!(out, "{}", serde_json::to_string(&PredictionLine::from_record(p))?)?;
            }
        }
    }
    print_report(&averaged)
}

fn cmd_metrics_eval(pred: &Path, trials: usize) -> Result<()> {
    anyhow::ensure!(trials >= 1, "trials must be at least 1");
    let file = fs::File::open(pred).with_context(|| format!("open {}", pred.display()))?;
    let mut records = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).with_context(|| format!("prediction line {}", ln + 1))?;
        records.push(parsed.into_record().map_err(anyhow::Error::msg)?);
    }
    anyhow::ensure!(
        !records.is_empty() && records.len() % trials == 0,
        "{} predictions do not divide into {trials} trials",
        records.len()
    );
    let per_trial = records.len() / trials;
    let reports: Vec<MetricsReport> = records
        .chunks(per_trial)
        .map(aggregate)
        .collect::<Result<_, _>>()?;
    print_report(&average_reports(&reports)?)
}

fn cmd_manifest_validate(file: &Path) -> Result<()> {
    let text = fs::read_to_string(file).with_context(|| format!("read {}", file.display()))?;
    let report = validate_manifest(text.lines().map(String::from));
    for (ln, msg) in &report.diagnostics {
        println!("line {ln}: {msg}");
    }
    println!(
        "{} records, {} diagnostics",
        report.records,
        report.diagnostics.len()
    );
    if !report.is_clean() {
        bail!("manifest failed validation");
    }
    Ok(())
}

fn cmd_manifest_split(
    file: &Path,
    seed: u64,
    reduce: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut records = read_manifest(file)?;
    let eligible: Vec<u32> = records
        .iter()
        .filter(|r| !r.is_excluded())
        .map(|r| r.id)
        .collect();
    SplitAssignment::new(&eligible, seed).apply(&mut records);
    if reduce {
        let mut rng = RngStream::new(seed, "reduced-sampling");
        records = reduced_sampling(&records, &mut rng);
    }
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    match out {
        Some(p) => fs::write(p, lines).with_context(|| format!("write {}", p.display()))?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn cmd_manifest_stats(file: &Path, root: Option<&Path>) -> Result<()> {
    let records = read_manifest(file)?;
    println!("{:>10} {:>6} {:>8}", "api", "kind", "count");
    for ((api, kind), count) in manifest_counts(&records) {
        println!("{:>10} {:>6} {:>8}", format!("{api:?}"), kind, count);
    }
    if let Some(root) = root {
        // PSNR against the same-id non-retouched record, when both resolve.
        let originals: BTreeMap<u32, &ManifestRecord> = records
            .iter()
            .filter(|r| r.kind == 0)
            .map(|r| (r.id, r))
            .collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in records.iter().filter(|r| r.kind > 0) {
            let Some(orig) = originals.get(&r.id) else {
                continue;
            };
            let a = image::open(root.join(&orig.path))?.to_rgb8();
            let b = image::open(root.join(&r.path))?.to_rgb8();
            if let Ok(Psnr::Decibels(db)) = psnr(a.as_raw(), b.as_raw()) {
                sum += db;
                n += 1;
            }
        }
        match n {
            0 => println!("psnr: n/a (no comparable original/retouched pairs)"),
            _ => println!("psnr: {:.2} dB over {n} pairs", sum / n as f64),
        }
    }
    Ok(())
}

fn cmd_augment(args: &AugmentArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut names: Vec<String> = fs::read_dir(&args.input)
        .with_context(|| format!("read {}", args.input.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let lower = n.to_ascii_lowercase();
            lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    anyhow::ensure!(!names.is_empty(), "no images in {}", args.input.display());

    let cfg = AugmentConfig::default();
    let mut log = fs::File::create(args.out.join("augment.jsonl"))?;
    for name in &names {
        let img = image::open(args.input.join(name))?.to_rgb8();
        let mut rng = RngStream::new(args.seed, &format!("augment/{name}"));
        let (result, record) = lossy_roundtrip(&img, &mut rng, &cfg)?;
        // JPEG-decoded pixels re-encode losslessly as PNG, so the output
        // directory is uniformly PNG regardless of the sampled codec.
        let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
        let out_name = format!("{stem}.png");
        result.save(args.out.join(&out_name))?;
        writeln!(
            log,
            "{}",
            serde_json::json!({ "source": name, "output": out_name, "record": record })
        )?;
    }
    println!("augmented {} images into {}", names.len(), args.out.display());
    Ok(())
}

fn cmd_synth_generate(
    out: &Path,
    seed: u64,
    counts: (usize, usize, usize),
) -> Result<()> {
    let records = generate(out, seed, &SyntheticSpec::default(), counts)?;
    println!(
        "generated {} images under {} ({} train / {} val / {} test)",
        records.len(),
        out.display(),
        counts.0,
        counts.1,
        counts.2
    );
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let outcomes = gradcheck::run_all();
    let mut failed = 0usize;
    for o in &outcomes {
        println!(
            "{} {:<28} worst {:.3e} (threshold {:.0e})",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.worst,
            o.threshold
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { command } => match command {
            SynthCommand::Generate {
                out,
                seed,
                train,
                val,
                test,
            } => cmd_synth_generate(out, *seed, (*train, *val, *test)),
        },
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Metrics { command } => match command {
            MetricsCommand::Eval { pred, trials } => cmd_metrics_eval(pred, *trials),
        },
        Command::Manifest { command } => match command {
            ManifestCommand::Validate { file } => cmd_manifest_validate(file),
            ManifestCommand::Split {
                file,
                seed,
                reduce,
                out,
            } => cmd_manifest_split(file, *seed, *reduce, out.as_deref()),
            ManifestCommand::Stats { file, root } => cmd_manifest_stats(file, root.as_deref()),
        },
        Command::Augment(args) => cmd_augment(args),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
