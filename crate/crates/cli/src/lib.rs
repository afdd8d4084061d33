//! Command-line front end: `train`, `sweep`, `report` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 usage or
//! configuration error, 3 runtime abort.

pub mod config;
pub mod manifest;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use read_lab::classifier::Input;
use read_lab::eval::{self, SweepSpec};
use read_lab::gradcheck::{self, Component};
use read_lab::rng::derive_seed;
use read_lab::trainer::{latest_checkpoint, Adversary, Trainer, Variant};
use thiserror::Error;

use config::{build_data, RunConfig};
use manifest::RunManifest;

pub const OUTDIR_ENV: &str = "READ_LAB_OUTDIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("aborted: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: read_lab::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "read-lab", version, about = "Semi-supervised text classification with adversarial text generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, checkpoints and a run manifest.
    Train(TrainArgs),
    /// Train every (variant, fraction, seed) cell of a grid.
    Sweep(SweepArgs),
    /// Write generation or feature reports from a run's final checkpoint.
    Report(ReportArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Flat JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to `$READ_LAB_OUTDIR/<variant>-f<fraction>-s<seed>`.
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Continue from this checkpoint directory instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated label fractions.
    #[arg(long, value_parser = parse_fractions)]
    pub fractions: Vec<Vec<f64>>,
    /// Comma-separated variant names.
    #[arg(long, value_parser = parse_variants)]
    pub variants: Vec<Vec<Variant>>,
    /// Seeds as `a..b` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Vec<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub outdir: Option<PathBuf>,
    /// Make the named cell (`VARIANT:fraction:seed`) fail, for testing.
    #[arg(long, hide = true)]
    pub fail_cell: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Gen,
    Features,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ComponentArg {
    Generator,
    Reward,
    Classifier,
    All,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub component: ComponentArg,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Perturb the analytic gradient, which must make the check fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: read_lab::Error| e.to_string())
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<&str> = s.split(',').map(str::trim).collect();
    if items.iter().any(|i| i.is_empty()) {
        return Err(format!("malformed list {s:?}"));
    }
    items.into_iter().map(item).collect()
}

fn parse_fractions(s: &str) -> Result<Vec<f64>, String> {
    parse_list(s, |f| {
        let v: f64 = f.parse().map_err(|_| format!("bad fraction {f:?}"))?;
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(format!("fraction {v} not in (0, 1]"))
        }
    })
}

fn parse_variants(s: &str) -> Result<Vec<Variant>, String> {
    parse_list(s, parse_variant)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range {s:?}"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range {s:?}"))?;
        if a > b {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok((a..=b).collect());
    }
    parse_list(s, |x| x.parse().map_err(|_| format!("bad seed {x:?}")))
}

/// Parses arguments and runs one command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| 0),
        Command::Report(a) => cmd_report(&a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("read-lab: {e}");
            e.exit_code()
        }
    }
}

fn default_root() -> PathBuf {
    std::env::var_os(OUTDIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Resolves the configuration of a `train` invocation: flags, then the
/// config file, then built-in defaults.
pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut config = base_config(args.config.as_deref())?;
    if let Some(v) = args.variant {
        config.train.variant = v;
    }
    if let Some(f) = args.fraction {
        config.train.label_fraction = f;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest, CliError> {
    let config = resolve_train_config(args)?;
    let t = &config.train;
    let outdir = args
        .outdir
        .clone()
        .unwrap_or_else(|| eval::cell_dir(&default_root(), t.variant, t.label_fraction, t.seed));
    let mut manifest = RunManifest::start(&config, &outdir)?;
    let data = build_data(&config)?;
    let trainer = Trainer::new(config.train.clone(), &data).map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = trainer.run(&outdir, args.resume.as_deref());
    manifest.finish(&outcome);
    manifest.write(&outdir)?;
    let summary = outcome.map_err(runtime)?;
    println!(
        "{} seed {} fraction {}: final accuracy {:.4}, best {:.4} ({} iterations) -> {}",
        t.variant,
        t.seed,
        t.label_fraction,
        summary.final_accuracy,
        summary.best_accuracy,
        summary.iterations,
        outdir.display()
    );
    Ok(manifest)
}

fn parse_fail_cell(s: &str) -> Result<(Variant, f64, u64), CliError> {
    let bad = || CliError::Config(format!("--fail-cell expects VARIANT:fraction:seed, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    let [v, f, seed] = parts[..] else { return Err(bad()) };
    Ok((
        v.parse().map_err(|_| bad())?,
        f.parse().map_err(|_| bad())?,
        seed.parse().map_err(|_| bad())?,
    ))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<eval::SweepResult, CliError> {
    let config = base_config(args.config.as_deref())?;
    config.validate()?;
    let fractions: Vec<f64> = args.fractions.concat();
    let variants: Vec<Variant> = args.variants.concat();
    let seeds: Vec<u64> = args.seeds.concat();
    if fractions.is_empty() || variants.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("empty sweep grid: give --fractions, --variants and --seeds".into()));
    }
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let fail = args.fail_cell.as_deref().map(parse_fail_cell).transpose()?;
    let root = args.outdir.clone().unwrap_or_else(|| default_root().join("sweep"));
    let spec = SweepSpec {
        base: config.train.clone(),
        fractions: &fractions,
        variants: &variants,
        seeds: &seeds,
        jobs: args.jobs,
    };
    let data = |train: &read_lab::trainer::TrainConfig| {
        if fail == Some((train.variant, train.label_fraction, train.seed)) {
            return Err(read_lab::Error::InvalidArgument("injected failure".into()));
        }
        let cell = RunConfig {
            train: train.clone(),
            data: config.data.clone(),
        };
        build_data(&cell).map_err(|e| read_lab::Error::InvalidArgument(e.to_string()))
    };
    // Each cell gets a manifest like a `train` run, so `report` works on it.
    let started: Mutex<HashMap<PathBuf, RunManifest>> = Mutex::default();
    let result = eval::sweep(
        &spec,
        &root,
        |train| {
            let cell = RunConfig {
                train: train.clone(),
                data: config.data.clone(),
            };
            let dir = eval::cell_dir(&root, train.variant, train.label_fraction, train.seed);
            if let Ok(m) = RunManifest::start(&cell, &dir) {
                started.lock().expect("unpoisoned").insert(dir, m);
            }
            data(train)
        },
        |_, dir, outcome| {
            let Some(mut m) = started.lock().expect("unpoisoned").remove(dir) else { return };
            m.finish(outcome);
            if let Err(e) = m.write(dir) {
                eprintln!("read-lab: {e}");
            }
        },
    )
    .map_err(runtime)?;
    for v in &variants {
        let means = result.mean_final(*v, &fractions);
        let cells: Vec<String> = fractions
            .iter()
            .zip(means)
            .map(|(f, m)| match m {
                Some(m) => format!("{f}: {m:.4}"),
                None => format!("{f}: failed"),
            })
            .collect();
        println!("{v}: {}", cells.join(", "));
    }
    let failed = result.cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see {}", root.join("sweep_failures.csv").display());
    }
    Ok(result)
}

pub fn cmd_report(args: &ReportArgs) -> Result<PathBuf, CliError> {
    let manifest = RunManifest::read(&args.run)?;
    let config = manifest.run_config()?;
    let ckpt = latest_checkpoint(&args.run).map_err(|e| CliError::Config(e.to_string()))?;
    let data = build_data(&config)?;
    let trainer = Trainer::new(config.train.clone(), &data).map_err(|e| CliError::Config(e.to_string()))?;
    let state = trainer.load_checkpoint(&ckpt).map_err(|e| CliError::Config(e.to_string()))?;
    match args.kind {
        ReportKind::Features => {
            let features = data.features.as_ref();
            let inputs: Vec<(Input<'_>, usize)> = data
                .split
                .test
                .iter()
                .map(|e| {
                    let x = match features {
                        Some(f) => Input::Features(f.test.get(e.id).expect("checked by Trainer::new")),
                        None => Input::Tokens(&e.tokens),
                    };
                    (x, e.label.expect("test example has a label"))
                })
                .collect();
            eval::export_features(&state.classifier, &inputs, &data.labels, &args.run).map_err(runtime)?;
            let path = args.run.join("features.tsv");
            println!("wrote {} and features_2d.csv", path.display());
            Ok(path)
        }
        ReportKind::Gen => {
            let Adversary::Text { generator, .. } = &state.adversary else {
                return Err(CliError::Config(format!(
                    "{} has no text generator; gen reports need READ or D_READ",
                    config.train.variant
                )));
            };
            let real: Vec<String> = data.split.real().map(|e| e.text.clone()).collect();
            let path = args.run.join("gen_report.tsv");
            eval::generation_report(
                generator,
                &state.classifier,
                &data.vocab,
                &real,
                args.n,
                config.train.max_len,
                derive_seed(config.train.seed, "report", 0),
                Some(&path),
            )
            .map_err(|e| match e {
                read_lab::Error::InvalidArgument(m) => CliError::Config(m),
                e => runtime(e),
            })?;
            println!("wrote {}", path.display());
            Ok(path)
        }
    }
}

/// Runs the selected checks; 0 when all pass, 1 otherwise.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32, CliError> {
    let components: Vec<Component> = match args.component {
        ComponentArg::Generator => vec![Component::Generator],
        ComponentArg::Reward => vec![Component::Reward],
        ComponentArg::Classifier => vec![Component::Classifier],
        ComponentArg::All => Component::ALL.to_vec(),
    };
    let mut ok = true;
    for c in components {
        let r = gradcheck::check(c, args.seed, args.corrupt).map_err(runtime)?;
        println!(
            "{:<10} {:>5} coordinates  worst relative error {:.3e}  {}",
            c.name(),
            r.coordinates,
            r.worst_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(if ok { 0 } else { 1 })
}
