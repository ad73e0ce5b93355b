use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use grood::config::RunConfig;
use grood::dataset::{load_embeddings, write_embeddings};
use grood::pipeline;
use grood::synthetic::three_class_fixture;
use grood::{Error, ErrorFamily, GroodModel};

const EXIT_INPUT: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

/// Calibrated out-of-distribution detection over embedding files.
///
/// Any configuration leaf can also be set with a flag of the same dotted
/// name, e.g. `--lp.l2_strength 0.01` or `--ood_prior.mc_samples=200000`.
#[derive(Parser, Debug)]
#[command(name = "grood", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// GEMB embedding file.
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    /// JSON split manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Directory holding lp.gmdl, nm.gmdl and grood.gmdl.
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,
    /// Target ID false-rejection rate.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Master seed (also used by lp.seed and ood_prior.seed unless set).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports or output file for `synth`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifiers, fit the detector and write the model files.
    Fit(Common),
    /// Re-run calibration of an existing model with the configured grid.
    Calibrate(Common),
    /// Print calibrated scores and per-class log-likelihood ratios.
    Score(Common),
    /// Print one ID/OOD verdict per embedding at the given epsilon.
    Decide(Common),
    /// Compute AUROC, FPR95, OSCR and accuracy on the test splits.
    Evaluate(Common),
    /// Per-class rejection tables for raw max-logit and calibrated scores.
    Report(Common),
    /// Write the bundled synthetic three-class fixture (embeddings + manifest).
    Synth(Common),
}

/// Splits `--dotted.key value` / `--dotted.key=value` config overrides from
/// the arguments clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if let Some(flag) = arg.strip_prefix("--") {
            let (name, inline) = match flag.split_once('=') {
                Some((n, v)) => (n.to_string(), Some(v.to_string())),
                None => (flag.to_string(), None),
            };
            let is_override =
                name.contains('.') || (name.contains('_') && RunConfig::is_known_key(&name));
            if is_override {
                let value = inline.or_else(|| it.next()).unwrap_or_default();
                overrides.push((name, value));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn exit_code(e: &Error) -> u8 {
    match e.family() {
        ErrorFamily::Input => EXIT_INPUT,
        ErrorFamily::Validation => EXIT_VALIDATION,
        ErrorFamily::Numeric => EXIT_NUMERIC,
    }
}

fn resolve_config(
    common: &Common,
    mut overrides: Vec<(String, String)>,
) -> grood::Result<RunConfig> {
    let path_flags = [
        ("paths.embeddings", common.embeddings.as_ref()),
        ("paths.manifest", common.manifest.as_ref()),
        ("paths.model_dir", common.model_dir.as_ref()),
        ("paths.out", common.out.as_ref()),
    ];
    for (key, value) in path_flags {
        if let Some(v) = value {
            overrides.push((key.into(), v.display().to_string()));
        }
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    // path values must stay strings even if they look like JSON
    let overrides: Vec<(String, String)> = overrides
        .into_iter()
        .map(|(k, v)| {
            if k.starts_with("paths.") {
                (k, serde_json::to_string(&v).unwrap())
            } else {
                (k, v)
            }
        })
        .collect();
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn write_file(path: &Path, contents: &str) -> grood::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_embeddings(config: &RunConfig) -> grood::Result<&Path> {
    config
        .paths
        .embeddings
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--embeddings is required".into()))
}

fn epsilon_for(model: &GroodModel, common: &Common, config: &RunConfig) -> f64 {
    let requested = common
        .epsilon
        .or_else(|| config.eval_epsilons.first().copied())
        .unwrap_or(0.05);
    let (eps, clamped) = model.clamp_epsilon(requested);
    if clamped {
        warn!("epsilon {requested} outside the calibrated range, clamped to {eps}");
    }
    eps
}

fn run(command: Command, overrides: Vec<(String, String)>) -> grood::Result<()> {
    match command {
        Command::Fit(common) => {
            let config = resolve_config(&common, overrides)?;
            let split = pipeline::load_split(&config)?;
            let model = pipeline::fit_split(&split, &config)?;
            model.save_dir(&config.paths.model_dir)?;
            write_file(
                &config.paths.model_dir.join("run_config.json"),
                &config.to_json()?,
            )?;
            info!("models written to {}", config.paths.model_dir.display());
            println!(
                "{}",
                serde_json::to_string_pretty(&pipeline::fit_summary(&model))?
            );
        }
        Command::Calibrate(common) => {
            let config = resolve_config(&common, overrides)?;
            let mut model = GroodModel::load_dir(&config.paths.model_dir)?;
            model.recalibrate(&config.epsilon_grid, &config.ood_prior)?;
            model.save_dir(&config.paths.model_dir)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&pipeline::fit_summary(&model))?
            );
        }
        Command::Score(common) => {
            let config = resolve_config(&common, overrides)?;
            let model = GroodModel::load_dir(&config.paths.model_dir)?;
            let set = load_embeddings(require_embeddings(&config)?)?;
            print!("{}", pipeline::score_lines(&model, &set)?);
        }
        Command::Decide(common) => {
            let config = resolve_config(&common, overrides)?;
            let model = GroodModel::load_dir(&config.paths.model_dir)?;
            let set = load_embeddings(require_embeddings(&config)?)?;
            let eps = epsilon_for(&model, &common, &config);
            print!("{}", pipeline::decide_lines(&model, &set, eps)?);
        }
        Command::Evaluate(common) => {
            let config = resolve_config(&common, overrides)?;
            let model = GroodModel::load_dir(&config.paths.model_dir)?;
            let split = pipeline::load_split(&config)?;
            let eval = pipeline::evaluate(
                &model,
                &split.id_test,
                &split.ood_test,
                &config.eval_epsilons,
            )?;
            let out = &config.paths.out;
            let json = eval.report.to_json()?;
            write_file(&out.join("report.json"), &json)?;
            write_file(
                &out.join("per_class_rejection.csv"),
                &eval.report.rejection_csv(),
            )?;
            write_file(&out.join("roc.csv"), &grood::metrics::roc_csv(&eval.roc))?;
            println!("{json}");
        }
        Command::Report(common) => {
            let config = resolve_config(&common, overrides)?;
            let model = GroodModel::load_dir(&config.paths.model_dir)?;
            let split = pipeline::load_split(&config)?;
            let report = pipeline::calibration_report(
                &model,
                &split.id_test,
                Some(&split.ood_test),
                &config.eval_epsilons,
            )?;
            let out = &config.paths.out;
            write_file(
                &out.join("calibration.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            write_file(&out.join("calibration.csv"), &report.to_csv())?;
            let table = report.to_table();
            write_file(&out.join("calibration.txt"), &table)?;
            print!("{table}");
        }
        Command::Synth(common) => {
            let seed = common.seed.unwrap_or(0);
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("synthetic.gemb"));
            let (set, manifest) = three_class_fixture(seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_embeddings(&out, &set)?;
            let manifest_path = common
                .manifest
                .clone()
                .unwrap_or_else(|| out.with_extension("json"));
            manifest.save(&manifest_path)?;
            println!(
                "{}",
                serde_json::json!({"embeddings": out, "manifest": manifest_path, "records": set.len()})
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
