//! Command-line surface: `gen`, `train`, `eval`, `compare` and `forecast`.
//! Each command reads one JSON config and writes its outputs plus a
//! checksummed manifest under `--out`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::agents::{Ablation, AgentCheckpoint, EpisodeLog, Variant};
use crate::config::RunConfig;
use crate::datagen::{gen_dataset, load_dataset, manifest_entry, write_json_pretty, ManifestEntry, TOTAL_FLOW_FILE};
use crate::error::{Error, Result};
use crate::forecast::{
    band_accuracy, fit_gbrt, lag_dataset, read_series_csv, rmse, GbrtModel, GbrtParams,
};
use crate::metrics::{
    congestion_series, write_comparison_csv, write_congestion_csv, write_report_json,
    write_reports_csv, write_trace_csv, TraceRecord,
};
use crate::pipeline::{self, Prepared};
use crate::rng::{substream, FORECAST};

#[derive(Debug, Parser)]
#[command(name = "routelab", version, about = "Multi-channel customer-service routing lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one agent on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        agent: Option<Variant>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Evaluate checkpoints greedily on the held-out stream.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Evaluate checkpoints next to the configured baselines.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Train or evaluate the flow forecaster.
    Forecast {
        mode: ForecastMode,
        #[command(flatten)]
        common: Common,
        /// Model file for `eval`; defaults to the one `train` writes under `--out`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForecastMode {
    Train,
    Eval,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &Path) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| default.to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Gen { common } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, &cfg.paths.dataset)?;
            let manifest = gen_dataset(&cfg.datagen, &cfg.channels, cfg.seed, &out)?;
            println!(
                "wrote {} events ({} train / {} test) to {}",
                manifest.events,
                manifest.train_events,
                manifest.test_events,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            agent,
            ablation,
        } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Path::new("out"))?;
            cmd_train(&cfg, agent.unwrap_or(cfg.agent.variant), ablation.unwrap_or(cfg.agent.ablation), &out)
        }
        Command::Eval {
            common,
            checkpoints,
        } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Path::new("out"))?;
            cmd_compare(&cfg, checkpoints, false, &out)
        }
        Command::Compare {
            common,
            checkpoints,
        } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Path::new("out"))?;
            cmd_compare(&cfg, checkpoints, true, &out)
        }
        Command::Forecast {
            mode,
            common,
            model,
        } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Path::new("out"))?;
            cmd_forecast(&cfg, *mode, model.as_deref(), &out)
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    dataset: String,
    checkpoints: Vec<String>,
    config: &'a RunConfig,
    files: Vec<ManifestEntry>,
}

/// Run manifests are named per command so commands can share an output directory.
pub fn manifest_name(command: &str) -> String {
    format!("{command}_manifest.json")
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    files: &[String],
) -> Result<()> {
    let entries = files
        .iter()
        .map(|f| manifest_entry(out, f))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command,
        seed: cfg.seed,
        dataset: cfg.paths.dataset.display().to_string(),
        checkpoints: checkpoints.iter().map(|p| p.display().to_string()).collect(),
        config: cfg,
        files: entries,
    };
    write_json_pretty(&out.join(manifest_name(command)), &manifest)
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = load_dataset(&cfg.paths.dataset, cfg.channels.n())?;
    Prepared::new(cfg, dataset)
}

fn write_episodes_csv(path: &Path, episodes: &[EpisodeLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for e in episodes {
        w.serialize(e).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig, variant: Variant, ablation: Ablation, out: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let belief = pipeline::belief(cfg, &prepared, cfg.agent.user_model)?;
    let (agent, outcome) = pipeline::train_agent(cfg, &prepared, &belief, variant, ablation)?;
    let checkpoint = agent.checkpoint(&cfg.channels);
    checkpoint.save(&out.join("checkpoint.json"))?;
    write_episodes_csv(&out.join("episodes.csv"), &outcome.episodes)?;
    write_trace_csv(&out.join("train_trace.csv"), &outcome.trace, cfg.channels.n())?;
    let files = ["checkpoint.json", "episodes.csv", "train_trace.csv"].map(String::from);
    write_manifest(out, "train", cfg, &[], &files)?;
    let terminals = outcome.episodes.iter().filter(|e| e.terminal).count();
    println!(
        "trained {} on {} events ({} episodes, {} terminal) -> {}",
        checkpoint.name(),
        prepared.train_len(),
        outcome.episodes.len(),
        terminals,
        out.display()
    );
    Ok(())
}

fn unique_name(name: String, taken: &mut BTreeSet<String>) -> String {
    let mut candidate = name.clone();
    let mut k = 2;
    while !taken.insert(candidate.clone()) {
        candidate = format!("{name}-{k}");
        k += 1;
    }
    candidate
}

pub fn cmd_compare(cfg: &RunConfig, checkpoints: &[PathBuf], baselines: bool, out: &Path) -> Result<()> {
    let prepared = prepare(cfg)?;
    let belief = pipeline::belief(cfg, &prepared, cfg.agent.user_model)?;
    let mut taken = BTreeSet::new();
    let mut traces: Vec<(String, Vec<TraceRecord>)> = Vec::new();
    for path in checkpoints {
        let ck = AgentCheckpoint::load(path, &cfg.channels)?;
        let name = unique_name(ck.name(), &mut taken);
        traces.push((name, pipeline::evaluate_checkpoint(cfg, &prepared, &belief, &ck)?));
    }
    if baselines {
        for &b in &cfg.baselines.include {
            let mut router = pipeline::baseline_router(cfg, &prepared, b)?;
            let name = unique_name(b.as_str().to_string(), &mut taken);
            traces.push((name, pipeline::evaluate(cfg, &prepared, &belief, router.as_mut())?));
        }
    }
    if traces.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let reports = pipeline::score(cfg, &traces)?;
    let n = cfg.channels.n();
    let mut files = Vec::new();
    for ((name, trace), (_, report)) in traces.iter().zip(&reports) {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_report_json(&dir.join("metrics.json"), report)?;
        write_trace_csv(&dir.join("trace.csv"), trace, n)?;
        let series = congestion_series(trace, &cfg.channels, cfg.baselines.congestion_window);
        write_congestion_csv(&dir.join("congestion.csv"), &series)?;
        for f in ["metrics.json", "trace.csv", "congestion.csv"] {
            files.push(format!("{name}/{f}"));
        }
        println!(
            "{name:>28}  CCR {:.4}  AC {:.4}  RR {:.4}  reward {:.4}",
            report.ccr, report.ac, report.rr, report.mean_reward
        );
    }
    let rows: Vec<_> = reports
        .iter()
        .map(|(name, r)| (name.clone(), cfg.seed, r.clone()))
        .collect();
    write_reports_csv(&out.join("metrics.csv"), &rows)?;
    write_comparison_csv(&out.join("comparison.csv"), &reports)?;
    files.push("metrics.csv".into());
    files.push("comparison.csv".into());
    let command = if baselines { "compare" } else { "eval" };
    write_manifest(out, command, cfg, checkpoints, &files)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ForecastScore {
    pub rmse: f64,
    pub band_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ForecastReport {
    pub series: String,
    pub bins: usize,
    pub window: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    /// Training RMSE after each boosting round (empty for `eval`).
    pub train_rmse: Vec<f64>,
    pub test: ForecastScore,
    pub persistence: ForecastScore,
}

/// Chronological lag dataset split: examples whose target bin falls before
/// `train_fraction` of the series train, the rest test.
pub fn forecast_split(
    counts: &[f64],
    window: usize,
    train_fraction: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    if counts.len() < window + 2 {
        return Err(Error::InsufficientHistory {
            window,
            index: counts.len(),
        });
    }
    let (xs, ys) = lag_dataset(counts, window);
    let cut_bin = ((counts.len() as f64 * train_fraction).floor() as usize).max(window + 1);
    let cut = (cut_bin - window).min(xs.len() - 1);
    let (train_x, test_x) = xs.split_at(cut);
    let (train_y, test_y) = ys.split_at(cut);
    Ok((train_x.to_vec(), train_y.to_vec(), test_x.to_vec(), test_y.to_vec()))
}

pub fn score_forecast(y: &[f64], y_hat: &[f64], band: [f64; 2]) -> Result<ForecastScore> {
    Ok(ForecastScore {
        rmse: rmse(y, y_hat)?,
        band_accuracy: band_accuracy(y, y_hat, band[0], band[1]),
    })
}

pub fn cmd_forecast(cfg: &RunConfig, mode: ForecastMode, model_path: Option<&Path>, out: &Path) -> Result<()> {
    let series_path = cfg
        .forecast
        .series
        .clone()
        .unwrap_or_else(|| cfg.paths.dataset.join(TOTAL_FLOW_FILE));
    let series = read_series_csv(&series_path)?;
    let f = &cfg.forecast;
    let (train_x, train_y, test_x, test_y) = forecast_split(&series.counts, f.window, f.train_fraction)?;
    let default_model = out.join("forecast_model.json");
    let (model, train_rmse) = match mode {
        ForecastMode::Train => {
            let params = GbrtParams {
                seed: substream_seed(cfg.seed),
                ..f.gbrt.clone()
            };
            let fit = fit_gbrt(&train_x, &train_y, &params)?;
            fit.model.save(&default_model, &params)?;
            (fit.model, fit.train_rmse)
        }
        ForecastMode::Eval => {
            let path = model_path.map(Path::to_path_buf).unwrap_or(default_model.clone());
            let model = GbrtModel::load(&path)?;
            if model.n_features != f.window {
                return Err(Error::Checkpoint(format!(
                    "{}: model takes {} lags, config window is {}",
                    path.display(),
                    model.n_features,
                    f.window
                )));
            }
            (model, Vec::new())
        }
    };
    let predictions = model.predict_all(&test_x);
    let persistence: Vec<f64> = test_x.iter().map(|x| x[x.len() - 1]).collect();
    let report = ForecastReport {
        series: series_path.display().to_string(),
        bins: series.len(),
        window: f.window,
        train_examples: train_x.len(),
        test_examples: test_x.len(),
        train_rmse,
        test: score_forecast(&test_y, &predictions, f.band)?,
        persistence: score_forecast(&test_y, &persistence, f.band)?,
    };
    let (command, report_name) = match mode {
        ForecastMode::Train => ("forecast_train", "forecast_train_report.json"),
        ForecastMode::Eval => ("forecast_eval", "forecast_eval_report.json"),
    };
    write_json_pretty(&out.join(report_name), &report)?;
    let mut files = vec![report_name.to_string()];
    if mode == ForecastMode::Train {
        files.insert(0, "forecast_model.json".into());
    }
    write_manifest(out, command, cfg, &[], &files)?;
    println!(
        "forecast test RMSE {:.3} (persistence {:.3}), band accuracy {:.3} (persistence {:.3})",
        report.test.rmse, report.persistence.rmse, report.test.band_accuracy, report.persistence.band_accuracy
    );
    Ok(())
}

/// Seed for the boosting column sampler, drawn from the forecast stream.
fn substream_seed(root: u64) -> u64 {
    use rand::RngCore;
    substream(root, FORECAST).next_u64()
}
