//! Command-line surface.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use earth_core::data::{EpidemicDataset, Splits};
use earth_core::model::GraphMode;
use earth_core::train::{self, Checkpoint, EvalReport, GradcheckOptions, StopReason, TrainConfig};

use crate::error::{Error, Result};
use crate::{checkpoint, config, csv_io, dtw_cache, metrics};

#[derive(Debug, Parser)]
#[command(name = "earth", version, about = "Epidemic forecasting with a graph-coupled neural ODE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train `repeats` models and keep the one with the best validation RMSE.
    Train(TrainArgs),
    /// Test-split metrics of a checkpoint against a series file.
    Eval(EvalArgs),
    /// Predict `horizon` steps past the end of a series file.
    Forecast(ForecastArgs),
    /// Write a synthetic networked-SIR dataset.
    Synth(SynthArgs),
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub adjacency: PathBuf,
    #[arg(long)]
    pub horizon: usize,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `repeats` from the config.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, default_value = "earth.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "metrics.jsonl")]
    pub metrics: PathBuf,
    /// Reuse DTW distances stored here when they match the dataset.
    #[arg(long)]
    pub dtw_cache: Option<PathBuf>,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    /// Also append the record to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub regions: usize,
    #[arg(long, default_value_t = 4)]
    pub hidden: usize,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Zero the drive network's output layer.
    #[arg(long)]
    pub zero_psi: bool,
    /// Use the geographic adjacency only.
    #[arg(long)]
    pub static_graph: bool,
    /// Exit with failure above this maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(&a).map(|_| ()),
        Command::Eval(a) => run_eval(&a).map(|_| ()),
        Command::Forecast(a) => run_forecast(&a),
        Command::Synth(a) => run_synth(&a).map(|_| ()),
        Command::Gradcheck(a) => run_gradcheck(&a),
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn record(dataset: String, cfg: &TrainConfig, rep: &EvalReport, wall_time: f64, epoch: Option<usize>) -> metrics::MetricsRecord {
    metrics::MetricsRecord {
        dataset,
        horizon: cfg.horizon,
        seed: cfg.seed,
        rmse: rep.rmse,
        peak_time_error: rep.peak_time_error,
        wall_time,
        persistence_rmse: rep.persistence_rmse,
        persistence_peak_time_error: rep.persistence_peak_time_error,
        epoch,
    }
}

/// The effective config after command-line overrides.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = config::load_train_config(&a.config)?;
    cfg.horizon = a.horizon;
    if let Some(r) = a.missing_rate {
        cfg.missing_rate = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Returns the saved checkpoint and one record per repeat.
pub fn run_train(a: &TrainArgs) -> Result<(Checkpoint, Vec<metrics::MetricsRecord>)> {
    let cfg = train_config(a)?;
    let ds = csv_io::load_dataset(&a.series, &a.adjacency, cfg.train_frac, cfg.val_frac)?;
    let distances = match &a.dtw_cache {
        Some(path) => {
            let (d, hit) = dtw_cache::load_or_compute(path, &ds)?;
            if !a.quiet {
                eprintln!("dtw cache {}: {}", path.display(), if hit { "hit" } else { "stored" });
            }
            d
        }
        None => train::semantic_distances(&ds)?,
    };
    let graph = train::graph_from_distances(&ds, &distances, cfg.top_k)?;

    let mut best: Option<Checkpoint> = None;
    let mut records = Vec::new();
    for r in 0..cfg.repeats.max(1) {
        let run_cfg = TrainConfig {
            seed: cfg.repeat_seed(r),
            ..cfg.clone()
        };
        let started = Instant::now();
        let outcome = train::train(&ds, &graph, &run_cfg, |e| {
            if !a.quiet {
                eprintln!(
                    "seed {} epoch {:>3}  train loss {:.5}  val rmse {:.4}",
                    run_cfg.seed, e.epoch, e.train_loss, e.val_rmse
                );
            }
        })?;
        match &outcome.stop {
            StopReason::Completed => {}
            StopReason::EarlyStopped { epoch } => eprintln!("seed {}: early stop after epoch {epoch}", run_cfg.seed),
            StopReason::Diverged { epoch, reason } => {
                eprintln!("seed {}: diverged in epoch {epoch} ({reason}), keeping the last good parameters", run_cfg.seed)
            }
        }
        let report = train::evaluate(&outcome.checkpoint, &ds)?;
        let rec = record(
            dataset_name(&a.series),
            &run_cfg,
            &report,
            started.elapsed().as_secs_f64(),
            Some(outcome.checkpoint.epoch),
        );
        metrics::append(&a.metrics, &rec)?;
        println!("{}", rec.to_line());
        records.push(rec);
        if best.as_ref().is_none_or(|b| outcome.checkpoint.best_val_rmse < b.best_val_rmse) {
            best = Some(outcome.checkpoint);
        }
    }
    let rmses: Vec<f64> = records.iter().map(|r| r.rmse).collect();
    let (mean, std) = train::mean_std(&rmses);
    let ptes: Vec<f64> = records.iter().filter_map(|r| r.peak_time_error).collect();
    let peak = if ptes.is_empty() {
        "no test point above the peak threshold".to_string()
    } else {
        let (pmean, pstd) = train::mean_std(&ptes);
        format!("peak time error {pmean:.4} ± {pstd:.4}")
    };
    eprintln!("test rmse {mean:.4} ± {std:.4}, {peak}, over {} runs", records.len());
    let best = best.expect("at least one repeat");
    checkpoint::save(&a.checkpoint, &best)?;
    Ok((best, records))
}

fn dataset_for(ckpt: &Checkpoint, series: &Path) -> Result<EpidemicDataset> {
    let table = csv_io::read_series(series)?;
    if table.region_names != ckpt.region_names {
        return Err(Error::file(
            series,
            format!("regions {:?} do not match the checkpoint's {:?}", table.region_names, ckpt.region_names),
        ));
    }
    let splits = Splits::chronological(table.series.cols(), ckpt.config.train_frac, ckpt.config.val_frac)?;
    Ok(EpidemicDataset::new(table.region_names, table.series, ckpt.adjacency.clone(), splits)?)
}

pub fn run_eval(a: &EvalArgs) -> Result<metrics::MetricsRecord> {
    let started = Instant::now();
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let ds = dataset_for(&ckpt, &a.series)?;
    let report = train::evaluate(&ckpt, &ds)?;
    let rec = record(dataset_name(&a.series), &ckpt.config, &report, started.elapsed().as_secs_f64(), None);
    println!("{}", rec.to_line());
    if let Some(path) = &a.metrics {
        metrics::append(path, &rec)?;
    }
    Ok(rec)
}

pub fn run_forecast(a: &ForecastArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let table = csv_io::read_series(&a.series)?;
    let pred = train::forecast(&ckpt, &table.region_names, &table.series)?;
    csv_io::write_rows(&a.out, &table.region_names, [pred])?;
    eprintln!(
        "wrote the forecast for step {} (horizon {}) to {}",
        table.series.cols() - 1 + ckpt.config.horizon,
        ckpt.config.horizon,
        a.out.display()
    );
    Ok(())
}

/// Writes `series.csv` and `adjacency.csv`; returns their paths.
pub fn run_synth(a: &SynthArgs) -> Result<(PathBuf, PathBuf)> {
    let cfg = config::load_synth_config(&a.config)?;
    let ds = earth_core::data::generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let series = a.out_dir.join("series.csv");
    let adjacency = a.out_dir.join("adjacency.csv");
    csv_io::write_series(&series, &ds.region_names, &ds.series)?;
    csv_io::write_adjacency(&adjacency, &ds.region_names, &ds.adjacency)?;
    eprintln!("wrote {} and {}", series.display(), adjacency.display());
    Ok((series, adjacency))
}

pub fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let opts = GradcheckOptions {
        regions: a.regions,
        hidden: a.hidden,
        window: a.window,
        seed: a.seed,
        zero_psi: a.zero_psi,
        graph: if a.static_graph { GraphMode::Static } else { GraphMode::Fused },
        ..GradcheckOptions::default()
    };
    let started = Instant::now();
    let report = train::gradcheck(&opts)?;
    println!("{:<18} {:>14} {:>14} {:>11}", "parameter", "analytic", "numeric", "rel error");
    for e in &report.entries {
        println!("{:<18} {:>14.6e} {:>14.6e} {:>11.3e}", e.name, e.analytic_norm, e.numeric_norm, e.rel_error);
    }
    println!(
        "max relative error {:.3e} over {} tensors in {:.2}s",
        report.max_rel_error,
        report.entries.len(),
        started.elapsed().as_secs_f64()
    );
    if report.max_rel_error.is_nan() || report.max_rel_error >= a.tolerance {
        return Err(Error::Core(earth_core::Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} ≥ {:.1e}",
            report.max_rel_error, a.tolerance
        ))));
    }
    Ok(())
}
