//! Command-line interface: dataset synthesis, training, forecasting,
//! imputation, outlier detection, evaluation, decomposition, gradient
//! checking, hyperparameter search, and the positional-encoding ablation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/invariant error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use axlecast::dataset::io::{read_records, write_records, RecordFormat};
use axlecast::dataset::{mask_gaps, split_dataset, synth_grid, DatasetSplit, VibrationRecord};
use axlecast::error::{AxError, Result};
use axlecast::model::{forecast, ModelCheckpoint, ModelConfig};
use axlecast::tasks::{
    decompose_report, detect_outliers, evaluate, forecast_to_csv, impute, write_atomic, Scoring,
};
use axlecast::training::{
    gradient_check, hyperparameter_search, list_blocks, train, write_history_csv, write_sweep_csv,
    LossDomain, SearchSpace, TrainConfig,
};

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| AxError::io(p.display().to_string(), e))?;
                toml::from_str(&text).map_err(|e| AxError::InvalidConfig(format!(
                    "{}: {e}",
                    p.display()
                )))
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "axlecast",
    version,
    about = "Transformer forecasting toolkit for railway-axle vibration signals"
)]
struct Cli {
    /// TOML config with [model] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for synthesis, splits, and training.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crack-conditioned dataset.
    Synth {
        /// Records per (flaw, load, speed) combination.
        #[arg(long, default_value_t = 3)]
        replicas: usize,
        #[arg(long, default_value_t = 4.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 256.0)]
        sample_rate_hz: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        /// Output format: csv or jsonl.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Mask this fraction of each record in contiguous gaps.
        #[arg(long)]
        mask_fraction: Option<f64>,
        #[arg(long, default_value_t = 2)]
        mask_count: usize,
    },
    /// Train a model on a record file (70/20/10 split by the master seed).
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Autoregressive forecast past the end of a record.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record id (defaults to the first record).
        #[arg(long)]
        record: Option<String>,
        /// Horizon in samples.
        #[arg(long, default_value_t = 256)]
        horizon: usize,
        /// Stochastic trajectories for the uncertainty bands.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Fill masked gaps by conditional prediction.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        record: Option<String>,
        #[arg(long, default_value_t = 2)]
        passes: usize,
    },
    /// Flag outlier steps by rolling one-step-ahead prediction.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        record: Option<String>,
        /// Score threshold (defaults to the checkpoint's calibrated value).
        #[arg(long)]
        threshold: Option<f64>,
        /// Scoring: nll or z_score.
        #[arg(long, default_value = "nll")]
        scoring: String,
    },
    /// Teacher-forced MSE per split for a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// STL decomposition of a true and a predicted record, side by side.
    Decompose {
        #[arg(long)]
        data: PathBuf,
        /// Record id of the true signal (defaults to the first record).
        #[arg(long)]
        record: Option<String>,
        /// Record id of the predicted signal (defaults to the second record).
        #[arg(long)]
        predicted_record: Option<String>,
        /// Seasonal period in samples.
        #[arg(long)]
        period: usize,
        #[arg(long, default_value_t = 7)]
        loess_span: usize,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Block name (defaults to the full registry).
        #[arg(long)]
        block: Option<String>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Random hyperparameter search over the tested ranges.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        budget: usize,
        /// Epoch cap per trial.
        #[arg(long, default_value_t = 10)]
        epoch_cap: usize,
        /// Search space: desk (trainable on short records) or full.
        #[arg(long, default_value = "desk")]
        space: String,
    },
    /// Train twice (positional encodings on and off) and compare.
    AblatePe {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_data(path: &Path) -> Result<Vec<VibrationRecord>> {
    let format = RecordFormat::from_path(path);
    let records = read_records(path, format)?;
    if records.is_empty() {
        return Err(AxError::InvalidArgument(format!(
            "no records in {}",
            path.display()
        )));
    }
    Ok(records)
}

fn pick_record<'a>(
    records: &'a [VibrationRecord],
    id: Option<&str>,
) -> Result<&'a VibrationRecord> {
    match id {
        None => Ok(&records[0]),
        Some(id) => records
            .iter()
            .find(|r| r.record_id == id)
            .ok_or_else(|| AxError::InvalidArgument(format!("record '{id}' not found"))),
    }
}

fn make_split(records: &[VibrationRecord], seed: u64) -> Result<DatasetSplit> {
    split_dataset(records, (0.7, 0.2, 0.1), seed)
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| AxError::io(cli.out.display().to_string(), e))?;
    let file_cfg = FileConfig::load(cli.config.as_deref())?;

    match cli.command {
        Command::Synth {
            replicas,
            duration_s,
            sample_rate_hz,
            noise_std,
            format,
            mask_fraction,
            mask_count,
        } => {
            let format = RecordFormat::parse(&format)?;
            let mut records = synth_grid(replicas, duration_s, sample_rate_hz, noise_std, cli.seed)?;
            if let Some(frac) = mask_fraction {
                records = records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| mask_gaps(r, frac, mask_count, cli.seed.wrapping_add(i as u64)))
                    .collect::<Result<Vec<_>>>()?;
            }
            let ext = match format {
                RecordFormat::Csv => "csv",
                RecordFormat::Jsonl => "jsonl",
            };
            let path = cli.out.join(format!("synthetic.{ext}"));
            write_records(&path, &records, format)?;
            println!("wrote {} records to {}", records.len(), path.display());
        }

        Command::Train { data } => {
            let records = load_data(&data)?;
            let split = make_split(&records, cli.seed)?;
            let mut train_cfg = file_cfg.train.clone();
            train_cfg.seed = cli.seed;
            train_cfg.loss_domain = LossDomain::for_variant(file_cfg.model.variant);
            let (ckpt, history) = train(&file_cfg.model, &train_cfg, &split)?;
            let ckpt_path = cli.out.join("checkpoint.json");
            ckpt.save(&ckpt_path)?;
            let hist_path = cli.out.join("history.csv");
            write_history_csv(&hist_path, &history)?;
            let best = history
                .iter()
                .map(|e| e.val_loss)
                .fold(f64::INFINITY, f64::min);
            println!(
                "trained {} epochs; best validation loss {best:.6}; checkpoint at {}",
                history.len(),
                ckpt_path.display()
            );
        }

        Command::Forecast {
            checkpoint,
            data,
            record,
            horizon,
            samples,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let records = load_data(&data)?;
            let rec = pick_record(&records, record.as_deref())?;
            let result = forecast(&ckpt, rec, horizon, samples, cli.seed)?;
            let path = cli.out.join("forecast.csv");
            write_atomic(&path, &forecast_to_csv(&result))?;
            println!(
                "forecast of {horizon} samples for '{}' written to {}",
                rec.record_id,
                path.display()
            );
        }

        Command::Impute {
            checkpoint,
            data,
            record,
            passes,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let records = load_data(&data)?;
            let rec = pick_record(&records, record.as_deref())?;
            let filled = impute(&ckpt, rec, passes)?;
            let path = cli.out.join("imputed.csv");
            write_records(&path, std::slice::from_ref(&filled), RecordFormat::Csv)?;
            let n_masked = filled.gaps().iter().map(|g| g.len()).sum::<usize>();
            println!(
                "imputed {n_masked} masked samples of '{}' into {}",
                rec.record_id,
                path.display()
            );
        }

        Command::Detect {
            checkpoint,
            data,
            record,
            threshold,
            scoring,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let records = load_data(&data)?;
            let rec = pick_record(&records, record.as_deref())?;
            let scoring = Scoring::parse(&scoring)?;
            let report = detect_outliers(&ckpt, rec, threshold, scoring)?;
            let path = cli.out.join("anomalies.csv");
            write_atomic(&path, &report.to_csv())?;
            println!(
                "{} of {} steps flagged (threshold {:.4}); report at {}",
                report.flagged_steps(),
                report.scores.len(),
                report.threshold,
                path.display()
            );
        }

        Command::Evaluate { checkpoint, data } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let records = load_data(&data)?;
            let split = make_split(&records, ckpt.split_seed)?;
            let table = evaluate(&ckpt, &split)?;
            let path = cli.out.join("evaluation.csv");
            write_atomic(&path, &table.to_csv())?;
            println!(
                "MSE train {:.6} | validation {:.6} | test {:.6} ({})",
                table.train_mse,
                table.validation_mse,
                table.test_mse,
                path.display()
            );
        }

        Command::Decompose {
            data,
            record,
            predicted_record,
            period,
            loess_span,
        } => {
            let records = load_data(&data)?;
            let truth = pick_record(&records, record.as_deref())?;
            let predicted = match predicted_record.as_deref() {
                Some(id) => pick_record(&records, Some(id))?,
                None => records.get(1).ok_or_else(|| {
                    AxError::InvalidArgument(
                        "need a second record (or --predicted-record)".into(),
                    )
                })?,
            };
            let report =
                decompose_report(&truth.samples, &predicted.samples, period, loess_span)?;
            let path = cli.out.join("decomposition.csv");
            write_atomic(&path, &report.to_csv(&truth.samples, &predicted.samples))?;
            println!("decomposition written to {}", path.display());
        }

        Command::Gradcheck { block, trials } => {
            let blocks: Vec<String> = match block {
                Some(b) => vec![b],
                None => list_blocks().into_iter().map(String::from).collect(),
            };
            let mut failures = 0usize;
            for name in &blocks {
                let err = gradient_check(name, trials, cli.seed)?;
                let is_fixture = name == "corrupted_fixture";
                let pass = if is_fixture { err > 1e-2 } else { err < 1e-3 };
                println!(
                    "{:<22} max rel err {err:>12.3e}  {}",
                    name,
                    if pass { "PASS" } else { "FAIL" }
                );
                if !pass {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(AxError::Numerical(format!(
                    "{failures} gradient-check block(s) failed"
                )));
            }
        }

        Command::Search {
            data,
            budget,
            epoch_cap,
            space,
        } => {
            let records = load_data(&data)?;
            let split = make_split(&records, cli.seed)?;
            let space = match space.as_str() {
                "desk" => SearchSpace::desk_scale(),
                "full" => SearchSpace::default(),
                other => {
                    return Err(AxError::InvalidArgument(format!(
                        "unknown search space '{other}' (expected desk or full)"
                    )))
                }
            };
            let mut train_cfg = file_cfg.train.clone();
            train_cfg.seed = cli.seed;
            let results = hyperparameter_search(
                &space,
                budget,
                &split,
                cli.seed,
                &file_cfg.model,
                &train_cfg,
                epoch_cap,
            )?;
            let path = cli.out.join("sweep.csv");
            write_sweep_csv(&path, &results)?;
            let ok = results.iter().filter(|r| r.val_loss.is_some()).count();
            println!(
                "{ok}/{} trials trained; best val loss {}; sweep at {}",
                results.len(),
                results[0]
                    .val_loss
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "n/a".into()),
                path.display()
            );
        }

        Command::AblatePe { data } => {
            let records = load_data(&data)?;
            let split = make_split(&records, cli.seed)?;
            let mut train_cfg = file_cfg.train.clone();
            train_cfg.seed = cli.seed;
            train_cfg.loss_domain = LossDomain::for_variant(file_cfg.model.variant);
            let mut results = Vec::new();
            for pe in [true, false] {
                let mut cfg = file_cfg.model.clone();
                cfg.use_positional_encoding = pe;
                let (_, history) = train(&cfg, &train_cfg, &split)?;
                let best = history
                    .iter()
                    .map(|e| e.val_loss)
                    .fold(f64::INFINITY, f64::min);
                results.push((pe, best));
            }
            let (with_pe, without_pe) = (results[0].1, results[1].1);
            let rel = (with_pe - without_pe).abs() / with_pe.max(without_pe);
            let csv = format!(
                "positional_encoding,val_loss\non,{with_pe}\noff,{without_pe}\nrelative_gap,{rel}\n"
            );
            let path = cli.out.join("ablate_pe.csv");
            write_atomic(&path, &csv)?;
            println!(
                "val loss with PE {with_pe:.6}, without {without_pe:.6} (relative gap {:.1}%)",
                rel * 100.0
            );
        }
    }
    Ok(())
}
