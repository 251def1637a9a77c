//! Implementations behind the `cdl` subcommands: train a baseline, build a
//! cascade, evaluate, and run the tradeoff sweeps. Each writes its artifacts
//! under the configured output directory and prints a one-line summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cascade::{build_cascade, BuildOptions, LcTrainOptions};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{CdlError, Result};
use crate::inference::trace_line;
use crate::metrics::{
    evaluate, sweep_delta, sweep_stages, write_delta_sweep_csv, write_exits_csv, write_report_csv,
    write_stage_sweep_csv, EvalOptions, EvaluationReport,
};
use crate::model_io::{load_model, save_model, ModelContainer};
use crate::network::{accuracy, build_network, train, TrainOptions};

pub const BASELINE_FILE: &str = "baseline.cdl";
pub const CASCADE_FILE: &str = "cascade.cdl";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const ADMISSION_LOG_FILE: &str = "admission_log.txt";

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir).map_err(|e| CdlError::io(&config.out_dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CdlError::io(path, e))
}

/// `cdl train`: trains the selected architecture and writes
/// `baseline.cdl` plus a per-epoch training log.
pub fn cmd_train(config: &RunConfig) -> Result<PathBuf> {
    ensure_out_dir(config)?;
    let data_dir = config.require_data_dir()?;
    let train_set = Dataset::mnist_train(data_dir)?;
    let test_set = Dataset::mnist_test(data_dir)?;

    let spec = config.network_spec()?;
    let mut net = build_network(&spec, config.seed)?;
    train(
        &mut net,
        &train_set.images,
        &train_set.labels,
        &TrainOptions {
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            seed: config.seed,
        },
    )?;
    net.meta.train_accuracy = Some(accuracy(&net, &train_set.images, &train_set.labels)?);
    net.meta.test_accuracy = Some(accuracy(&net, &test_set.images, &test_set.labels)?);

    let mut log = String::new();
    for (epoch, loss) in net.meta.epoch_losses.iter().enumerate() {
        writeln!(log, "epoch={} loss={}", epoch + 1, loss).expect("string write");
    }
    writeln!(log, "train_accuracy={}", net.meta.train_accuracy.unwrap()).expect("string write");
    writeln!(log, "test_accuracy={}", net.meta.test_accuracy.unwrap()).expect("string write");
    write_text(&config.out_dir.join(TRAIN_LOG_FILE), &log)?;

    let model_path = config.out_dir.join(BASELINE_FILE);
    save_model(&ModelContainer::Baseline(net.clone()), &model_path)?;
    println!(
        "trained arch={:?} epochs={} train_accuracy={:.4} test_accuracy={:.4} model={}",
        config.arch,
        config.epochs,
        net.meta.train_accuracy.unwrap(),
        net.meta.test_accuracy.unwrap(),
        model_path.display()
    );
    Ok(model_path)
}

/// `cdl build`: loads a baseline model, constructs the cascade on the
/// training set, and writes `cascade.cdl` plus the admission log.
pub fn cmd_build(config: &RunConfig, model_path: &Path) -> Result<PathBuf> {
    ensure_out_dir(config)?;
    let data_dir = config.require_data_dir()?;
    let train_set = Dataset::mnist_train(data_dir)?;
    let net = load_model(model_path)?.expect_baseline()?;

    let report = build_cascade(
        &net,
        &train_set.images,
        &train_set.labels,
        &BuildOptions {
            epsilon: config.epsilon,
            train_delta: config.train_delta,
            max_stages: None,
            cost_model: config.cost_model,
            lc: LcTrainOptions {
                epochs: config.epochs,
                batch_size: config.batch_size,
                learning_rate: config.learning_rate,
                seed: config.seed,
            },
        },
    )?;
    let log_path = config.out_dir.join(ADMISSION_LOG_FILE);
    write_text(&log_path, &(report.log.join("\n") + "\n"))?;
    for line in &report.log {
        println!("{line}");
    }
    if report.cascade.stage_count() == 0 {
        eprintln!("warning: no stage cleared the admission threshold; the cascade degenerates to the baseline network");
    }

    let cascade_path = config.out_dir.join(CASCADE_FILE);
    save_model(&ModelContainer::Cascade(report.cascade.clone()), &cascade_path)?;
    println!(
        "built cascade stages={} epsilon={} delta_train={} model={}",
        report.cascade.stage_count(),
        config.epsilon,
        config.train_delta,
        cascade_path.display()
    );
    Ok(cascade_path)
}

/// Renders the one-line evaluation summary. Fixed field set; the improvement
/// factors print with three decimals.
pub fn summary_line(report: &EvaluationReport, delta: f64, bypass: bool) -> String {
    format!(
        "summary accuracy={:.4} mean_ops={:.1} norm_ops={:.4} improvement={:.3} energy_improvement={:.3} delta={} bypass={}",
        report.accuracy, report.mean_ops, report.norm_ops, report.improvement, report.energy_improvement, delta, bypass
    )
}

/// `cdl eval`: classifies the test set through a cascade and writes
/// `report.csv` and `exits.csv`; optionally traces every input.
pub fn cmd_eval(config: &RunConfig, model_path: &Path, bypass_exits: bool, trace: bool) -> Result<EvaluationReport> {
    ensure_out_dir(config)?;
    let data_dir = config.require_data_dir()?;
    let test_set = Dataset::mnist_test(data_dir)?;
    let cascade = load_model(model_path)?.expect_cascade()?;

    let opts = EvalOptions {
        delta: config.delta,
        bypass_exits,
        model: config.cost_model,
    };
    let report = evaluate(&cascade, &test_set.images, &test_set.labels, &opts)?;

    if trace {
        let (results, _) = if bypass_exits {
            // Tracing reflects what was charged: under bypass every input is
            // a full-network classification.
            (Vec::new(), Vec::new())
        } else {
            crate::inference::classify_batch(&cascade, &test_set.images, config.delta)?
        };
        for (idx, result) in results.iter().enumerate() {
            println!("{}", trace_line(idx, result));
        }
    }

    let stages: Vec<usize> = cascade.classifiers.iter().map(|c| c.stage_index).collect();
    let mut report_csv = Vec::new();
    write_report_csv(&report, &mut report_csv).expect("vec write");
    write_text(&config.out_dir.join("report.csv"), &String::from_utf8(report_csv).expect("utf8"))?;
    let mut exits_csv = Vec::new();
    write_exits_csv(&report, &stages, &mut exits_csv).expect("vec write");
    write_text(&config.out_dir.join("exits.csv"), &String::from_utf8(exits_csv).expect("utf8"))?;

    println!("{}", summary_line(&report, config.delta, bypass_exits));
    Ok(report)
}

/// Sweep selector for `cdl sweep`.
#[derive(Debug, Clone)]
pub enum SweepMode {
    Delta { deltas: Vec<f64> },
    Stages { max: usize },
}

/// Parses a `start:end:step` grid into an ascending list of thresholds.
pub fn parse_delta_grid(raw: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    let bad = || CdlError::Config(format!("bad delta grid '{raw}', expected start:end:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].parse().map_err(|_| bad())?;
    let end: f64 = parts[1].parse().map_err(|_| bad())?;
    let step: f64 = parts[2].parse().map_err(|_| bad())?;
    if !(step > 0.0 && end >= start) {
        return Err(bad());
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// `cdl sweep`: writes `delta_sweep.csv` or `stage_sweep.csv`.
pub fn cmd_sweep(config: &RunConfig, model_path: &Path, mode: &SweepMode) -> Result<PathBuf> {
    ensure_out_dir(config)?;
    let data_dir = config.require_data_dir()?;
    let test_set = Dataset::mnist_test(data_dir)?;

    match mode {
        SweepMode::Delta { deltas } => {
            let cascade = load_model(model_path)?.expect_cascade()?;
            let points = sweep_delta(&cascade, &test_set.images, &test_set.labels, deltas, &config.cost_model)?;
            let mut csv = Vec::new();
            write_delta_sweep_csv(&points, &mut csv).expect("vec write");
            let path = config.out_dir.join("delta_sweep.csv");
            write_text(&path, &String::from_utf8(csv).expect("utf8"))?;
            println!("swept {} thresholds -> {}", points.len(), path.display());
            Ok(path)
        }
        SweepMode::Stages { max } => {
            // The stage sweep rebuilds exit classifiers, so it needs the
            // training set and works from the cascade's base network.
            let train_set = Dataset::mnist_train(data_dir)?;
            let net = match load_model(model_path)? {
                ModelContainer::Cascade(c) => c.base,
                ModelContainer::Baseline(net) => net,
            };
            let points = sweep_stages(
                &net,
                &train_set.images,
                &train_set.labels,
                &test_set.images,
                &test_set.labels,
                *max,
                config.delta,
                &BuildOptions {
                    epsilon: f64::NEG_INFINITY,
                    train_delta: config.train_delta,
                    max_stages: Some(*max),
                    cost_model: config.cost_model,
                    lc: LcTrainOptions {
                        epochs: config.epochs,
                        batch_size: config.batch_size,
                        learning_rate: config.learning_rate,
                        seed: config.seed,
                    },
                },
            )?;
            let mut csv = Vec::new();
            write_stage_sweep_csv(&points, &mut csv).expect("vec write");
            let path = config.out_dir.join("stage_sweep.csv");
            write_text(&path, &String::from_utf8(csv).expect("utf8"))?;
            println!("swept {} stage counts -> {}", points.len(), path.display());
            Ok(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_grid_arithmetic() {
        let grid = parse_delta_grid("0.3:0.9:0.1").unwrap();
        assert_eq!(grid.len(), 7);
        assert!((grid[0] - 0.3).abs() < 1e-12);
        assert!((grid[6] - 0.9).abs() < 1e-12);
        assert_eq!(parse_delta_grid("0.5:0.5:0.1").unwrap().len(), 1);
        assert!(parse_delta_grid("0.9:0.3:0.1").is_err());
        assert!(parse_delta_grid("0.3:0.9").is_err());
        assert!(parse_delta_grid("a:b:c").is_err());
    }
}
