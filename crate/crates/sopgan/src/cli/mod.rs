//! Command-line driver: `synth` → `train` → `calibrate` → `detect` →
//! `localize` → `evaluate`.
//!
//! Machine-readable results (loss history, threshold, metrics) go to
//! standard output; progress notes go to standard error. Exit codes:
//! 0 success, 1 usage error, 2 data or I/O error.

pub mod checkpoint;
mod config;

pub use config::RunConfig;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::detector::{self, AnomalyReport, ReportRow, Threshold};
use crate::dsp::{read_series_csv, series_grids, series_spectrograms, Spectrogram};
use crate::error::{Error, Result};
use crate::gan::{self, EpochLosses, GanModel};
use crate::localize::{make_mask, overlay_filename, render_overlay, residual_map, write_ppm};
use crate::metrics::{self, ConfusionMatrix, LabeledOutcome};
use crate::seed;
use crate::synth::{concat_windows, gen_anomalous, gen_normal, write_labels_csv, LabelRow};

#[derive(Parser)]
#[command(
    name = "sopgan",
    version,
    about = "Unsupervised anomaly detection for state-of-polarization traces",
    long_about = "Trains a DCGAN on normal-only Stokes spectrograms, scores new \
                  windows by latent inversion, and localizes disturbances as \
                  red overlays on the spectrogram image."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults apply when omitted,
    /// and any subset of keys may be given
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed override; every random stream derives from it
    #[arg(long)]
    seed: Option<u64>,

    /// Artifact directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/calibration/test series plus labels
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the GAN on a normal-only series and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Training series CSV [default: <out>/train.csv]
        #[arg(long, value_name = "PATH")]
        train_csv: Option<PathBuf>,
        /// Where to write the model [default: <out>/model.ckpt]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a normal-only series and print the detection threshold
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Trained model [default: <out>/model.ckpt]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Normal-only series CSV [default: <out>/calib.csv]
        #[arg(long, value_name = "PATH")]
        normal_csv: Option<PathBuf>,
    },
    /// Score a series against the threshold and write a report CSV
    Detect {
        #[command(flatten)]
        common: Common,
        /// Trained model [default: <out>/model.ckpt]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Series to score [default: <out>/test.csv]
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
        /// Explicit threshold value [default: read <out>/threshold.json]
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Write PPM overlays for the windows a report flags
    Localize {
        #[command(flatten)]
        common: Common,
        /// Trained model [default: <out>/model.ckpt]
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Series the report was produced from [default: <out>/test.csv]
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
        /// Detection report [default: <out>/report.csv]
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Compare a report against ground-truth labels and print metrics
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Detection report [default: <out>/report.csv]
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
        /// Ground-truth labels [default: <out>/labels.csv]
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = base_config(&common)?;
            cmd_synth(&cfg, &common.out)
        }
        Command::Train {
            common,
            train_csv,
            checkpoint,
        } => {
            let cfg = base_config(&common)?;
            let train_csv = train_csv.unwrap_or_else(|| common.out.join("train.csv"));
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
            std::fs::create_dir_all(&common.out)?;
            cmd_train(&cfg, &train_csv, &ckpt).map(|_| ())
        }
        Command::Calibrate {
            common,
            checkpoint,
            normal_csv,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
            let normal_csv = normal_csv.unwrap_or_else(|| common.out.join("calib.csv"));
            let override_cfg = explicit_config(&common)?;
            cmd_calibrate(&ckpt, &normal_csv, override_cfg, common.seed, &common.out)
                .map(|_| ())
        }
        Command::Detect {
            common,
            checkpoint,
            csv,
            threshold,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
            let csv = csv.unwrap_or_else(|| common.out.join("test.csv"));
            let override_cfg = explicit_config(&common)?;
            cmd_detect(&ckpt, threshold, &csv, override_cfg, common.seed, &common.out)
                .map(|_| ())
        }
        Command::Localize {
            common,
            checkpoint,
            csv,
            report,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
            let csv = csv.unwrap_or_else(|| common.out.join("test.csv"));
            let report = report.unwrap_or_else(|| common.out.join("report.csv"));
            let override_cfg = explicit_config(&common)?;
            cmd_localize(&ckpt, &csv, &report, override_cfg, common.seed, &common.out)
                .map(|_| ())
        }
        Command::Evaluate {
            common,
            report,
            labels,
        } => {
            let report = report.unwrap_or_else(|| common.out.join("report.csv"));
            let labels = labels.unwrap_or_else(|| common.out.join("labels.csv"));
            cmd_evaluate(&report, &labels, &common.out).map(|_| ())
        }
    }
}

/// Config for the generation/training stages: file or defaults, then the
/// seed override, resolved and validated.
fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Only an explicitly given config file; scoring stages otherwise reuse
/// the snapshot stored in the checkpoint.
fn explicit_config(common: &Common) -> Result<Option<RunConfig>> {
    common.config.as_deref().map(RunConfig::load).transpose()
}

/// Loads a checkpoint and settles the config a scoring stage runs under:
/// the explicit file when given, else the training-time snapshot, with the
/// seed override applied on top. Geometry must match the stored model.
fn load_model(
    ckpt: &Path,
    override_cfg: Option<RunConfig>,
    seed_override: Option<u64>,
) -> Result<(GanModel, RunConfig)> {
    let (model, snapshot) = checkpoint::load(ckpt)?;
    let mut cfg = override_cfg.unwrap_or(snapshot);
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    cfg.resolve();
    cfg.validate()?;
    if cfg.image_shape() != model.image_shape || cfg.latent_dim != model.latent_dim {
        return Err(Error::Config(format!(
            "config implies images {:?} / latent {}, checkpoint holds {:?} / {}",
            cfg.image_shape(),
            cfg.latent_dim,
            model.image_shape,
            model.latent_dim
        )));
    }
    Ok((model, cfg))
}

/// Reads a series CSV and turns it into model-ready window spectrograms
/// using the normalization fitted at training time.
fn load_windows(csv: &Path, cfg: &RunConfig, model: &GanModel) -> Result<Vec<Spectrogram>> {
    let series = read_series_csv(csv, cfg.synth.sample_rate_hz)?;
    let series = series.select(&cfg.channels)?;
    let stats = model.norm_stats.ok_or_else(|| {
        Error::Checkpoint("checkpoint lacks normalization statistics".into())
    })?;
    series_spectrograms(&series, &cfg.window_plan()?, &cfg.stft, &stats)
}

/// Writes `train.csv` (normal windows), `calib.csv` (held-out normals for
/// thresholding), `test.csv` (normals then anomalies), and `labels.csv`.
/// Each split draws from its own derived seed so no windows repeat.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let split = |tag: &str| {
        let mut s = cfg.synth.clone();
        s.seed = seed::derive(cfg.synth.seed, tag, 0);
        s
    };

    let train = gen_normal(&split("train"), cfg.synth.n_train)?;
    crate::dsp::write_series_csv(&out_dir.join("train.csv"), &concat_windows(&train)?)?;

    let calib = gen_normal(&split("calib"), cfg.synth.n_test_normal)?;
    crate::dsp::write_series_csv(&out_dir.join("calib.csv"), &concat_windows(&calib)?)?;

    let normals = gen_normal(&split("test-normal"), cfg.synth.n_test_normal)?;
    let anomalies = gen_anomalous(&split("test-anomalous"), cfg.synth.n_test_anomalous)?;

    let mut test = normals;
    let mut labels: Vec<LabelRow> = (0..test.len())
        .map(|i| LabelRow {
            window_index: i,
            label: false,
            onset: 0,
            duration: 0,
        })
        .collect();
    for (series, truth) in anomalies {
        labels.push(LabelRow {
            window_index: test.len(),
            label: true,
            onset: truth.onset,
            duration: truth.duration,
        });
        test.push(series);
    }
    crate::dsp::write_series_csv(&out_dir.join("test.csv"), &concat_windows(&test)?)?;
    write_labels_csv(&out_dir.join("labels.csv"), &labels)?;

    eprintln!(
        "synth: {} train + {} calib + {} test windows -> {}",
        cfg.synth.n_train,
        cfg.synth.n_test_normal,
        labels.len(),
        out_dir.display()
    );
    Ok(())
}

/// Fits normalization on the training split, trains the GAN, and writes
/// the checkpoint. Per-epoch losses stream to standard output as CSV.
pub fn cmd_train(
    cfg: &RunConfig,
    train_csv: &Path,
    out_checkpoint: &Path,
) -> Result<Vec<EpochLosses>> {
    let series = read_series_csv(train_csv, cfg.synth.sample_rate_hz)?;
    let series = series.select(&cfg.channels)?;
    let plan = cfg.window_plan()?;
    let grids = series_grids(&series, &plan, &cfg.stft)?;
    let stats = crate::dsp::fit_norm_stats(&grids, &cfg.stft)?;
    let windows = series_spectrograms(&series, &plan, &cfg.stft, &stats)?;
    let images: Vec<_> = windows.into_iter().map(|w| w.pixels).collect();

    let mut model = GanModel::build(
        cfg.latent_dim,
        cfg.image_shape(),
        cfg.base_channels,
        &mut seed::rng(seed::derive(cfg.seed, "init", 0)),
    )?;
    model.norm_stats = Some(stats);

    eprintln!(
        "train: {} windows of {:?}, {} epochs",
        images.len(),
        model.image_shape,
        cfg.train.epochs
    );
    let history = gan::train(&mut model, &images, &cfg.train)?;
    println!("epoch,d_loss,g_loss");
    for (e, l) in history.iter().enumerate() {
        println!("{e},{},{}", l.d_loss, l.g_loss);
    }

    checkpoint::save(out_checkpoint, &model, cfg)?;
    eprintln!("train: wrote {}", out_checkpoint.display());
    Ok(history)
}

/// Scores a normal-only series and fixes the detection threshold at the
/// configured percentile. Prints the threshold value and stores it as
/// `threshold.json` for `detect`.
pub fn cmd_calibrate(
    ckpt: &Path,
    normal_csv: &Path,
    override_cfg: Option<RunConfig>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<Threshold> {
    let (model, cfg) = load_model(ckpt, override_cfg, seed_override)?;
    let windows = load_windows(normal_csv, &cfg, &model)?;
    eprintln!("calibrate: scoring {} windows", windows.len());
    let threshold = detector::calibrate_threshold(
        &model,
        &windows,
        &cfg.score,
        cfg.threshold_percentile,
    )?;
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(&threshold)
        .map_err(|e| Error::Config(format!("threshold serialization: {e}")))?;
    std::fs::write(out_dir.join("threshold.json"), json)?;
    println!("{}", threshold.value);
    Ok(threshold)
}

fn read_threshold(out_dir: &Path) -> Result<Threshold> {
    let path = out_dir.join("threshold.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Scores every window of a series against the threshold and writes the
/// per-window report CSV.
pub fn cmd_detect(
    ckpt: &Path,
    threshold: Option<f64>,
    csv: &Path,
    override_cfg: Option<RunConfig>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<Vec<AnomalyReport>> {
    let (model, cfg) = load_model(ckpt, override_cfg, seed_override)?;
    let threshold = match threshold {
        Some(value) => Threshold {
            value,
            calibration_percentile: f64::NAN,
            calibration_set_size: 0,
        },
        None => read_threshold(out_dir)?,
    };
    let windows = load_windows(csv, &cfg, &model)?;
    eprintln!(
        "detect: scoring {} windows against threshold {}",
        windows.len(),
        threshold.value
    );
    let reports = detector::detect(&model, &threshold, &windows, &cfg.score)?;
    std::fs::create_dir_all(out_dir)?;
    detector::write_reports_csv(&out_dir.join("report.csv"), &reports)?;
    let flagged = reports.iter().filter(|r| r.is_anomaly).count();
    eprintln!(
        "detect: flagged {flagged} of {} windows -> {}",
        reports.len(),
        out_dir.join("report.csv").display()
    );
    Ok(reports)
}

/// Re-inverts every window the report flags and writes one PPM overlay
/// per flagged window. Returns the number of overlays written.
pub fn cmd_localize(
    ckpt: &Path,
    csv: &Path,
    report: &Path,
    override_cfg: Option<RunConfig>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<usize> {
    let (model, cfg) = load_model(ckpt, override_cfg, seed_override)?;
    let windows = load_windows(csv, &cfg, &model)?;
    let rows = detector::read_reports_csv(report)?;
    std::fs::create_dir_all(out_dir)?;

    let mut written = 0;
    for row in rows.iter().filter(|r| r.is_anomaly) {
        let x = windows.get(row.window_index).ok_or_else(|| {
            Error::Config(format!(
                "report window {} not present in {} ({} windows)",
                row.window_index,
                csv.display(),
                windows.len()
            ))
        })?;
        let inv = detector::invert_latent(&model, x, &cfg.score)?;
        let recon = Spectrogram {
            pixels: inv.reconstruction,
            channel_ids: x.channel_ids.clone(),
            source_span: x.source_span,
        };
        let residuals = residual_map(x, &recon)?;
        let mask = make_mask(&residuals, cfg.localize_percentile)?;
        let overlay = render_overlay(x, &mask)?;
        let path = out_dir.join(overlay_filename(row.window_index));
        write_ppm(&path, &overlay)?;
        eprintln!("localize: wrote {}", path.display());
        written += 1;
    }
    eprintln!("localize: {written} overlays");
    Ok(written)
}

/// Confusion-matrix metrics plus AUC for a report against labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Joins report rows to labels by window index, prints `metric,value`
/// rows, and writes the same table to `metrics.csv`.
pub fn cmd_evaluate(report: &Path, labels: &Path, out_dir: &Path) -> Result<Evaluation> {
    let rows = detector::read_reports_csv(report)?;
    let label_rows = crate::synth::read_labels_csv(labels)?;
    if rows.len() != label_rows.len() {
        return Err(Error::Config(format!(
            "report has {} windows, labels {}",
            rows.len(),
            label_rows.len()
        )));
    }
    let outcomes = rows
        .iter()
        .map(|r: &ReportRow| {
            let l = label_rows
                .iter()
                .find(|l| l.window_index == r.window_index)
                .ok_or_else(|| {
                    Error::Config(format!("window {} has no label", r.window_index))
                })?;
            Ok(LabeledOutcome {
                label: l.label,
                score: r.score,
                predicted: r.is_anomaly,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let confusion = metrics::confusion(&outcomes)?;
    let eval = Evaluation {
        confusion,
        accuracy: metrics::accuracy(&confusion)?,
        precision: metrics::precision(&confusion)?,
        recall: metrics::recall(&confusion)?,
        f1: metrics::f1(&confusion)?,
        auc: metrics::auc(&outcomes)?,
    };

    let mut table = String::from("metric,value\n");
    for (name, v) in [
        ("accuracy", eval.accuracy),
        ("precision", eval.precision),
        ("recall", eval.recall),
        ("f1", eval.f1),
        ("auc", eval.auc),
    ] {
        table.push_str(&format!("{name},{v}\n"));
    }
    for (name, v) in [
        ("tp", eval.confusion.true_pos),
        ("fp", eval.confusion.false_pos),
        ("tn", eval.confusion.true_neg),
        ("fn", eval.confusion.false_neg),
    ] {
        table.push_str(&format!("{name},{v}\n"));
    }
    print!("{table}");
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), &table)?;
    Ok(eval)
}
