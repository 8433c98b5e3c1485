//! Scoring by generator inversion.
//!
//! A query spectrogram x is scored by searching the latent space for the
//! z whose decoded image G(z) best reproduces it. The search minimizes the
//! same weighted objective that is reported as the anomaly score:
//!
//!   L_R(z) = Σ |x − G(z)|            (residual loss)
//!   L_D(z) = Σ |f(x) − f(G(z))|      (discriminator-feature loss)
//!   L(z)   = λ·L_R + (1−λ)·L_D
//!
//! Windows the trained generator cannot reconstruct — anything outside the
//! normal-traffic manifold — end with a high final objective and are
//! flagged against a percentile threshold calibrated on held-out normals.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::gan::{GanModel, Mode};
use crate::nncore::{AdamConfig, AdamState, Graph, NodeId, Tensor};
use crate::seed;
use crate::util::percentile_linear;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Weight of the residual term in the combined score, in [0, 1].
    pub lambda: f64,
    pub invert_steps: usize,
    pub invert_lr: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            lambda: 0.9,
            invert_steps: 200,
            invert_lr: 0.05,
            restarts: 3,
            seed: 7,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("need at least one restart".into()));
        }
        if !(self.invert_lr > 0.0) {
            return Err(Error::Config("inversion learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Scoring result for one window. `is_anomaly` is false until `detect`
/// applies a threshold.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub window_index: usize,
    pub source_span: (usize, usize),
    pub l_r: f64,
    pub l_d: f64,
    pub score: f64,
    pub is_anomaly: bool,
    pub best_z: Vec<f64>,
    pub inversion_final_objective: f64,
}

/// Calibrated decision boundary.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub calibration_percentile: f64,
    pub calibration_set_size: usize,
}

/// Residual loss L_R: sum of absolute pixel differences across all channels.
pub fn residual_loss(x: &Spectrogram, gz: &Spectrogram) -> Result<f64> {
    sum_abs_diff("residual_loss", &x.pixels, &gz.pixels)
}

/// Feature loss L_D: sum of absolute differences of the discriminator's
/// designated intermediate features for the two images.
pub fn feature_loss(model: &GanModel, x: &Spectrogram, gz: &Spectrogram) -> Result<f64> {
    if !x.pixels.same_shape(&gz.pixels) {
        return Err(Error::ShapeMismatch {
            op: "feature_loss",
            lhs: x.pixels.shape().to_vec(),
            rhs: gz.pixels.shape().to_vec(),
        });
    }
    let fx = model.features(&batched(&x.pixels)?)?;
    let fgz = model.features(&batched(&gz.pixels)?)?;
    sum_abs_diff("feature_loss", &fx, &fgz)
}

/// Combined anomaly score L = λ·L_R + (1−λ)·L_D.
pub fn anomaly_score(l_r: f64, l_d: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if l_r < 0.0 || l_d < 0.0 {
        return Err(Error::Domain(format!(
            "losses must be nonnegative, got l_r {l_r}, l_d {l_d}"
        )));
    }
    Ok(lambda * l_r + (1.0 - lambda) * l_d)
}

fn sum_abs_diff(op: &'static str, a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// [C,H,W] -> [1,C,H,W]
fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshaped(&shape)
}

/// Outcome of one latent search.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub z: Vec<f64>,
    /// G(z) at the returned z, shaped like the query image [C,H,W].
    pub reconstruction: Tensor,
    /// Objective value before each step plus after the last one
    /// (`invert_steps + 1` entries).
    pub trace: Vec<f64>,
    pub final_objective: f64,
}

/// One evaluation of the inversion objective at the current z; returns the
/// graph (for backward), the objective node, the z leaf, and G(z).
fn objective_graph(
    model: &GanModel,
    x: &Tensor,
    fx: &Tensor,
    z_val: &Tensor,
    lambda: f64,
) -> Result<(Graph, NodeId, NodeId, NodeId)> {
    let mut graph = Graph::new();
    let z = graph.leaf(z_val.clone(), true);
    let gen = model.generator_pass(&mut graph, z, Mode::Eval, false)?;
    let xn = graph.leaf(x.clone(), false);
    let diff = graph.sub(gen.out, xn)?;
    let abs = graph.abs(diff);
    let l_r = graph.reduce_sum(abs);

    let disc = model.discriminator_pass(&mut graph, gen.out, Mode::Eval, false)?;
    let fxn = graph.leaf(fx.clone(), false);
    let fdiff = graph.sub(disc.features[model.feature_layer_index], fxn)?;
    let fabs = graph.abs(fdiff);
    let l_d = graph.reduce_sum(fabs);

    let wr = graph.scale(l_r, lambda);
    let wd = graph.scale(l_d, 1.0 - lambda);
    let obj = graph.add(wr, wd)?;
    Ok((graph, obj, z, gen.out))
}

/// Gradient descent on z from an explicit starting point, with the model
/// frozen and z clamped to the prior's support [−1, 1] after every step.
pub fn invert_from(
    model: &GanModel,
    x: &Spectrogram,
    cfg: &ScoreConfig,
    z0: &Tensor,
) -> Result<Inversion> {
    cfg.validate()?;
    if x.pixels.shape()
        != [
            model.image_shape[0],
            model.image_shape[1],
            model.image_shape[2],
        ]
    {
        return Err(Error::ShapeMismatch {
            op: "invert",
            lhs: x.pixels.shape().to_vec(),
            rhs: model.image_shape.to_vec(),
        });
    }
    let xb = batched(&x.pixels)?;
    let fx = model.features(&xb)?;
    let mut z = z0.reshaped(&[1, model.latent_dim])?;

    let adam_cfg = AdamConfig {
        lr: cfg.invert_lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(model.latent_dim);
    let mut trace = Vec::with_capacity(cfg.invert_steps + 1);
    let mut last_graph_out: Option<Tensor> = None;

    for step in 0..=cfg.invert_steps {
        let (graph, obj, zn, gout) = objective_graph(model, &xb, &fx, &z, cfg.lambda)?;
        trace.push(graph.value(obj).scalar_value());
        if step == cfg.invert_steps {
            last_graph_out = Some(graph.value(gout).clone());
            break;
        }
        let mut grads = graph.backward(obj)?;
        let dz = grads.take_or_zeros(zn, &[1, model.latent_dim]);
        adam.step(&adam_cfg, &mut z, &dz);
        for v in z.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    let reconstruction = last_graph_out
        .expect("final evaluation ran")
        .reshaped(x.pixels.shape())?;
    let final_objective = *trace.last().expect("trace non-empty");
    Ok(Inversion {
        z: z.into_data(),
        reconstruction,
        trace,
        final_objective,
    })
}

/// Multi-restart inversion: each restart starts from a seeded uniform z
/// and the restart with the lowest final objective wins.
pub fn invert_latent(model: &GanModel, x: &Spectrogram, cfg: &ScoreConfig) -> Result<Inversion> {
    cfg.validate()?;
    let mut best: Option<Inversion> = None;
    for r in 0..cfg.restarts {
        let mut rng = seed::rng(seed::derive(cfg.seed, "restart", r as u64));
        let z0 = Tensor::rand_uniform(&[1, model.latent_dim], -1.0, 1.0, &mut rng);
        let inv = invert_from(model, x, cfg, &z0)?;
        if best
            .as_ref()
            .is_none_or(|b| inv.final_objective < b.final_objective)
        {
            best = Some(inv);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Inverts one window and fills the loss fields; the verdict is left false
/// for `detect` to decide.
pub fn score_window(
    model: &GanModel,
    x: &Spectrogram,
    window_index: usize,
    cfg: &ScoreConfig,
) -> Result<AnomalyReport> {
    let inv = invert_latent(model, x, cfg)?;
    let recon = Spectrogram {
        pixels: inv.reconstruction.clone(),
        channel_ids: x.channel_ids.clone(),
        source_span: x.source_span,
    };
    let l_r = residual_loss(x, &recon)?;
    let l_d = feature_loss(model, x, &recon)?;
    let score = anomaly_score(l_r, l_d, cfg.lambda)?;
    Ok(AnomalyReport {
        window_index,
        source_span: x.source_span,
        l_r,
        l_d,
        score,
        is_anomaly: false,
        best_z: inv.z,
        inversion_final_objective: inv.final_objective,
    })
}

/// Percentile rule shared by calibration; exposed for direct use on
/// precomputed scores.
pub fn threshold_from_scores(scores: &[f64], percentile: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!(
            "calibration percentile must lie in (0, 100], got {percentile}"
        )));
    }
    Ok(Threshold {
        value: percentile_linear(scores, percentile),
        calibration_percentile: percentile,
        calibration_set_size: scores.len(),
    })
}

/// Scores every held-out normal window and places the threshold at the
/// requested percentile (linear interpolation) of those scores.
pub fn calibrate_threshold(
    model: &GanModel,
    calibration: &[Spectrogram],
    cfg: &ScoreConfig,
    percentile: f64,
) -> Result<Threshold> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let mut scores = Vec::with_capacity(calibration.len());
    for (i, w) in calibration.iter().enumerate() {
        scores.push(score_window(model, w, i, cfg)?.score);
    }
    threshold_from_scores(&scores, percentile)
}

/// Scores windows in order and applies the strict `score > threshold`
/// decision.
pub fn detect(
    model: &GanModel,
    threshold: &Threshold,
    windows: &[Spectrogram],
    cfg: &ScoreConfig,
) -> Result<Vec<AnomalyReport>> {
    let mut reports = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let mut r = score_window(model, w, i, cfg)?;
        r.is_anomaly = r.score > threshold.value;
        reports.push(r);
    }
    Ok(reports)
}

/// The CSV projection of a report (the latent vector stays in memory).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub window_index: usize,
    pub start_sample: usize,
    pub end_sample: usize,
    pub l_r: f64,
    pub l_d: f64,
    pub score: f64,
    pub is_anomaly: bool,
}

impl From<&AnomalyReport> for ReportRow {
    fn from(r: &AnomalyReport) -> Self {
        ReportRow {
            window_index: r.window_index,
            start_sample: r.source_span.0,
            end_sample: r.source_span.1,
            l_r: r.l_r,
            l_d: r.l_d,
            score: r.score,
            is_anomaly: r.is_anomaly,
        }
    }
}

const REPORT_HEADER: &str = "window_index,start_sample,end_sample,l_r,l_d,score,is_anomaly";

pub fn write_reports_csv(path: &Path, reports: &[AnomalyReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{REPORT_HEADER}")?;
    for r in reports.iter().map(ReportRow::from) {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.window_index,
            r.start_sample,
            r.end_sample,
            r.l_r,
            r.l_d,
            r.score,
            if r.is_anomaly { 1 } else { 0 }
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let disp = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if lineno == 1 {
            if line.trim() != REPORT_HEADER {
                return Err(Error::Parse {
                    path: disp,
                    line: 1,
                    msg: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                path: disp,
                line: lineno,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let err = |what: &str, val: &str| Error::Parse {
            path: disp.clone(),
            line: lineno,
            msg: format!("cannot parse {what} `{val}`"),
        };
        let usize_field =
            |i: usize, what: &str| -> Result<usize> {
                fields[i].trim().parse().map_err(|_| err(what, fields[i]))
            };
        let f64_field = |i: usize, what: &str| -> Result<f64> {
            fields[i].trim().parse().map_err(|_| err(what, fields[i]))
        };
        let is_anomaly = match fields[6].trim() {
            "0" => false,
            "1" => true,
            other => return Err(err("is_anomaly flag", other)),
        };
        rows.push(ReportRow {
            window_index: usize_field(0, "window index")?,
            start_sample: usize_field(1, "start sample")?,
            end_sample: usize_field(2, "end sample")?,
            l_r: f64_field(3, "l_r")?,
            l_d: f64_field(4, "l_d")?,
            score: f64_field(5, "score")?,
            is_anomaly,
        });
    }
    Ok(rows)
}
