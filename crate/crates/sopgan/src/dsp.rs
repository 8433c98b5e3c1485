//! Ingestion and time–frequency preprocessing.
//!
//! Raw Stokes-parameter series are segmented into fixed-length windows,
//! each window channel is turned into a one-sided STFT magnitude grid, and
//! grids are mapped to dB, normalized against training-set percentiles, and
//! resized into the square [−1, 1] images the GAN consumes.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::util::percentile_linear;

/// Which Stokes parameters a series carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelId {
    S1,
    S2,
    S3,
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelId::S1 => write!(f, "s1"),
            ChannelId::S2 => write!(f, "s2"),
            ChannelId::S3 => write!(f, "s3"),
        }
    }
}

/// A multi-channel polarization time series with a uniform sample rate.
#[derive(Debug, Clone)]
pub struct StokesSeries {
    sample_rate_hz: f64,
    channel_ids: Vec<ChannelId>,
    channels: Vec<Vec<f64>>,
}

impl StokesSeries {
    pub fn new(
        sample_rate_hz: f64,
        channel_ids: Vec<ChannelId>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::Config(format!(
                "sample rate must be a positive finite Hz value, got {sample_rate_hz}"
            )));
        }
        if channels.is_empty() || channels.len() != channel_ids.len() {
            return Err(Error::Config(format!(
                "need one channel array per channel id ({} ids, {} arrays)",
                channel_ids.len(),
                channels.len()
            )));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(Error::Config("channels must not be empty".into()));
        }
        for (id, ch) in channel_ids.iter().zip(&channels) {
            if ch.len() != len {
                return Err(Error::Config(format!(
                    "channel {id} has {} samples, expected {len}",
                    ch.len()
                )));
            }
            if let Some(pos) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "channel {id} sample {pos} is not finite"
                )));
            }
        }
        Ok(StokesSeries {
            sample_rate_hz,
            channel_ids,
            channels,
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn channel_ids(&self) -> &[ChannelId] {
        &self.channel_ids
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps only the requested channels, in the requested order.
    pub fn select(&self, ids: &[ChannelId]) -> Result<StokesSeries> {
        let mut picked = Vec::with_capacity(ids.len());
        for id in ids {
            match self.channel_ids.iter().position(|c| c == id) {
                Some(i) => picked.push(self.channels[i].clone()),
                None => {
                    return Err(Error::Config(format!(
                        "channel {id} not present in series"
                    )))
                }
            }
        }
        StokesSeries::new(self.sample_rate_hz, ids.to_vec(), picked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    Training,
    Streaming,
}

/// How a series is cut into scoring windows.
#[derive(Debug, Clone, Copy)]
pub struct WindowPlan {
    pub window_len: usize,
    pub hop: usize,
    pub mode: WindowMode,
}

impl WindowPlan {
    /// Non-overlapping training windows (hop = window length).
    pub fn training(window_len: usize) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        Ok(WindowPlan {
            window_len,
            hop: window_len,
            mode: WindowMode::Training,
        })
    }

    pub fn streaming(window_len: usize, hop: usize) -> Result<Self> {
        if window_len == 0 || hop == 0 || hop > window_len {
            return Err(Error::Config(format!(
                "need 1 <= hop <= window_len, got hop {hop}, window {window_len}"
            )));
        }
        Ok(WindowPlan {
            window_len,
            hop,
            mode: WindowMode::Streaming,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowFn {
    Hann,
    Rectangular,
}

/// STFT and image-normalization parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub seg_len: usize,
    pub seg_hop: usize,
    pub window_fn: WindowFn,
    pub log_floor_db: f64,
    pub out_height: usize,
    pub out_width: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 128,
            seg_len: 128,
            seg_hop: 31,
            window_fn: WindowFn::Hann,
            log_floor_db: -120.0,
            out_height: 64,
            out_width: 64,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft_size must be a power of two, got {}",
                self.fft_size
            )));
        }
        if self.seg_len == 0 || self.seg_len > self.fft_size {
            return Err(Error::Config(format!(
                "need 1 <= seg_len <= fft_size, got seg_len {}, fft_size {}",
                self.seg_len, self.fft_size
            )));
        }
        if self.seg_hop == 0 || self.seg_hop > self.seg_len {
            return Err(Error::Config(format!(
                "need 1 <= seg_hop <= seg_len, got seg_hop {}, seg_len {}",
                self.seg_hop, self.seg_len
            )));
        }
        if self.out_height == 0
            || self.out_width == 0
            || !self.out_height.is_multiple_of(4)
            || !self.out_width.is_multiple_of(4)
        {
            return Err(Error::Config(format!(
                "output size must be a positive multiple of 4 in both axes, got {}x{}",
                self.out_height, self.out_width
            )));
        }
        if !self.log_floor_db.is_finite() {
            return Err(Error::Config("log_floor_db must be finite".into()));
        }
        Ok(())
    }

    /// The magnitude offset that caps the dB floor at `log_floor_db`.
    pub fn epsilon(&self) -> f64 {
        10f64.powf(self.log_floor_db / 20.0)
    }
}

/// One segmented window: per-channel views into the source series.
#[derive(Debug)]
pub struct WindowSlice<'a> {
    pub start: usize,
    pub end: usize,
    pub channels: Vec<&'a [f64]>,
}

/// Raw one-sided STFT magnitudes, rows = frequency bins, cols = time frames.
#[derive(Debug, Clone)]
pub struct MagnitudeGrid {
    pub freq_bins: usize,
    pub frames: usize,
    data: Vec<f64>,
}

impl MagnitudeGrid {
    pub fn new(freq_bins: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if freq_bins == 0 || frames == 0 || data.len() != freq_bins * frames {
            return Err(Error::InvalidShape(format!(
                "magnitude grid {freq_bins}x{frames} does not match {} values",
                data.len()
            )));
        }
        Ok(MagnitudeGrid {
            freq_bins,
            frames,
            data,
        })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.frames + frame]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// A normalized spectrogram image in [−1, 1], shaped [channels, h, w].
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub pixels: Tensor,
    pub channel_ids: Vec<ChannelId>,
    pub source_span: (usize, usize),
}

/// Affine dB-normalization endpoints fitted on training data.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub lo: f64,
    pub hi: f64,
}

impl NormStats {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "normalization endpoints must be finite with lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(NormStats { lo, hi })
    }
}

/// Cuts a series into `floor((len − window_len)/hop) + 1` chronological
/// windows of exactly `window_len` samples; a trailing remainder is dropped.
pub fn segment<'a>(series: &'a StokesSeries, plan: &WindowPlan) -> Result<Vec<WindowSlice<'a>>> {
    let len = series.len();
    if len < plan.window_len {
        return Err(Error::SeriesTooShort {
            len,
            window_len: plan.window_len,
        });
    }
    let count = (len - plan.window_len) / plan.hop + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * plan.hop;
        let end = start + plan.window_len;
        out.push(WindowSlice {
            start,
            end,
            channels: series.channels().iter().map(|c| &c[start..end]).collect(),
        });
    }
    Ok(out)
}

fn window_coeffs(cfg: &StftConfig) -> Vec<f64> {
    let n = cfg.seg_len;
    match cfg.window_fn {
        WindowFn::Rectangular => vec![1.0; n],
        WindowFn::Hann => {
            if n == 1 {
                vec![1.0]
            } else {
                (0..n)
                    .map(|i| {
                        0.5 * (1.0
                            - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
                    })
                    .collect()
            }
        }
    }
}

/// One-sided STFT magnitude of a single channel window. Segments shorter
/// than `fft_size` are zero-padded before the transform.
pub fn stft_magnitude(window: &[f64], cfg: &StftConfig) -> Result<MagnitudeGrid> {
    cfg.validate()?;
    if window.len() < cfg.seg_len {
        return Err(Error::WindowTooShort {
            len: window.len(),
            seg_len: cfg.seg_len,
        });
    }
    let freq_bins = cfg.fft_size / 2 + 1;
    let frames = (window.len() - cfg.seg_len) / cfg.seg_hop + 1;
    let coeffs = window_coeffs(cfg);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut data = vec![0.0; freq_bins * frames];

    for t in 0..frames {
        let start = t * cfg.seg_hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.seg_len {
                Complex::new(window[start + i] * coeffs[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, row) in buf.iter().take(freq_bins).enumerate() {
            data[k * frames + t] = row.norm();
        }
    }
    MagnitudeGrid::new(freq_bins, frames, data)
}

fn to_db(mag: f64, eps: f64) -> f64 {
    20.0 * (mag + eps).log10()
}

/// Bilinear resize with corner alignment: output corners reproduce input
/// corners exactly.
fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    let ry = if dh > 1 && sh > 1 {
        (sh - 1) as f64 / (dh - 1) as f64
    } else {
        0.0
    };
    let rx = if dw > 1 && sw > 1 {
        (sw - 1) as f64 / (dw - 1) as f64
    } else {
        0.0
    };
    for i in 0..dh {
        let sy = i as f64 * ry;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f64;
        for j in 0..dw {
            let sx = j as f64 * rx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f64;
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            out[i * dw + j] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// dB conversion, clamp to the fitted range, affine map to [−1, 1], then
/// bilinear resize to the configured output size. Channel identity and the
/// source span are attached by the callers that know them.
pub fn to_spectrogram(grid: &MagnitudeGrid, cfg: &StftConfig, stats: &NormStats) -> Result<Spectrogram> {
    cfg.validate()?;
    NormStats::new(stats.lo, stats.hi)?;
    let eps = cfg.epsilon();
    let half_span = (stats.hi - stats.lo) / 2.0;
    let mid = (stats.hi + stats.lo) / 2.0;
    // the trailing clamp guards against one-ulp overshoot in the affine map
    let normed: Vec<f64> = grid
        .data()
        .iter()
        .map(|&m| ((to_db(m, eps).clamp(stats.lo, stats.hi) - mid) / half_span).clamp(-1.0, 1.0))
        .collect();
    let pix = resize_bilinear(
        &normed,
        grid.freq_bins,
        grid.frames,
        cfg.out_height,
        cfg.out_width,
    );
    Ok(Spectrogram {
        pixels: Tensor::new(vec![1, cfg.out_height, cfg.out_width], pix)?,
        channel_ids: vec![],
        source_span: (0, 0),
    })
}

/// Percentile endpoints (1st and 99th) of the dB values across all training
/// grids; a degenerate range is widened by ±1 dB.
pub fn fit_norm_stats(grids: &[MagnitudeGrid], cfg: &StftConfig) -> Result<NormStats> {
    if grids.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let eps = cfg.epsilon();
    let mut db: Vec<f64> = Vec::with_capacity(grids.iter().map(|g| g.data().len()).sum());
    for g in grids {
        db.extend(g.data().iter().map(|&m| to_db(m, eps)));
    }
    let lo = percentile_linear(&db, 1.0);
    let hi = percentile_linear(&db, 99.0);
    if lo == hi {
        NormStats::new(lo - 1.0, hi + 1.0)
    } else {
        NormStats::new(lo, hi)
    }
}

/// Full window → image path: per-channel STFT, normalization, resize, and
/// channel stacking. The result is shaped [channels, out_height, out_width].
pub fn window_spectrogram(
    slice: &WindowSlice<'_>,
    channel_ids: &[ChannelId],
    cfg: &StftConfig,
    stats: &NormStats,
) -> Result<Spectrogram> {
    let mut pixels = Vec::with_capacity(slice.channels.len() * cfg.out_height * cfg.out_width);
    for ch in &slice.channels {
        let grid = stft_magnitude(ch, cfg)?;
        let plane = to_spectrogram(&grid, cfg, stats)?;
        pixels.extend_from_slice(plane.pixels.data());
    }
    Ok(Spectrogram {
        pixels: Tensor::new(
            vec![slice.channels.len(), cfg.out_height, cfg.out_width],
            pixels,
        )?,
        channel_ids: channel_ids.to_vec(),
        source_span: (slice.start, slice.end),
    })
}

/// Raw magnitude grids for every window and channel of a series, in window
/// order; used to fit normalization statistics on the training split.
pub fn series_grids(
    series: &StokesSeries,
    plan: &WindowPlan,
    cfg: &StftConfig,
) -> Result<Vec<MagnitudeGrid>> {
    let mut grids = Vec::new();
    for slice in segment(series, plan)? {
        for ch in &slice.channels {
            grids.push(stft_magnitude(ch, cfg)?);
        }
    }
    Ok(grids)
}

/// Spectrogram images for every window of a series.
pub fn series_spectrograms(
    series: &StokesSeries,
    plan: &WindowPlan,
    cfg: &StftConfig,
    stats: &NormStats,
) -> Result<Vec<Spectrogram>> {
    segment(series, plan)?
        .iter()
        .map(|s| window_spectrogram(s, series.channel_ids(), cfg, stats))
        .collect()
}

fn parse_header(path: &str, line: &str) -> Result<Vec<ChannelId>> {
    let cols: Vec<&str> = line.trim().split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("header must start with column `t`, got `{line}`"),
        });
    }
    let mut ids = Vec::new();
    for c in &cols[1..] {
        let id = match *c {
            "s1" => ChannelId::S1,
            "s2" => ChannelId::S2,
            "s3" => ChannelId::S3,
            other => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    msg: format!("unknown column `{other}` (expected s1, s2, s3)"),
                })
            }
        };
        if ids.contains(&id) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("duplicate column `{c}`"),
            });
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: "need at least one Stokes column".into(),
        });
    }
    Ok(ids)
}

/// Reads a `t,s1,s2,s3` CSV (any non-empty subset of the s-columns). The
/// `t` column must be strictly increasing and every value finite; the
/// sample rate is supplied by the caller, `t` is used only for validation.
pub fn read_series_csv(path: &Path, sample_rate_hz: f64) -> Result<StokesSeries> {
    let disp = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: disp.clone(),
        line: 1,
        msg: "empty file".into(),
    })??;
    let ids = parse_header(&disp, &header)?;
    let ncols = ids.len() + 1;

    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
    let mut prev_t = f64::NEG_INFINITY;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut parsed = Vec::with_capacity(ncols);
        for f in fields.by_ref() {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("cannot parse `{f}` as a number"),
            })?;
            parsed.push(v);
        }
        if parsed.len() != ncols {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("expected {ncols} fields, got {}", parsed.len()),
            });
        }
        if parsed.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: "non-finite value".into(),
            });
        }
        if parsed[0] <= prev_t {
            return Err(Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("time column must be strictly increasing ({} after {prev_t})", parsed[0]),
            });
        }
        prev_t = parsed[0];
        for (ch, v) in channels.iter_mut().zip(&parsed[1..]) {
            ch.push(*v);
        }
    }
    if channels[0].is_empty() {
        return Err(Error::Parse {
            path: disp,
            line: 2,
            msg: "no data rows".into(),
        });
    }
    StokesSeries::new(sample_rate_hz, ids, channels)
}

/// Writes a series out in the same CSV dialect `read_series_csv` accepts,
/// with `t` starting at 0 and stepping by the sample interval.
pub fn write_series_csv(path: &Path, series: &StokesSeries) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "t")?;
    for id in series.channel_ids() {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    let dt = 1.0 / series.sample_rate_hz();
    for i in 0..series.len() {
        write!(out, "{}", i as f64 * dt)?;
        for ch in series.channels() {
            write!(out, ",{}", ch[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
