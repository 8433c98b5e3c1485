//! Seeded synthetic SOP data: slow multi-sinusoid "polarization drift"
//! backgrounds, plus injected vibration-like bursts with ground-truth spans.
//!
//! Background and burst samples come from independent derived RNG streams,
//! so a window's background is unchanged by the presence, kind, or
//! amplitude of its burst. That makes anomalous windows differ from their
//! burst-free counterparts only inside the labeled span.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{ChannelId, StokesSeries};
use crate::error::{Error, Result};
use crate::seed;

/// Shape of the injected disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BurstKind {
    /// Linear frequency sweep across the burst band.
    Chirp,
    /// White noise burst.
    Broadband,
    /// Square wave at a random in-band frequency.
    SquareFlap,
}

/// Frequency band the injected bursts occupy, well above the drift band.
pub const BURST_BAND_HZ: (f64, f64) = (5.0, 40.0);

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub window_len: usize,
    pub sample_rate_hz: f64,
    pub channels: Vec<ChannelId>,
    /// Number of drift sinusoids per window.
    pub k_sinusoids: usize,
    /// Drift frequency band in Hz.
    pub freq_band_hz: (f64, f64),
    /// Per-sinusoid amplitude range.
    pub amp_range: (f64, f64),
    /// Standard deviation of the additive white noise.
    pub noise_sigma: f64,
    pub burst_kind: BurstKind,
    /// Burst amplitude as a multiple of the mean drift amplitude.
    pub burst_amp_multiplier: f64,
    /// Burst length range in samples, inclusive.
    pub burst_duration_range: (usize, usize),
    /// Burst onset range in samples, inclusive.
    pub burst_onset_range: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_train: 256,
            n_test_normal: 64,
            n_test_anomalous: 64,
            window_len: 2000,
            sample_rate_hz: 100.0,
            channels: vec![ChannelId::S1, ChannelId::S2, ChannelId::S3],
            k_sinusoids: 3,
            freq_band_hz: (0.1, 2.0),
            amp_range: (0.5, 1.5),
            noise_sigma: 0.05,
            burst_kind: BurstKind::Chirp,
            burst_amp_multiplier: 4.0,
            burst_duration_range: (300, 800),
            burst_onset_range: (200, 1100),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.len() > 3 {
            return Err(Error::Config("need 1 to 3 channels".into()));
        }
        if self.freq_band_hz.0 > self.freq_band_hz.1 || self.freq_band_hz.0 <= 0.0 {
            return Err(Error::Config(format!(
                "drift band must satisfy 0 < lo <= hi, got {:?}",
                self.freq_band_hz
            )));
        }
        if self.amp_range.0 > self.amp_range.1 || self.amp_range.0 < 0.0 {
            return Err(Error::Config(format!(
                "amplitude range must satisfy 0 <= lo <= hi, got {:?}",
                self.amp_range
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        let (dlo, dhi) = self.burst_duration_range;
        let (olo, ohi) = self.burst_onset_range;
        if dlo > dhi || dhi >= self.window_len {
            return Err(Error::Config(format!(
                "burst duration range {:?} must fit inside window of {} samples",
                self.burst_duration_range, self.window_len
            )));
        }
        if olo > ohi || ohi + dhi > self.window_len {
            return Err(Error::Config(format!(
                "burst onset range {:?} plus max duration {dhi} exceeds window of {} samples",
                self.burst_onset_range, self.window_len
            )));
        }
        if self.burst_amp_multiplier < 0.0 {
            return Err(Error::Config("burst multiplier must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Labeled burst location inside one anomalous window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub onset: usize,
    pub duration: usize,
}

/// Drift sinusoids share frequency and amplitude across channels; phases
/// and noise are per-channel.
fn background(cfg: &SynthConfig, window_seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = seed::rng(seed::derive(window_seed, "bg", 0));
    let dt = 1.0 / cfg.sample_rate_hz;
    let comps: Vec<(f64, f64)> = (0..cfg.k_sinusoids)
        .map(|_| {
            let f = sample_range(&mut rng, cfg.freq_band_hz.0, cfg.freq_band_hz.1);
            let a = sample_range(&mut rng, cfg.amp_range.0, cfg.amp_range.1);
            (f, a)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("invalid noise sigma: {e}")))?;

    let mut channels = Vec::with_capacity(cfg.channels.len());
    for _ in 0..cfg.channels.len() {
        let phases: Vec<f64> = (0..cfg.k_sinusoids)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let mut ch = Vec::with_capacity(cfg.window_len);
        for t in 0..cfg.window_len {
            let time = t as f64 * dt;
            let mut v = 0.0;
            for ((f, a), phi) in comps.iter().zip(&phases) {
                v += a * (std::f64::consts::TAU * f * time + phi).sin();
            }
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            ch.push(v);
        }
        channels.push(ch);
    }
    Ok(channels)
}

/// `random_range` panics on empty ranges, so degenerate lo == hi is
/// shortcut here to allow pinned test configurations.
fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_range_usize(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Burst waveform of `duration` samples; the same waveform is added to all
/// channels, the way a mechanical disturbance moves every Stokes component.
fn burst_waveform(cfg: &SynthConfig, rng: &mut impl Rng, duration: usize) -> Vec<f64> {
    let amp = cfg.burst_amp_multiplier * (cfg.amp_range.0 + cfg.amp_range.1) / 2.0;
    let dt = 1.0 / cfg.sample_rate_hz;
    let (f_lo, f_hi) = BURST_BAND_HZ;
    match cfg.burst_kind {
        BurstKind::Chirp => {
            let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
            let span = duration as f64 * dt;
            (0..duration)
                .map(|i| {
                    let tau = i as f64 * dt;
                    // instantaneous frequency sweeps f_lo -> f_hi linearly
                    let phase = std::f64::consts::TAU
                        * (f_lo * tau + (f_hi - f_lo) / (2.0 * span) * tau * tau);
                    amp * (phase + phi0).sin()
                })
                .collect()
        }
        BurstKind::Broadband => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..duration).map(|_| amp * normal.sample(rng)).collect()
        }
        BurstKind::SquareFlap => {
            let f = rng.random_range(f_lo..f_hi);
            let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
            (0..duration)
                .map(|i| {
                    let s = (std::f64::consts::TAU * f * i as f64 * dt + phi0).sin();
                    if s >= 0.0 {
                        amp
                    } else {
                        -amp
                    }
                })
                .collect()
        }
    }
}

fn to_series(cfg: &SynthConfig, channels: Vec<Vec<f64>>) -> Result<StokesSeries> {
    StokesSeries::new(cfg.sample_rate_hz, cfg.channels.clone(), channels)
}

/// `n` normal windows, deterministic in `cfg.seed`.
pub fn gen_normal(cfg: &SynthConfig, n: usize) -> Result<Vec<StokesSeries>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let wseed = seed::derive(cfg.seed, "window", i as u64);
            to_series(cfg, background(cfg, wseed)?)
        })
        .collect()
}

/// `n` windows with one injected burst each plus its ground-truth span.
/// With `burst_amp_multiplier = 0` the output equals `gen_normal` exactly.
pub fn gen_anomalous(cfg: &SynthConfig, n: usize) -> Result<Vec<(StokesSeries, GroundTruth)>> {
    cfg.validate()?;
    (0..n)
        .map(|i| {
            let wseed = seed::derive(cfg.seed, "window", i as u64);
            let mut channels = background(cfg, wseed)?;
            let mut rng = seed::rng(seed::derive(wseed, "burst", 0));
            let onset = sample_range_usize(&mut rng, cfg.burst_onset_range.0, cfg.burst_onset_range.1);
            let duration =
                sample_range_usize(&mut rng, cfg.burst_duration_range.0, cfg.burst_duration_range.1);
            let wave = burst_waveform(cfg, &mut rng, duration);
            for ch in &mut channels {
                for (i, w) in wave.iter().enumerate() {
                    ch[onset + i] += w;
                }
            }
            Ok((to_series(cfg, channels)?, GroundTruth { onset, duration }))
        })
        .collect()
}

/// Joins same-shape windows into one continuous series (windows appear in
/// order, so window w occupies samples [w·len, (w+1)·len)).
pub fn concat_windows(windows: &[StokesSeries]) -> Result<StokesSeries> {
    let first = windows.first().ok_or(Error::EmptySet)?;
    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); first.channel_ids().len()];
    for w in windows {
        if w.channel_ids() != first.channel_ids() {
            return Err(Error::Config("windows disagree on channel ids".into()));
        }
        for (acc, ch) in channels.iter_mut().zip(w.channels()) {
            acc.extend_from_slice(ch);
        }
    }
    StokesSeries::new(first.sample_rate_hz(), first.channel_ids().to_vec(), channels)
}

/// One labels row per window, in window order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRow {
    pub window_index: usize,
    pub label: bool,
    pub onset: usize,
    pub duration: usize,
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "window_index,label,onset,duration")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.window_index,
            if r.label { 1 } else { 0 },
            r.onset,
            r.duration
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    let disp = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if lineno == 1 {
            if line.trim() != "window_index,label,onset,duration" {
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
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: disp,
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                path: disp.clone(),
                line: lineno,
                msg: format!("cannot parse {what} `{s}`"),
            })
        };
        let label = match fields[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: disp,
                    line: lineno,
                    msg: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        rows.push(LabelRow {
            window_index: parse(fields[0], "window index")?,
            label,
            onset: parse(fields[2], "onset")?,
            duration: parse(fields[3], "duration")?,
        });
    }
    Ok(rows)
}
