//! Pixel-level localization of a flagged window.
//!
//! The reconstruction residual |x − G(z)| is reduced over channels by max,
//! thresholded at a per-map percentile, and rendered as a grayscale
//! spectrogram with flagged pixels blended toward red. Column and row
//! extents of the mask place the disturbance in time and frequency.

use std::io::Write;
use std::path::Path;

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::util::percentile_linear;

/// Residuals, the boolean mask, and the flagged extents for one window.
#[derive(Debug, Clone)]
pub struct ResidualMask {
    /// Channel-reduced residuals, [H, W].
    pub residuals: Tensor,
    /// Row-major H×W; true where the residual strictly exceeds the
    /// threshold.
    pub mask: Vec<bool>,
    pub pixel_threshold: f64,
    /// (first flagged column, last flagged column), present iff any pixel
    /// is flagged.
    pub time_extent: Option<(usize, usize)>,
    /// (first flagged row, last flagged row).
    pub freq_extent: Option<(usize, usize)>,
}

/// Per-pixel max over channels of |x − gz|, shaped [H, W].
pub fn residual_map(x: &Spectrogram, gz: &Spectrogram) -> Result<Tensor> {
    if !x.pixels.same_shape(&gz.pixels) {
        return Err(Error::ShapeMismatch {
            op: "residual_map",
            lhs: x.pixels.shape().to_vec(),
            rhs: gz.pixels.shape().to_vec(),
        });
    }
    let shape = x.pixels.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape(format!(
            "expected [C, H, W] pixels, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; h * w];
    let (xd, gd) = (x.pixels.data(), gz.pixels.data());
    for ch in 0..c {
        let base = ch * h * w;
        for (i, o) in out.iter_mut().enumerate() {
            let d = (xd[base + i] - gd[base + i]).abs();
            if d > *o {
                *o = d;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Thresholds a residual map at its own `percentile`-th percentile value;
/// pixels strictly above it are flagged.
pub fn make_mask(residuals: &Tensor, percentile: f64) -> Result<ResidualMask> {
    let shape = residuals.shape();
    if shape.len() != 2 || residuals.numel() == 0 {
        return Err(Error::InvalidShape(format!(
            "residual map must be a non-empty [H, W] tensor, got {shape:?}"
        )));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::Domain(format!(
            "pixel percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let w = shape[1];
    let pixel_threshold = percentile_linear(residuals.data(), percentile);
    let mask: Vec<bool> = residuals
        .data()
        .iter()
        .map(|&v| v > pixel_threshold)
        .collect();

    let mut time_extent = None;
    let mut freq_extent = None;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (row, col) = (i / w, i % w);
        time_extent = Some(match time_extent {
            None => (col, col),
            Some((lo, hi)) => (col.min(lo), col.max(hi)),
        });
        freq_extent = Some(match freq_extent {
            None => (row, row),
            Some((lo, hi)) => (row.min(lo), row.max(hi)),
        });
    }
    Ok(ResidualMask {
        residuals: residuals.clone(),
        mask,
        pixel_threshold,
        time_extent,
        freq_extent,
    })
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Grayscale spectrogram with flagged pixels blended halfway to red.
/// Multi-channel inputs are collapsed to their channel mean for display.
pub fn render_overlay(x: &Spectrogram, mask: &ResidualMask) -> Result<RgbImage> {
    let shape = x.pixels.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape(format!(
            "expected [C, H, W] pixels, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if mask.residuals.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "render_overlay",
            lhs: shape.to_vec(),
            rhs: mask.residuals.shape().to_vec(),
        });
    }
    let xd = x.pixels.data();
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        let mean: f64 = (0..c).map(|ch| xd[ch * h * w + i]).sum::<f64>() / c as f64;
        let g = (((mean + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u16;
        if mask.mask[i] {
            data.push(((g + 255) / 2) as u8);
            data.push((g / 2) as u8);
            data.push((g / 2) as u8);
        } else {
            data.push(g as u8);
            data.push(g as u8);
            data.push(g as u8);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Binary PPM (P6), max value 255.
pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.write_all(&image.data)?;
    out.flush()?;
    Ok(())
}

/// Canonical per-window overlay filename.
pub fn overlay_filename(window_index: usize) -> String {
    format!("overlay_{window_index}.ppm")
}

/// The sample range a mask-column extent covers in the original window.
/// Columns map back through the bilinear resize to STFT frame positions;
/// a frame at hop position p covers samples [p·hop, p·hop + seg_len).
pub fn extent_sample_span(
    extent: (usize, usize),
    width: usize,
    frames: usize,
    seg_hop: usize,
    seg_len: usize,
) -> (usize, usize) {
    let col_to_frame = |col: usize| -> f64 {
        if width <= 1 || frames <= 1 {
            0.0
        } else {
            col as f64 * (frames - 1) as f64 / (width - 1) as f64
        }
    };
    let start = (col_to_frame(extent.0) * seg_hop as f64).floor() as usize;
    let end = (col_to_frame(extent.1) * seg_hop as f64).ceil() as usize + seg_len;
    (start, end)
}

/// Fraction of the ground-truth span covered by the predicted span.
pub fn span_overlap_fraction(pred: (usize, usize), truth: (usize, usize)) -> f64 {
    if truth.1 <= truth.0 {
        return 0.0;
    }
    let lo = pred.0.max(truth.0);
    let hi = pred.1.min(truth.1);
    if hi <= lo {
        0.0
    } else {
        (hi - lo) as f64 / (truth.1 - truth.0) as f64
    }
}

/// The inclusive column interval whose STFT frames see any sample of
/// `span` = [start, end). Returns None when no frame touches the span.
pub fn sample_span_columns(
    span: (usize, usize),
    width: usize,
    frames: usize,
    seg_hop: usize,
    seg_len: usize,
) -> Option<(usize, usize)> {
    let (start, end) = span;
    if end <= start || frames == 0 || width == 0 {
        return None;
    }
    // frame f covers samples [f·hop, f·hop + seg_len)
    let f_min = if start < seg_len {
        0
    } else {
        (start - seg_len) / seg_hop + 1
    };
    if f_min >= frames || f_min * seg_hop >= end {
        return None;
    }
    let f_max = ((end - 1) / seg_hop).min(frames - 1);
    let frame_to_col = |f: usize| -> usize {
        if frames <= 1 {
            0
        } else {
            let c = f as f64 * (width - 1) as f64 / (frames - 1) as f64;
            (c.round() as usize).min(width - 1)
        }
    };
    Some((frame_to_col(f_min), frame_to_col(f_max)))
}

/// True when the inclusive intervals share at least one index.
pub fn intervals_intersect(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::ChannelId;
    use crate::seed;
    use proptest::prelude::*;

    fn spectro(pixels: Tensor) -> Spectrogram {
        Spectrogram {
            pixels,
            channel_ids: vec![ChannelId::S1],
            source_span: (0, 0),
        }
    }

    #[test]
    fn residual_map_identical_is_zero() {
        let x = spectro(Tensor::filled(&[2, 4, 4], 0.25));
        let m = residual_map(&x, &x).unwrap();
        assert_eq!(m.shape(), &[4, 4]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_map_single_pixel() {
        let x = spectro(Tensor::zeros(&[2, 3, 3]));
        let mut g = Tensor::zeros(&[2, 3, 3]);
        g.data_mut()[9 + 4] = -0.8; // channel 1, row 1, col 1
        let m = residual_map(&x, &spectro(g)).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            if i == 4 {
                assert!((v - 0.8).abs() < 1e-15);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn residual_map_matches_channel_max_oracle() {
        let mut rng = seed::rng(31);
        let x = spectro(Tensor::rand_uniform(&[2, 5, 6], -1.0, 1.0, &mut rng));
        let g = spectro(Tensor::rand_uniform(&[2, 5, 6], -1.0, 1.0, &mut rng));
        let m = residual_map(&x, &g).unwrap();
        for row in 0..5 {
            for col in 0..6 {
                let i = row * 6 + col;
                let d0 = (x.pixels.data()[i] - g.pixels.data()[i]).abs();
                let d1 = (x.pixels.data()[30 + i] - g.pixels.data()[30 + i]).abs();
                assert!((m.data()[i] - d0.max(d1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_map_shape_mismatch() {
        let x = spectro(Tensor::zeros(&[1, 4, 4]));
        let g = spectro(Tensor::zeros(&[1, 8, 8]));
        assert!(matches!(
            residual_map(&x, &g),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constant_map_yields_empty_mask() {
        let m = make_mask(&Tensor::filled(&[4, 4], 0.7), 98.0).unwrap();
        assert!(m.mask.iter().all(|&b| !b));
        assert_eq!(m.time_extent, None);
        assert_eq!(m.freq_extent, None);
    }

    #[test]
    fn outlier_pixel_is_flagged_at_p99() {
        let mut rng = seed::rng(32);
        let mut vals = Tensor::rand_uniform(&[64, 64], 0.0, 0.1, &mut rng);
        vals.data_mut()[64 * 10 + 20] = 5.0;
        let m = make_mask(&vals, 99.0).unwrap();
        assert!(m.mask[64 * 10 + 20], "outlier not flagged");
        // percentile oracle: threshold must sit below the outlier and
        // above the 0.1-bounded bulk
        assert!(m.pixel_threshold < 5.0 && m.pixel_threshold >= 0.09);
    }

    #[test]
    fn burst_columns_recovered_within_tolerance() {
        // a 4-row × 11-column hot patch: 44 of 4096 pixels (~1.1%), so
        // the 98th-percentile threshold sits in the zero bulk below it
        let mut vals = Tensor::zeros(&[64, 64]);
        for row in 30..=33 {
            for col in 20..=30 {
                vals.data_mut()[row * 64 + col] = 1.0;
            }
        }
        let m = make_mask(&vals, 98.0).unwrap();
        assert_eq!(m.time_extent, Some((20, 30)));
        assert_eq!(m.freq_extent, Some((30, 33)));
    }

    #[test]
    fn percentile_domain_is_enforced() {
        let t = Tensor::filled(&[2, 2], 1.0);
        for p in [0.0, 100.0, -3.0, 104.0] {
            assert!(matches!(make_mask(&t, p), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn overlay_blend_arithmetic() {
        let mut x = Tensor::zeros(&[1, 1, 2]);
        x.data_mut()[0] = 1.0;
        x.data_mut()[1] = -1.0;
        let residuals = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let mask = ResidualMask {
            residuals,
            mask: vec![true, true],
            pixel_threshold: 0.0,
            time_extent: Some((0, 1)),
            freq_extent: Some((0, 0)),
        };
        let img = render_overlay(&spectro(x), &mask).unwrap();
        assert_eq!(&img.data[0..3], &[255, 127, 127]);
        assert_eq!(&img.data[3..6], &[127, 0, 0]);
    }

    #[test]
    fn empty_mask_renders_pure_grayscale() {
        let mut rng = seed::rng(33);
        let x = spectro(Tensor::rand_uniform(&[1, 4, 4], -1.0, 1.0, &mut rng));
        let m = make_mask(&Tensor::filled(&[4, 4], 0.2), 98.0).unwrap();
        let img = render_overlay(&x, &m).unwrap();
        for px in img.data.chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn unflagged_pixels_invert_to_source_within_quantization() {
        let mut rng = seed::rng(34);
        let x = spectro(Tensor::rand_uniform(&[1, 6, 6], -1.0, 1.0, &mut rng));
        let m = make_mask(&Tensor::filled(&[6, 6], 0.1), 99.0).unwrap();
        let img = render_overlay(&x, &m).unwrap();
        for (i, px) in img.data.chunks(3).enumerate() {
            let recovered = 2.0 * (px[0] as f64 / 255.0) - 1.0;
            let err = (recovered - x.pixels.data()[i]).abs();
            assert!(err <= 1.0 / 255.0, "pixel {i}: err {err}");
        }
    }

    #[test]
    fn ppm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(overlay_filename(7));
        assert_eq!(path.file_name().unwrap(), "overlay_7.ppm");
        let img = RgbImage {
            width: 4,
            height: 3,
            data: vec![9; 36],
        };
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 36);
        assert!(bytes[11..].iter().all(|&b| b == 9));
    }

    #[test]
    fn extent_span_covers_expected_samples() {
        // 61 frames, hop 31, seg 128, resized to 64 columns: full width
        // maps back to the full window
        let (s, e) = extent_sample_span((0, 63), 64, 61, 31, 128);
        assert_eq!(s, 0);
        assert_eq!(e, 60 * 31 + 128);
        let (s, e) = extent_sample_span((10, 10), 64, 61, 31, 128);
        assert!(s < e && e - s >= 128);
    }

    #[test]
    fn overlap_fraction_cases() {
        assert_eq!(span_overlap_fraction((0, 100), (50, 150)), 0.5);
        assert_eq!(span_overlap_fraction((0, 400), (100, 200)), 1.0);
        assert_eq!(span_overlap_fraction((300, 400), (100, 200)), 0.0);
    }

    #[test]
    fn sample_span_maps_to_columns() {
        // default grid: 61 frames, hop 31, seg 128, 64 columns
        let full = sample_span_columns((0, 2000), 64, 61, 31, 128).unwrap();
        assert_eq!(full, (0, 63));
        // burst at samples [600, 1000): first seeing frame is
        // f_min = (600-128)/31 + 1 = 16, last is f_max = 999/31 = 32
        let (lo, hi) = sample_span_columns((600, 1000), 64, 61, 31, 128).unwrap();
        assert_eq!(lo, (16.0f64 * 63.0 / 60.0).round() as usize);
        assert_eq!(hi, (32.0f64 * 63.0 / 60.0).round() as usize);
        assert!(sample_span_columns((500, 500), 64, 61, 31, 128).is_none());
    }

    #[test]
    fn interval_intersection_cases() {
        assert!(intervals_intersect((0, 5), (5, 9)));
        assert!(intervals_intersect((3, 4), (0, 9)));
        assert!(!intervals_intersect((0, 4), (5, 9)));
    }

    proptest! {
        #[test]
        fn raising_percentile_never_adds_pixels(
            vals in proptest::collection::vec(0.0f64..5.0, 36),
            p_lo in 10.0f64..60.0,
            bump in 1.0f64..39.0,
        ) {
            let t = Tensor::new(vec![6, 6], vals).unwrap();
            let low = make_mask(&t, p_lo).unwrap();
            let high = make_mask(&t, p_lo + bump).unwrap();
            for (a, b) in low.mask.iter().zip(&high.mask) {
                prop_assert!(!b || *a, "pixel appeared at higher percentile");
            }
        }

        #[test]
        fn mask_matches_strict_threshold_rule(
            vals in proptest::collection::vec(0.0f64..5.0, 24),
            p in 5.0f64..95.0,
        ) {
            let t = Tensor::new(vec![4, 6], vals).unwrap();
            let m = make_mask(&t, p).unwrap();
            for (v, flag) in t.data().iter().zip(&m.mask) {
                prop_assert_eq!(*flag, *v > m.pixel_threshold);
            }
            let any = m.mask.iter().any(|&b| b);
            prop_assert_eq!(m.time_extent.is_some(), any);
            prop_assert_eq!(m.freq_extent.is_some(), any);
        }
    }
}
