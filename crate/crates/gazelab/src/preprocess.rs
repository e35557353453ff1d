//! Velocity preprocessing: optional causal smoothing, Savitzky-Golay
//! differentiation, windowing with clamping, z-scoring, and channel assembly.
//!
//! Pipeline order is fixed: (optional filter) -> SG velocity -> segment ->
//! clamp -> standardize -> impute. Channel order within an eye block is
//! [left-yaw, left-pitch, right-yaw, right-pitch]; the optical block precedes
//! the visual block in 8-channel mode.

use crate::calib::{apply_calibration, CalibrationModel};
use crate::domain::{Recording, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::geometry::Dir;

/// Rows per window: 5 s at 72 Hz.
pub const WINDOW_LEN: usize = 360;
/// Velocities are clamped to this magnitude (deg/s) before standardization.
pub const CLAMP_DEG_S: f64 = 1000.0;

/// Which position streams feed the channel assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Four channels from raw optical-axis positions.
    Optical,
    /// Four channels from calibrated (visual-axis) positions.
    Visual,
    /// Eight channels: optical block then visual block.
    Both,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Optical => "O",
            Axis::Visual => "V",
            Axis::Both => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "o" | "optical" => Ok(Axis::Optical),
            "v" | "visual" => Ok(Axis::Visual),
            "b" | "both" => Ok(Axis::Both),
            other => Err(Error::validation(format!("unknown axis {other:?}"))),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Axis::Both => 8,
            _ => 4,
        }
    }
}

/// A segmented window of clamped velocities, prior to standardization.
#[derive(Debug, Clone)]
pub struct RawWindow {
    pub subject_id: String,
    pub recording_id: String,
    pub window_index: usize,
    /// Fitted depth of the calibration model behind the visual channels.
    pub calib_variant: Option<u32>,
    pub channels: usize,
    /// Row-major: values[row * channels + c], WINDOW_LEN rows.
    pub values: Vec<f64>,
}

/// A standardized, imputed window ready for the embedder.
#[derive(Debug, Clone)]
pub struct WindowTensor {
    pub subject_id: String,
    pub recording_id: String,
    pub window_index: usize,
    pub calib_variant: Option<u32>,
    pub channels: usize,
    /// Row-major: values[row * channels + c], WINDOW_LEN rows, no NaN.
    pub values: Vec<f64>,
}

impl WindowTensor {
    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels + channel]
    }
}

/// Per-channel standardization statistics, fit on training windows only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Causal 3-sample moving average; the first two outputs are prefix means.
/// NaN inputs propagate into every window containing them.
pub fn moving_average3(series: &[Dir]) -> Vec<Dir> {
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let start = i.saturating_sub(2);
        let n = (i - start + 1) as f64;
        let mut acc = [0.0; 2];
        for s in &series[start..=i] {
            acc[0] += s[0];
            acc[1] += s[1];
        }
        out.push([acc[0] / n, acc[1] / n]);
    }
    out
}

/// Derivative coefficients of the least-squares quadratic over a 7-sample
/// window at offsets -3..=3: a1 + 2*a2*u, exact for polynomials of order <= 2.
fn quad7_deriv_coeffs(w: &[f64]) -> (f64, f64) {
    debug_assert_eq!(w.len(), 7);
    let mut sum = 0.0;
    let mut sum_j = 0.0;
    let mut sum_jj = 0.0;
    for (idx, &x) in w.iter().enumerate() {
        let j = idx as f64 - 3.0;
        sum += x;
        sum_j += j * x;
        sum_jj += j * j * x;
    }
    // Symmetric offsets decouple the normal equations: sum j = sum j^3 = 0.
    let a1 = sum_j / 28.0;
    let a2 = (sum_jj - 4.0 * sum) / 84.0;
    (a1, a2)
}

/// First-derivative Savitzky-Golay estimate per axis, window 7, order 2,
/// scaled by `fs` (deg/s). The first and last 3 samples evaluate the
/// polynomial fitted on the nearest full window at their offsets.
pub fn sg_velocity_axis(series: &[f64], fs: f64) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 7 {
        return Err(Error::validation(format!(
            "series of length {n} is too short for a 7-sample filter window"
        )));
    }
    let mut out = vec![0.0; n];
    for i in 3..n - 3 {
        let mut sum_j = 0.0;
        for j in 1..=3usize {
            sum_j += j as f64 * (series[i + j] - series[i - j]);
        }
        out[i] = fs * sum_j / 28.0;
    }
    let (a1, a2) = quad7_deriv_coeffs(&series[..7]);
    for i in 0..3 {
        let u = i as f64 - 3.0;
        out[i] = fs * (a1 + 2.0 * a2 * u);
    }
    let (a1, a2) = quad7_deriv_coeffs(&series[n - 7..]);
    for i in n - 3..n {
        let u = i as f64 - (n - 4) as f64;
        out[i] = fs * (a1 + 2.0 * a2 * u);
    }
    Ok(out)
}

/// SG velocity applied component-wise to a (yaw, pitch) series.
pub fn sg_velocity(series: &[Dir], fs: f64) -> Result<Vec<Dir>> {
    let yaw: Vec<f64> = series.iter().map(|d| d[0]).collect();
    let pitch: Vec<f64> = series.iter().map(|d| d[1]).collect();
    let vy = sg_velocity_axis(&yaw, fs)?;
    let vp = sg_velocity_axis(&pitch, fs)?;
    Ok(vy.into_iter().zip(vp).map(|(y, p)| [y, p]).collect())
}

/// Non-overlapping WINDOW_LEN-sample segments from index 0; the trailing
/// remainder is dropped and values are clamped to +-CLAMP_DEG_S (NaN kept).
pub fn make_windows(velocities: &[f64]) -> Vec<Vec<f64>> {
    velocities
        .chunks_exact(WINDOW_LEN)
        .map(|chunk| chunk.iter().map(|v| v.clamp(-CLAMP_DEG_S, CLAMP_DEG_S)).collect())
        .collect()
}

/// Per-channel mean and population sigma over all training windows, ignoring
/// NaN entries; sigma below 1e-12 is replaced by 1 (two-pass computation).
pub fn fit_norm_stats(windows: &[RawWindow]) -> Result<NormStats> {
    let first = windows
        .first()
        .ok_or_else(|| Error::validation("cannot fit normalization statistics on zero windows"))?;
    let channels = first.channels;
    for w in windows {
        if w.channels != channels {
            return Err(Error::validation("training windows disagree on channel count"));
        }
    }
    let mut mean = vec![0.0; channels];
    let mut count = vec![0u64; channels];
    for w in windows {
        for row in 0..WINDOW_LEN {
            for c in 0..channels {
                let v = w.values[row * channels + c];
                if v.is_finite() {
                    mean[c] += v;
                    count[c] += 1;
                }
            }
        }
    }
    for c in 0..channels {
        if count[c] > 0 {
            mean[c] /= count[c] as f64;
        }
    }
    let mut var = vec![0.0; channels];
    for w in windows {
        for row in 0..WINDOW_LEN {
            for c in 0..channels {
                let v = w.values[row * channels + c];
                if v.is_finite() {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
    }
    let std = var
        .iter()
        .zip(&count)
        .map(|(&v, &n)| {
            let s = if n > 0 { (v / n as f64).sqrt() } else { 0.0 };
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Standardize then impute: (x - mu) / sigma with NaN mapped to 0.
pub fn apply_norm(window: &RawWindow, stats: &NormStats) -> Result<WindowTensor> {
    if stats.channels() != window.channels {
        return Err(Error::validation(format!(
            "normalization statistics cover {} channels but the window has {}",
            stats.channels(),
            window.channels
        )));
    }
    let c = window.channels;
    let values = window
        .values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let z = (x - stats.mean[i % c]) / stats.std[i % c];
            if z.is_finite() {
                z
            } else {
                0.0
            }
        })
        .collect();
    Ok(WindowTensor {
        subject_id: window.subject_id.clone(),
        recording_id: window.recording_id.clone(),
        window_index: window.window_index,
        calib_variant: window.calib_variant,
        channels: c,
        values,
    })
}

/// Windowed velocity channels for one eye pair, order [LY, LP, RY, RP].
fn eye_block_windows(series: &[Vec<Dir>; 2], filter_on: bool) -> Result<[Vec<Vec<f64>>; 4]> {
    let mut out: [Vec<Vec<f64>>; 4] = Default::default();
    for (eye, positional) in series.iter().enumerate() {
        let filtered;
        let pos: &[Dir] = if filter_on {
            filtered = moving_average3(positional);
            &filtered
        } else {
            positional
        };
        let vel = sg_velocity(pos, SAMPLE_RATE_HZ)?;
        let yaw: Vec<f64> = vel.iter().map(|d| d[0]).collect();
        let pitch: Vec<f64> = vel.iter().map(|d| d[1]).collect();
        out[eye * 2] = make_windows(&yaw);
        out[eye * 2 + 1] = make_windows(&pitch);
    }
    Ok(out)
}

fn pack_window(
    rec: &Recording,
    window_index: usize,
    calib_variant: Option<u32>,
    blocks: &[&[Vec<Vec<f64>>; 4]],
) -> RawWindow {
    let channels = blocks.len() * 4;
    let mut values = vec![0.0; WINDOW_LEN * channels];
    for (b, block) in blocks.iter().enumerate() {
        for (c, chan) in block.iter().enumerate() {
            let col = b * 4 + c;
            for (row, &v) in chan[window_index].iter().enumerate() {
                values[row * channels + col] = v;
            }
        }
    }
    RawWindow {
        subject_id: rec.subject_id.clone(),
        recording_id: rec.recording_id.clone(),
        window_index,
        calib_variant,
        channels,
        values,
    }
}

/// Segment one recording into raw windows for the given axis mode. Multiple
/// calibration models emit one variant per model for V/B windows; the optical
/// block is computed once, so B windows carry it bit-identical to O windows.
pub fn assemble_raw(
    rec: &Recording,
    axis: Axis,
    calib_models: &[CalibrationModel],
    filter_on: bool,
) -> Result<Vec<RawWindow>> {
    if axis != Axis::Optical && calib_models.is_empty() {
        return Err(Error::validation(format!(
            "axis {} requires at least one calibration model",
            axis.as_str()
        )));
    }
    let optical_block = if axis != Axis::Visual {
        Some(eye_block_windows(&rec.optical_series(), filter_on)?)
    } else {
        None
    };
    let visual_blocks: Vec<(u32, [Vec<Vec<f64>>; 4])> = if axis != Axis::Optical {
        calib_models
            .iter()
            .map(|m| Ok((m.fitted_depth_cm, eye_block_windows(&apply_calibration(m, rec), filter_on)?)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let n_windows = match (&optical_block, visual_blocks.first()) {
        (Some(b), _) => b[0].len(),
        (None, Some((_, b))) => b[0].len(),
        (None, None) => 0,
    };
    let mut out = Vec::new();
    for w in 0..n_windows {
        match axis {
            Axis::Optical => {
                let block = optical_block.as_ref().unwrap();
                out.push(pack_window(rec, w, None, &[block]));
            }
            Axis::Visual => {
                for (depth, block) in &visual_blocks {
                    out.push(pack_window(rec, w, Some(*depth), &[block]));
                }
            }
            Axis::Both => {
                let optical = optical_block.as_ref().unwrap();
                for (depth, block) in &visual_blocks {
                    out.push(pack_window(rec, w, Some(*depth), &[optical, block]));
                }
            }
        }
    }
    Ok(out)
}

/// Full assembly: raw windows standardized and imputed with `stats`.
pub fn assemble_channels(
    rec: &Recording,
    axis: Axis,
    calib_models: &[CalibrationModel],
    filter_on: bool,
    stats: &NormStats,
) -> Result<Vec<WindowTensor>> {
    assemble_raw(rec, axis, calib_models, filter_on)?
        .iter()
        .map(|w| apply_norm(w, stats))
        .collect()
}
