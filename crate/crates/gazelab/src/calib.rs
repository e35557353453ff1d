//! Per-user, per-eye affine calibration and signal-quality metrics.
//!
//! A calibration maps optical-axis gaze to the visual axis: v = gain * o +
//! offset per eye, least-squares fitted over the settled portion of each
//! dwell of a calibration recording. Quality metrics (spatial accuracy,
//! sample-to-sample RMS precision) aggregate per-dwell values as medians of
//! medians, excluding high-dispersion windows, following the conventions the
//! corpus targets are stated in.

use crate::domain::{Dwell, Recording, Task};
use crate::error::{Error, Result};
use crate::geometry::{angular_distance_deg, Dir};
use crate::util::{format_sig9, median, solve3};

/// Fixation windows with gaze spread at or above this are excluded from
/// quality metrics.
pub const DISPERSION_LIMIT_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub subject_id: String,
    pub fitted_depth_cm: u32,
    /// Per-eye 2x2 gain, row-major `[out][in]`, indexed by eye.
    pub gain: [[[f64; 2]; 2]; 2],
    /// Per-eye offset in degrees.
    pub offset: [Dir; 2],
    /// Root-mean-square fit residual over the dwell samples, degrees.
    pub fit_rmse_deg: f64,
}

impl CalibrationModel {
    pub fn validate(&self) -> Result<()> {
        for eye in 0..2 {
            let g = &self.gain[eye];
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            if !det.is_finite() || det.abs() <= 1e-6 {
                return Err(Error::numeric(format!(
                    "calibration gain for subject {} is singular (det {det})",
                    self.subject_id
                )));
            }
        }
        if !(self.fit_rmse_deg >= 0.0) {
            return Err(Error::numeric("negative or NaN fit residual".to_string()));
        }
        Ok(())
    }

    fn map(&self, eye: usize, o: Dir) -> Dir {
        [
            self.gain[eye][0][0] * o[0] + self.gain[eye][0][1] * o[1] + self.offset[eye][0],
            self.gain[eye][1][0] * o[0] + self.gain[eye][1][1] * o[1] + self.offset[eye][1],
        ]
    }
}

/// Settled central 60 % of each closed dwell: the first and last 20 % are
/// dropped, which also discards the saccadic flight at the dwell start.
fn central_window(d: &Dwell) -> (usize, usize) {
    let len = d.end - d.start;
    let lo = d.start + (0.2 * len as f64).round() as usize;
    let hi = d.start + (0.8 * len as f64).round() as usize;
    (lo, hi)
}

fn fit_windows(rec: &Recording) -> Vec<(usize, usize, Dir)> {
    rec.closed_dwells()
        .iter()
        .map(|d| {
            let (lo, hi) = central_window(d);
            (lo, hi, d.target)
        })
        .collect()
}

fn distinct_noncollinear(targets: &[Dir]) -> bool {
    let mut distinct: Vec<Dir> = Vec::new();
    for &t in targets {
        if !distinct
            .iter()
            .any(|d| d[0].to_bits() == t[0].to_bits() && d[1].to_bits() == t[1].to_bits())
        {
            distinct.push(t);
        }
    }
    if distinct.len() < 3 {
        return false;
    }
    let a = distinct[0];
    for i in 1..distinct.len() {
        let u = [distinct[i][0] - a[0], distinct[i][1] - a[1]];
        for item in distinct.iter().skip(i + 1) {
            let v = [item[0] - a[0], item[1] - a[1]];
            if (u[0] * v[1] - u[1] * v[0]).abs() > 1e-9 {
                return true;
            }
        }
    }
    false
}

/// Least-squares affine fit per eye over the settled dwell samples of a
/// calibration recording.
pub fn fit_calibration(rec: &Recording) -> Result<CalibrationModel> {
    if rec.task != Task::Calibration {
        return Err(Error::validation(format!(
            "recording {} is not a calibration recording",
            rec.recording_id
        )));
    }
    let windows = fit_windows(rec);
    let targets: Vec<Dir> = windows.iter().map(|w| w.2).collect();
    if !distinct_noncollinear(&targets) {
        return Err(Error::validation(format!(
            "underdetermined calibration: recording {} needs >= 3 distinct non-collinear targets",
            rec.recording_id
        )));
    }

    let mut gain = [[[0.0; 2]; 2]; 2];
    let mut offset = [[0.0; 2]; 2];
    let mut sq_sum = 0.0;
    let mut n_res = 0usize;
    for eye in 0..2 {
        // Normal equations for rows [o_yaw, o_pitch, 1].
        let mut nmat = [[0.0f64; 3]; 3];
        let mut rhs = [[0.0f64; 3]; 2];
        for &(lo, hi, target) in &windows {
            for s in &rec.samples[lo..hi] {
                if !s.valid {
                    continue;
                }
                let o = if eye == 0 { s.left } else { s.right };
                let row = [o[0], o[1], 1.0];
                for r in 0..3 {
                    for c in 0..3 {
                        nmat[r][c] += row[r] * row[c];
                    }
                    rhs[0][r] += row[r] * target[0];
                    rhs[1][r] += row[r] * target[1];
                }
            }
        }
        let sol_yaw = solve3(nmat, rhs[0])?;
        let sol_pitch = solve3(nmat, rhs[1])?;
        gain[eye] = [[sol_yaw[0], sol_yaw[1]], [sol_pitch[0], sol_pitch[1]]];
        offset[eye] = [sol_yaw[2], sol_pitch[2]];

        for &(lo, hi, target) in &windows {
            for s in &rec.samples[lo..hi] {
                if !s.valid {
                    continue;
                }
                let o = if eye == 0 { s.left } else { s.right };
                let v = [
                    gain[eye][0][0] * o[0] + gain[eye][0][1] * o[1] + offset[eye][0],
                    gain[eye][1][0] * o[0] + gain[eye][1][1] * o[1] + offset[eye][1],
                ];
                sq_sum += (v[0] - target[0]).powi(2) + (v[1] - target[1]).powi(2);
                n_res += 1;
            }
        }
    }
    if n_res == 0 {
        return Err(Error::validation(format!(
            "underdetermined calibration: recording {} has no valid dwell samples",
            rec.recording_id
        )));
    }

    let model = CalibrationModel {
        subject_id: rec.subject_id.clone(),
        fitted_depth_cm: rec.target_depth_cm,
        gain,
        offset,
        fit_rmse_deg: (sq_sum / n_res as f64).sqrt(),
    };
    model.validate()?;
    Ok(model)
}

/// Maps a recording's optical series to visual-axis gaze; invalid (NaN)
/// samples stay NaN through the affine map.
pub fn apply_calibration(model: &CalibrationModel, rec: &Recording) -> [Vec<Dir>; 2] {
    let mut out = [
        Vec::with_capacity(rec.samples.len()),
        Vec::with_capacity(rec.samples.len()),
    ];
    for s in &rec.samples {
        out[0].push(model.map(0, s.left));
        out[1].push(model.map(1, s.right));
    }
    out
}

/// Per-sample average of the two eyes; NaN if either eye is NaN.
pub fn cyclopean_series(per_eye: &[Vec<Dir>; 2]) -> Vec<Dir> {
    per_eye[0]
        .iter()
        .zip(&per_eye[1])
        .map(|(l, r)| [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0])
        .collect()
}

/// Max pairwise angular distance among the window's valid samples.
fn dispersion_deg(series: &[Dir]) -> f64 {
    let valid: Vec<&Dir> = series.iter().filter(|d| !d[0].is_nan()).collect();
    let mut max = 0.0f64;
    for i in 0..valid.len() {
        for j in i + 1..valid.len() {
            max = max.max(angular_distance_deg(*valid[i], *valid[j]));
        }
    }
    max
}

fn included_windows<'a>(
    rec: &Recording,
    series: &'a [Vec<Dir>],
) -> Vec<(&'a [Dir], Dir)> {
    let mut out = Vec::new();
    for d in rec.closed_dwells() {
        let (lo, hi) = central_window(&d);
        for s in series {
            let win = &s[lo..hi];
            if dispersion_deg(win) < DISPERSION_LIMIT_DEG {
                out.push((win, d.target));
            }
        }
    }
    out
}

/// Median over (window x series) of the median angular gaze-to-target
/// offset, excluding windows with dispersion at or above 10 degrees. Pass
/// one cyclopean series for the binocular value, or a single eye's series
/// for a monocular one.
pub fn spatial_accuracy(rec: &Recording, series: &[Vec<Dir>]) -> Result<f64> {
    let mut window_medians = Vec::new();
    for (win, target) in included_windows(rec, series) {
        let mut offsets: Vec<f64> = win
            .iter()
            .filter(|g| !g[0].is_nan())
            .map(|&g| angular_distance_deg(g, target))
            .collect();
        if !offsets.is_empty() {
            window_medians.push(median(&mut offsets)?);
        }
    }
    if window_medians.is_empty() {
        return Err(Error::validation("no valid fixations".to_string()));
    }
    median(&mut window_medians)
}

/// Median over (window x series) of the RMS of consecutive-sample angular
/// distances, same window selection and exclusion as spatial_accuracy.
pub fn s2s_precision(rec: &Recording, series: &[Vec<Dir>]) -> Result<f64> {
    let mut window_values = Vec::new();
    for (win, _) in included_windows(rec, series) {
        let mut sq = 0.0;
        let mut n = 0usize;
        for pair in win.windows(2) {
            if pair[0][0].is_nan() || pair[1][0].is_nan() {
                continue;
            }
            sq += angular_distance_deg(pair[0], pair[1]).powi(2);
            n += 1;
        }
        if n > 0 {
            window_values.push((sq / n as f64).sqrt());
        }
    }
    if window_values.is_empty() {
        return Err(Error::validation(
            "no eligible consecutive sample pairs".to_string(),
        ));
    }
    median(&mut window_values)
}

pub struct QualityRow {
    pub recording_id: String,
    pub axis: &'static str,
    pub accuracy_deg: f64,
    pub precision_deg: f64,
}

/// Left / right / binocular quality rows for one recording's calibrated (or
/// optical) per-eye gaze.
pub fn quality_rows(rec: &Recording, per_eye: &[Vec<Dir>; 2]) -> Result<Vec<QualityRow>> {
    let cyclo = cyclopean_series(per_eye);
    let mut rows = Vec::new();
    for (axis, series) in [
        ("left", vec![per_eye[0].clone()]),
        ("right", vec![per_eye[1].clone()]),
        ("binocular", vec![cyclo]),
    ] {
        rows.push(QualityRow {
            recording_id: rec.recording_id.clone(),
            axis,
            accuracy_deg: spatial_accuracy(rec, &series)?,
            precision_deg: s2s_precision(rec, &series)?,
        });
    }
    Ok(rows)
}

pub fn render_quality_csv(rows: &[QualityRow]) -> String {
    let mut out = String::from("recording_id,axis,accuracy_deg,precision_deg\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.recording_id,
            r.axis,
            format_sig9(r.accuracy_deg),
            format_sig9(r.precision_deg)
        ));
    }
    out
}
