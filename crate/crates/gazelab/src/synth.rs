//! Synthetic oculomotor corpus generation.
//!
//! Each subject gets a persistent signature (angle kappa, a near-identity
//! affine distortion per eye, main-sequence saccade parameters, drift
//! amplitude, a noise multiplier). A recording is a jumping-dot schedule the
//! true visual axis follows via raised-cosine saccades plus slow sinusoidal
//! fixation drift; the emitted optical axis is the inverse of the subject's
//! per-eye affine map applied to (true gaze - kappa - vergence - offset),
//! plus a smooth per-recording bias field and white sensor noise scaled to
//! hit the configured pipeline quality targets. Everything is a pure
//! function of (config, seed).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calib::CalibrationModel;
use crate::domain::{
    assign_folds, Dataset, GazeSample, Recording, Split, SubjectRecord, Task, SAMPLE_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::geometry::{angular_distance_deg, vergence_term_deg, Dir, Eye};
use crate::util::{derive_seed, format_sig9, median, quantize_sig9};

/// Stable per-subject traits. The affine distortion maps visual-axis space to
/// the sensor's optical reading; kappa is the visual/optical axis offset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSignature {
    /// Per-eye kappa offset `[yaw, pitch]` degrees, indexed by [`Eye::index`].
    pub kappa: [Dir; 2],
    /// Per-eye 2x2 gain, row-major `[out][in]`, near identity.
    pub gain: [[[f64; 2]; 2]; 2],
    /// Per-eye constant offset in degrees.
    pub offset: [Dir; 2],
    /// Main-sequence peak-velocity ceiling in deg/s.
    pub vmax_deg_s: f64,
    /// Main-sequence amplitude constant in degrees.
    pub c_deg: f64,
    /// Fixation drift amplitude in degrees.
    pub drift_amp_deg: f64,
    /// Scales both pipeline noise targets for this subject.
    pub noise_mult: f64,
    /// Per-eye multiplicative sensor response change at the near (75 cm)
    /// depth; zero at the far depth. A per-depth affine fit absorbs it, so
    /// it only matters when a model is used at the other depth.
    pub depth_gain: [f64; 2],
}

impl SubjectSignature {
    pub fn validate(&self) -> Result<()> {
        for eye in 0..2 {
            for &k in &self.kappa[eye] {
                if !(0.5..=6.0).contains(&k.abs()) {
                    return Err(Error::validation(format!(
                        "kappa component {k} outside [0.5, 6] deg magnitude"
                    )));
                }
            }
            for r in 0..2 {
                for c in 0..2 {
                    let ident = if r == c { 1.0 } else { 0.0 };
                    if (self.gain[eye][r][c] - ident).abs() > 0.15 {
                        return Err(Error::validation(format!(
                            "gain entry {} further than 0.15 from identity",
                            self.gain[eye][r][c]
                        )));
                    }
                }
            }
        }
        if !(300.0..=700.0).contains(&self.vmax_deg_s) {
            return Err(Error::validation(format!(
                "vmax {} outside [300, 700] deg/s",
                self.vmax_deg_s
            )));
        }
        if !(5.0..=15.0).contains(&self.c_deg) {
            return Err(Error::validation(format!(
                "main-sequence constant {} outside [5, 15] deg",
                self.c_deg
            )));
        }
        if self.drift_amp_deg < 0.0 || self.noise_mult <= 0.0 {
            return Err(Error::validation(
                "drift amplitude must be >= 0 and noise multiplier > 0".to_string(),
            ));
        }
        for &dg in &self.depth_gain {
            if dg.abs() > 0.15 {
                return Err(Error::validation(format!(
                    "depth gain {dg} outside [-0.15, 0.15]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    New,
    Old,
}

impl PipelineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::New => "new",
            PipelineKind::Old => "old",
        }
    }

    pub fn parse(s: &str) -> Option<PipelineKind> {
        match s {
            "new" => Some(PipelineKind::New),
            "old" => Some(PipelineKind::Old),
            _ => None,
        }
    }
}

/// Signal-quality targets of a gaze-estimation pipeline generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineNoise {
    pub kind: PipelineKind,
    /// Target median fixation offset in degrees.
    pub accuracy_bias_deg: f64,
    /// Target sample-to-sample RMS deviation in degrees.
    pub s2s_rms_deg: f64,
}

impl PipelineNoise {
    pub fn new_pipeline() -> PipelineNoise {
        PipelineNoise {
            kind: PipelineKind::New,
            accuracy_bias_deg: 0.79,
            s2s_rms_deg: 0.20,
        }
    }

    pub fn old_pipeline() -> PipelineNoise {
        PipelineNoise {
            kind: PipelineKind::Old,
            accuracy_bias_deg: 1.07,
            s2s_rms_deg: 0.32,
        }
    }

    pub fn for_kind(kind: PipelineKind) -> PipelineNoise {
        match kind {
            PipelineKind::New => PipelineNoise::new_pipeline(),
            PipelineKind::Old => PipelineNoise::old_pipeline(),
        }
    }

    /// Zero-noise variant used by exact-recovery tests.
    pub fn noiseless() -> PipelineNoise {
        PipelineNoise {
            kind: PipelineKind::New,
            accuracy_bias_deg: 0.0,
            s2s_rms_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train_subjects: usize,
    pub n_test_subjects: usize,
    /// Random-saccade recordings per subject; >= 2 when evaluation needs
    /// disjoint enrollment/verification recordings.
    pub n_task_recordings: usize,
    pub task_duration_s: f64,
    pub dwell_s: f64,
    pub fov_half_deg: f64,
    pub ipd_mm: f64,
    pub folds: usize,
    /// Quantize emitted gaze/target values to the 9-significant-digit grid of
    /// the samples CSV, so in-memory and on-disk values are bit-identical.
    pub quantize: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            n_train_subjects: 40,
            n_test_subjects: 20,
            n_task_recordings: 2,
            task_duration_s: 25.0,
            dwell_s: 1.0,
            fov_half_deg: 12.0,
            ipd_mm: 63.0,
            folds: 10,
            quantize: true,
            seed: 0,
        }
    }
}

const TAG_SIGNATURE: u64 = 0x53;
const TAG_RECORDING: u64 = 0x52;
const TAG_FOLDS: u64 = 0x46;
const SUB_SCHEDULE: u64 = 1;
const SUB_DRIFT: u64 = 2;
const SUB_FIELD: u64 = 3;
const SUB_NOISE: u64 = 4;
const SUB_BLINK: u64 = 5;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

pub fn generate_subject_signature(seed: u64, subject_index: u64) -> SubjectSignature {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SIGNATURE, subject_index]));
    let mut kappa = [[0.0; 2]; 2];
    for eye in 0..2 {
        // Horizontal kappa points nasally: positive yaw left eye, negative
        // right; vertical component gets a random sign.
        let yaw_mag = uniform(&mut rng, 3.5, 5.5);
        kappa[eye][0] = if eye == Eye::Left.index() { yaw_mag } else { -yaw_mag };
        let pitch_mag = uniform(&mut rng, 0.5, 2.5);
        kappa[eye][1] = if rng.gen::<bool>() { pitch_mag } else { -pitch_mag };
    }
    let mut gain = [[[0.0; 2]; 2]; 2];
    let mut offset = [[0.0; 2]; 2];
    for eye in 0..2 {
        for r in 0..2 {
            for c in 0..2 {
                let ident = if r == c { 1.0 } else { 0.0 };
                let spread = if r == c { 0.10 } else { 0.05 };
                gain[eye][r][c] = ident + uniform(&mut rng, -spread, spread);
            }
        }
        offset[eye] = [uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)];
    }
    SubjectSignature {
        kappa,
        gain,
        offset,
        vmax_deg_s: uniform(&mut rng, 380.0, 680.0),
        c_deg: uniform(&mut rng, 6.0, 12.0),
        drift_amp_deg: uniform(&mut rng, 0.04, 0.22),
        noise_mult: uniform(&mut rng, 0.55, 1.45),
        depth_gain: [
            uniform(&mut rng, -0.12, 0.12),
            uniform(&mut rng, -0.12, 0.12),
        ],
    }
}

/// Main-sequence peak velocity for a saccade of the given amplitude:
/// Vmax * (1 - exp(-A/c)).
pub fn main_sequence_peak_velocity(sig: &SubjectSignature, amplitude_deg: f64) -> f64 {
    sig.vmax_deg_s * (1.0 - (-amplitude_deg / sig.c_deg).exp())
}

fn invert2(m: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-9 {
        return Err(Error::numeric("singular distortion matrix".to_string()));
    }
    Ok([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

fn mat2_apply(m: &[[f64; 2]; 2], v: Dir) -> Dir {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

struct Wave {
    /// Spatial frequency vector: 2*pi/wavelength times the unit direction.
    k: [f64; 2],
    /// Bias direction carried by this wave.
    dir: [f64; 2],
    phase: f64,
    amp: f64,
}

/// One eye's bias field: a sum of 4 low-spatial-frequency plane waves over
/// the field of view, evaluated at the current true gaze position.
struct BiasField {
    waves: Vec<Wave>,
}

impl BiasField {
    fn draw(rng: &mut ChaCha8Rng, fov_half_deg: f64) -> BiasField {
        let width = 2.0 * fov_half_deg;
        let waves = (0..4)
            .map(|_| {
                let spatial = uniform(rng, 0.0, std::f64::consts::TAU);
                let wavelength = uniform(rng, 4.0 * width, 8.0 * width);
                let bias = uniform(rng, 0.0, std::f64::consts::TAU);
                let amp = uniform(rng, 0.5, 1.0);
                let phase = uniform(rng, 0.0, std::f64::consts::TAU);
                let k_mag = std::f64::consts::TAU / wavelength;
                Wave {
                    k: [k_mag * spatial.cos(), k_mag * spatial.sin()],
                    dir: [bias.cos(), bias.sin()],
                    phase,
                    amp,
                }
            })
            .collect();
        BiasField { waves }
    }

    fn eval(&self, p: Dir) -> Dir {
        let mut out = [0.0; 2];
        for w in &self.waves {
            let s = w.amp * (w.k[0] * p[0] + w.k[1] * p[1] + w.phase).sin();
            out[0] += s * w.dir[0];
            out[1] += s * w.dir[1];
        }
        out
    }
}

struct Schedule {
    targets: Vec<Dir>,
    dwell_len: usize,
    n_samples: usize,
}

fn draw_schedule(rng: &mut ChaCha8Rng, cfg: &SynthConfig, task: Task) -> Result<Schedule> {
    let dwell_len = (cfg.dwell_s * SAMPLE_RATE_HZ).round() as usize;
    let n_samples = (cfg.task_duration_s * SAMPLE_RATE_HZ).round() as usize;
    if dwell_len == 0 {
        return Err(Error::validation(format!(
            "dwell length {} s is below one sample",
            cfg.dwell_s
        )));
    }
    let n_dwells = n_samples / dwell_len;
    if n_dwells == 0 {
        return Err(Error::validation(format!(
            "duration {} s too short for one {} s dwell",
            cfg.task_duration_s, cfg.dwell_s
        )));
    }
    // Random-saccade sessions vary their dot spread, so absolute velocity
    // scale is a session property, not a subject one. Calibration keeps the
    // full extent for well-conditioned fits.
    let extent = if task == Task::RandomSaccade {
        cfg.fov_half_deg * uniform(rng, 0.55, 1.0)
    } else {
        cfg.fov_half_deg
    };
    let targets = (0..n_dwells)
        .map(|_| {
            let mut t = [uniform(rng, -extent, extent), uniform(rng, -extent, extent)];
            if cfg.quantize {
                t = [quantize_sig9(t[0]), quantize_sig9(t[1])];
            }
            t
        })
        .collect();
    Ok(Schedule {
        targets,
        dwell_len,
        n_samples,
    })
}

/// True cyclopean visual-axis position at sample `i`, before drift.
fn trace_position(sched: &Schedule, sig: &SubjectSignature, i: usize) -> Dir {
    let k = (i / sched.dwell_len).min(sched.targets.len() - 1);
    if k == 0 {
        return sched.targets[0];
    }
    let t_in = (i - k * sched.dwell_len) as f64 / SAMPLE_RATE_HZ;
    let from = sched.targets[k - 1];
    let to = sched.targets[k];
    let delta = [to[0] - from[0], to[1] - from[1]];
    let amp = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    if amp < 1e-12 {
        return to;
    }
    let peak = main_sequence_peak_velocity(sig, amp);
    let dur = 2.0 * amp / peak;
    if t_in >= dur {
        return to;
    }
    // Raised-cosine velocity: position follows u - sin(2 pi u)/(2 pi).
    let u = t_in / dur;
    let g = u - (std::f64::consts::TAU * u).sin() / std::f64::consts::TAU;
    [from[0] + delta[0] * g, from[1] + delta[1] * g]
}

#[allow(clippy::too_many_arguments)]
pub fn generate_recording(
    sig: &SubjectSignature,
    subject_id: &str,
    recording_id: &str,
    task: Task,
    depth_cm: u32,
    pipeline: &PipelineNoise,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Recording> {
    if depth_cm != 75 && depth_cm != 200 {
        return Err(Error::validation(format!(
            "target depth {depth_cm} cm not in {{75, 200}}"
        )));
    }
    // Range invariants are a property of generated signatures; hand-built
    // edge-case signatures (zero kappa, zero drift) are legitimate inputs
    // here, so only numerical safety is enforced.

    let mut rng_schedule = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUB_SCHEDULE]));
    let sched = draw_schedule(&mut rng_schedule, cfg, task)?;
    let n = sched.n_samples;

    let mut rng_drift = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUB_DRIFT]));
    let drift_freq = [
        uniform(&mut rng_drift, 0.2, 0.5),
        uniform(&mut rng_drift, 0.2, 0.5),
    ];
    let drift_phase = [
        uniform(&mut rng_drift, 0.0, std::f64::consts::TAU),
        uniform(&mut rng_drift, 0.0, std::f64::consts::TAU),
    ];

    let mut rng_field = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUB_FIELD]));
    let fields = [
        BiasField::draw(&mut rng_field, cfg.fov_half_deg),
        BiasField::draw(&mut rng_field, cfg.fov_half_deg),
    ];

    // True cyclopean gaze: schedule trace plus conjugate sinusoidal drift.
    let mut true_gaze = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / SAMPLE_RATE_HZ;
        let base = trace_position(&sched, sig, i);
        true_gaze.push([
            base[0]
                + sig.drift_amp_deg * (std::f64::consts::TAU * drift_freq[0] * t + drift_phase[0]).sin(),
            base[1]
                + sig.drift_amp_deg * (std::f64::consts::TAU * drift_freq[1] * t + drift_phase[1]).sin(),
        ]);
    }

    // Scale the bias field so that, after ideal calibration, the cyclopean
    // residual at the closed-dwell targets has the target median magnitude.
    // Ideal calibration maps optical error f through the true gain, so the
    // normalization measures gain * field.
    let accuracy_target = pipeline.accuracy_bias_deg * sig.noise_mult;
    let field_scale = if accuracy_target > 0.0 {
        let closed = sched.targets.len().saturating_sub(1).max(1);
        let mut magnitudes: Vec<f64> = sched.targets[..closed]
            .iter()
            .map(|&p| {
                let l = mat2_apply(&sig.gain[0], fields[0].eval(p));
                let r = mat2_apply(&sig.gain[1], fields[1].eval(p));
                let cyclo = [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0];
                angular_distance_deg([p[0] + cyclo[0], p[1] + cyclo[1]], p)
            })
            .collect();
        let m = median(&mut magnitudes)?;
        if m < 1e-9 {
            return Err(Error::numeric(
                "degenerate bias field: near-zero median magnitude".to_string(),
            ));
        }
        accuracy_target / m
    } else {
        0.0
    };

    // Per-eye, per-axis white noise; the cyclopean average of two eyes then
    // has sigma/sqrt(2) per axis, giving a consecutive-sample angular RMS of
    // 2 * sigma/sqrt(2) = the configured s2s target.
    let noise_sigma = pipeline.s2s_rms_deg * sig.noise_mult / std::f64::consts::SQRT_2;
    let mut rng_noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUB_NOISE]));

    let vergence = [
        vergence_term_deg(Eye::Left, cfg.ipd_mm, depth_cm as f64),
        vergence_term_deg(Eye::Right, cfg.ipd_mm, depth_cm as f64),
    ];
    let gain_inv = [invert2(sig.gain[0])?, invert2(sig.gain[1])?];

    // Near-depth sensor response: scales the distorted signal (and its bias
    // field) but not the additive electronics noise, so per-depth fits
    // absorb it and fixation precision is depth-invariant.
    let depth_factor = [0, 1].map(|eye| {
        if depth_cm == 75 {
            1.0 + sig.depth_gain[eye]
        } else {
            1.0
        }
    });

    let mut per_eye = vec![[[0.0f64; 2]; 2]; n];
    for (i, stored) in per_eye.iter_mut().enumerate() {
        let v = true_gaze[i];
        for eye in 0..2 {
            let inner = [
                v[0] - sig.kappa[eye][0] - vergence[eye][0] - sig.offset[eye][0],
                v[1] - sig.kappa[eye][1] - vergence[eye][1] - sig.offset[eye][1],
            ];
            let mut o = mat2_apply(&gain_inv[eye], inner);
            if field_scale > 0.0 {
                let f = fields[eye].eval(v);
                o[0] += field_scale * f[0];
                o[1] += field_scale * f[1];
            }
            o[0] *= depth_factor[eye];
            o[1] *= depth_factor[eye];
            if noise_sigma > 0.0 {
                let n0: f64 = StandardNormal.sample(&mut rng_noise);
                let n1: f64 = StandardNormal.sample(&mut rng_noise);
                o[0] += noise_sigma * n0;
                o[1] += noise_sigma * n1;
            }
            if cfg.quantize {
                o = [quantize_sig9(o[0]), quantize_sig9(o[1])];
            }
            stored[eye] = o;
        }
    }

    // Blinks: about 0.2 % of samples invalidated in non-overlapping runs of
    // 5-15 consecutive samples.
    let mut invalid = vec![false; n];
    let blink_target = (0.002 * n as f64).round() as usize;
    if blink_target > 0 && n >= 5 {
        let mut rng_blink = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SUB_BLINK]));
        let mut placed = 0usize;
        let mut attempts = 0usize;
        while placed < blink_target && attempts < 1000 {
            attempts += 1;
            let len = rng_blink.gen_range(5..=15usize).min(n);
            let start = rng_blink.gen_range(0..=n - len);
            if invalid[start..start + len].iter().any(|&b| b) {
                continue;
            }
            for flag in &mut invalid[start..start + len] {
                *flag = true;
            }
            placed += len;
        }
    }

    let samples = (0..n)
        .map(|i| {
            let k = (i / sched.dwell_len).min(sched.targets.len() - 1);
            let (left, right, valid) = if invalid[i] {
                ([f64::NAN; 2], [f64::NAN; 2], false)
            } else {
                (per_eye[i][0], per_eye[i][1], true)
            };
            GazeSample {
                t: i as f64 / SAMPLE_RATE_HZ,
                left,
                right,
                target: sched.targets[k],
                valid,
            }
        })
        .collect();

    Ok(Recording {
        subject_id: subject_id.to_string(),
        recording_id: recording_id.to_string(),
        task,
        target_depth_cm: depth_cm,
        sample_rate_hz: SAMPLE_RATE_HZ,
        samples,
    })
}

/// The exact calibration implied by a subject's signature at a given depth:
/// gain = the true distortion (divided by the near-depth response factor),
/// offset = kappa + vergence + offset. Applying it to a noiseless recording
/// at the same depth reproduces the true visual axis.
pub fn ideal_calibration(
    subject_id: &str,
    sig: &SubjectSignature,
    depth_cm: u32,
    ipd_mm: f64,
) -> CalibrationModel {
    let mut gain = [[[0.0; 2]; 2]; 2];
    let mut offset = [[0.0; 2]; 2];
    for eye_enum in Eye::BOTH {
        let eye = eye_enum.index();
        let df = if depth_cm == 75 {
            1.0 + sig.depth_gain[eye]
        } else {
            1.0
        };
        for r in 0..2 {
            for c in 0..2 {
                gain[eye][r][c] = sig.gain[eye][r][c] / df;
            }
        }
        let verg = vergence_term_deg(eye_enum, ipd_mm, depth_cm as f64);
        offset[eye] = [
            sig.kappa[eye][0] + verg[0] + sig.offset[eye][0],
            sig.kappa[eye][1] + verg[1] + sig.offset[eye][1],
        ];
    }
    CalibrationModel {
        subject_id: subject_id.to_string(),
        fitted_depth_cm: depth_cm,
        gain,
        offset,
        fit_rmse_deg: 0.0,
    }
}

pub struct GeneratedCorpus {
    pub dataset: Dataset,
    /// Ground truth per subject, in dataset subject order. Written to the
    /// sidecar only; never read by training or evaluation code.
    pub signatures: Vec<(String, SubjectSignature)>,
}

pub fn generate_dataset(cfg: &SynthConfig, pipeline: &PipelineNoise) -> Result<GeneratedCorpus> {
    if cfg.n_train_subjects == 0 || cfg.n_test_subjects == 0 {
        return Err(Error::validation(
            "need at least one train and one test subject".to_string(),
        ));
    }
    if cfg.n_task_recordings == 0 {
        return Err(Error::validation(
            "need at least one task recording per subject".to_string(),
        ));
    }
    if cfg.task_duration_s < 25.0 {
        return Err(Error::validation(format!(
            "task duration {} s below the 25 s minimum",
            cfg.task_duration_s
        )));
    }

    let mut subjects = Vec::new();
    let mut split = std::collections::BTreeMap::new();
    let mut signatures = Vec::new();
    let total = cfg.n_train_subjects + cfg.n_test_subjects;
    for idx in 0..total {
        let (subject_id, subject_split) = if idx < cfg.n_train_subjects {
            (format!("tr{idx:03}"), Split::Train)
        } else {
            (format!("te{:03}", idx - cfg.n_train_subjects), Split::Test)
        };
        let sig = generate_subject_signature(cfg.seed, idx as u64);
        let rec_seed = |slot: u64| derive_seed(cfg.seed, &[TAG_RECORDING, idx as u64, slot]);
        let calibration_recordings = vec![
            generate_recording(
                &sig,
                &subject_id,
                &format!("{subject_id}_cal200"),
                Task::Calibration,
                200,
                pipeline,
                cfg,
                rec_seed(0),
            )?,
            generate_recording(
                &sig,
                &subject_id,
                &format!("{subject_id}_cal75"),
                Task::Calibration,
                75,
                pipeline,
                cfg,
                rec_seed(1),
            )?,
        ];
        let task_recordings = (0..cfg.n_task_recordings)
            .map(|j| {
                generate_recording(
                    &sig,
                    &subject_id,
                    &format!("{subject_id}_task{j}"),
                    Task::RandomSaccade,
                    200,
                    pipeline,
                    cfg,
                    rec_seed(2 + j as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        subjects.push(SubjectRecord {
            subject_id: subject_id.clone(),
            calibration_recordings,
            task_recordings,
        });
        split.insert(subject_id.clone(), subject_split);
        signatures.push((subject_id, sig));
    }

    let dataset = Dataset {
        subjects,
        split,
        folds: std::collections::BTreeMap::new(),
    };
    let dataset = assign_folds(&dataset, cfg.folds, derive_seed(cfg.seed, &[TAG_FOLDS]))?;
    dataset.validate()?;
    Ok(GeneratedCorpus {
        dataset,
        signatures,
    })
}

const SIGNATURES_HEADER: &str = "subject_id,left_kappa_yaw,left_kappa_pitch,right_kappa_yaw,right_kappa_pitch,left_g00,left_g01,left_g10,left_g11,left_off_yaw,left_off_pitch,right_g00,right_g01,right_g10,right_g11,right_off_yaw,right_off_pitch,vmax_deg_s,c_deg,drift_amp_deg,noise_mult,left_depth_gain,right_depth_gain";

pub fn write_signatures(path: &Path, signatures: &[(String, SubjectSignature)]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SIGNATURES_HEADER);
    out.push('\n');
    for (id, sig) in signatures {
        let mut fields: Vec<f64> = Vec::with_capacity(20);
        fields.extend(sig.kappa[0]);
        fields.extend(sig.kappa[1]);
        for eye in 0..2 {
            fields.extend([
                sig.gain[eye][0][0],
                sig.gain[eye][0][1],
                sig.gain[eye][1][0],
                sig.gain[eye][1][1],
            ]);
            fields.extend(sig.offset[eye]);
        }
        fields.extend([sig.vmax_deg_s, sig.c_deg, sig.drift_amp_deg, sig.noise_mult]);
        fields.extend(sig.depth_gain);
        let _ = write!(out, "{id}");
        for f in fields {
            let _ = write!(out, ",{}", format_sig9(f));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_signatures(path: &Path) -> Result<Vec<(String, SubjectSignature)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SIGNATURES_HEADER => {}
        _ => {
            return Err(Error::malformed(
                path,
                1,
                "unexpected signatures header".to_string(),
            ))
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 23 {
            return Err(Error::malformed(
                path,
                lineno,
                format!("expected 23 columns, got {}", cols.len()),
            ));
        }
        let vals: Vec<f64> = cols[1..]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| Error::malformed(path, lineno, format!("bad float {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((
            cols[0].to_string(),
            SubjectSignature {
                kappa: [[vals[0], vals[1]], [vals[2], vals[3]]],
                gain: [
                    [[vals[4], vals[5]], [vals[6], vals[7]]],
                    [[vals[10], vals[11]], [vals[12], vals[13]]],
                ],
                offset: [[vals[8], vals[9]], [vals[14], vals[15]]],
                vmax_deg_s: vals[16],
                c_deg: vals[17],
                drift_amp_deg: vals[18],
                noise_mult: vals[19],
                depth_gain: [vals[20], vals[21]],
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::save_dataset;
    use crate::geometry::vergence_center_deg;

    fn quick_cfg() -> SynthConfig {
        SynthConfig {
            task_duration_s: 30.0,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn signatures_are_deterministic_and_in_bounds() {
        let a = generate_subject_signature(11, 3);
        let b = generate_subject_signature(11, 3);
        assert_eq!(a, b);
        let mut seen = Vec::new();
        for i in 0..1000 {
            let s = generate_subject_signature(11, i);
            s.validate().unwrap();
            seen.push(format!("{s:?}"));
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 1000, "signature collision");
    }

    #[test]
    fn thirty_seconds_is_2160_samples() {
        let sig = generate_subject_signature(1, 0);
        let rec = generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            200,
            &PipelineNoise::new_pipeline(),
            &quick_cfg(),
            99,
        )
        .unwrap();
        assert_eq!(rec.samples.len(), 2160);
        rec.validate().unwrap();
        // Timestamps are exact sample_index / 72.
        assert_eq!(rec.samples[100].t, 100.0 / 72.0);
    }

    #[test]
    fn recordings_are_bitwise_deterministic() {
        let sig = generate_subject_signature(1, 0);
        let mk = || {
            generate_recording(
                &sig,
                "s",
                "r",
                Task::Calibration,
                75,
                &PipelineNoise::old_pipeline(),
                &quick_cfg(),
                42,
            )
            .unwrap()
        };
        let a = mk();
        let b = mk();
        assert!(a.samples.len() == b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.t.to_bits(), y.t.to_bits());
            assert_eq!(x.left[0].to_bits(), y.left[0].to_bits());
            assert_eq!(x.right[1].to_bits(), y.right[1].to_bits());
            assert_eq!(x.valid, y.valid);
        }
    }

    #[test]
    fn emitted_values_sit_on_the_nine_digit_grid() {
        let sig = generate_subject_signature(5, 2);
        let rec = generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            200,
            &PipelineNoise::new_pipeline(),
            &quick_cfg(),
            123,
        )
        .unwrap();
        for s in rec.samples.iter().filter(|s| s.valid) {
            for v in s.left.iter().chain(s.right.iter()).chain(s.target.iter()) {
                assert_eq!(v.to_bits(), quantize_sig9(*v).to_bits());
            }
        }
    }

    #[test]
    fn blinks_invalidate_short_runs_with_nan_gaze() {
        let sig = generate_subject_signature(2, 0);
        let rec = generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            200,
            &PipelineNoise::new_pipeline(),
            &quick_cfg(),
            77,
        )
        .unwrap();
        let n = rec.samples.len();
        let invalid: Vec<usize> = (0..n).filter(|&i| !rec.samples[i].valid).collect();
        let expect = (0.002 * n as f64).round() as usize;
        assert!(!invalid.is_empty());
        assert!(invalid.len() >= expect && invalid.len() <= expect + 14);
        // Runs of 5..=15; NaN gaze with target intact.
        let mut runs = Vec::new();
        let mut run = 1usize;
        for w in invalid.windows(2) {
            if w[1] == w[0] + 1 {
                run += 1;
            } else {
                runs.push(run);
                run = 1;
            }
        }
        runs.push(run);
        assert!(runs.iter().all(|&r| (5..=15).contains(&r)), "{runs:?}");
        for &i in &invalid {
            assert!(rec.samples[i].left[0].is_nan());
            assert!(rec.samples[i].right[1].is_nan());
            assert!(rec.samples[i].target[0].is_finite());
        }
    }

    #[test]
    fn noiseless_recording_inverts_exactly_under_ideal_calibration() {
        let sig = generate_subject_signature(3, 1);
        let mut sig = sig;
        sig.drift_amp_deg = 0.0;
        let cfg = SynthConfig {
            quantize: false,
            ..quick_cfg()
        };
        let rec = generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            200,
            &PipelineNoise::noiseless(),
            &cfg,
            5,
        )
        .unwrap();
        let model = ideal_calibration("s", &sig, 200, cfg.ipd_mm);
        // During settled dwell samples the recovered visual axis equals the
        // target exactly (modulo f64 arithmetic).
        for d in rec.closed_dwells() {
            let lo = d.start + (0.4 * (d.end - d.start) as f64) as usize;
            for i in lo..d.end {
                let s = &rec.samples[i];
                for (eye, opt) in [s.left, s.right].into_iter().enumerate() {
                    let v = [
                        model.gain[eye][0][0] * opt[0]
                            + model.gain[eye][0][1] * opt[1]
                            + model.offset[eye][0],
                        model.gain[eye][1][0] * opt[0]
                            + model.gain[eye][1][1] * opt[1]
                            + model.offset[eye][1],
                    ];
                    assert!(
                        (v[0] - s.target[0]).abs() < 1e-9 && (v[1] - s.target[1]).abs() < 1e-9,
                        "residual {:?} at sample {i}",
                        [v[0] - s.target[0], v[1] - s.target[1]]
                    );
                }
            }
        }
    }

    #[test]
    fn ideal_calibrations_differ_by_the_analytic_vergence_delta() {
        let sig = generate_subject_signature(9, 4);
        let m75 = ideal_calibration("s", &sig, 75, 63.0);
        let m200 = ideal_calibration("s", &sig, 200, 63.0);
        let delta = vergence_center_deg(63.0, 75.0) - vergence_center_deg(63.0, 200.0);
        let left = m75.offset[0][0] - m200.offset[0][0];
        let right = m75.offset[1][0] - m200.offset[1][0];
        assert!((left - delta).abs() < 1e-12);
        assert!((right + delta).abs() < 1e-12);
        assert_eq!(m75.offset[0][1], m200.offset[0][1]);
    }

    #[test]
    fn main_sequence_is_monotone_and_matches_measured_peaks() {
        let mut sig = generate_subject_signature(4, 0);
        sig.drift_amp_deg = 0.0;
        // Analytic peak velocity is strictly increasing in amplitude.
        let mut last = 0.0;
        for a in 1..40 {
            let v = main_sequence_peak_velocity(&sig, a as f64);
            assert!(v > last);
            last = v;
        }
        // Measured peak (finite difference of the noiseless trace) stays
        // within sampling error of the analytic value per saccade.
        let cfg = SynthConfig {
            quantize: false,
            ..quick_cfg()
        };
        let rec = generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            200,
            &PipelineNoise::noiseless(),
            &cfg,
            13,
        )
        .unwrap();
        let dwells = rec.dwells();
        for pair in dwells.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let amp = angular_distance_deg(a.target, b.target);
            if amp < 2.0 {
                continue;
            }
            let analytic = main_sequence_peak_velocity(&sig, {
                let d = [b.target[0] - a.target[0], b.target[1] - a.target[1]];
                (d[0] * d[0] + d[1] * d[1]).sqrt()
            });
            let mut measured: f64 = 0.0;
            for i in b.start.saturating_sub(1)..(b.start + 30).min(rec.samples.len() - 1) {
                let d = [
                    rec.samples[i + 1].left[0] - rec.samples[i].left[0],
                    rec.samples[i + 1].left[1] - rec.samples[i].left[1],
                ];
                let g = mat2_apply(&sig.gain[0], d);
                let speed = (g[0] * g[0] + g[1] * g[1]).sqrt() * SAMPLE_RATE_HZ;
                measured = measured.max(speed);
            }
            assert!(
                measured <= analytic * 1.001 && measured >= analytic * 0.80,
                "amp {amp}: measured {measured} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn dataset_has_expected_shape_and_is_reproducible() {
        let cfg = SynthConfig {
            n_train_subjects: 4,
            n_test_subjects: 3,
            n_task_recordings: 1,
            folds: 3,
            task_duration_s: 25.0,
            seed: 21,
            ..SynthConfig::default()
        };
        let pipeline = PipelineNoise::new_pipeline();
        let a = generate_dataset(&cfg, &pipeline).unwrap();
        assert_eq!(a.dataset.subjects.len(), 7);
        let n_recs: usize = a
            .dataset
            .subjects
            .iter()
            .map(|s| s.all_recordings().count())
            .sum();
        assert_eq!(n_recs, 21);
        for s in &a.dataset.subjects {
            let depths: Vec<u32> = s
                .calibration_recordings
                .iter()
                .map(|r| r.target_depth_cm)
                .collect();
            assert_eq!(depths, vec![200, 75]);
        }
        let b = generate_dataset(&cfg, &pipeline).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_dataset(&a.dataset, dir_a.path()).unwrap();
        save_dataset(&b.dataset, dir_b.path()).unwrap();
        let ma = std::fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(ma, mb);
        let fa = std::fs::read(dir_a.path().join("samples/te000_task0.csv")).unwrap();
        let fb = std::fs::read(dir_b.path().join("samples/te000_task0.csv")).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn signature_sidecar_round_trips() {
        let sigs: Vec<(String, SubjectSignature)> = (0..5)
            .map(|i| (format!("s{i}"), generate_subject_signature(2, i)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signatures.csv");
        write_signatures(&path, &sigs).unwrap();
        let loaded = read_signatures(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        for ((ida, a), (idb, b)) in sigs.iter().zip(&loaded) {
            assert_eq!(ida, idb);
            // 9 significant digits: components agree to ~1e-8 relative.
            assert!((a.vmax_deg_s - b.vmax_deg_s).abs() < 1e-5);
            assert!((a.kappa[0][0] - b.kappa[0][0]).abs() < 1e-7);
            assert!((a.gain[1][0][1] - b.gain[1][0][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_depth_and_short_duration_error() {
        let sig = generate_subject_signature(1, 0);
        let err = generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            100,
            &PipelineNoise::new_pipeline(),
            &quick_cfg(),
            1,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let cfg = SynthConfig {
            task_duration_s: 0.5,
            dwell_s: 1.0,
            ..SynthConfig::default()
        };
        assert!(generate_recording(
            &sig,
            "s",
            "r",
            Task::RandomSaccade,
            200,
            &PipelineNoise::new_pipeline(),
            &cfg,
            1
        )
        .is_err());
    }
}
