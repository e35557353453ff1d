//! C ABI for the gaze biometrics laboratory: load or synthesize corpora,
//! load trained embedder checkpoints, score single verification attempts,
//! and run fold evaluations.
//!
//! Conventions: handles are opaque and freed by their `_free` function;
//! functions return `GAZELAB_OK` (0) on success, `GAZELAB_ERR_INVALID` (2)
//! for bad arguments or validation failures, and `GAZELAB_ERR_RUNTIME` (3)
//! for I/O or numeric failures; on failure `gazelab_last_error` describes
//! what went wrong (per thread, valid until the next failing call).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gazelab::biometrics::score_all;
use gazelab::embedder::{load_checkpoint, Checkpoint};
use gazelab::error::{Error, Result};
use gazelab::harness::{
    evaluate, prepare_corpus, resolve_verification_calibration, segments_for, summarize,
    PreparedCorpus, Scenario, VERIFICATION_SECONDS as VERIFICATION_SECONDS_U32,
};
use gazelab::preprocess::Axis;
use gazelab::synth::{generate_dataset, PipelineKind, PipelineNoise, SynthConfig};

/// Success.
pub const GAZELAB_OK: i32 = 0;
/// Bad arguments, malformed files, or failed validation.
pub const GAZELAB_ERR_INVALID: i32 = 2;
/// I/O or numeric failure.
pub const GAZELAB_ERR_RUNTIME: i32 = 3;

/// Uncalibrated gaze channels only.
pub const GAZELAB_AXIS_OPTICAL: i32 = 0;
/// Calibrated gaze channels only.
pub const GAZELAB_AXIS_VISUAL: i32 = 1;
/// Optical and calibrated channels stacked.
pub const GAZELAB_AXIS_BOTH: i32 = 2;

/// Current-generation pipeline noise profile.
pub const GAZELAB_PIPELINE_NEW: i32 = 0;
/// Legacy pipeline noise profile.
pub const GAZELAB_PIPELINE_OLD: i32 = 1;

/// Verification calibrated with the verifier's model from the enrollment depth.
pub const GAZELAB_SCENARIO_S1: i32 = 1;
/// Verification calibrated with the verifier's model from the other depth.
pub const GAZELAB_SCENARIO_S2: i32 = 2;
/// Verification calibrated with the claimed user's model (experimental).
pub const GAZELAB_SCENARIO_S3: i32 = 3;

/// Gaze seconds consumed per enrollment or verification attempt.
// Literal so the generated header gets a number; tests pin it to the harness.
pub const GAZELAB_VERIFICATION_SECONDS: u32 = 20;

/// A loaded corpus with its fitted per-subject calibration models.
pub struct GazelabDataset {
    inner: PreparedCorpus,
}

/// A trained embedder checkpoint.
pub struct GazelabModel {
    inner: Checkpoint,
}

/// Fold-aggregated verification metrics, as fractions in [0, 1].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazelabMetrics {
    pub eer_mean: f64,
    pub eer_sd: f64,
    pub frr_mean: f64,
    pub frr_sd: f64,
    /// Nonzero when some fold could not resolve the FAR target.
    pub unresolved_far: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn fail(err: &Error) -> i32 {
    set_error(&err.to_string());
    err.exit_code()
}

fn invalid(message: &str) -> i32 {
    set_error(message);
    GAZELAB_ERR_INVALID
}

/// Run a body that may panic; panics become GAZELAB_ERR_RUNTIME.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {what}"));
            GAZELAB_ERR_RUNTIME
        }
    }
}

unsafe fn arg_str<'a>(ptr: *const c_char, what: &str) -> std::result::Result<&'a str, i32> {
    if ptr.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(ptr: *const T, what: &str) -> std::result::Result<&'a T, i32> {
    ptr.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> std::result::Result<&'a mut T, i32> {
    ptr.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

fn scenario_from(code: i32, experimental: i32) -> Result<Scenario> {
    let scenario = match code {
        GAZELAB_SCENARIO_S1 => Scenario::S1,
        GAZELAB_SCENARIO_S2 => Scenario::S2,
        GAZELAB_SCENARIO_S3 => Scenario::S3,
        other => {
            return Err(Error::validation(format!("unknown scenario code {other}")));
        }
    };
    if scenario == Scenario::S3 && experimental == 0 {
        return Err(Error::validation(
            "scenario S3 is experimental; pass a nonzero experimental flag",
        ));
    }
    Ok(scenario)
}

fn pipeline_from(code: i32) -> Result<PipelineKind> {
    match code {
        GAZELAB_PIPELINE_NEW => Ok(PipelineKind::New),
        GAZELAB_PIPELINE_OLD => Ok(PipelineKind::Old),
        other => Err(Error::validation(format!("unknown pipeline code {other}"))),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gazelab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gazelab_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Synthesize a corpus in memory and fit its calibration models. Counts of
/// zero are rejected; `task_recordings` must be at least 2 for evaluation.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gazelab_dataset_generate(
    seed: u64,
    train_subjects: usize,
    test_subjects: usize,
    task_recordings: usize,
    folds: usize,
    pipeline: i32,
    out: *mut *mut GazelabDataset,
) -> i32 {
    guarded(|| {
        let out = match out_ref(out, "out") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let kind = match pipeline_from(pipeline) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let cfg = SynthConfig {
            n_train_subjects: train_subjects,
            n_test_subjects: test_subjects,
            n_task_recordings: task_recordings,
            folds,
            seed,
            ..SynthConfig::default()
        };
        let corpus = match generate_dataset(&cfg, &PipelineNoise::for_kind(kind))
            .and_then(|c| prepare_corpus(c.dataset))
        {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        *out = Box::into_raw(Box::new(GazelabDataset { inner: corpus }));
        GAZELAB_OK
    })
}

/// Load a dataset directory written by the CLI and fit its calibration
/// models.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gazelab_dataset_load(
    dir: *const c_char,
    out: *mut *mut GazelabDataset,
) -> i32 {
    guarded(|| {
        let out = match out_ref(out, "out") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let dir = match arg_str(dir, "dir") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let corpus = match gazelab::domain::load_dataset(Path::new(dir)).and_then(prepare_corpus) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        *out = Box::into_raw(Box::new(GazelabDataset { inner: corpus }));
        GAZELAB_OK
    })
}

/// Free a dataset handle. A null handle is a no-op.
///
/// # Safety
/// `ds` must be a pointer returned by a dataset constructor, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gazelab_dataset_free(ds: *mut GazelabDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Subject and fold counts of a dataset. Any output pointer may be null to
/// skip that count.
///
/// # Safety
/// `ds` must be a live dataset handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gazelab_dataset_counts(
    ds: *const GazelabDataset,
    train_subjects: *mut usize,
    test_subjects: *mut usize,
    folds: *mut usize,
) -> i32 {
    guarded(|| {
        let ds = match arg_ref(ds, "dataset") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let dataset = &ds.inner.dataset;
        if let Some(slot) = train_subjects.as_mut() {
            *slot = dataset.subject_ids_in(gazelab::domain::Split::Train).len();
        }
        if let Some(slot) = test_subjects.as_mut() {
            *slot = dataset.subject_ids_in(gazelab::domain::Split::Test).len();
        }
        if let Some(slot) = folds.as_mut() {
            *slot = dataset.fold_count();
        }
        GAZELAB_OK
    })
}

/// Load a trained checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn gazelab_model_load(path: *const c_char, out: *mut *mut GazelabModel) -> i32 {
    guarded(|| {
        let out = match out_ref(out, "out") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let path = match arg_str(path, "path") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let ckpt = match load_checkpoint(Path::new(path)) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        *out = Box::into_raw(Box::new(GazelabModel { inner: ckpt }));
        GAZELAB_OK
    })
}

/// Free a model handle. A null handle is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by `gazelab_model_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gazelab_model_free(model: *mut GazelabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Axis code, filter flag, and embedding width of a model. Any output
/// pointer may be null to skip that field.
///
/// # Safety
/// `model` must be a live model handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gazelab_model_info(
    model: *const GazelabModel,
    axis: *mut i32,
    filter_on: *mut i32,
    embedding_dim: *mut usize,
) -> i32 {
    guarded(|| {
        let model = match arg_ref(model, "model") {
            Ok(v) => v,
            Err(code) => return code,
        };
        if let Some(slot) = axis.as_mut() {
            *slot = match model.inner.axis {
                Axis::Optical => GAZELAB_AXIS_OPTICAL,
                Axis::Visual => GAZELAB_AXIS_VISUAL,
                Axis::Both => GAZELAB_AXIS_BOTH,
            };
        }
        if let Some(slot) = filter_on.as_mut() {
            *slot = model.inner.filter_on as i32;
        }
        if let Some(slot) = embedding_dim.as_mut() {
            *slot = model.inner.config.embedding_dim;
        }
        GAZELAB_OK
    })
}

fn single_attempt_similarity(
    model: &Checkpoint,
    corpus: &PreparedCorpus,
    claimed: &str,
    actual: &str,
    scenario: Scenario,
) -> Result<f64> {
    let n_segments = segments_for(VERIFICATION_SECONDS_U32)?;
    let ctx = gazelab::biometrics::EmbedContext {
        config: &model.config,
        params: &model.params,
        axis: model.axis,
        filter_on: model.filter_on,
        stats: &model.norm,
    };
    let need = |subject: &str, index: usize| -> Result<&gazelab::domain::Recording> {
        let record = corpus.dataset.subject(subject)?;
        record.task_recordings.get(index).ok_or_else(|| {
            Error::validation(format!(
                "subject {subject} has {} task recording(s); need {}",
                record.task_recordings.len(),
                index + 1
            ))
        })
    };
    let models_for = |m: &gazelab::calib::CalibrationModel| -> Vec<gazelab::calib::CalibrationModel> {
        if model.axis == Axis::Optical {
            Vec::new()
        } else {
            vec![m.clone()]
        }
    };
    let enroll_model = corpus.models.get(claimed, 200)?;
    let enroll_centroid = gazelab::biometrics::centroid_embedding(
        need(claimed, 0)?,
        &ctx,
        &models_for(enroll_model),
        n_segments,
    )?;
    let verify_model = resolve_verification_calibration(scenario, claimed, actual, &corpus.models)?;
    let verify_centroid = gazelab::biometrics::centroid_embedding(
        need(actual, 1)?,
        &ctx,
        &models_for(verify_model),
        n_segments,
    )?;
    let enroll_map = std::collections::BTreeMap::from([(claimed.to_string(), enroll_centroid)]);
    let verify_map = std::collections::BTreeMap::from([(actual.to_string(), verify_centroid)]);
    let set = score_all(&enroll_map, &verify_map)?;
    Ok(set.scores[0].similarity)
}

/// Score one verification attempt: the subject `claimed` is enrolled from
/// their first task recording, the subject `actual` verifies with their
/// second, calibrated per the scenario. Higher similarity means accept.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_similarity` writable.
#[no_mangle]
pub unsafe extern "C" fn gazelab_verify_score(
    model: *const GazelabModel,
    ds: *const GazelabDataset,
    claimed_subject: *const c_char,
    actual_subject: *const c_char,
    scenario: i32,
    experimental: i32,
    out_similarity: *mut f64,
) -> i32 {
    guarded(|| {
        let model = match arg_ref(model, "model") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let ds = match arg_ref(ds, "dataset") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let claimed = match arg_str(claimed_subject, "claimed_subject") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let actual = match arg_str(actual_subject, "actual_subject") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let out = match out_ref(out_similarity, "out_similarity") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let scenario = match scenario_from(scenario, experimental) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        match single_attempt_similarity(&model.inner, &ds.inner, claimed, actual, scenario) {
            Ok(similarity) => {
                *out = similarity;
                GAZELAB_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Evaluate a model over the dataset's test folds and aggregate the per-fold
/// equal-error rate and the false-rejection rate at `far_target`.
///
/// # Safety
/// Handles must be live; `out` must point to writable metrics storage.
#[no_mangle]
pub unsafe extern "C" fn gazelab_evaluate(
    model: *const GazelabModel,
    ds: *const GazelabDataset,
    scenario: i32,
    experimental: i32,
    far_target: f64,
    out: *mut GazelabMetrics,
) -> i32 {
    guarded(|| {
        let model = match arg_ref(model, "model") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let ds = match arg_ref(ds, "dataset") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let out = match out_ref(out, "out") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let scenario = match scenario_from(scenario, experimental) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let result = evaluate(
            scenario,
            VERIFICATION_SECONDS_U32,
            &ds.inner,
            &model.inner,
            far_target,
        )
        .and_then(|eval| summarize(scenario.as_str(), &eval.per_fold, 0.0));
        match result {
            Ok(r) => {
                *out = GazelabMetrics {
                    eer_mean: r.eer_mean,
                    eer_sd: r.eer_sd,
                    frr_mean: r.frr_mean,
                    frr_sd: r.frr_sd,
                    unresolved_far: r.unresolved_far as i32,
                };
                GAZELAB_OK
            }
            Err(e) => fail(&e),
        }
    })
}
