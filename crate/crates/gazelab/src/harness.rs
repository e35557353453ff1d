//! Experiment harness: factor grid, verification scenarios, end-to-end cell
//! runs, and report rendering.
//!
//! A cell of the factor grid trains one embedder on the train split (training
//! never depends on the scenario) and evaluates it fold by fold on the test
//! split. Scenarios differ solely in which fitted calibration produces the
//! verification-time visual channels; optical channels never touch
//! calibration, so axis O is scenario-invariant by construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use crate::biometrics::{
    aggregate_folds, centroid_embedding, eer, frr_at_far, render_metrics_csv, render_scores_csv,
    score_all, EmbedContext, FoldMetrics, ScoreSet,
};
use crate::calib::{fit_calibration, CalibrationModel};
use crate::domain::{Dataset, Split, SAMPLE_RATE_HZ};
use crate::embedder::{
    load_checkpoint, save_checkpoint, Activation, Checkpoint, EmbedderConfig,
};
use crate::error::{Error, Result};
use crate::preprocess::{apply_norm, assemble_raw, fit_norm_stats, Axis, RawWindow, WINDOW_LEN};
use crate::synth::PipelineKind;
use crate::trainer::{
    render_history_csv, train, HistoryRow, MsLossConfig, TrainConfig, WindowPool,
};
use crate::util::{derive_seed, format_sig9};

/// Benchmark operating point: false accepts at 1 in 50,000.
pub const FAR_TARGET: f64 = 2e-5;
/// Gaze seconds consumed per enrollment or verification attempt.
pub const VERIFICATION_SECONDS: u32 = 20;

const TAG_TRAIN: u64 = 0x5452;
/// Seed domain for datasets a grid run synthesizes per pipeline.
pub const TAG_GEN: u64 = 0x47;

/// Stable small code per pipeline, used in seed derivation.
pub fn pipeline_code(p: PipelineKind) -> u64 {
    match p {
        PipelineKind::New => 0,
        PipelineKind::Old => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Verification gaze calibrated with the verifying user's model fitted at
    /// the enrollment depth.
    S1,
    /// Verification gaze calibrated with the verifying user's model fitted at
    /// the other target depth.
    S2,
    /// Verification gaze calibrated with the claimed (enrolled) user's model;
    /// experimental.
    S3,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
            Scenario::S3 => "S3",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            other => Err(Error::validation(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibTraining {
    /// Training-time visual channels from both fitted depths.
    All,
    /// Training-time visual channels from the 200 cm model only.
    Single,
}

impl CalibTraining {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibTraining::All => "all",
            CalibTraining::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Result<CalibTraining> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(CalibTraining::All),
            "single" => Ok(CalibTraining::Single),
            other => Err(Error::validation(format!(
                "unknown calibration-training mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// 100 epochs, 16 x 16 minibatches before scaling.
    Config1,
    /// 1000 epochs, 32 x 32 minibatches before scaling.
    Config2,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Config1 => "config1",
            Regime::Config2 => "config2",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s.to_ascii_lowercase().as_str() {
            "config1" | "1" => Ok(Regime::Config1),
            "config2" | "2" => Ok(Regime::Config2),
            other => Err(Error::validation(format!("unknown regime {other:?}"))),
        }
    }
}

pub fn parse_filter(s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::validation(format!(
            "filter must be \"on\" or \"off\", got {other:?}"
        ))),
    }
}

pub fn filter_str(filter_on: bool) -> &'static str {
    if filter_on {
        "on"
    } else {
        "off"
    }
}

pub fn parse_pipeline(s: &str) -> Result<PipelineKind> {
    PipelineKind::parse(&s.to_ascii_lowercase())
        .ok_or_else(|| Error::validation(format!("unknown pipeline {s:?}")))
}

/// One cell of the factor grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentSpec {
    pub exp_id: String,
    pub scenario: Scenario,
    pub calib_training: CalibTraining,
    pub pipeline: PipelineKind,
    pub axis: Axis,
    pub regime: Regime,
    pub filter_on: bool,
    pub verification_seconds: u32,
}

impl ExperimentSpec {
    pub fn validate(&self, allow_experimental: bool) -> Result<()> {
        if self.exp_id.is_empty() {
            return Err(Error::validation("experiment id must be non-empty"));
        }
        if self.scenario == Scenario::S3 && !allow_experimental {
            return Err(Error::validation(
                "scenario S3 is experimental; pass --experimental-s3 to run it",
            ));
        }
        segments_for(self.verification_seconds)?;
        Ok(())
    }

    /// Everything training depends on; the scenario is deliberately absent.
    pub fn training_key(&self) -> String {
        format!(
            "{}-{}-{}-{}-{}",
            self.calib_training.as_str(),
            self.pipeline.as_str(),
            self.axis.as_str(),
            self.regime.as_str(),
            filter_str(self.filter_on)
        )
    }

    pub fn n_segments(&self) -> Result<usize> {
        segments_for(self.verification_seconds)
    }
}

/// Whole windows per verification attempt; the duration must tile exactly.
pub fn segments_for(verification_seconds: u32) -> Result<usize> {
    let samples = verification_seconds as f64 * SAMPLE_RATE_HZ;
    let n = samples / WINDOW_LEN as f64;
    if n < 1.0 || n.fract() != 0.0 {
        return Err(Error::validation(format!(
            "verification duration {verification_seconds} s is not a positive multiple of the {} s window",
            WINDOW_LEN as f64 / SAMPLE_RATE_HZ
        )));
    }
    Ok(n as usize)
}

/// Aggregated metrics of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub exp_id: String,
    pub eer_mean: f64,
    pub eer_sd: f64,
    pub frr_mean: f64,
    pub frr_sd: f64,
    /// True when any fold could not resolve the FAR target.
    pub unresolved_far: bool,
    /// Wall-clock seconds, including training when this cell triggered it.
    pub runtime_s: f64,
}

impl ExperimentResult {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.eer_mean) && in_unit(self.frr_mean)) {
            return Err(Error::validation(format!(
                "experiment {} has metrics outside [0, 1]",
                self.exp_id
            )));
        }
        if !(self.eer_sd >= 0.0 && self.frr_sd >= 0.0) {
            return Err(Error::validation(format!(
                "experiment {} has a negative fold SD",
                self.exp_id
            )));
        }
        Ok(())
    }
}

/// Fitted calibration models for every subject at both target depths.
#[derive(Debug, Clone)]
pub struct CalibModelSet {
    models: BTreeMap<(String, u32), CalibrationModel>,
}

impl CalibModelSet {
    pub fn fit_all(dataset: &Dataset) -> Result<CalibModelSet> {
        let mut models = BTreeMap::new();
        for subject in &dataset.subjects {
            for depth in [200u32, 75] {
                let rec = subject.calibration_at(depth)?;
                let model = fit_calibration(rec)?;
                models.insert((subject.subject_id.clone(), depth), model);
            }
        }
        Ok(CalibModelSet { models })
    }

    pub fn get(&self, subject: &str, depth_cm: u32) -> Result<&CalibrationModel> {
        self.models
            .get(&(subject.to_string(), depth_cm))
            .ok_or_else(|| {
                Error::validation(format!(
                    "missing calibration model for subject {subject} at {depth_cm} cm"
                ))
            })
    }

    pub fn insert(&mut self, model: CalibrationModel) {
        self.models
            .insert((model.subject_id.clone(), model.fitted_depth_cm), model);
    }
}

/// Calibration used to produce verification-time visual channels. Enrollment
/// always uses the enrolled subject's 200 cm model; this resolves the
/// verification side.
pub fn resolve_verification_calibration<'a>(
    scenario: Scenario,
    claimed_subject: &str,
    actual_subject: &str,
    models: &'a CalibModelSet,
) -> Result<&'a CalibrationModel> {
    let (subject, depth) = match scenario {
        Scenario::S1 => (actual_subject, 200),
        Scenario::S2 => (actual_subject, 75),
        Scenario::S3 => (claimed_subject, 200),
    };
    models.get(subject, depth)
}

/// A dataset with its fitted calibration models.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub dataset: Dataset,
    pub models: CalibModelSet,
}

pub fn prepare_corpus(dataset: Dataset) -> Result<PreparedCorpus> {
    dataset.validate()?;
    let models = CalibModelSet::fit_all(&dataset)?;
    Ok(PreparedCorpus { dataset, models })
}

/// Knobs shared by every training run of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    /// Epoch multiplier applied to both regimes unless `exact_presets`.
    pub scale: f64,
    pub users_per_batch: usize,
    pub samples_per_user: usize,
    /// Run the unscaled regimes (100 x 256 / 1000 x 1024).
    pub exact_presets: bool,
    pub growth: usize,
    pub activation: Activation,
    /// Base seed; per-model seeds derive from it and the training key.
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            scale: 0.5,
            users_per_batch: 8,
            samples_per_user: 8,
            exact_presets: false,
            growth: 32,
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

/// Regime presets with the desk-scale multiplier applied.
pub fn regime_train_config(regime: Regime, settings: &TrainSettings, seed: u64) -> TrainConfig {
    let mut cfg = match regime {
        Regime::Config1 => TrainConfig::config1(seed),
        Regime::Config2 => TrainConfig::config2(seed),
    };
    if !settings.exact_presets {
        cfg.epochs = ((cfg.epochs as f64 * settings.scale).round() as usize).max(1);
        cfg.users_per_batch = settings.users_per_batch;
        cfg.samples_per_user = settings.samples_per_user;
    }
    cfg
}

/// Seed for one trained model: scenario-free, so cells differing only in
/// scenario share bit-identical training.
pub fn training_seed(
    base: u64,
    calib_training: CalibTraining,
    pipeline: PipelineKind,
    axis: Axis,
    regime: Regime,
    filter_on: bool,
) -> u64 {
    let codes = [
        TAG_TRAIN,
        match calib_training {
            CalibTraining::All => 0,
            CalibTraining::Single => 1,
        },
        pipeline_code(pipeline),
        match axis {
            Axis::Optical => 0,
            Axis::Visual => 1,
            Axis::Both => 2,
        },
        match regime {
            Regime::Config1 => 0,
            Regime::Config2 => 1,
        },
        filter_on as u64,
    ];
    derive_seed(base, &codes)
}

/// Raw training windows for the train split: every task recording of every
/// train subject, with visual-channel variants per calibration model chosen
/// by the training mode.
pub fn training_windows(
    corpus: &PreparedCorpus,
    axis: Axis,
    calib_training: CalibTraining,
    filter_on: bool,
) -> Result<Vec<RawWindow>> {
    let mut out = Vec::new();
    for id in corpus.dataset.subject_ids_in(Split::Train) {
        let subject = corpus.dataset.subject(id)?;
        let models: Vec<CalibrationModel> = if axis == Axis::Optical {
            Vec::new()
        } else {
            let mut m = vec![corpus.models.get(id, 200)?.clone()];
            if calib_training == CalibTraining::All {
                m.push(corpus.models.get(id, 75)?.clone());
            }
            m
        };
        for rec in &subject.task_recordings {
            out.extend(assemble_raw(rec, axis, &models, filter_on)?);
        }
    }
    if out.is_empty() {
        return Err(Error::validation(
            "train split produced no training windows",
        ));
    }
    Ok(out)
}

/// Fit normalization on the training windows, train the embedder, and bundle
/// the result with everything evaluation needs.
pub fn train_model(
    corpus: &PreparedCorpus,
    axis: Axis,
    calib_training: CalibTraining,
    filter_on: bool,
    embedder_cfg: &EmbedderConfig,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    let raw = training_windows(corpus, axis, calib_training, filter_on)?;
    let stats = fit_norm_stats(&raw)?;
    let tensors = raw
        .iter()
        .map(|w| apply_norm(w, &stats))
        .collect::<Result<Vec<_>>>()?;
    let pool = WindowPool::from_windows(tensors);
    let (params, history) = train(&pool, embedder_cfg, train_cfg, &MsLossConfig::default())?;
    let checkpoint = Checkpoint {
        config: embedder_cfg.clone(),
        axis,
        filter_on,
        params,
        norm: stats,
    };
    Ok((checkpoint, history))
}

/// Per-fold metrics plus the score sets behind them.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub per_fold: Vec<FoldMetrics>,
    pub fold_scores: Vec<(usize, ScoreSet)>,
}

/// Evaluate a trained model fold by fold. Within a fold every subject is
/// enrolled from task recording 1 and verified from task recording 2 against
/// every enrollee; the scenario picks the verification-time calibration.
pub fn evaluate(
    scenario: Scenario,
    verification_seconds: u32,
    corpus: &PreparedCorpus,
    ckpt: &Checkpoint,
    far_target: f64,
) -> Result<EvalOutput> {
    let n_segments = segments_for(verification_seconds)?;
    let ctx = EmbedContext {
        config: &ckpt.config,
        params: &ckpt.params,
        axis: ckpt.axis,
        filter_on: ckpt.filter_on,
        stats: &ckpt.norm,
    };
    let folds = corpus.dataset.fold_count();
    if folds == 0 {
        return Err(Error::validation("dataset has no evaluation folds"));
    }
    let mut per_fold = Vec::with_capacity(folds);
    let mut fold_scores = Vec::with_capacity(folds);
    for fold in 0..folds {
        let subjects = corpus.dataset.subjects_in_fold(fold as u32);
        if subjects.len() < 2 {
            return Err(Error::validation(format!(
                "fold {fold} has {} subject(s); verification needs at least 2",
                subjects.len()
            )));
        }
        let scores = fold_score_set(scenario, &subjects, corpus, &ctx, n_segments)?;
        let fold_eer = eer(&scores)?;
        let (frr, unresolved) = frr_at_far(&scores, far_target)?;
        per_fold.push(FoldMetrics {
            fold,
            eer: fold_eer,
            frr_at_far: frr,
            unresolved_far: unresolved,
        });
        fold_scores.push((fold, scores));
    }
    Ok(EvalOutput {
        per_fold,
        fold_scores,
    })
}

fn fold_score_set(
    scenario: Scenario,
    subjects: &[&str],
    corpus: &PreparedCorpus,
    ctx: &EmbedContext,
    n_segments: usize,
) -> Result<ScoreSet> {
    let mut enroll = BTreeMap::new();
    for &id in subjects {
        let rec = task_recording(corpus, id, 0)?;
        let model = corpus.models.get(id, 200)?;
        enroll.insert(
            id.to_string(),
            centroid_embedding(rec, ctx, eval_models(ctx.axis, model), n_segments)?,
        );
    }
    match scenario {
        Scenario::S1 | Scenario::S2 => {
            // Verification calibration depends only on the verifying subject:
            // one centroid each, scored against every enrollee.
            let mut verify = BTreeMap::new();
            for &id in subjects {
                let rec = task_recording(corpus, id, 1)?;
                let model =
                    resolve_verification_calibration(scenario, id, id, &corpus.models)?;
                verify.insert(
                    id.to_string(),
                    centroid_embedding(rec, ctx, eval_models(ctx.axis, model), n_segments)?,
                );
            }
            score_all(&enroll, &verify)
        }
        Scenario::S3 => {
            // The claimed identity picks the calibration, so each claim gets
            // its own verification centroid.
            let mut scores = Vec::new();
            for (claimed, enrolled_centroid) in &enroll {
                let one: BTreeMap<String, Vec<f64>> =
                    [(claimed.clone(), enrolled_centroid.clone())].into();
                let mut verify = BTreeMap::new();
                for &actual in subjects {
                    let rec = task_recording(corpus, actual, 1)?;
                    let model = resolve_verification_calibration(
                        scenario,
                        claimed,
                        actual,
                        &corpus.models,
                    )?;
                    verify.insert(
                        actual.to_string(),
                        centroid_embedding(rec, ctx, eval_models(ctx.axis, model), n_segments)?,
                    );
                }
                scores.extend(score_all(&one, &verify)?.scores);
            }
            let set = ScoreSet { scores };
            set.validate()?;
            Ok(set)
        }
    }
}

fn task_recording<'a>(
    corpus: &'a PreparedCorpus,
    subject: &str,
    index: usize,
) -> Result<&'a crate::domain::Recording> {
    let record = corpus.dataset.subject(subject)?;
    record.task_recordings.get(index).ok_or_else(|| {
        Error::validation(format!(
            "subject {subject} has {} task recording(s); enrollment and verification need {}",
            record.task_recordings.len(),
            index + 1
        ))
    })
}

/// Optical centroids ignore calibration entirely; visual ones take exactly
/// the resolved model.
fn eval_models(axis: Axis, model: &CalibrationModel) -> &[CalibrationModel] {
    if axis == Axis::Optical {
        &[]
    } else {
        std::slice::from_ref(model)
    }
}

pub fn summarize(exp_id: &str, per_fold: &[FoldMetrics], runtime_s: f64) -> Result<ExperimentResult> {
    let eers: Vec<f64> = per_fold.iter().map(|m| m.eer).collect();
    let frrs: Vec<f64> = per_fold.iter().map(|m| m.frr_at_far).collect();
    let (eer_mean, eer_sd) = aggregate_folds(&eers)?;
    let (frr_mean, frr_sd) = aggregate_folds(&frrs)?;
    let result = ExperimentResult {
        exp_id: exp_id.to_string(),
        eer_mean,
        eer_sd,
        frr_mean,
        frr_sd,
        unresolved_far: per_fold.iter().any(|m| m.unresolved_far),
        runtime_s,
    };
    result.validate()?;
    Ok(result)
}

/// Session-wide run options.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub train: TrainSettings,
    pub far_target: f64,
    pub allow_experimental: bool,
}

impl Default for RunSettings {
    fn default() -> RunSettings {
        RunSettings {
            train: TrainSettings::default(),
            far_target: FAR_TARGET,
            allow_experimental: false,
        }
    }
}

/// Run a batch of cells against prepared corpora keyed by pipeline name.
/// Cells sharing a training key share one trained model; evaluation always
/// reloads the saved checkpoint so results are reproducible from the file
/// alone. Artifacts land under `out_root/models` and `out_root/cells`.
pub fn run_cells(
    specs: &[ExperimentSpec],
    corpora: &BTreeMap<&str, &PreparedCorpus>,
    settings: &RunSettings,
    out_root: &Path,
) -> Result<Vec<ExperimentResult>> {
    if specs.is_empty() {
        return Err(Error::validation("no experiment cells to run"));
    }
    let mut seen = BTreeMap::new();
    for spec in specs {
        spec.validate(settings.allow_experimental)?;
        if seen.insert(spec.exp_id.clone(), ()).is_some() {
            return Err(Error::validation(format!(
                "duplicate experiment id {}",
                spec.exp_id
            )));
        }
        if !corpora.contains_key(spec.pipeline.as_str()) {
            return Err(Error::validation(format!(
                "no dataset provided for pipeline {}",
                spec.pipeline.as_str()
            )));
        }
    }
    let mut trained: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        let started = Instant::now();
        let corpus = corpora[spec.pipeline.as_str()];
        let key = spec.training_key();
        let model_path = match trained.get(&key) {
            Some(path) => path.clone(),
            None => {
                let models_dir = out_root.join("models");
                fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
                let path = models_dir.join(format!("{key}.ckpt"));
                let seed = training_seed(
                    settings.train.seed,
                    spec.calib_training,
                    spec.pipeline,
                    spec.axis,
                    spec.regime,
                    spec.filter_on,
                );
                let mut embedder_cfg = EmbedderConfig::with_channels(spec.axis.channels());
                embedder_cfg.growth = settings.train.growth;
                embedder_cfg.activation = settings.train.activation;
                let train_cfg = regime_train_config(spec.regime, &settings.train, seed);
                let (ckpt, history) = train_model(
                    corpus,
                    spec.axis,
                    spec.calib_training,
                    spec.filter_on,
                    &embedder_cfg,
                    &train_cfg,
                )?;
                save_checkpoint(&path, &ckpt)?;
                write_text(
                    &models_dir.join(format!("{key}.history.csv")),
                    &render_history_csv(&history),
                )?;
                trained.insert(key.clone(), path.clone());
                path
            }
        };
        // Reload so evaluation sees exactly what the file stores.
        let ckpt = load_checkpoint(&model_path)?;
        let eval = evaluate(
            spec.scenario,
            spec.verification_seconds,
            corpus,
            &ckpt,
            settings.far_target,
        )?;
        let cell_dir = out_root.join("cells").join(&spec.exp_id);
        write_text(&cell_dir.join("metrics.csv"), &render_metrics_csv(&eval.per_fold))?;
        for (fold, scores) in &eval.fold_scores {
            write_text(
                &cell_dir.join("scores").join(format!("fold_{fold}.csv")),
                &render_scores_csv(scores),
            )?;
        }
        write_text(&cell_dir.join("spec.toml"), &render_spec_toml(spec, &key))?;
        let result = summarize(&spec.exp_id, &eval.per_fold, started.elapsed().as_secs_f64())?;
        write_text(
            &cell_dir.join("result.csv"),
            &render_report(std::slice::from_ref(&result), ReportFormat::Csv)?,
        )?;
        results.push(result);
    }
    Ok(results)
}

/// Run one cell; artifacts land under `out_dir` in the same layout as a grid.
pub fn run_experiment(
    spec: &ExperimentSpec,
    corpus: &PreparedCorpus,
    settings: &RunSettings,
    out_dir: &Path,
) -> Result<ExperimentResult> {
    let corpora = BTreeMap::from([(spec.pipeline.as_str(), corpus)]);
    let mut results = run_cells(std::slice::from_ref(spec), &corpora, settings, out_dir)?;
    Ok(results.pop().unwrap())
}

fn render_spec_toml(spec: &ExperimentSpec, training_key: &str) -> String {
    format!(
        "exp_id = {:?}\nscenario = {:?}\ncalib_training = {:?}\npipeline = {:?}\naxis = {:?}\nregime = {:?}\nfilter = {:?}\nverification_seconds = {}\nmodel = {:?}\n",
        spec.exp_id,
        spec.scenario.as_str(),
        spec.calib_training.as_str(),
        spec.pipeline.as_str(),
        spec.axis.as_str(),
        spec.regime.as_str(),
        filter_str(spec.filter_on),
        spec.verification_seconds,
        format!("../../models/{training_key}.ckpt"),
    )
}

/// Factor lists crossed into a cell batch. Ids are `{scenario}@{row}` with
/// rows numbered per scenario in enumeration order, so matching rows across
/// scenarios share every other factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFactors {
    pub scenarios: Vec<Scenario>,
    pub calib_training: Vec<CalibTraining>,
    pub pipelines: Vec<PipelineKind>,
    pub axes: Vec<Axis>,
    pub regimes: Vec<Regime>,
    pub filters: Vec<bool>,
}

impl Default for GridFactors {
    fn default() -> GridFactors {
        GridFactors {
            scenarios: vec![Scenario::S1, Scenario::S2],
            calib_training: vec![CalibTraining::All, CalibTraining::Single],
            pipelines: vec![PipelineKind::New],
            axes: vec![Axis::Optical, Axis::Visual, Axis::Both],
            regimes: vec![Regime::Config1],
            filters: vec![false],
        }
    }
}

pub fn enumerate_grid(factors: &GridFactors) -> Result<Vec<ExperimentSpec>> {
    check_factor(&factors.scenarios, "scenarios")?;
    check_factor(&factors.calib_training, "calib_training")?;
    check_factor(&factors.pipelines, "pipelines")?;
    check_factor(&factors.axes, "axes")?;
    check_factor(&factors.regimes, "regimes")?;
    check_factor(&factors.filters, "filters")?;
    let mut specs = Vec::new();
    for &scenario in &factors.scenarios {
        let mut row = 0usize;
        for &calib_training in &factors.calib_training {
            for &pipeline in &factors.pipelines {
                for &axis in &factors.axes {
                    for &regime in &factors.regimes {
                        for &filter_on in &factors.filters {
                            row += 1;
                            specs.push(ExperimentSpec {
                                exp_id: format!("{}@{row}", scenario.as_str()),
                                scenario,
                                calib_training,
                                pipeline,
                                axis,
                                regime,
                                filter_on,
                                verification_seconds: VERIFICATION_SECONDS,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(specs)
}

fn check_factor<T: PartialEq + std::fmt::Debug>(items: &[T], name: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::validation(format!("grid factor {name} is empty")));
    }
    for (i, a) in items.iter().enumerate() {
        if items[..i].contains(a) {
            return Err(Error::validation(format!(
                "grid factor {name} repeats {a:?}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::validation(format!("unknown report format {other:?}"))),
        }
    }
}

pub const REPORT_HEADER: &str =
    "exp_id,eer_mean_pct,eer_sd_pct,frr_mean_pct,frr_sd_pct,unresolved_far";

/// Render a metric table, one row per cell, percentages in `mean (SD)` style
/// for markdown and as plain columns for CSV.
pub fn render_report(results: &[ExperimentResult], format: ReportFormat) -> Result<String> {
    if results.is_empty() {
        return Err(Error::validation("report needs at least one result"));
    }
    let mut seen = BTreeMap::new();
    for r in results {
        r.validate()?;
        if seen.insert(r.exp_id.clone(), ()).is_some() {
            return Err(Error::validation(format!("duplicate experiment id {}", r.exp_id)));
        }
    }
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(REPORT_HEADER);
            out.push('\n');
            for r in results {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.exp_id,
                    format_sig9(r.eer_mean * 100.0),
                    format_sig9(r.eer_sd * 100.0),
                    format_sig9(r.frr_mean * 100.0),
                    format_sig9(r.frr_sd * 100.0),
                    r.unresolved_far as u8,
                ));
            }
            Ok(out)
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Exp. | EER (%) | FRR at FAR 0.002% (%) |\n|---|---|---|\n");
            let mut any_unresolved = false;
            for r in results {
                let marker = if r.unresolved_far {
                    any_unresolved = true;
                    " *"
                } else {
                    ""
                };
                out.push_str(&format!(
                    "| {} | {} | {}{} |\n",
                    r.exp_id,
                    format_cell(r.eer_mean, r.eer_sd),
                    format_cell(r.frr_mean, r.frr_sd),
                    marker,
                ));
            }
            if any_unresolved {
                out.push_str(
                    "\n\\* FAR target below the resolvable range; FRR taken at the strictest threshold.\n",
                );
            }
            Ok(out)
        }
    }
}

/// `mean (SD)` in percent, two decimals: 0.0575 / 0.0013 -> `5.75 (0.13)`.
pub fn format_cell(mean: f64, sd: f64) -> String {
    format!("{:.2} ({:.2})", mean * 100.0, sd * 100.0)
}

/// Parse rows written by the CSV report back into results (runtime is not
/// stored and comes back as zero).
pub fn parse_results_csv(text: &str, file: &Path) -> Result<Vec<ExperimentResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => {
            return Err(Error::malformed(
                file,
                1,
                format!("expected header {REPORT_HEADER:?}"),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::malformed(
                file,
                i + 1,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::malformed(file, i + 1, format!("bad {what} value {s:?}")))
        };
        let unresolved = match fields[5] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::malformed(
                    file,
                    i + 1,
                    format!("bad unresolved_far value {other:?}"),
                ))
            }
        };
        let result = ExperimentResult {
            exp_id: fields[0].to_string(),
            eer_mean: num(fields[1], "eer_mean_pct")? / 100.0,
            eer_sd: num(fields[2], "eer_sd_pct")? / 100.0,
            frr_mean: num(fields[3], "frr_mean_pct")? / 100.0,
            frr_sd: num(fields[4], "frr_sd_pct")? / 100.0,
            unresolved_far: unresolved,
            runtime_s: 0.0,
        };
        result.validate()?;
        out.push(result);
    }
    Ok(out)
}

/// Pipeline and seed of a generated dataset directory, alongside the
/// manifest: the manifest schema itself does not record them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub pipeline: PipelineKind,
    pub seed: u64,
}

const META_FILE: &str = "dataset.toml";

pub fn write_dataset_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    write_text(
        &dir.join(META_FILE),
        &format!("pipeline = {:?}\nseed = {}\n", meta.pipeline.as_str(), meta.seed),
    )
}

pub fn read_dataset_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct MetaFile {
        pipeline: String,
        seed: u64,
    }
    let parsed: MetaFile =
        toml::from_str(&text).map_err(|e| Error::malformed(&path, toml_line(&text, &e), e.to_string()))?;
    Ok(DatasetMeta {
        pipeline: parse_pipeline(&parsed.pipeline)?,
        seed: parsed.seed,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn toml_line(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|s| text[..s.start.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1)
        .unwrap_or(0)
}

/// TOML config file: `[synth]`, `[train]`, and `[grid]` sections, all keys
/// optional; CLI flags override section keys.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: Option<SynthSection>,
    pub train: Option<TrainSection>,
    pub grid: Option<GridSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub train_subjects: Option<usize>,
    pub test_subjects: Option<usize>,
    pub task_recordings: Option<usize>,
    pub task_seconds: Option<f64>,
    pub dwell_seconds: Option<f64>,
    pub fov_half_deg: Option<f64>,
    pub ipd_mm: Option<f64>,
    pub folds: Option<usize>,
    pub quantize: Option<bool>,
    pub pipeline: Option<String>,
}

impl SynthSection {
    pub fn apply(&self, cfg: &mut crate::synth::SynthConfig) {
        if let Some(v) = self.train_subjects {
            cfg.n_train_subjects = v;
        }
        if let Some(v) = self.test_subjects {
            cfg.n_test_subjects = v;
        }
        if let Some(v) = self.task_recordings {
            cfg.n_task_recordings = v;
        }
        if let Some(v) = self.task_seconds {
            cfg.task_duration_s = v;
        }
        if let Some(v) = self.dwell_seconds {
            cfg.dwell_s = v;
        }
        if let Some(v) = self.fov_half_deg {
            cfg.fov_half_deg = v;
        }
        if let Some(v) = self.ipd_mm {
            cfg.ipd_mm = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.quantize {
            cfg.quantize = v;
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub scale: Option<f64>,
    pub users_per_batch: Option<usize>,
    pub samples_per_user: Option<usize>,
    pub exact_presets: Option<bool>,
    pub growth: Option<usize>,
    pub activation: Option<String>,
    pub seed: Option<u64>,
}

impl TrainSection {
    pub fn apply(&self, settings: &mut TrainSettings) -> Result<()> {
        if let Some(v) = self.scale {
            settings.scale = v;
        }
        if let Some(v) = self.users_per_batch {
            settings.users_per_batch = v;
        }
        if let Some(v) = self.samples_per_user {
            settings.samples_per_user = v;
        }
        if let Some(v) = self.exact_presets {
            settings.exact_presets = v;
        }
        if let Some(v) = self.growth {
            settings.growth = v;
        }
        if let Some(v) = &self.activation {
            settings.activation = Activation::parse(v)?;
        }
        if let Some(v) = self.seed {
            settings.seed = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub scenarios: Option<Vec<String>>,
    pub calib_training: Option<Vec<String>>,
    pub pipelines: Option<Vec<String>>,
    pub axes: Option<Vec<String>>,
    pub regimes: Option<Vec<String>>,
    pub filters: Option<Vec<String>>,
}

impl GridSection {
    pub fn apply(&self, factors: &mut GridFactors) -> Result<()> {
        if let Some(v) = &self.scenarios {
            factors.scenarios = parse_each(v, Scenario::parse)?;
        }
        if let Some(v) = &self.calib_training {
            factors.calib_training = parse_each(v, CalibTraining::parse)?;
        }
        if let Some(v) = &self.pipelines {
            factors.pipelines = parse_each(v, |s| parse_pipeline(s))?;
        }
        if let Some(v) = &self.axes {
            factors.axes = parse_each(v, Axis::parse)?;
        }
        if let Some(v) = &self.regimes {
            factors.regimes = parse_each(v, Regime::parse)?;
        }
        if let Some(v) = &self.filters {
            factors.filters = parse_each(v, parse_filter)?;
        }
        Ok(())
    }
}

pub fn parse_each<T>(items: &[String], parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    items.iter().map(|s| parse(s)).collect()
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::malformed(path, toml_line(&text, &e), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, PipelineNoise, SynthConfig};

    fn dummy_model(subject: &str, depth: u32) -> CalibrationModel {
        CalibrationModel {
            subject_id: subject.to_string(),
            fitted_depth_cm: depth,
            gain: [[[1.0, 0.0], [0.0, 1.0]]; 2],
            offset: [[0.0, 0.0]; 2],
            fit_rmse_deg: 0.0,
        }
    }

    fn dummy_set(subjects: &[&str]) -> CalibModelSet {
        let mut set = CalibModelSet {
            models: BTreeMap::new(),
        };
        for &s in subjects {
            for depth in [200, 75] {
                set.insert(dummy_model(s, depth));
            }
        }
        set
    }

    #[test]
    fn scenario_resolution_matches_protocol() {
        let set = dummy_set(&["alice", "bob"]);
        let m = resolve_verification_calibration(Scenario::S1, "alice", "alice", &set).unwrap();
        assert_eq!((m.subject_id.as_str(), m.fitted_depth_cm), ("alice", 200));
        let m = resolve_verification_calibration(Scenario::S2, "alice", "bob", &set).unwrap();
        assert_eq!((m.subject_id.as_str(), m.fitted_depth_cm), ("bob", 75));
        let m = resolve_verification_calibration(Scenario::S3, "alice", "bob", &set).unwrap();
        assert_eq!((m.subject_id.as_str(), m.fitted_depth_cm), ("alice", 200));
    }

    #[test]
    fn missing_model_is_an_error() {
        let set = dummy_set(&["alice"]);
        assert!(resolve_verification_calibration(Scenario::S2, "alice", "carol", &set).is_err());
    }

    fn spec(scenario: Scenario) -> ExperimentSpec {
        ExperimentSpec {
            exp_id: format!("{}@1", scenario.as_str()),
            scenario,
            calib_training: CalibTraining::All,
            pipeline: PipelineKind::New,
            axis: Axis::Optical,
            regime: Regime::Config1,
            filter_on: false,
            verification_seconds: VERIFICATION_SECONDS,
        }
    }

    #[test]
    fn s3_needs_the_experimental_gate() {
        assert!(spec(Scenario::S3).validate(false).is_err());
        spec(Scenario::S3).validate(true).unwrap();
        spec(Scenario::S1).validate(false).unwrap();
    }

    #[test]
    fn twenty_seconds_is_four_segments() {
        assert_eq!(segments_for(20).unwrap(), 4);
        assert_eq!(segments_for(5).unwrap(), 1);
        assert!(segments_for(12).is_err());
        assert!(segments_for(0).is_err());
    }

    #[test]
    fn training_key_excludes_the_scenario() {
        assert_eq!(spec(Scenario::S1).training_key(), spec(Scenario::S2).training_key());
        assert_eq!(spec(Scenario::S1).training_key(), "all-new-O-config1-off");
    }

    #[test]
    fn regime_presets_scale_and_stay_selectable() {
        let s = TrainSettings::default();
        let c1 = regime_train_config(Regime::Config1, &s, 7);
        assert_eq!((c1.epochs, c1.minibatch()), (50, 64));
        let c2 = regime_train_config(Regime::Config2, &s, 7);
        assert_eq!((c2.epochs, c2.minibatch()), (500, 64));

        let exact = TrainSettings {
            exact_presets: true,
            ..TrainSettings::default()
        };
        let c1 = regime_train_config(Regime::Config1, &exact, 7);
        assert_eq!((c1.epochs, c1.minibatch()), (100, 256));
        let c2 = regime_train_config(Regime::Config2, &exact, 7);
        assert_eq!((c2.epochs, c2.minibatch()), (1000, 1024));
    }

    #[test]
    fn grid_enumerates_the_cross_product_with_stable_ids() {
        let specs = enumerate_grid(&GridFactors::default()).unwrap();
        assert_eq!(specs.len(), 12);
        let ids: Vec<&str> = specs.iter().map(|s| s.exp_id.as_str()).collect();
        assert_eq!(
            &ids[..6],
            &["S1@1", "S1@2", "S1@3", "S1@4", "S1@5", "S1@6"]
        );
        assert_eq!(ids[6], "S2@1");
        // Matching rows across scenarios agree on every other factor.
        for i in 0..6 {
            assert_eq!(specs[i].axis, specs[i + 6].axis);
            assert_eq!(specs[i].calib_training, specs[i + 6].calib_training);
        }
        let unique: std::collections::BTreeSet<&str> = ids.iter().copied().collect();
        assert_eq!(unique.len(), ids.len());
    }

    #[test]
    fn degenerate_factor_lists_are_rejected() {
        let mut f = GridFactors::default();
        f.axes.clear();
        assert!(enumerate_grid(&f).is_err());
        let mut f = GridFactors::default();
        f.scenarios.push(Scenario::S1);
        assert!(enumerate_grid(&f).is_err());
    }

    fn result(id: &str, eer: f64, sd: f64) -> ExperimentResult {
        ExperimentResult {
            exp_id: id.to_string(),
            eer_mean: eer,
            eer_sd: sd,
            frr_mean: 0.8773,
            frr_sd: 0.0083,
            unresolved_far: false,
            runtime_s: 1.0,
        }
    }

    #[test]
    fn markdown_cells_use_percent_mean_sd() {
        assert_eq!(format_cell(0.0575, 0.0013), "5.75 (0.13)");
        let doc = render_report(&[result("S1@1", 0.0575, 0.0013)], ReportFormat::Markdown).unwrap();
        assert!(doc.contains("| S1@1 | 5.75 (0.13) | 87.73 (0.83) |"));
    }

    #[test]
    fn csv_report_round_trips() {
        let results = vec![result("S1@1", 0.0575, 0.0013), result("S1@2", 0.0451, 0.0061)];
        let csv = render_report(&results, ReportFormat::Csv).unwrap();
        assert!(csv.starts_with(REPORT_HEADER));
        let parsed = parse_results_csv(&csv, Path::new("report.csv")).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in results.iter().zip(&parsed) {
            assert_eq!(a.exp_id, b.exp_id);
            assert!((a.eer_mean - b.eer_mean).abs() < 1e-12);
            assert!((a.frr_sd - b.frr_sd).abs() < 1e-12);
            assert_eq!(a.unresolved_far, b.unresolved_far);
        }
    }

    #[test]
    fn report_rejects_duplicates_and_emptiness() {
        assert!(render_report(&[], ReportFormat::Csv).is_err());
        let twice = vec![result("S1@1", 0.1, 0.0), result("S1@1", 0.2, 0.0)];
        assert!(render_report(&twice, ReportFormat::Csv).is_err());
    }

    #[test]
    fn config_file_sections_apply_over_defaults() {
        let text = "
[synth]
train_subjects = 4
test_subjects = 4
folds = 2

[train]
scale = 0.01
growth = 2
seed = 9

[grid]
scenarios = [\"S1\"]
axes = [\"O\", \"B\"]
";
        let cfg: ConfigFile = toml::from_str(text).unwrap();
        let mut synth = SynthConfig::default();
        cfg.synth.as_ref().unwrap().apply(&mut synth);
        assert_eq!(
            (synth.n_train_subjects, synth.n_test_subjects, synth.folds),
            (4, 4, 2)
        );
        let mut settings = TrainSettings::default();
        cfg.train.as_ref().unwrap().apply(&mut settings).unwrap();
        assert_eq!((settings.growth, settings.seed), (2, 9));
        assert!((settings.scale - 0.01).abs() < 1e-15);
        let mut factors = GridFactors::default();
        cfg.grid.as_ref().unwrap().apply(&mut factors).unwrap();
        assert_eq!(factors.scenarios, vec![Scenario::S1]);
        assert_eq!(factors.axes, vec![Axis::Optical, Axis::Both]);
        // Untouched keys keep their defaults.
        assert_eq!(factors.pipelines, vec![PipelineKind::New]);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[synth]\nsubjects = 4\n").is_err());
    }

    #[test]
    fn dataset_meta_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DatasetMeta {
            pipeline: PipelineKind::Old,
            seed: 1234,
        };
        write_dataset_meta(dir.path(), &meta).unwrap();
        assert_eq!(read_dataset_meta(dir.path()).unwrap(), meta);
    }

    fn tiny_corpus(seed: u64) -> PreparedCorpus {
        let cfg = SynthConfig {
            n_train_subjects: 4,
            n_test_subjects: 4,
            folds: 2,
            seed,
            ..SynthConfig::default()
        };
        let corpus = generate_dataset(&cfg, &PipelineNoise::new_pipeline()).unwrap();
        prepare_corpus(corpus.dataset).unwrap()
    }

    fn tiny_settings() -> RunSettings {
        RunSettings {
            train: TrainSettings {
                scale: 0.01,
                users_per_batch: 2,
                samples_per_user: 2,
                growth: 2,
                seed: 5,
                ..TrainSettings::default()
            },
            ..RunSettings::default()
        }
    }

    #[test]
    fn optical_cells_are_scenario_invariant_end_to_end() {
        let corpus = tiny_corpus(11);
        let settings = tiny_settings();
        let dir = tempfile::tempdir().unwrap();
        let mut s1 = spec(Scenario::S1);
        s1.calib_training = CalibTraining::Single;
        let mut s2 = spec(Scenario::S2);
        s2.calib_training = CalibTraining::Single;
        let corpora = BTreeMap::from([("new", &corpus)]);
        let results = run_cells(&[s1, s2], &corpora, &settings, dir.path()).unwrap();
        assert_eq!(results.len(), 2);
        // One shared model, bit-identical metrics.
        assert_eq!(results[0].eer_mean.to_bits(), results[1].eer_mean.to_bits());
        assert_eq!(results[0].frr_mean.to_bits(), results[1].frr_mean.to_bits());
        let m1 = fs::read_to_string(dir.path().join("cells/S1@1/metrics.csv")).unwrap();
        let m2 = fs::read_to_string(dir.path().join("cells/S2@1/metrics.csv")).unwrap();
        assert_eq!(m1, m2);
        assert!(dir.path().join("models/single-new-O-config1-off.ckpt").exists());
        assert!(dir.path().join("cells/S1@1/scores/fold_0.csv").exists());
        assert!(dir.path().join("cells/S1@1/result.csv").exists());
    }

    #[test]
    fn visual_cells_split_by_scenario_and_s3_runs_gated() {
        let corpus = tiny_corpus(11);
        let mut settings = tiny_settings();
        settings.allow_experimental = true;
        let dir = tempfile::tempdir().unwrap();
        let make = |scenario: Scenario| ExperimentSpec {
            axis: Axis::Visual,
            calib_training: CalibTraining::Single,
            ..spec(scenario)
        };
        let corpora = BTreeMap::from([("new", &corpus)]);
        let results = run_cells(
            &[make(Scenario::S1), make(Scenario::S2), make(Scenario::S3)],
            &corpora,
            &settings,
            dir.path(),
        )
        .unwrap();
        for r in &results {
            r.validate().unwrap();
        }
        // Same trained model, different verification calibrations: scores differ.
        let s1 = fs::read_to_string(dir.path().join("cells/S1@1/scores/fold_0.csv")).unwrap();
        let s2 = fs::read_to_string(dir.path().join("cells/S2@1/scores/fold_0.csv")).unwrap();
        assert_ne!(s1, s2);
        // Genuine S3 attempts use the same calibration as S1.
        let s3 = fs::read_to_string(dir.path().join("cells/S3@1/scores/fold_0.csv")).unwrap();
        let genuine = |text: &str| -> Vec<String> {
            text.lines().filter(|l| l.ends_with(",1")).map(String::from).collect()
        };
        assert_eq!(genuine(&s1), genuine(&s3));
        assert_ne!(genuine(&s1), genuine(&s2));
    }

    #[test]
    fn duplicate_cell_ids_are_rejected() {
        let corpus = tiny_corpus(11);
        let settings = tiny_settings();
        let dir = tempfile::tempdir().unwrap();
        let corpora = BTreeMap::from([("new", &corpus)]);
        let err = run_cells(
            &[spec(Scenario::S1), spec(Scenario::S1)],
            &corpora,
            &settings,
            dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate experiment id"));
    }
}
