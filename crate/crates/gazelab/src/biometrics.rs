//! Enrollment and verification: centroid embeddings, cosine score sets, ROC
//! curves, interpolated EER, FRR at a fixed FAR, and fold aggregation.

use crate::calib::CalibrationModel;
use crate::domain::Recording;
use crate::embedder::{batch_from_windows, forward, EmbedderConfig, EmbedderParams};
use crate::error::{Error, Result};
use crate::preprocess::{assemble_channels, Axis, NormStats};
use crate::util::{format_sig9, mean_sample_sd};
use std::collections::BTreeMap;

/// One verification attempt against one enrolled subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub similarity: f64,
    pub genuine: bool,
    pub verify_subject: String,
    pub enroll_subject: String,
}

/// All attempts of one evaluation; genuine iff the two subject ids agree.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        for s in &self.scores {
            if s.genuine != (s.verify_subject == s.enroll_subject) {
                return Err(Error::validation(format!(
                    "score {} vs {} has an inconsistent genuine label",
                    s.verify_subject, s.enroll_subject
                )));
            }
            if !s.similarity.is_finite() {
                return Err(Error::numeric("non-finite similarity in score set"));
            }
        }
        Ok(())
    }
}

/// Operating point of the accept-if-score-at-least-threshold rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Threshold sweep over (-inf, every distinct score, +inf), ascending; FAR
/// falls and FRR rises along the way, with both trivial endpoints present.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Everything needed to turn a recording into embeddings: the trained
/// network plus the preprocessing settings it was trained under.
pub struct EmbedContext<'a> {
    pub config: &'a EmbedderConfig,
    pub params: &'a EmbedderParams<f32>,
    pub axis: Axis,
    pub filter_on: bool,
    pub stats: &'a NormStats,
}

/// Mean of the first `n_segments` raw window embeddings, computed at 64-bit;
/// normalization waits for scoring. V/B axes take exactly one calibration
/// model so "first n windows" is unambiguous.
pub fn centroid_embedding(
    rec: &Recording,
    ctx: &EmbedContext,
    calib_models: &[CalibrationModel],
    n_segments: usize,
) -> Result<Vec<f64>> {
    if n_segments == 0 {
        return Err(Error::validation("centroid needs at least one segment"));
    }
    if ctx.axis != Axis::Optical && calib_models.len() != 1 {
        return Err(Error::validation(format!(
            "centroid embedding on axis {} needs exactly one calibration model, got {}",
            ctx.axis.as_str(),
            calib_models.len()
        )));
    }
    let windows = assemble_channels(rec, ctx.axis, calib_models, ctx.filter_on, ctx.stats)?;
    if windows.len() < n_segments {
        return Err(Error::validation(format!(
            "recording {} yields {} windows, need {n_segments}",
            rec.recording_id,
            windows.len()
        )));
    }
    let first: Vec<&_> = windows.iter().take(n_segments).collect();
    let batch = batch_from_windows::<f32>(&first)?;
    let embeddings = forward(ctx.config, ctx.params, &batch)?;
    let dim = ctx.config.embedding_dim;
    let mut centroid = vec![0.0f64; dim];
    for b in 0..n_segments {
        for d in 0..dim {
            centroid[d] += embeddings[b * dim + d] as f64;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n_segments as f64;
    }
    Ok(centroid)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::numeric("cosine similarity is undefined for a zero-norm centroid"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Score every verification centroid against every enrollment centroid.
pub fn score_all(
    enroll: &BTreeMap<String, Vec<f64>>,
    verify: &BTreeMap<String, Vec<f64>>,
) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(enroll.len() * verify.len());
    for (vid, v) in verify {
        for (eid, e) in enroll {
            scores.push(Score {
                similarity: cosine(v, e)?,
                genuine: vid == eid,
                verify_subject: vid.clone(),
                enroll_subject: eid.clone(),
            });
        }
    }
    Ok(ScoreSet { scores })
}

fn split_sorted(scores: &ScoreSet) -> Result<(Vec<f64>, Vec<f64>)> {
    scores.validate()?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for s in &scores.scores {
        if s.genuine {
            genuine.push(s.similarity);
        } else {
            impostor.push(s.similarity);
        }
    }
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    Ok((genuine, impostor))
}

/// Accept-counting convention: a score equal to the threshold accepts.
pub fn roc_curve(scores: &ScoreSet) -> Result<RocCurve> {
    let (genuine, impostor) = split_sorted(scores)?;
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::validation(
            "ROC needs at least one genuine and one impostor score",
        ));
    }
    let n_g = genuine.len() as f64;
    let n_i = impostor.len() as f64;
    let mut thresholds: Vec<f64> = scores.scores.iter().map(|s| s.similarity).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(RocPoint { threshold: f64::NEG_INFINITY, far: 1.0, frr: 0.0 });
    for t in thresholds {
        let rejected_genuine = genuine.partition_point(|&s| s < t);
        let accepted_impostor = impostor.len() - impostor.partition_point(|&s| s < t);
        points.push(RocPoint {
            threshold: t,
            far: accepted_impostor as f64 / n_i,
            frr: rejected_genuine as f64 / n_g,
        });
    }
    points.push(RocPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(RocCurve { points })
}

/// Equal error rate: the exact FRR = FAR crossing when a sweep point hits it,
/// otherwise linear interpolation between the bracketing sweep points.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let curve = roc_curve(scores)?;
    let mut prev = curve.points[0];
    for &p in &curve.points {
        let d = p.frr - p.far;
        if d == 0.0 {
            return Ok(p.far);
        }
        if d > 0.0 {
            let d_prev = prev.frr - prev.far;
            let t = -d_prev / (d - d_prev);
            return Ok(prev.far + t * (p.far - prev.far));
        }
        prev = p;
    }
    unreachable!("the ROC ends at FRR - FAR = 1");
}

/// FRR at the requested FAR, linearly interpolated on the ROC's lower
/// envelope (the best FRR at each distinct FAR, so tied-FAR sweep points do
/// not create vertical segments). When the smallest positive achievable FAR
/// still exceeds the target, returns the FRR at the earliest zero-FAR
/// threshold with the unresolved flag raised.
pub fn frr_at_far(scores: &ScoreSet, far_target: f64) -> Result<(f64, bool)> {
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(Error::validation(format!(
            "FAR target must lie in (0, 1], got {far_target}"
        )));
    }
    let curve = roc_curve(scores)?;
    // FRR rises with the threshold, so the first point at each FAR holds the
    // lowest FRR; the envelope is strictly decreasing in FAR.
    let mut envelope: Vec<RocPoint> = Vec::new();
    for &p in &curve.points {
        if envelope.last().map(|last| last.far) != Some(p.far) {
            envelope.push(p);
        }
    }
    let min_positive_far = envelope[envelope.len() - 2].far;
    if far_target < min_positive_far {
        return Ok((envelope.last().unwrap().frr, true));
    }
    let mut prev = envelope[0];
    for &p in &envelope {
        if p.far == far_target {
            return Ok((p.frr, false));
        }
        if p.far < far_target {
            let t = (prev.far - far_target) / (prev.far - p.far);
            return Ok((prev.frr + t * (p.frr - prev.frr), false));
        }
        prev = p;
    }
    unreachable!("the ROC ends at FAR = 0");
}

/// Mean and sample standard deviation over at least two folds.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::validation(format!(
            "fold aggregation needs at least 2 folds, got {}",
            values.len()
        )));
    }
    mean_sample_sd(values)
}

/// Per-fold metric row for the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub eer: f64,
    pub frr_at_far: f64,
    pub unresolved_far: bool,
}

pub const SCORES_HEADER: &str = "verify_subject,enroll_subject,similarity,genuine";
pub const METRICS_HEADER: &str = "fold,eer,frr_at_far,unresolved_far";

pub fn render_scores_csv(scores: &ScoreSet) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for s in &scores.scores {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.verify_subject,
            s.enroll_subject,
            format_sig9(s.similarity),
            u8::from(s.genuine)
        ));
    }
    out
}

pub fn render_metrics_csv(rows: &[FoldMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.fold,
            format_sig9(r.eer),
            format_sig9(r.frr_at_far),
            u8::from(r.unresolved_far)
        ));
    }
    out
}
