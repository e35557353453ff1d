//! Metric-learning training loop: P x K minibatch sampling, online pair
//! mining, multi-similarity loss with gradients, Adam, and the one-cycle
//! cosine learning-rate schedule.

use crate::embedder::{
    backward_cached, batch_from_windows, forward_cached, init_params, EmbedderConfig,
    EmbedderParams, Real,
};
use crate::error::{Error, Result};
use crate::preprocess::WindowTensor;
use crate::util::{derive_seed, format_sig9};
use rand::SeedableRng;
use std::collections::BTreeMap;

const TAG_INIT: u64 = 0x4e49;
const TAG_BATCH: u64 = 0x4241;

/// Multi-similarity loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        MsLossConfig { alpha: 2.0, beta: 50.0, lambda: 0.5, epsilon: 0.1 }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 || self.lambda <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::validation("loss hyperparameters must all be positive"));
        }
        Ok(())
    }
}

/// Optimizer loop configuration. `users_per_batch` x `samples_per_user`
/// defines the minibatch size m.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub users_per_batch: usize,
    pub samples_per_user: usize,
    pub lr_base: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warm_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn preset(epochs: usize, p: usize, k: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            users_per_batch: p,
            samples_per_user: k,
            lr_base: 1e-4,
            lr_peak: 1e-2,
            lr_min: 1e-7,
            warm_fraction: 0.30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed,
        }
    }

    /// Short regime: 100 epochs, 16 x 16 minibatches.
    pub fn config1(seed: u64) -> Self {
        Self::preset(100, 16, 16, seed)
    }

    /// Long regime: 1000 epochs, 32 x 32 minibatches.
    pub fn config2(seed: u64) -> Self {
        Self::preset(1000, 32, 32, seed)
    }

    /// Short regime shrunk for small corpora: 8 x 8 minibatches and
    /// `scale` times the epochs of configuration 1.
    pub fn config1_scaled(seed: u64, scale: f64) -> Self {
        let epochs = ((100.0 * scale).round() as usize).max(1);
        Self::preset(epochs, 8, 8, seed)
    }

    pub fn minibatch(&self) -> usize {
        self.users_per_batch * self.samples_per_user
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.users_per_batch < 2 || self.samples_per_user == 0 {
            return Err(Error::validation("minibatches need at least 2 users and 1 sample each"));
        }
        if !(self.warm_fraction > 0.0 && self.warm_fraction < 1.0) {
            return Err(Error::validation("warm_fraction must lie strictly inside (0, 1)"));
        }
        if self.lr_base <= 0.0 || self.lr_peak <= 0.0 || self.lr_min <= 0.0 {
            return Err(Error::validation("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Training windows grouped by subject in deterministic id order.
#[derive(Debug, Clone)]
pub struct WindowPool {
    pub subjects: Vec<(String, Vec<WindowTensor>)>,
}

impl WindowPool {
    pub fn from_windows(windows: Vec<WindowTensor>) -> Self {
        let mut grouped: BTreeMap<String, Vec<WindowTensor>> = BTreeMap::new();
        for w in windows {
            grouped.entry(w.subject_id.clone()).or_default().push(w);
        }
        WindowPool { subjects: grouped.into_iter().collect() }
    }

    /// Subjects holding at least `k` windows; the rest sit out of sampling.
    pub fn eligible(&self, k: usize) -> Vec<usize> {
        (0..self.subjects.len()).filter(|&i| self.subjects[i].1.len() >= k).collect()
    }

    pub fn eligible_window_count(&self, k: usize) -> usize {
        self.eligible(k).iter().map(|&i| self.subjects[i].1.len()).sum()
    }
}

/// Minibatches per epoch: enough to approximate one pass over the eligible pool.
pub fn steps_per_epoch(pool_size: usize, minibatch: usize) -> usize {
    pool_size.div_ceil(minibatch).max(1)
}

/// Draw P subjects and K windows each, all without replacement within the
/// batch. Returns (subject index, window index) pairs, grouped by subject.
pub fn sample_minibatch(
    pool: &WindowPool,
    p: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let eligible = pool.eligible(k);
    if eligible.len() < p {
        return Err(Error::validation(format!(
            "minibatch needs {p} subjects with at least {k} windows, only {} qualify",
            eligible.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, eligible.len(), p);
    let mut out = Vec::with_capacity(p * k);
    for ei in chosen.iter() {
        let si = eligible[ei];
        let n = pool.subjects[si].1.len();
        for wi in rand::seq::index::sample(rng, n, k).iter() {
            out.push((si, wi));
        }
    }
    Ok(out)
}

/// Online pair mining on an m x m cosine-similarity matrix. For anchor i with
/// batch positives P_i and negatives N_i: a negative survives iff its
/// similarity exceeds min(P_i) - epsilon, a positive survives iff its
/// similarity is below max(N_i) + epsilon (strict inequalities). Anchors
/// missing either side in the batch yield empty sets.
pub fn mine_pairs<T: Real>(
    sim: &[T],
    m: usize,
    labels: &[usize],
    epsilon: T,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    debug_assert_eq!(sim.len(), m * m);
    debug_assert_eq!(labels.len(), m);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &sim[i * m..(i + 1) * m];
        let mut min_pos: Option<T> = None;
        let mut max_neg: Option<T> = None;
        for j in 0..m {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                min_pos = Some(min_pos.map_or(row[j], |v: T| v.min(row[j])));
            } else {
                max_neg = Some(max_neg.map_or(row[j], |v: T| v.max(row[j])));
            }
        }
        let (Some(min_pos), Some(max_neg)) = (min_pos, max_neg) else {
            out.push((Vec::new(), Vec::new()));
            continue;
        };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..m {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if row[j] < max_neg + epsilon {
                    pos.push(j);
                }
            } else if row[j] > min_pos - epsilon {
                neg.push(j);
            }
        }
        out.push((pos, neg));
    }
    out
}

/// One anchor's contribution to the multi-similarity objective, evaluated on
/// already-mined similarity sets:
/// (1/alpha) ln(1 + sum_P e^(-alpha (S - lambda))) +
/// (1/beta)  ln(1 + sum_N e^( beta  (S - lambda))).
pub fn anchor_loss_terms<T: Real>(pos_sims: &[T], neg_sims: &[T], cfg: &MsLossConfig) -> T {
    let alpha = T::from_f64(cfg.alpha);
    let beta = T::from_f64(cfg.beta);
    let lambda = T::from_f64(cfg.lambda);
    let mut pos_sum = T::zero();
    for &s in pos_sims {
        pos_sum += (-alpha * (s - lambda)).exp();
    }
    let mut neg_sum = T::zero();
    for &s in neg_sims {
        neg_sum += (beta * (s - lambda)).exp();
    }
    (T::one() + pos_sum).ln() / alpha + (T::one() + neg_sum).ln() / beta
}

/// Multi-similarity loss over a minibatch of raw embeddings, with gradients.
///
/// Embeddings are length-normalized here, similarities are cosine, mining is
/// a non-differentiable selection, and gradients flow through normalization.
/// Returns (loss, d loss / d embeddings) with the gradient laid out like the
/// input. The loss is averaged over all m anchors.
pub fn ms_loss<T: Real>(
    embeddings: &[T],
    m: usize,
    dim: usize,
    labels: &[usize],
    cfg: &MsLossConfig,
) -> Result<(T, Vec<T>)> {
    cfg.validate()?;
    if m < 2 {
        return Err(Error::validation("the loss needs at least two embeddings"));
    }
    if embeddings.len() != m * dim || labels.len() != m {
        return Err(Error::validation("embedding or label shape disagrees with the batch"));
    }
    let mut norms = Vec::with_capacity(m);
    let mut unit = vec![T::zero(); m * dim];
    for i in 0..m {
        let e = &embeddings[i * dim..(i + 1) * dim];
        let mut sq = T::zero();
        for &v in e {
            sq += v * v;
        }
        let r = sq.sqrt();
        if !(r.to_f64().is_finite() && r > T::zero()) {
            return Err(Error::numeric("cosine similarity is undefined for a zero-length embedding"));
        }
        for (u, &v) in unit[i * dim..(i + 1) * dim].iter_mut().zip(e) {
            *u = v / r;
        }
        norms.push(r);
    }
    let mut sim = vec![T::zero(); m * m];
    for i in 0..m {
        for j in i + 1..m {
            let mut acc = T::zero();
            for d in 0..dim {
                acc += unit[i * dim + d] * unit[j * dim + d];
            }
            sim[i * m + j] = acc;
            sim[j * m + i] = acc;
        }
    }
    let mined = mine_pairs(&sim, m, labels, T::from_f64(cfg.epsilon));
    let alpha = T::from_f64(cfg.alpha);
    let beta = T::from_f64(cfg.beta);
    let lambda = T::from_f64(cfg.lambda);
    let inv_m = T::from_f64(1.0 / m as f64);
    let mut loss = T::zero();
    // d loss / d S, accumulated sparsely over mined pairs.
    let mut d_sim = vec![T::zero(); m * m];
    for (i, (pos, neg)) in mined.iter().enumerate() {
        let row = &sim[i * m..(i + 1) * m];
        let pos_sims: Vec<T> = pos.iter().map(|&j| row[j]).collect();
        let neg_sims: Vec<T> = neg.iter().map(|&j| row[j]).collect();
        loss += anchor_loss_terms(&pos_sims, &neg_sims, cfg) * inv_m;
        let mut pos_sum = T::zero();
        for &s in &pos_sims {
            pos_sum += (-alpha * (s - lambda)).exp();
        }
        let mut neg_sum = T::zero();
        for &s in &neg_sims {
            neg_sum += (beta * (s - lambda)).exp();
        }
        let pos_den = T::one() + pos_sum;
        let neg_den = T::one() + neg_sum;
        for (&j, &s) in pos.iter().zip(&pos_sims) {
            d_sim[i * m + j] += -(-alpha * (s - lambda)).exp() / pos_den * inv_m;
        }
        for (&j, &s) in neg.iter().zip(&neg_sims) {
            d_sim[i * m + j] += (beta * (s - lambda)).exp() / neg_den * inv_m;
        }
    }
    // S_ij = u_i . u_j with u = e / |e|:
    // d S / d e_i = (u_j - S u_i) / |e_i|, and symmetrically for e_j.
    let mut grads = vec![T::zero(); m * dim];
    for i in 0..m {
        for j in 0..m {
            let g = d_sim[i * m + j];
            if g == T::zero() {
                continue;
            }
            let s = sim[i * m + j];
            for d in 0..dim {
                let ui = unit[i * dim + d];
                let uj = unit[j * dim + d];
                grads[i * dim + d] += g * (uj - s * ui) / norms[i];
                grads[j * dim + d] += g * (ui - s * uj) / norms[j];
            }
        }
    }
    Ok((loss, grads))
}

/// One-cycle cosine schedule over normalized progress: base to peak on
/// [0, warm_fraction], peak to min on [warm_fraction, 1].
pub fn one_cycle_lr(progress: f64, cfg: &TrainConfig) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    let w = cfg.warm_fraction;
    if p < w {
        let phase = std::f64::consts::PI * p / w;
        cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * (1.0 - phase.cos()) / 2.0
    } else {
        let phase = std::f64::consts::PI * (p - w) / (1.0 - w);
        cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1.0 + phase.cos()) / 2.0
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub m: EmbedderParams<T>,
    pub v: EmbedderParams<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: &EmbedderConfig) -> Self {
        AdamState { m: EmbedderParams::zeros(cfg), v: EmbedderParams::zeros(cfg), t: 0 }
    }
}

/// Standard Adam update with bias correction; epsilon sits outside the root.
pub fn adam_step<T: Real>(
    params: &mut EmbedderParams<T>,
    grads: &EmbedderParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.adam_eps);
    let mut p_slices = params.flat_mut();
    let g_slices = grads.flat();
    let mut m_slices = state.m.flat_mut();
    let mut v_slices = state.v.flat_mut();
    if p_slices.len() != g_slices.len() {
        return Err(Error::validation("gradient tensors disagree with parameters"));
    }
    for idx in 0..p_slices.len() {
        if p_slices[idx].len() != g_slices[idx].len() {
            return Err(Error::validation("gradient tensor shape disagrees with parameters"));
        }
        let ps = &mut p_slices[idx];
        let gs = g_slices[idx];
        let ms = &mut m_slices[idx];
        let vs = &mut v_slices[idx];
        for i in 0..ps.len() {
            let g = gs[i];
            ms[i] = b1 * ms[i] + (one - b1) * g;
            vs[i] = b2 * vs[i] + (one - b2) * g * g;
            let m_hat = ms[i] / corr1;
            let v_hat = vs[i] / corr2;
            ps[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One optimizer step per history row.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
}

pub const HISTORY_HEADER: &str = "step,epoch,lr,loss";

pub fn render_history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.step,
            format_sig9(row.epoch),
            format_sig9(row.lr),
            format_sig9(row.loss)
        ));
    }
    out
}

/// Full training loop at 32-bit precision: per step, sample a P x K batch,
/// run forward, evaluate the mined multi-similarity loss, push gradients back
/// and apply Adam under the one-cycle schedule. Deterministic in the seed.
pub fn train(
    pool: &WindowPool,
    embedder_cfg: &EmbedderConfig,
    train_cfg: &TrainConfig,
    ms_cfg: &MsLossConfig,
) -> Result<(EmbedderParams<f32>, Vec<HistoryRow>)> {
    embedder_cfg.validate()?;
    train_cfg.validate()?;
    ms_cfg.validate()?;
    let p = train_cfg.users_per_batch;
    let k = train_cfg.samples_per_user;
    let m = train_cfg.minibatch();
    let pool_size = pool.eligible_window_count(k);
    if pool.eligible(k).len() < p {
        return Err(Error::validation(format!(
            "training needs {p} subjects with at least {k} windows, only {} qualify",
            pool.eligible(k).len()
        )));
    }
    let per_epoch = steps_per_epoch(pool_size, m);
    let total_steps = train_cfg.epochs * per_epoch;
    let mut params: EmbedderParams<f32> = init_params(embedder_cfg, derive_seed(train_cfg.seed, &[TAG_INIT]));
    let mut state = AdamState::new(embedder_cfg);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, &[TAG_BATCH]));
    let mut history = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let picks = sample_minibatch(pool, p, k, &mut rng)?;
        let windows: Vec<&WindowTensor> =
            picks.iter().map(|&(si, wi)| &pool.subjects[si].1[wi]).collect();
        let labels: Vec<usize> = picks.iter().map(|&(si, _)| si).collect();
        let batch = batch_from_windows::<f32>(&windows)?;
        let (embeddings, cache) = forward_cached(embedder_cfg, &params, &batch)?;
        let (loss, upstream) =
            ms_loss(&embeddings, m, embedder_cfg.embedding_dim, &labels, ms_cfg)?;
        let grads = backward_cached(embedder_cfg, &params, &cache, &upstream)?;
        let lr = one_cycle_lr(step as f64 / total_steps as f64, train_cfg);
        adam_step(&mut params, &grads, &mut state, lr, train_cfg)?;
        history.push(HistoryRow {
            step: step + 1,
            epoch: (step + 1) as f64 / per_epoch as f64,
            lr,
            loss: loss.to_f64(),
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::WINDOW_LEN;
    use rand::Rng;

    fn sim_matrix(m: usize, entries: &[(usize, usize, f64)]) -> Vec<f64> {
        let mut sim = vec![0.0; m * m];
        for &(i, j, v) in entries {
            sim[i * m + j] = v;
            sim[j * m + i] = v;
        }
        sim
    }

    #[test]
    fn mining_matches_hand_computations() {
        // Anchor 0: positive {0.9}, negatives {0.2, 0.6}. Neither side clears
        // the margin, so both mined sets come back empty.
        let sim = sim_matrix(4, &[(0, 1, 0.9), (0, 2, 0.2), (0, 3, 0.6)]);
        let mined = mine_pairs(&sim, 4, &[0, 0, 1, 1], 0.1);
        assert_eq!(mined[0], (vec![], vec![]));

        // Anchor 0: positive {0.5}, negative {0.6}; both survive.
        let sim = sim_matrix(3, &[(0, 1, 0.5), (0, 2, 0.6)]);
        let mined = mine_pairs(&sim, 3, &[0, 0, 1], 0.1);
        assert_eq!(mined[0], (vec![1], vec![2]));

        // A single class leaves every anchor without negatives.
        let sim = sim_matrix(3, &[(0, 1, 0.9), (0, 2, 0.8), (1, 2, 0.7)]);
        for sets in mine_pairs(&sim, 3, &[5, 5, 5], 0.1) {
            assert_eq!(sets, (vec![], vec![]));
        }
    }

    #[test]
    fn anchor_term_closed_form() {
        let cfg = MsLossConfig::default();
        let term = anchor_loss_terms(&[0.5], &[], &cfg);
        assert!((term - 0.5 * 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(anchor_loss_terms::<f64>(&[], &[], &cfg), 0.0);
    }

    #[test]
    fn separated_clusters_mine_empty_and_lose_nothing() {
        // Two tight clusters: S_pos = 1, S_neg = 0, margins keep nothing.
        let embeddings = vec![2.0, 0.0, 3.0, 0.0, 0.0, 1.0, 0.0, 5.0];
        let (loss, grads) = ms_loss(&embeddings, 4, 2, &[0, 0, 1, 1], &MsLossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = MsLossConfig::default();
        let (m, dim) = (8, 4);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut embeddings: Vec<f64> = (0..m * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, analytic) = ms_loss(&embeddings, m, dim, &labels, &cfg).unwrap();
        let h = 1e-6;
        for idx in 0..m * dim {
            embeddings[idx] += h;
            let (up, _) = ms_loss(&embeddings, m, dim, &labels, &cfg).unwrap();
            embeddings[idx] -= 2.0 * h;
            let (down, _) = ms_loss(&embeddings, m, dim, &labels, &cfg).unwrap();
            embeddings[idx] += h;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-8);
            assert!(
                ((fd - analytic[idx]) / denom).abs() < 1e-4,
                "component {idx}: fd={fd} analytic={}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn loss_is_scale_free() {
        let cfg = MsLossConfig::default();
        let (m, dim) = (6, 3);
        let labels = [0, 0, 1, 1, 2, 2];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let embeddings: Vec<f64> = (0..m * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = embeddings.iter().map(|&v| 3.7 * v).collect();
        let (l1, _) = ms_loss(&embeddings, m, dim, &labels, &cfg).unwrap();
        let (l2, _) = ms_loss(&scaled, m, dim, &labels, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_zero_embeddings_and_tiny_batches() {
        let cfg = MsLossConfig::default();
        assert!(ms_loss(&[0.0, 0.0, 1.0, 0.0], 2, 2, &[0, 1], &cfg).is_err());
        assert!(ms_loss(&[1.0, 0.0], 1, 2, &[0], &cfg).is_err());
    }

    #[test]
    fn schedule_hits_its_anchors_and_is_continuous() {
        let cfg = TrainConfig::config1(0);
        assert!((one_cycle_lr(0.0, &cfg) - 1e-4).abs() < 1e-15);
        assert!((one_cycle_lr(0.30, &cfg) - 1e-2).abs() < 1e-15);
        assert!((one_cycle_lr(1.0, &cfg) - 1e-7).abs() < 1e-15);

        let n = 100_000;
        let mut prev = one_cycle_lr(0.0, &cfg);
        for i in 1..=n {
            let lr = one_cycle_lr(i as f64 / n as f64, &cfg);
            assert!((lr - prev).abs() < 1e-6);
            prev = lr;
        }
    }

    fn tiny_embedder() -> EmbedderConfig {
        let mut cfg = EmbedderConfig::with_channels(2);
        cfg.growth = 2;
        cfg
    }

    #[test]
    fn adam_zero_gradients_and_first_step_sign() {
        let ecfg = tiny_embedder();
        let tcfg = TrainConfig::config1(0);
        let mut params: EmbedderParams<f64> = init_params(&ecfg, 1);
        let reference = params.clone();
        let zeros = EmbedderParams::zeros(&ecfg);
        let mut state = AdamState::new(&ecfg);
        adam_step(&mut params, &zeros, &mut state, 1e-2, &tcfg).unwrap();
        assert_eq!(params, reference);

        let mut grads = EmbedderParams::zeros(&ecfg);
        for s in grads.flat_mut() {
            for (i, g) in s.iter_mut().enumerate() {
                *g = if i % 2 == 0 { 0.5 } else { -0.25 };
            }
        }
        let mut state = AdamState::new(&ecfg);
        let mut params = reference.clone();
        adam_step(&mut params, &grads, &mut state, 1e-3, &tcfg).unwrap();
        for (ps, (rs, gs)) in params.flat().iter().zip(reference.flat().iter().zip(grads.flat())) {
            for i in 0..ps.len() {
                let want = rs[i] - 1e-3 * gs[i].signum();
                assert!((ps[i] - want).abs() < 1e-3 * 1e-4);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let ecfg = tiny_embedder();
        let tcfg = TrainConfig::config1(0);
        let run = || {
            let mut params: EmbedderParams<f32> = init_params(&ecfg, 3);
            let mut state = AdamState::new(&ecfg);
            for step in 0..5 {
                let mut grads = EmbedderParams::zeros(&ecfg);
                for s in grads.flat_mut() {
                    for (i, g) in s.iter_mut().enumerate() {
                        *g = ((i + step) % 7) as f32 * 0.1 - 0.3;
                    }
                }
                adam_step(&mut params, &grads, &mut state, 1e-3, &tcfg).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    fn toy_window(subject: &str, idx: usize, level: f64) -> WindowTensor {
        // Per-window offsets repeat across classes so pooled features start
        // out confusable; the class signal is a small shift the fully
        // connected head can learn from the pooled raw channels.
        let channels = 2;
        let offset = 0.35 * ((idx % 4) as f64 - 1.5) / 1.5;
        let values = (0..WINDOW_LEN * channels)
            .map(|i| {
                let row = (i / channels) as f64;
                if i % channels == 0 {
                    offset + 0.3 * (row / 7.0 + idx as f64).sin() + 0.05 * level
                } else {
                    0.3 * (row / 9.0 + 2.0 * idx as f64).cos() - 0.05 * level
                }
            })
            .collect();
        WindowTensor {
            subject_id: subject.into(),
            recording_id: format!("{subject}-r0"),
            window_index: idx,
            calib_variant: None,
            channels,
            values,
        }
    }

    fn toy_pool(windows_per_subject: usize) -> WindowPool {
        let mut windows = Vec::new();
        for i in 0..windows_per_subject {
            windows.push(toy_window("a", i, 1.0));
            windows.push(toy_window("b", i, -1.0));
        }
        WindowPool::from_windows(windows)
    }

    #[test]
    fn minibatch_counts_labels_and_errors() {
        let mut windows = Vec::new();
        for s in 0..16 {
            for i in 0..16 {
                windows.push(toy_window(&format!("s{s:02}"), i, s as f64));
            }
        }
        // One extra subject short of eligibility stays excluded.
        windows.push(toy_window("tiny", 0, 9.0));
        let pool = WindowPool::from_windows(windows);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let picks = sample_minibatch(&pool, 16, 16, &mut rng).unwrap();
        assert_eq!(picks.len(), 256);
        let mut labels: Vec<usize> = picks.iter().map(|&(s, _)| s).collect();
        labels.dedup();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 16);
        assert!(!picks.iter().any(|&(s, _)| pool.subjects[s].0 == "tiny"));
        let mut seen = picks.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 256, "windows repeat within the batch");

        let picks = sample_minibatch(&pool, 2, 1, &mut rng).unwrap();
        assert_eq!(picks.len(), 2);
        assert_ne!(picks[0].0, picks[1].0);

        let lone = WindowPool::from_windows((0..4).map(|i| toy_window("only", i, 0.0)).collect());
        assert!(sample_minibatch(&lone, 2, 2, &mut rng).is_err());
    }

    #[test]
    fn epoch_step_arithmetic() {
        assert_eq!(steps_per_epoch(1000, 256), 4);
        assert_eq!(steps_per_epoch(256, 256), 1);
        assert_eq!(steps_per_epoch(1, 256), 1);
    }

    #[test]
    fn training_separates_a_toy_pool() {
        let pool = toy_pool(4);
        let ecfg = tiny_embedder();
        let mut tcfg = TrainConfig::config1(42);
        tcfg.epochs = 25;
        tcfg.users_per_batch = 2;
        tcfg.samples_per_user = 2;
        let (_, history) = train(&pool, &ecfg, &tcfg, &MsLossConfig::default()).unwrap();
        // Pool of 8 with m = 4 gives 2 steps per epoch.
        assert_eq!(history.len(), 50);
        assert!((history[0].epoch - 0.5).abs() < 1e-12);
        let first = history[0].loss;
        let last = history.last().unwrap().loss;
        assert!(first > 0.0);
        assert!(last < 0.5 * first, "loss {first} only reached {last} after 50 steps");
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let pool = toy_pool(3);
        let ecfg = tiny_embedder();
        let mut tcfg = TrainConfig::config1(7);
        tcfg.epochs = 2;
        tcfg.users_per_batch = 2;
        tcfg.samples_per_user = 2;
        let run = || train(&pool, &ecfg, &tcfg, &MsLossConfig::default()).unwrap();
        let (p1, h1) = run();
        let (p2, h2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_eq!(render_history_csv(&h1), render_history_csv(&h2));
    }
}
