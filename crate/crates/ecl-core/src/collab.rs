//! Collaborative training and inference.
//!
//! One training step forwards every expert on the first view, supervises both
//! heads with balanced cross-entropy, couples the experts through re-weighted
//! logit distillation and feature distillation, and runs instance
//! discrimination per expert against its momentum twin's keys from the second
//! view. After the optimizer step the twins receive a moving-average update
//! and the key batches enter the queues.
//!
//! Inference drops everything but the encoders and classification heads;
//! the ensemble averages logits across experts before the optional post-hoc
//! prior correction.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_checkpoint, Checkpoint, LoadedModel};
use crate::error::{EclError, Result};
use crate::expertnet::{
    momentum_update, Encoder, Expert, ExpertArch, ExpertCache, ExpertGrads, ExpertOutputs,
    ExpertUpstream, Linear, MomentumTwin, QueueState,
};
use crate::losses::{
    bc_batch_grad, bc_loss, bkt_weight, head_probs, info_nce_loss_grad, kd_feature_loss_grad,
    kd_logit_loss_grad, posthoc_adjust, sup_loss_grad, total_loss, KDConfig, LossBreakdown,
};
use crate::ltdata::{batch_jitter_seed, two_view_batch, ClassPrior, SyntheticDataset, TwoViewBatch};
use crate::rng::{mix_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

/// Which expert's heads produce the transfer weight for an ordered
/// teacher->student pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BktScope {
    /// Weight from the student expert's own heads (default).
    Student,
    /// One weight per sample: the mean of every expert's weight.
    MeanOverExperts,
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_experts: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Moving-average coefficient for the momentum twins.
    pub twin_momentum: f64,
    pub prior: ClassPrior,
    pub kd: KDConfig,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub jitter_sigma: f64,
    pub arch: ExpertArch,
    pub queue_size: usize,
    pub bkt_scope: BktScope,
    /// Apply the transfer weights to feature-level distillation as well.
    pub feature_kd_weighted: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(EclError::InvalidInput("need at least one expert".into()));
        }
        if self.batch_size == 0 {
            return Err(EclError::InvalidInput("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EclError::InvalidInput("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.twin_momentum) {
            return Err(EclError::InvalidInput("twin momentum must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(EclError::InvalidInput("sgd momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(EclError::InvalidInput("weight_decay must be >= 0".into()));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(EclError::InvalidInput("jitter_sigma must be >= 0".into()));
        }
        if self.queue_size == 0 {
            return Err(EclError::InvalidInput("queue_size must be positive".into()));
        }
        if self.kd.beta > 0.0 && self.batch_size > self.queue_size {
            return Err(EclError::InvalidInput(
                "batch_size must not exceed queue_size when the contrastive task is active".into(),
            ));
        }
        self.kd.validate()?;
        self.arch.validate()?;
        if self.prior.num_classes() != self.arch.num_classes {
            return Err(EclError::InvalidInput(
                "prior and architecture disagree on the class count".into(),
            ));
        }
        Ok(())
    }
}

/// Mutable training state: online experts, their twins and queues, optimizer
/// velocity, and the loss history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub experts: Vec<Expert>,
    pub twins: Vec<MomentumTwin>,
    pub queues: Vec<QueueState>,
    pub velocities: Vec<ExpertGrads>,
    pub step: u64,
    /// One entry per training step.
    pub loss_history: Vec<LossBreakdown>,
    /// Component means per epoch, recombined so the total identity holds.
    pub epoch_history: Vec<LossBreakdown>,
}

/// Fresh state for the configuration: seeded experts, twins as exact copies,
/// queues pre-filled with seeded unit vectors.
pub fn init_state(config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let mut experts = Vec::with_capacity(config.num_experts);
    let mut twins = Vec::with_capacity(config.num_experts);
    let mut queues = Vec::with_capacity(config.num_experts);
    let mut velocities = Vec::with_capacity(config.num_experts);
    for k in 0..config.num_experts {
        let expert = Expert::new_seeded(&config.arch, k, config.seed)?;
        twins.push(MomentumTwin::from_expert(&expert, config.twin_momentum)?);
        queues.push(QueueState::new_seeded(
            config.queue_size,
            config.arch.embed_dim,
            mix_seed(&[config.seed, k as u64]),
        )?);
        velocities.push(ExpertGrads::zeros_like(&expert));
        experts.push(expert);
    }
    Ok(TrainState {
        experts,
        twins,
        queues,
        velocities,
        step: 0,
        loss_history: Vec::new(),
        epoch_history: Vec::new(),
    })
}

/// Gradient scale shared by the collaborative and independent supervision
/// paths; keeping one expression makes the two bitwise comparable.
fn sup_grad_scale(num_experts: usize, batch_len: usize) -> f64 {
    1.0 / (num_experts as f64 * batch_len as f64)
}

/// Transfer weights, indexed `[student_expert, sample]`.
fn bkt_weight_matrix(
    z_ref: &[Array2<f64>],
    z_cls: &[Array2<f64>],
    labels: &[usize],
    floor: f64,
    scope: BktScope,
) -> Result<Array2<f64>> {
    let k = z_ref.len();
    let n = labels.len();
    let mut w = Array2::<f64>::zeros((k, n));
    for q in 0..k {
        for i in 0..n {
            let p_ref = head_probs(&z_ref[q].row(i), floor)?;
            let p_cls = head_probs(&z_cls[q].row(i), floor)?;
            w[(q, i)] = bkt_weight(&p_ref.view(), &p_cls.view(), labels[i], floor)?;
        }
    }
    if matches!(scope, BktScope::MeanOverExperts) {
        let means: Vec<f64> = (0..n).map(|i| w.column(i).sum() / k as f64).collect();
        for q in 0..k {
            for i in 0..n {
                w[(q, i)] = means[i];
            }
        }
    }
    Ok(w)
}

fn apply_step(
    expert: &mut Expert,
    grads: &ExpertGrads,
    velocity: &mut ExpertGrads,
    config: &TrainConfig,
) {
    let lr = config.learning_rate;
    let wd = config.weight_decay;
    let params = expert.param_slices_mut();
    let gs = grads.slices();
    match config.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.into_iter().zip(gs) {
                for (pv, &gv) in p.iter_mut().zip(g) {
                    *pv -= lr * (gv + wd * *pv);
                }
            }
        }
        OptimizerKind::SgdMomentum => {
            let mu = config.sgd_momentum;
            let vel = velocity.slices_mut();
            for ((p, g), v) in params.into_iter().zip(gs).zip(vel) {
                for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = mu * *vv + gv + wd * *pv;
                    *pv -= lr * *vv;
                }
            }
        }
    }
}

fn check_state(state: &TrainState, config: &TrainConfig) -> Result<()> {
    if state.experts.len() != config.num_experts
        || state.twins.len() != config.num_experts
        || state.queues.len() != config.num_experts
        || state.velocities.len() != config.num_experts
    {
        return Err(EclError::InvalidInput("state does not match config".into()));
    }
    Ok(())
}

/// One collaborative update on a two-view batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &TwoViewBatch,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    check_state(state, config)?;
    let k = config.num_experts;
    let n = batch.len();
    if n == 0 {
        return Err(EclError::InvalidInput("empty batch".into()));
    }

    let mut outputs: Vec<ExpertOutputs> = Vec::with_capacity(k);
    let mut caches: Vec<ExpertCache> = Vec::with_capacity(k);
    for expert in &state.experts {
        let (o, c) = expert.forward_cached(&batch.view_a.view())?;
        outputs.push(o);
        caches.push(c);
    }
    let z_ref: Vec<Array2<f64>> = outputs.iter().map(|o| o.z_ref.clone()).collect();
    let z_cls: Vec<Array2<f64>> = outputs.iter().map(|o| o.z_cls.clone()).collect();
    let features: Vec<Array2<f64>> = outputs.iter().map(|o| o.v.clone()).collect();

    let (sup, g_ref, g_cls) = sup_loss_grad(&z_ref, &z_cls, &batch.labels, &config.prior)?;

    let mut kd_logit = 0.0;
    let mut kd_feature = 0.0;
    let mut g_kd_logit: Option<Vec<Array2<f64>>> = None;
    let mut g_kd_feature: Option<Vec<Array2<f64>>> = None;
    if k >= 2 && config.kd.alpha > 0.0 {
        let weights = bkt_weight_matrix(
            &z_ref,
            &z_cls,
            &batch.labels,
            config.kd.prob_floor,
            config.bkt_scope,
        )?;
        let (loss, grads) = kd_logit_loss_grad(&z_cls, &weights, config.kd.tau_kd)?;
        kd_logit = loss;
        g_kd_logit = Some(grads);
        let w_opt = config.feature_kd_weighted.then_some(&weights);
        let (loss, grads) = kd_feature_loss_grad(&features, w_opt, config.kd.tau_kd)?;
        kd_feature = loss;
        g_kd_feature = Some(grads);
    }

    let mut con = 0.0;
    let mut g_con: Option<Vec<Array2<f64>>> = None;
    let mut keys_all: Vec<Array2<f64>> = Vec::new();
    if config.kd.beta > 0.0 {
        let mut grads = Vec::with_capacity(k);
        for ki in 0..k {
            let keys = state.twins[ki].forward_keys(&batch.view_b.view())?;
            let mut g_e = Array2::<f64>::zeros(outputs[ki].e.dim());
            for i in 0..n {
                let (loss, g) = info_nce_loss_grad(
                    &outputs[ki].e.row(i),
                    &keys.row(i),
                    &state.queues[ki].rows(),
                    config.kd.tau_con,
                )?;
                con += loss / n as f64;
                let mut dst = g_e.row_mut(i);
                dst.assign(&g);
                dst.mapv_inplace(|v| v / n as f64);
            }
            grads.push(g_e);
            keys_all.push(keys);
        }
        g_con = Some(grads);
    }

    let breakdown = total_loss(sup, kd_logit, kd_feature, con, &config.kd);
    if !breakdown.total.is_finite() {
        return Err(EclError::Numerical(format!(
            "non-finite total loss at step {}: sup={} kd_logit={} kd_feature={} con={}",
            state.step, breakdown.sup, breakdown.kd_logit, breakdown.kd_feature, breakdown.con
        )));
    }

    for ki in 0..k {
        let mut d_z_cls = g_cls[ki].clone();
        if let Some(g) = &g_kd_logit {
            d_z_cls.scaled_add(config.kd.alpha, &g[ki]);
        }
        let d_v = g_kd_feature.as_ref().map(|g| {
            let mut m = g[ki].clone();
            m.mapv_inplace(|v| v * config.kd.alpha);
            m
        });
        let d_embed = g_con.as_ref().map(|g| {
            let mut m = g[ki].clone();
            m.mapv_inplace(|v| v * config.kd.beta);
            m
        });
        let upstream = ExpertUpstream {
            d_v,
            d_z_cls: Some(d_z_cls),
            d_z_ref: Some(g_ref[ki].clone()),
            d_embed,
        };
        let grads = state.experts[ki].backward(&caches[ki], &upstream);
        apply_step(&mut state.experts[ki], &grads, &mut state.velocities[ki], config);
    }

    if config.kd.beta > 0.0 {
        for ki in 0..k {
            momentum_update(&mut state.twins[ki], &state.experts[ki], config.twin_momentum)?;
            state.queues[ki].push(&keys_all[ki].view())?;
        }
    }

    state.step += 1;
    state.loss_history.push(breakdown);
    Ok(breakdown)
}

fn check_dataset(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<()> {
    if dataset.train_len() == 0 {
        return Err(EclError::Data("dataset has no train rows".into()));
    }
    if dataset.feature_dim != config.arch.input_dim {
        return Err(EclError::Data(format!(
            "dataset feature dim {} but architecture expects {}",
            dataset.feature_dim, config.arch.input_dim
        )));
    }
    if dataset.num_classes != config.arch.num_classes {
        return Err(EclError::Data(format!(
            "dataset has {} classes but architecture expects {}",
            dataset.num_classes, config.arch.num_classes
        )));
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(&[seed, stream::SHUFFLE, epoch as u64]));
    idx
}

fn mean_breakdown(steps: &[LossBreakdown], kd: &KDConfig) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let sup = steps.iter().map(|b| b.sup).sum::<f64>() / n;
    let kd_logit = steps.iter().map(|b| b.kd_logit).sum::<f64>() / n;
    let kd_feature = steps.iter().map(|b| b.kd_feature).sum::<f64>() / n;
    let con = steps.iter().map(|b| b.con).sum::<f64>() / n;
    total_loss(sup, kd_logit, kd_feature, con, kd)
}

/// Epoch loop over seeded shuffles and two-view batches.
pub fn fit(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut state = init_state(config)?;
    let n = dataset.train_len();
    for epoch in 0..config.epochs {
        let idx = shuffled_indices(n, config.seed, epoch);
        let step_start = state.loss_history.len();
        for (b, chunk) in idx.chunks(config.batch_size).enumerate() {
            let batch = two_view_batch(
                dataset,
                chunk,
                config.jitter_sigma,
                batch_jitter_seed(config.seed, epoch, b),
            )?;
            train_step(&mut state, &batch, config)?;
        }
        state
            .epoch_history
            .push(mean_breakdown(&state.loss_history[step_start..], &config.kd));
    }
    Ok(state)
}

/// Trains each expert in isolation on the same batch stream with the same
/// per-expert supervision gradients as the collaborative trainer, touching
/// one expert at a time. With `alpha = beta = 0` the collaborative run and
/// this one produce bitwise-identical expert parameters, which pins down
/// that experts only interact through the distillation and contrastive
/// terms. Loss histories are not recorded.
pub fn fit_independent(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let mut state = init_state(config)?;
    let n = dataset.train_len();
    for ki in 0..config.num_experts {
        for epoch in 0..config.epochs {
            let idx = shuffled_indices(n, config.seed, epoch);
            for (b, chunk) in idx.chunks(config.batch_size).enumerate() {
                let batch = two_view_batch(
                    dataset,
                    chunk,
                    config.jitter_sigma,
                    batch_jitter_seed(config.seed, epoch, b),
                )?;
                let (outputs, cache) = state.experts[ki].forward_cached(&batch.view_a.view())?;
                let scale = sup_grad_scale(config.num_experts, batch.len());
                let (_, g_ref) =
                    bc_batch_grad(&outputs.z_ref, &batch.labels, &config.prior, scale)?;
                let (_, g_cls) =
                    bc_batch_grad(&outputs.z_cls, &batch.labels, &config.prior, scale)?;
                let upstream = ExpertUpstream {
                    d_v: None,
                    d_z_cls: Some(g_cls),
                    d_z_ref: Some(g_ref),
                    d_embed: None,
                };
                let grads = state.experts[ki].backward(&cache, &upstream);
                apply_step(&mut state.experts[ki], &grads, &mut state.velocities[ki], config);
            }
        }
    }
    state.step = (config.epochs * config.num_experts) as u64;
    Ok(state)
}

/// Inference-only view of a model: encoders and classification heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub parts: Vec<InferencePart>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferencePart {
    pub encoder: Encoder,
    pub cls_head: Linear,
}

impl InferenceModel {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            parts: state
                .experts
                .iter()
                .map(|e| InferencePart {
                    encoder: e.encoder.clone(),
                    cls_head: e.cls_head.clone(),
                })
                .collect(),
        }
    }

    pub fn from_loaded(model: &LoadedModel) -> Self {
        Self {
            parts: model
                .experts
                .iter()
                .map(|e| InferencePart {
                    encoder: e.encoder.clone(),
                    cls_head: e.cls_head.clone(),
                })
                .collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.parts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.parts[0].cls_head.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.parts[0].encoder.input_dim()
    }

    /// Encoder features of one expert.
    pub fn features(&self, expert: usize, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_expert(expert)?;
        Ok(self.parts[expert].encoder.forward(x))
    }

    fn check_expert(&self, expert: usize) -> Result<()> {
        if expert >= self.parts.len() {
            return Err(EclError::InvalidInput(format!(
                "expert index {expert} out of range ({} experts)",
                self.parts.len()
            )));
        }
        Ok(())
    }
}

/// Which experts feed a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Single(usize),
    Ensemble,
}

/// Raw logits for the mode: one expert's, or the elementwise mean across
/// experts.
pub fn predict_logits(
    model: &InferenceModel,
    mode: PredictMode,
    x: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    match mode {
        PredictMode::Single(k) => {
            model.check_expert(k)?;
            let part = &model.parts[k];
            let v = part.encoder.forward(x);
            Ok(part.cls_head.forward(&v.view()))
        }
        PredictMode::Ensemble => {
            let mut acc: Option<Array2<f64>> = None;
            for part in &model.parts {
                let v = part.encoder.forward(x);
                let z = part.cls_head.forward(&v.view());
                acc = Some(match acc {
                    Some(a) => a + z,
                    None => z,
                });
            }
            let mut mean = acc.expect("at least one expert");
            let k = model.parts.len() as f64;
            mean.mapv_inplace(|v| v / k);
            Ok(mean)
        }
    }
}

fn posthoc_rows(z: &Array2<f64>, prior: &ClassPrior, tau: f64) -> Result<Array2<f64>> {
    let mut probs = Array2::<f64>::zeros(z.dim());
    for (row, mut dst) in z.rows().into_iter().zip(probs.rows_mut()) {
        dst.assign(&posthoc_adjust(&row, prior, tau)?);
    }
    Ok(probs)
}

/// Probabilities from one expert's encoder and classification head with
/// post-hoc prior correction.
pub fn predict_single(
    model: &InferenceModel,
    expert: usize,
    x: &ArrayView2<f64>,
    prior: &ClassPrior,
    posthoc_tau: f64,
) -> Result<Array2<f64>> {
    let z = predict_logits(model, PredictMode::Single(expert), x)?;
    posthoc_rows(&z, prior, posthoc_tau)
}

/// Probabilities from the logit-averaged ensemble with post-hoc prior
/// correction.
pub fn predict_ensemble(
    model: &InferenceModel,
    x: &ArrayView2<f64>,
    prior: &ClassPrior,
    posthoc_tau: f64,
) -> Result<Array2<f64>> {
    let z = predict_logits(model, PredictMode::Ensemble, x)?;
    posthoc_rows(&z, prior, posthoc_tau)
}

/// Mean balanced cross-entropy of raw logits over a labeled split.
pub fn mean_bc_loss(z: &Array2<f64>, labels: &[usize], prior: &ClassPrior) -> Result<f64> {
    if z.nrows() != labels.len() || labels.is_empty() {
        return Err(EclError::InvalidInput("labels must match logit rows".into()));
    }
    let mut acc = 0.0;
    for (row, &y) in z.rows().into_iter().zip(labels) {
        acc += bc_loss(&row, y, prior)?;
    }
    Ok(acc / labels.len() as f64)
}

/// Full-state checkpoint of the trained model.
pub fn state_checkpoint(state: &TrainState) -> Result<Checkpoint> {
    build_checkpoint(&state.experts, &state.twins, &state.queues)
}

/// `epoch,sup,kd_logit,kd_feature,con,total` rows from the per-epoch means.
pub fn history_csv(epoch_history: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,sup,kd_logit,kd_feature,con,total\n");
    for (i, b) in epoch_history.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            b.sup,
            b.kd_logit,
            b.kd_feature,
            b.con,
            b.total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_model;
    use crate::ltdata::{build_synthetic_lt_dataset, LongTailSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_dataset() -> SyntheticDataset {
        let spec = LongTailSpec { num_classes: 3, n_max: 30, gamma: 5.0, seed: 11 };
        build_synthetic_lt_dataset(&spec, 4, 3.0, 10).unwrap()
    }

    fn base_config() -> TrainConfig {
        TrainConfig {
            num_experts: 2,
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.05,
            twin_momentum: 0.9,
            prior: ClassPrior::from_counts(&[30, 14, 6], 1.0).unwrap(),
            kd: KDConfig::default(),
            seed: 5,
            optimizer: OptimizerKind::SgdMomentum,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            jitter_sigma: 0.05,
            arch: ExpertArch {
                input_dim: 4,
                encoder_widths: vec![8, 6],
                num_classes: 3,
                embed_dim: 4,
            },
            queue_size: 16,
            bkt_scope: BktScope::Student,
            feature_kd_weighted: false,
        }
    }

    #[test]
    fn single_expert_has_no_kd_terms() {
        let ds = small_dataset();
        let config = TrainConfig { num_experts: 1, epochs: 1, ..base_config() };
        let state = fit(&ds, &config).unwrap();
        for b in &state.loss_history {
            assert_eq!(b.kd_logit, 0.0);
            assert_eq!(b.kd_feature, 0.0);
            assert!(b.con > 0.0);
            assert_eq!(b.total, b.sup + config.kd.beta * b.con);
        }
    }

    #[test]
    fn train_step_is_deterministic() {
        let ds = small_dataset();
        let config = base_config();
        let batch = two_view_batch(&ds, &(0..8).collect::<Vec<_>>(), 0.05, 3).unwrap();
        let mut s1 = init_state(&config).unwrap();
        let mut s2 = init_state(&config).unwrap();
        let b1 = train_step(&mut s1, &batch, &config).unwrap();
        let b2 = train_step(&mut s2, &batch, &config).unwrap();
        assert_eq!(b1, b2);
        for (e1, e2) in s1.experts.iter().zip(&s2.experts) {
            assert_eq!(e1, e2);
        }
        for (q1, q2) in s1.queues.iter().zip(&s2.queues) {
            assert_eq!(q1, q2);
        }
    }

    #[test]
    fn fit_zero_epochs_returns_initial_state() {
        let ds = small_dataset();
        let config = TrainConfig { epochs: 0, ..base_config() };
        let state = fit(&ds, &config).unwrap();
        let fresh = init_state(&config).unwrap();
        assert_eq!(state.experts, fresh.experts);
        assert!(state.loss_history.is_empty());
        assert!(state.epoch_history.is_empty());
    }

    #[test]
    fn fit_is_reproducible() {
        let ds = small_dataset();
        let config = base_config();
        let s1 = fit(&ds, &config).unwrap();
        let s2 = fit(&ds, &config).unwrap();
        assert_eq!(s1.loss_history, s2.loss_history);
        assert_eq!(s1.experts, s2.experts);
    }

    #[test]
    fn collaborative_equals_independent_without_coupling() {
        let ds = small_dataset();
        let config = TrainConfig {
            num_experts: 3,
            epochs: 2,
            kd: KDConfig { alpha: 0.0, beta: 0.0, ..KDConfig::default() },
            ..base_config()
        };
        let collab = fit(&ds, &config).unwrap();
        let indep = fit_independent(&ds, &config).unwrap();
        for (a, b) in collab.experts.iter().zip(&indep.experts) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn loss_decreases_on_frozen_batch() {
        let ds = small_dataset();
        let config = TrainConfig {
            num_experts: 2,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            // Static objective: the contrastive branch moves its own targets
            // (twin and queue), so keep it off for the descent check.
            kd: KDConfig { beta: 0.0, ..KDConfig::default() },
            ..base_config()
        };
        let batch = two_view_batch(&ds, &(0..12).collect::<Vec<_>>(), 0.0, 2).unwrap();
        let mut state = init_state(&config).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let b = train_step(&mut state, &batch, &config).unwrap();
            if step >= 1 {
                assert!(
                    b.total < last,
                    "loss rose at step {step}: {} -> {}",
                    last,
                    b.total
                );
            }
            last = b.total;
        }
    }

    #[test]
    fn separable_blobs_reach_high_train_accuracy() {
        let spec = LongTailSpec { num_classes: 4, n_max: 40, gamma: 1.0, seed: 3 };
        let ds = build_synthetic_lt_dataset(&spec, 4, 6.0, 10).unwrap();
        let config = TrainConfig {
            num_experts: 1,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.1,
            prior: ClassPrior::balanced(4, 1.0).unwrap(),
            kd: KDConfig { alpha: 0.0, beta: 0.0, ..KDConfig::default() },
            arch: ExpertArch {
                input_dim: 4,
                encoder_widths: vec![16, 16],
                num_classes: 4,
                embed_dim: 4,
            },
            ..base_config()
        };
        let state = fit(&ds, &config).unwrap();
        let model = InferenceModel::from_state(&state);
        let probs = predict_single(&model, 0, &ds.train_x.view(), &config.prior, 0.0).unwrap();
        let correct = probs
            .rows()
            .into_iter()
            .zip(&ds.train_y)
            .filter(|(row, &y)| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best == y
            })
            .count();
        let acc = correct as f64 / ds.train_len() as f64;
        assert!(acc > 0.95, "train accuracy only {acc}");
    }

    #[test]
    fn predict_matches_posthoc_examples() {
        // Experts with zero weights emit pure bias logits.
        let mut state = init_state(&TrainConfig {
            num_experts: 2,
            ..base_config()
        })
        .unwrap();
        for expert in &mut state.experts {
            expert.cls_head.w.fill(0.0);
        }
        state.experts[0].cls_head.b.assign(&array![2.0, 0.0, 0.0]);
        state.experts[1].cls_head.b.assign(&array![0.0, 2.0, 0.0]);
        let model = InferenceModel::from_state(&state);
        let x = Array2::<f64>::zeros((1, 4));
        let balanced = ClassPrior::balanced(3, 1.0).unwrap();

        // Ensemble averages logits before the softmax.
        let probs = predict_ensemble(&model, &x.view(), &balanced, 0.0).unwrap();
        assert_abs_diff_eq!(probs[(0, 0)], probs[(0, 1)], epsilon = 1e-12);
        let z = predict_logits(&model, PredictMode::Ensemble, &x.view()).unwrap();
        assert_eq!(z, array![[1.0, 1.0, 0.0]]);

        // Post-hoc correction on constant logits reproduces the worked
        // two-class example.
        let mut state = init_state(&TrainConfig {
            num_experts: 1,
            prior: ClassPrior::new(vec![0.9, 0.1], vec![0.5, 0.5], 1.0).unwrap(),
            arch: ExpertArch {
                input_dim: 4,
                encoder_widths: vec![8, 6],
                num_classes: 2,
                embed_dim: 4,
            },
            ..base_config()
        })
        .unwrap();
        state.experts[0].cls_head.w.fill(0.0);
        state.experts[0].cls_head.b.fill(0.0);
        let model = InferenceModel::from_state(&state);
        let prior = ClassPrior::new(vec![0.9, 0.1], vec![0.5, 0.5], 1.0).unwrap();
        let probs = predict_single(&model, 0, &x.view(), &prior, 1.0).unwrap();
        assert_abs_diff_eq!(probs[(0, 0)], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[(0, 1)], 0.9, epsilon = 1e-12);

        // tau = 0 leaves plain softmax.
        let probs = predict_single(&model, 0, &x.view(), &prior, 0.0).unwrap();
        assert_abs_diff_eq!(probs[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ensemble_of_one_equals_single() {
        let ds = small_dataset();
        let config = TrainConfig { num_experts: 1, epochs: 1, ..base_config() };
        let state = fit(&ds, &config).unwrap();
        let model = InferenceModel::from_state(&state);
        let prior = &config.prior;
        let single = predict_single(&model, 0, &ds.test_x.view(), prior, 0.7).unwrap();
        let ensemble = predict_ensemble(&model, &ds.test_x.view(), prior, 0.7).unwrap();
        assert_eq!(single, ensemble);
        assert!(predict_single(&model, 1, &ds.test_x.view(), prior, 0.0).is_err());
    }

    #[test]
    fn stripped_checkpoint_predicts_identically() {
        let ds = small_dataset();
        let config = base_config();
        let state = fit(&ds, &config).unwrap();
        let full = state_checkpoint(&state).unwrap();
        let mut stripped = full.clone();
        stripped.strip_training_tensors();

        let m_full = InferenceModel::from_loaded(&load_model(&full).unwrap());
        let m_stripped = InferenceModel::from_loaded(&load_model(&stripped).unwrap());
        let p_full =
            predict_ensemble(&m_full, &ds.test_x.view(), &config.prior, 1.0).unwrap();
        let p_stripped =
            predict_ensemble(&m_stripped, &ds.test_x.view(), &config.prior, 1.0).unwrap();
        assert_eq!(p_full, p_stripped);
    }

    #[test]
    fn history_totals_satisfy_identity() {
        let ds = small_dataset();
        let config = base_config();
        let state = fit(&ds, &config).unwrap();
        for b in state.loss_history.iter().chain(&state.epoch_history) {
            let expected =
                b.sup + config.kd.alpha * (b.kd_logit + b.kd_feature) + config.kd.beta * b.con;
            assert_eq!(b.total, expected);
        }
        let csv = history_csv(&state.epoch_history);
        assert!(csv.starts_with("epoch,sup,kd_logit,kd_feature,con,total\n"));
        assert_eq!(csv.lines().count(), 1 + config.epochs);
    }

    #[test]
    fn nan_learning_rate_aborts_with_numerical_error() {
        let ds = small_dataset();
        let config = TrainConfig { learning_rate: 1e300, epochs: 3, ..base_config() };
        let err = fit(&ds, &config).unwrap_err();
        assert!(matches!(err, EclError::Numerical(_)), "got {err:?}");
    }
}
