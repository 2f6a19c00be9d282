//! Training losses and logit adjustments.
//!
//! Everything here is a pure function of its inputs. Functions with a
//! `_grad` twin return the analytic gradient with respect to the inputs
//! that receive gradient during training; teacher-side distributions,
//! contrastive keys, queue entries, and the per-sample transfer weights are
//! treated as constants, which the `_detached` variants make explicit by
//! taking the constant side as a separate argument.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{EclError, Result};
use crate::ltdata::ClassPrior;

/// Distillation and contrastive hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDConfig {
    /// Distillation temperature for logit- and feature-level KD.
    pub tau_kd: f64,
    /// Weight of the two distillation terms in the total loss.
    pub alpha: f64,
    /// Weight of the contrastive term in the total loss.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau_con: f64,
    /// Clamp for head probabilities before log-ratios.
    pub prob_floor: f64,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self { tau_kd: 1.0, alpha: 0.6, beta: 1.0, tau_con: 1.0, prob_floor: 1e-6 }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_kd > 0.0) || !(self.tau_con > 0.0) {
            return Err(EclError::InvalidInput("temperatures must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(EclError::InvalidInput("alpha and beta must be >= 0".into()));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 0.5) {
            return Err(EclError::InvalidInput("prob_floor must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Scalar components of one training objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub kd_logit: f64,
    pub kd_feature: f64,
    pub con: f64,
    pub total: f64,
}

/// Combines the components: `total = sup + alpha*(kd_logit + kd_feature) +
/// beta*con`.
pub fn total_loss(
    sup: f64,
    kd_logit: f64,
    kd_feature: f64,
    con: f64,
    config: &KDConfig,
) -> LossBreakdown {
    LossBreakdown {
        sup,
        kd_logit,
        kd_feature,
        con,
        total: sup + config.alpha * (kd_logit + kd_feature) + config.beta * con,
    }
}

fn check_finite(z: &ArrayView1<f64>) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(EclError::InvalidInput("logits must be finite".into()));
    }
    Ok(())
}

fn check_label(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(EclError::InvalidInput(format!(
            "label {y} out of range for {c} classes"
        )));
    }
    Ok(())
}

fn log_sum_exp(z: &ArrayView1<f64>) -> f64 {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable `log softmax(z)`.
pub fn log_softmax(z: &ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(z);
    z.mapv(|v| v - lse)
}

/// Numerically stable `softmax(z)`.
pub fn softmax(z: &ArrayView1<f64>) -> Array1<f64> {
    let mut p = log_softmax(z);
    p.mapv_inplace(f64::exp);
    p
}

/// Cross-entropy `-log softmax(z)[y]`.
pub fn ce_loss(z: &ArrayView1<f64>, y: usize) -> Result<f64> {
    check_finite(z)?;
    check_label(y, z.len())?;
    Ok(log_sum_exp(z) - z[y])
}

/// Cross-entropy and its gradient `softmax(z) - onehot(y)`.
pub fn ce_loss_grad(z: &ArrayView1<f64>, y: usize) -> Result<(f64, Array1<f64>)> {
    let loss = ce_loss(z, y)?;
    let mut g = softmax(z);
    g[y] -= 1.0;
    Ok((loss, g))
}

fn adjusted_logits(z: &ArrayView1<f64>, prior: &ClassPrior) -> Result<Array1<f64>> {
    if z.len() != prior.num_classes() {
        return Err(EclError::InvalidInput(format!(
            "prior has {} classes but logits have {}",
            prior.num_classes(),
            z.len()
        )));
    }
    let bias = prior.bias();
    Ok(Array1::from_iter(
        z.iter().zip(&bias).map(|(&v, &b)| v + prior.tau_bc * b),
    ))
}

/// Balanced cross-entropy: cross-entropy on logits shifted by
/// `tau_bc * (log p_s(y) - log p_t(y))`, compensating the train/test prior
/// mismatch during training.
pub fn bc_loss(z: &ArrayView1<f64>, y: usize, prior: &ClassPrior) -> Result<f64> {
    let adjusted = adjusted_logits(z, prior)?;
    ce_loss(&adjusted.view(), y)
}

/// Balanced cross-entropy and its gradient with respect to `z`.
pub fn bc_loss_grad(
    z: &ArrayView1<f64>,
    y: usize,
    prior: &ClassPrior,
) -> Result<(f64, Array1<f64>)> {
    let adjusted = adjusted_logits(z, prior)?;
    ce_loss_grad(&adjusted.view(), y)
}

/// Post-hoc prior correction: `softmax(z - tau * (log p_s - log p_t))`,
/// the inference-time counterpart of the balanced cross-entropy shift.
pub fn posthoc_adjust(
    z: &ArrayView1<f64>,
    prior: &ClassPrior,
    tau: f64,
) -> Result<Array1<f64>> {
    check_finite(z)?;
    if z.len() != prior.num_classes() {
        return Err(EclError::InvalidInput(format!(
            "prior has {} classes but logits have {}",
            prior.num_classes(),
            z.len()
        )));
    }
    if !tau.is_finite() {
        return Err(EclError::InvalidInput("tau must be finite".into()));
    }
    let bias = prior.bias();
    let shifted =
        Array1::from_iter(z.iter().zip(&bias).map(|(&v, &b)| v - tau * b));
    Ok(softmax(&shifted.view()))
}

/// Head probabilities normalized by the per-sample standard deviation of the
/// logits: `softmax(z / std(z))`, falling back to uniform when the logits are
/// constant. Entries are clamped to `[floor, 1 - floor]` and renormalized so
/// downstream log-ratios stay finite.
pub fn head_probs(z: &ArrayView1<f64>, floor: f64) -> Result<Array1<f64>> {
    check_finite(z)?;
    let c = z.len();
    if c < 2 {
        return Err(EclError::InvalidInput("need at least 2 classes".into()));
    }
    if !(floor > 0.0 && floor < 0.5) {
        return Err(EclError::InvalidInput("floor must lie in (0, 0.5)".into()));
    }
    let mean = z.sum() / c as f64;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
    let sigma = var.sqrt();
    let mut p = if sigma < 1e-8 {
        Array1::from_elem(c, 1.0 / c as f64)
    } else {
        let scaled = z.mapv(|v| v / sigma);
        softmax(&scaled.view())
    };
    p.mapv_inplace(|v| v.clamp(floor, 1.0 - floor));
    let sum = p.sum();
    p.mapv_inplace(|v| v / sum);
    Ok(p)
}

/// Transfer weight `log p_cls(y) / log p_ref(y)`: large when the
/// distillation-supervised head is less confident on the true class than the
/// label-only reference head (an under-represented sample), small in the
/// opposite case. Treated as a constant in gradients.
pub fn bkt_weight(
    p_ref: &ArrayView1<f64>,
    p_cls: &ArrayView1<f64>,
    y: usize,
    floor: f64,
) -> Result<f64> {
    if p_ref.len() != p_cls.len() {
        return Err(EclError::InvalidInput("probability vectors differ in length".into()));
    }
    check_label(y, p_ref.len())?;
    for p in [p_ref, p_cls] {
        if p.iter().any(|&v| !(v >= floor * 0.5) || !(v <= 1.0 - floor * 0.5)) {
            return Err(EclError::InvalidInput(
                "probabilities must lie inside the clamped range".into(),
            ));
        }
        let sum = p.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EclError::InvalidInput(format!(
                "probabilities must sum to 1, got {sum}"
            )));
        }
    }
    Ok(p_cls[y].ln() / p_ref[y].ln())
}

fn check_expert_stack(stack: &[Array2<f64>], what: &str) -> Result<(usize, usize, usize)> {
    let k = stack.len();
    if k < 2 {
        return Err(EclError::InvalidInput(format!(
            "{what} distillation needs at least 2 experts, got {k}"
        )));
    }
    let (n, c) = stack[0].dim();
    for m in stack {
        if m.dim() != (n, c) {
            return Err(EclError::InvalidInput(format!(
                "{what} matrices must share one shape"
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(EclError::InvalidInput(format!("{what} must be finite")));
        }
    }
    Ok((k, n, c))
}

fn check_weights(weights: &Array2<f64>, k: usize, n: usize) -> Result<()> {
    if weights.dim() != (k, n) {
        return Err(EclError::InvalidInput(format!(
            "weights must be {k}x{n}, got {:?}",
            weights.dim()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(EclError::InvalidInput("weights must be positive".into()));
    }
    Ok(())
}

fn tempered_log_probs(stack: &[Array2<f64>], tau: f64) -> Vec<Array2<f64>> {
    stack
        .iter()
        .map(|m| {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let scaled = row.mapv(|v| v / tau);
                row.assign(&log_softmax(&scaled.view()));
            }
            out
        })
        .collect()
}

/// Sum over all ordered expert pairs and samples of
/// `w * tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))`, averaged
/// by `N * K * (K-1)`. `weights` is indexed `[student_expert, sample]`.
///
/// The teacher stack is a constant: gradients flow only into the student
/// logits of each pair, so every expert is taught by all others.
pub fn kd_logit_loss_detached(
    teacher_logits: &[Array2<f64>],
    student_logits: &[Array2<f64>],
    weights: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(EclError::InvalidInput("tau must be positive".into()));
    }
    let (k, n, c) = check_expert_stack(teacher_logits, "logit")?;
    let (ks, ns, cs) = check_expert_stack(student_logits, "logit")?;
    if (k, n, c) != (ks, ns, cs) {
        return Err(EclError::InvalidInput(
            "teacher and student stacks must share one shape".into(),
        ));
    }
    check_weights(weights, k, n)?;
    let t_logp = tempered_log_probs(teacher_logits, tau);
    let s_logp = tempered_log_probs(student_logits, tau);
    let mut acc = 0.0;
    for kt in 0..k {
        for q in 0..k {
            if q == kt {
                continue;
            }
            for i in 0..n {
                let mut kl = 0.0;
                for cidx in 0..c {
                    let lp = t_logp[kt][(i, cidx)];
                    kl += lp.exp() * (lp - s_logp[q][(i, cidx)]);
                }
                acc += weights[(q, i)] * tau * tau * kl;
            }
        }
    }
    Ok(acc / (n as f64 * k as f64 * (k - 1) as f64))
}

/// Re-weighted logit-level mutual distillation across the expert stack.
pub fn kd_logit_loss(
    logits: &[Array2<f64>],
    weights: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    kd_logit_loss_detached(logits, logits, weights, tau)
}

/// Logit KD loss and per-expert gradients. Only student-side terms
/// contribute: `g[q] = sum_{k != q} w[q,i] * tau * (p_q - p_k) / (NK(K-1))`.
pub fn kd_logit_loss_grad(
    logits: &[Array2<f64>],
    weights: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let loss = kd_logit_loss(logits, weights, tau)?;
    let (k, n, c) = check_expert_stack(logits, "logit")?;
    let probs: Vec<Array2<f64>> = tempered_log_probs(logits, tau)
        .into_iter()
        .map(|mut m| {
            m.mapv_inplace(f64::exp);
            m
        })
        .collect();
    let norm = n as f64 * k as f64 * (k - 1) as f64;
    let mut grads = vec![Array2::<f64>::zeros((n, c)); k];
    for q in 0..k {
        for kt in 0..k {
            if kt == q {
                continue;
            }
            for i in 0..n {
                let w = weights[(q, i)] * tau / norm;
                for cidx in 0..c {
                    grads[q][(i, cidx)] += w * (probs[q][(i, cidx)] - probs[kt][(i, cidx)]);
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Feature-level mutual distillation: KL between softmax-normalized encoder
/// features over all ordered expert pairs, averaged by `N * K * (K-1)`.
/// Optional per-sample weights follow the logit-KD convention.
pub fn kd_feature_loss_detached(
    teacher_features: &[Array2<f64>],
    student_features: &[Array2<f64>],
    weights: Option<&Array2<f64>>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(EclError::InvalidInput("tau must be positive".into()));
    }
    let (k, n, d) = check_expert_stack(teacher_features, "feature")?;
    if check_expert_stack(student_features, "feature")? != (k, n, d) {
        return Err(EclError::InvalidInput(
            "teacher and student stacks must share one shape".into(),
        ));
    }
    if let Some(w) = weights {
        check_weights(w, k, n)?;
    }
    let t_logp = tempered_log_probs(teacher_features, tau);
    let s_logp = tempered_log_probs(student_features, tau);
    let mut acc = 0.0;
    for kt in 0..k {
        for q in 0..k {
            if q == kt {
                continue;
            }
            for i in 0..n {
                let mut kl = 0.0;
                for didx in 0..d {
                    let lp = t_logp[kt][(i, didx)];
                    kl += lp.exp() * (lp - s_logp[q][(i, didx)]);
                }
                let w = weights.map_or(1.0, |w| w[(q, i)]);
                acc += w * tau * tau * kl;
            }
        }
    }
    Ok(acc / (n as f64 * k as f64 * (k - 1) as f64))
}

/// Unweighted feature-level distillation across the expert stack.
pub fn kd_feature_loss(features: &[Array2<f64>], tau: f64) -> Result<f64> {
    kd_feature_loss_detached(features, features, None, tau)
}

/// Feature KD loss and per-expert gradients (student side only).
pub fn kd_feature_loss_grad(
    features: &[Array2<f64>],
    weights: Option<&Array2<f64>>,
    tau: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let loss = kd_feature_loss_detached(features, features, weights, tau)?;
    let (k, n, d) = check_expert_stack(features, "feature")?;
    let probs: Vec<Array2<f64>> = tempered_log_probs(features, tau)
        .into_iter()
        .map(|mut m| {
            m.mapv_inplace(f64::exp);
            m
        })
        .collect();
    let norm = n as f64 * k as f64 * (k - 1) as f64;
    let mut grads = vec![Array2::<f64>::zeros((n, d)); k];
    for q in 0..k {
        for kt in 0..k {
            if kt == q {
                continue;
            }
            for i in 0..n {
                let w = weights.map_or(1.0, |w| w[(q, i)]) * tau / norm;
                for didx in 0..d {
                    grads[q][(i, didx)] += w * (probs[q][(i, didx)] - probs[kt][(i, didx)]);
                }
            }
        }
    }
    Ok((loss, grads))
}

// Tolerance for unit-norm checks on contrastive inputs; loose enough that a
// finite-difference probe of the query stays admissible.
const UNIT_NORM_TOL: f64 = 1e-4;

fn check_unit(v: &ArrayView1<f64>, what: &str) -> Result<()> {
    let norm = v.dot(v).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(EclError::InvalidInput(format!(
            "{what} must be unit-norm, got |v| = {norm}"
        )));
    }
    Ok(())
}

/// Instance-discrimination loss against a queue of negatives:
/// `-log( exp(q.key/tau) / (exp(q.key/tau) + sum_r exp(q.r/tau)) )`.
/// The key and queue are constants; gradients flow through the query only.
pub fn info_nce_loss(
    query: &ArrayView1<f64>,
    key: &ArrayView1<f64>,
    queue_rows: &ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    info_nce_loss_grad(query, key, queue_rows, tau).map(|(loss, _)| loss)
}

/// Contrastive loss and its gradient with respect to the query.
pub fn info_nce_loss_grad(
    query: &ArrayView1<f64>,
    key: &ArrayView1<f64>,
    queue_rows: &ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    if !(tau > 0.0) {
        return Err(EclError::InvalidInput("tau must be positive".into()));
    }
    let d = query.len();
    if key.len() != d || queue_rows.ncols() != d {
        return Err(EclError::InvalidInput("embedding dimensions differ".into()));
    }
    if queue_rows.nrows() == 0 {
        return Err(EclError::InvalidInput("queue must be non-empty".into()));
    }
    check_unit(query, "query")?;
    check_unit(key, "key")?;
    for row in queue_rows.rows() {
        check_unit(&row, "queue row")?;
    }
    let q_count = queue_rows.nrows();
    let mut logits = Array1::<f64>::zeros(q_count + 1);
    logits[0] = query.dot(key) / tau;
    for (j, row) in queue_rows.rows().into_iter().enumerate() {
        logits[j + 1] = query.dot(&row) / tau;
    }
    let loss = log_sum_exp(&logits.view()) - logits[0];
    let sims = softmax(&logits.view());
    let mut grad = Array1::<f64>::zeros(d);
    grad.scaled_add((sims[0] - 1.0) / tau, key);
    for (j, row) in queue_rows.rows().into_iter().enumerate() {
        grad.scaled_add(sims[j + 1] / tau, &row);
    }
    Ok((loss, grad))
}

/// Balanced cross-entropy over one head's batch: returns the batch mean and
/// per-row gradients scaled by `grad_scale`.
pub fn bc_batch_grad(
    z: &Array2<f64>,
    labels: &[usize],
    prior: &ClassPrior,
    grad_scale: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = z.nrows();
    if labels.len() != n || n == 0 {
        return Err(EclError::InvalidInput("labels must match batch rows".into()));
    }
    let mut sum = 0.0;
    let mut grads = Array2::<f64>::zeros(z.dim());
    for (i, (row, &y)) in z.rows().into_iter().zip(labels).enumerate() {
        let (loss, g) = bc_loss_grad(&row, y, prior)?;
        sum += loss;
        let mut dst = grads.row_mut(i);
        dst.assign(&g);
        dst.mapv_inplace(|v| v * grad_scale);
    }
    Ok((sum / n as f64, grads))
}

/// Supervision loss: the mean over experts of both heads' batch-mean
/// balanced cross-entropy.
pub fn sup_loss(
    z_ref: &[Array2<f64>],
    z_cls: &[Array2<f64>],
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<f64> {
    sup_loss_grad(z_ref, z_cls, labels, prior).map(|(loss, _, _)| loss)
}

/// Supervision loss plus per-expert gradients for the reference and
/// classification heads, scaled by `1 / (K * N)`.
#[allow(clippy::type_complexity)]
pub fn sup_loss_grad(
    z_ref: &[Array2<f64>],
    z_cls: &[Array2<f64>],
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<(f64, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let k = z_ref.len();
    if k == 0 || z_cls.len() != k {
        return Err(EclError::InvalidInput(
            "need matching non-empty ref and cls stacks".into(),
        ));
    }
    let n = labels.len();
    let scale = 1.0 / (k as f64 * n as f64);
    let mut total = 0.0;
    let mut g_ref = Vec::with_capacity(k);
    let mut g_cls = Vec::with_capacity(k);
    for (zr, zc) in z_ref.iter().zip(z_cls) {
        let (ref_mean, gr) = bc_batch_grad(zr, labels, prior, scale)?;
        let (cls_mean, gc) = bc_batch_grad(zc, labels, prior, scale)?;
        total += ref_mean + cls_mean;
        g_ref.push(gr);
        g_cls.push(gc);
    }
    Ok((total / k as f64, g_ref, g_cls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn skewed_prior() -> ClassPrior {
        ClassPrior::new(vec![0.9, 0.1], vec![0.5, 0.5], 1.0).unwrap()
    }

    #[test]
    fn ce_worked_examples() {
        let z = array![0.0, 0.0, 0.0];
        assert_abs_diff_eq!(ce_loss(&z.view(), 2).unwrap(), 3.0f64.ln(), epsilon = 1e-12);
        let z = array![10.0, -10.0];
        assert_abs_diff_eq!(
            ce_loss(&z.view(), 0).unwrap(),
            (-20.0f64).exp().ln_1p(),
            epsilon = 1e-15
        );
        assert!(ce_loss(&z.view(), 2).is_err());
        assert!(ce_loss(&array![f64::NAN, 0.0].view(), 0).is_err());
    }

    #[test]
    fn bc_reduces_to_ce_without_gap() {
        let z = array![0.3, -1.2, 2.0];
        let balanced = ClassPrior::balanced(3, 1.0).unwrap();
        for y in 0..3 {
            assert_abs_diff_eq!(
                bc_loss(&z.view(), y, &balanced).unwrap(),
                ce_loss(&z.view(), y).unwrap(),
                epsilon = 1e-12
            );
        }
        let zero_tau = ClassPrior::new(vec![0.9, 0.05, 0.05], vec![1.0 / 3.0; 3], 0.0).unwrap();
        for y in 0..3 {
            assert_abs_diff_eq!(
                bc_loss(&z.view(), y, &zero_tau).unwrap(),
                ce_loss(&z.view(), y).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn bc_worked_example() {
        let z = array![0.0, 0.0];
        let loss = bc_loss(&z.view(), 1, &skewed_prior()).unwrap();
        assert_abs_diff_eq!(loss, -(0.1f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn bc_equals_ce_on_shifted_logits() {
        let prior = ClassPrior::new(vec![0.7, 0.2, 0.1], vec![0.2, 0.3, 0.5], 1.7).unwrap();
        let z = array![0.4, -0.9, 1.3];
        let bias = prior.bias();
        let shifted = Array1::from_iter(
            z.iter().zip(&bias).map(|(&v, &b)| v + prior.tau_bc * b),
        );
        for y in 0..3 {
            assert_eq!(
                bc_loss(&z.view(), y, &prior).unwrap(),
                ce_loss(&shifted.view(), y).unwrap()
            );
        }
    }

    #[test]
    fn posthoc_worked_examples() {
        let z = array![0.0, 0.0];
        let p = posthoc_adjust(&z.view(), &skewed_prior(), 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.9, epsilon = 1e-12);

        let z = array![1.0, -0.5];
        let plain = softmax(&z.view());
        let p = posthoc_adjust(&z.view(), &skewed_prior(), 0.0).unwrap();
        assert_abs_diff_eq!(p[0], plain[0], epsilon = 1e-12);
        let balanced = ClassPrior::balanced(2, 1.0).unwrap();
        let p = posthoc_adjust(&z.view(), &balanced, 3.0).unwrap();
        assert_abs_diff_eq!(p[0], plain[0], epsilon = 1e-12);
    }

    #[test]
    fn posthoc_undoes_training_shift() {
        let prior = ClassPrior::new(vec![0.8, 0.15, 0.05], vec![1.0 / 3.0; 3], 1.0).unwrap();
        let bias = prior.bias();
        for (a, b, c) in [(0.3, -0.2, 1.1), (2.0, 2.0, -5.0), (0.0, 0.0, 0.0)] {
            let z = array![a, b, c];
            let tau = 1.0;
            let shifted =
                Array1::from_iter(z.iter().zip(&bias).map(|(&v, &bb)| v + tau * bb));
            let adjusted = posthoc_adjust(&shifted.view(), &prior, tau).unwrap();
            let direct = softmax(&z.view());
            for i in 0..3 {
                assert_abs_diff_eq!(adjusted[i], direct[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn head_probs_branches() {
        let floor = 1e-6;
        let p = head_probs(&array![3.0, 3.0, 3.0].view(), floor).unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
        // Population std of {1, -1} is 1, so the logits pass through.
        let p = head_probs(&array![1.0, -1.0].view(), floor).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-9);
        // Doubling the logits doubles sigma: identical output.
        let p2 = head_probs(&array![2.0, -2.0].view(), floor).unwrap();
        assert_abs_diff_eq!(p[0], p2[0], epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], p2[1], epsilon = 1e-12);
    }

    #[test]
    fn head_probs_scale_invariance() {
        let z = array![0.5, -1.0, 2.5, 0.0];
        let base = head_probs(&z.view(), 1e-6).unwrap();
        for c in [0.1, 3.0, 250.0] {
            let scaled = z.mapv(|v| c * v);
            let p = head_probs(&scaled.view(), 1e-6).unwrap();
            for (a, b) in p.iter().zip(base.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn head_probs_clamps_extremes() {
        let floor = 1e-3;
        let p = head_probs(&array![80.0, 0.0].view(), floor).unwrap();
        assert!(p[1] >= floor * 0.99);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bkt_weight_examples() {
        let floor = 1e-6;
        let even = array![0.5, 0.5];
        assert_abs_diff_eq!(
            bkt_weight(&even.view(), &even.view(), 0, floor).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let p_ref = array![0.5, 0.5];
        let p_cls = array![0.1, 0.9];
        let w = bkt_weight(&p_ref.view(), &p_cls.view(), 0, floor).unwrap();
        assert_abs_diff_eq!(w, 0.1f64.ln() / 0.5f64.ln(), epsilon = 1e-12);
        assert!((w - 3.3219).abs() < 1e-4);
        let w = bkt_weight(&p_ref.view(), &p_cls.view(), 1, floor).unwrap();
        assert_abs_diff_eq!(w, 0.9f64.ln() / 0.5f64.ln(), epsilon = 1e-12);
        assert!((w - 0.1520).abs() < 1e-4);
        assert!(bkt_weight(&p_ref.view(), &p_cls.view(), 2, floor).is_err());
    }

    #[test]
    fn bkt_weight_monotonicity() {
        let floor = 1e-6;
        let mut last = f64::INFINITY;
        for cls in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let p_cls = array![cls, 1.0 - cls];
            let p_ref = array![0.5, 0.5];
            let w = bkt_weight(&p_ref.view(), &p_cls.view(), 0, floor).unwrap();
            assert!(w < last, "not decreasing in p_cls[y]");
            last = w;
        }
        let mut last = 0.0;
        for r in [0.05, 0.2, 0.5, 0.8, 0.95] {
            let p_ref = array![r, 1.0 - r];
            let p_cls = array![0.5, 0.5];
            let w = bkt_weight(&p_ref.view(), &p_cls.view(), 0, floor).unwrap();
            assert!(w > last, "not increasing in p_ref[y]");
            last = w;
        }
    }

    fn ones_weights(k: usize, n: usize) -> Array2<f64> {
        Array2::from_elem((k, n), 1.0)
    }

    #[test]
    fn kd_logit_worked_example() {
        let logits = vec![array![[1.0, 0.0]], array![[0.0, 1.0]]];
        let loss = kd_logit_loss(&logits, &ones_weights(2, 1), 1.0).unwrap();
        // Symmetric KL of Bernoulli(sigmoid(1)) vs Bernoulli(sigmoid(-1)),
        // divided by N*K*(K-1) = 2.
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let q = 1.0 - p;
        let sym = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        assert_abs_diff_eq!(loss, sym, epsilon = 1e-12);
        assert!((loss - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn kd_identical_experts_give_zero() {
        let z = array![[0.3, -0.7, 1.1], [2.0, 0.0, -1.0]];
        let logits = vec![z.clone(), z.clone(), z.clone()];
        let loss = kd_logit_loss(&logits, &ones_weights(3, 2), 2.0).unwrap();
        assert!(loss.abs() < 1e-10);
        let feats = vec![z.clone(), z];
        assert!(kd_feature_loss(&feats, 1.0).unwrap().abs() < 1e-10);
    }

    #[test]
    fn kd_is_linear_in_weights() {
        let logits = vec![array![[1.0, 0.0], [0.2, 0.4]], array![[0.0, 1.0], [-0.3, 0.1]]];
        let w = array![[1.0, 2.0], [0.5, 3.0]];
        let base = kd_logit_loss(&logits, &w, 1.5).unwrap();
        let doubled = kd_logit_loss(&logits, &w.mapv(|v| 2.0 * v), 1.5).unwrap();
        assert_abs_diff_eq!(doubled, 2.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn kd_rejects_degenerate_stacks() {
        let one = vec![array![[1.0, 0.0]]];
        assert!(kd_logit_loss(&one, &ones_weights(1, 1), 1.0).is_err());
        let mismatched = vec![array![[1.0, 0.0]], array![[1.0, 0.0, 2.0]]];
        assert!(kd_feature_loss(&mismatched, 1.0).is_err());
    }

    #[test]
    fn kd_feature_worked_example_and_symmetry() {
        let feats = vec![array![[1.0, 0.0]], array![[0.0, 1.0]]];
        let loss = kd_feature_loss(&feats, 1.0).unwrap();
        assert!((loss - 0.4621).abs() < 1e-4);
        let swapped = vec![feats[1].clone(), feats[0].clone()];
        assert_abs_diff_eq!(loss, kd_feature_loss(&swapped, 1.0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn info_nce_worked_examples() {
        // Query equal to key, two orthogonal queue rows, tau = 1.
        let q = array![1.0, 0.0, 0.0];
        let key = q.clone();
        let queue = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let loss = info_nce_loss(&q.view(), &key.view(), &queue.view(), 1.0).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
        assert!((loss - 0.5514).abs() < 1e-4);

        // All similarities equal: uniform over Q+1 candidates.
        let q = array![1.0, 0.0, 0.0];
        let key = array![0.0, 1.0, 0.0];
        let queue = array![[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        let loss = info_nce_loss(&q.view(), &key.view(), &queue.view(), 1.0).unwrap();
        assert_abs_diff_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn info_nce_monotone_in_alignment() {
        let queue = array![[0.0, 1.0], [0.0, -1.0]];
        let mut last = f64::INFINITY;
        for angle in [1.5f64, 1.0, 0.5, 0.0] {
            let q = array![angle.cos(), angle.sin()];
            let key = array![1.0, 0.0];
            let loss = info_nce_loss(&q.view(), &key.view(), &queue.view(), 1.0).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn info_nce_rejects_unnormalized() {
        let q = array![1.0, 1.0];
        let key = array![1.0, 0.0];
        let queue = array![[0.0, 1.0]];
        assert!(info_nce_loss(&q.view(), &key.view(), &queue.view(), 1.0).is_err());
    }

    #[test]
    fn sup_loss_compositions() {
        // K = 1, both heads with uniform logits on a balanced prior.
        let z = Array2::<f64>::zeros((4, 3));
        let prior = ClassPrior::balanced(3, 1.0).unwrap();
        let labels = vec![0, 1, 2, 0];
        let loss = sup_loss(&[z.clone()], &[z.clone()], &labels, &prior).unwrap();
        assert_abs_diff_eq!(loss, 2.0 * 3.0f64.ln(), epsilon = 1e-12);

        // K = 2 mixing the worked bc example with a uniform-probability head.
        let prior = skewed_prior();
        let bias = prior.bias();
        let z_a = Array2::<f64>::zeros((1, 2));
        let z_b = Array2::from_shape_fn((1, 2), |(_, j)| -bias[j]);
        let labels = vec![1];
        let loss = sup_loss(
            &[z_a.clone(), z_b.clone()],
            &[z_a, z_b],
            &labels,
            &prior,
        )
        .unwrap();
        let expected = (2.0 * -(0.1f64.ln()) + 2.0 * 2.0f64.ln()) / 2.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
        assert!((expected - 2.9957).abs() < 1e-4);
    }

    #[test]
    fn total_loss_combines_exactly() {
        let cfg = KDConfig::default();
        let b = total_loss(1.0, 0.5, 0.5, 2.0, &cfg);
        assert_eq!(b.total, 3.6);
        let off = KDConfig { alpha: 0.0, beta: 0.0, ..cfg };
        assert_eq!(total_loss(1.25, 9.0, 9.0, 9.0, &off).total, 1.25);
        let zero = total_loss(0.0, 0.0, 0.0, 0.0, &cfg);
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn kd_config_validation() {
        assert!(KDConfig::default().validate().is_ok());
        assert!(KDConfig { tau_kd: 0.0, ..Default::default() }.validate().is_err());
        assert!(KDConfig { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!(KDConfig { prob_floor: 0.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn ce_and_bc_gradients_match_finite_differences() {
        let prior = ClassPrior::new(vec![0.6, 0.3, 0.1], vec![1.0 / 3.0; 3], 1.3).unwrap();
        let mut z = array![0.7, -0.4, 0.1];
        let y = 2;
        let (_, g_ce) = ce_loss_grad(&z.view(), y).unwrap();
        let (_, g_bc) = bc_loss_grad(&z.view(), y, &prior).unwrap();
        for j in 0..3 {
            let x0 = z[j];
            let fd_ce = central_diff(
                |v| {
                    z[j] = v;
                    ce_loss(&z.view(), y).unwrap()
                },
                x0,
                1e-6,
            );
            assert!(rel_err(fd_ce, g_ce[j]) < 1e-6);
            let fd_bc = central_diff(
                |v| {
                    z[j] = v;
                    bc_loss(&z.view(), y, &prior).unwrap()
                },
                x0,
                1e-6,
            );
            assert!(rel_err(fd_bc, g_bc[j]) < 1e-6);
        }
    }

    #[test]
    fn detached_sides_change_value_but_not_gradient_targets() {
        // Perturbing the teacher stack changes the loss value while the
        // gradient definition only ever touches student terms.
        let logits = vec![array![[1.0, 0.2]], array![[-0.4, 0.9]]];
        let w = ones_weights(2, 1);
        let base = kd_logit_loss_detached(&logits, &logits, &w, 1.0).unwrap();
        let mut teacher = logits.clone();
        teacher[0][(0, 0)] += 0.25;
        let moved = kd_logit_loss_detached(&teacher, &logits, &w, 1.0).unwrap();
        assert!((moved - base).abs() > 1e-6);
    }
}
