//! Evaluation metrics and diagnostics.
//!
//! Top-1 and Many/Medium/Few group accuracy, confusion matrix and per-class
//! prediction histogram, expected calibration error with reliability bins,
//! class-wise average feature distance between expert pairs, and loss and
//! accuracy landscapes under filter-normalized Gaussian weight perturbation.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::collab::{mean_bc_loss, predict_logits, InferenceModel, PredictMode};
use crate::error::{EclError, Result};
use crate::losses::posthoc_adjust;
use crate::ltdata::{ClassPrior, GroupAssignment};
use crate::rng::{rng_from, stream};

/// Accuracy and calibration summary for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_many: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_medium: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_few: Option<f64>,
    /// Per-sample mean of |correctness - confidence|.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    /// Classic binned form: sum_m (|B_m|/N) * |acc(B_m) - conf(B_m)|.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece_binned: Option<f64>,
    /// Mean balanced cross-entropy of the evaluated logits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_loss: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub pred_histogram: Vec<u64>,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_probs(probabilities: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    let (n, c) = probabilities.dim();
    if n == 0 || c == 0 {
        return Err(EclError::InvalidInput("empty probability matrix".into()));
    }
    if labels.len() != n {
        return Err(EclError::InvalidInput(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y >= c) {
        return Err(EclError::InvalidInput("label out of range".into()));
    }
    for row in probabilities.rows() {
        let sum: f64 = row.sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(EclError::InvalidInput(format!(
                "probability rows must sum to 1, got {sum}"
            )));
        }
    }
    Ok(())
}

/// Top-1 accuracy, group accuracy, confusion matrix, and prediction
/// histogram. Calibration and loss fields are left unset.
pub fn evaluate(
    probabilities: &ArrayView2<f64>,
    labels: &[usize],
    groups: &GroupAssignment,
) -> Result<MetricsReport> {
    check_probs(probabilities, labels)?;
    let (n, c) = probabilities.dim();
    let mut confusion = vec![vec![0u64; c]; c];
    let mut correct = 0u64;
    for (row, &y) in probabilities.rows().into_iter().zip(labels) {
        let pred = argmax_row(&row);
        confusion[y][pred] += 1;
        if pred == y {
            correct += 1;
        }
    }
    let mut pred_histogram = vec![0u64; c];
    for row in &confusion {
        for (j, &v) in row.iter().enumerate() {
            pred_histogram[j] += v;
        }
    }
    let group_acc = |classes: &std::collections::BTreeSet<usize>| -> Option<f64> {
        let mut total = 0u64;
        let mut hit = 0u64;
        for &class in classes {
            if class >= c {
                continue;
            }
            total += confusion[class].iter().sum::<u64>();
            hit += confusion[class][class];
        }
        (total > 0).then(|| hit as f64 / total as f64)
    };
    Ok(MetricsReport {
        top1: correct as f64 / n as f64,
        acc_many: group_acc(&groups.many),
        acc_medium: group_acc(&groups.medium),
        acc_few: group_acc(&groups.few),
        ece: None,
        ece_binned: None,
        mean_loss: None,
        confusion,
        pred_histogram,
    })
}

/// Equal-width reliability bins over confidence in [0, 1]; the interval is
/// right-inclusive and zero confidence falls into bin 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub bin_count: usize,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl ReliabilityBins {
    /// Classic binned calibration error `sum_m (|B_m|/N) |acc_m - conf_m|`.
    pub fn expected_gap(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let mut gap = 0.0;
        for m in 0..self.bin_count {
            if self.counts[m] > 0 {
                gap += self.counts[m] as f64 / n as f64
                    * (self.accuracy[m] - self.mean_confidence[m]).abs();
            }
        }
        gap
    }

    /// `bin,count,mean_confidence,accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,count,mean_confidence,accuracy\n");
        for m in 0..self.bin_count {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m + 1,
                self.counts[m],
                self.mean_confidence[m],
                self.accuracy[m]
            ));
        }
        out
    }
}

/// Expected calibration error in the per-sample absolute-difference form
/// `(1/N) sum_i |1(pred_i = y_i) - confidence_i|`, plus the reliability bins
/// needed for diagrams and the binned variant.
pub fn ece(
    probabilities: &ArrayView2<f64>,
    labels: &[usize],
    bins: usize,
) -> Result<(f64, ReliabilityBins)> {
    check_probs(probabilities, labels)?;
    if bins == 0 {
        return Err(EclError::InvalidInput("need at least one bin".into()));
    }
    let n = probabilities.nrows();
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0usize; bins];
    let mut per_sample = 0.0;
    for (row, &y) in probabilities.rows().into_iter().zip(labels) {
        let pred = argmax_row(&row);
        let confidence = row[pred];
        let correct = (pred == y) as usize;
        per_sample += (correct as f64 - confidence).abs();
        // ceil(conf * bins) maps (0, 1] onto 1..=bins right-inclusively.
        let bin = ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        counts[bin] += 1;
        conf_sum[bin] += confidence;
        hit_sum[bin] += correct;
    }
    let mut mean_confidence = vec![0.0; bins];
    let mut accuracy = vec![0.0; bins];
    for m in 0..bins {
        if counts[m] > 0 {
            mean_confidence[m] = conf_sum[m] / counts[m] as f64;
            accuracy[m] = hit_sum[m] as f64 / counts[m] as f64;
        }
    }
    Ok((
        per_sample / n as f64,
        ReliabilityBins { bin_count: bins, counts, mean_confidence, accuracy },
    ))
}

/// Class-wise average L2 distance between two experts' features on the same
/// rows: `D_i = mean over samples of class i of |v_m - v_n|_2`. Classes with
/// no samples are reported absent.
pub fn class_feature_distance(
    features_m: &ArrayView2<f64>,
    features_n: &ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    if features_m.dim() != features_n.dim() {
        return Err(EclError::InvalidInput("feature matrices differ in shape".into()));
    }
    if features_m.nrows() != labels.len() {
        return Err(EclError::InvalidInput("labels must match feature rows".into()));
    }
    if labels.iter().any(|&y| y >= num_classes) {
        return Err(EclError::InvalidInput("label out of range".into()));
    }
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for ((a, b), &y) in features_m
        .rows()
        .into_iter()
        .zip(features_n.rows())
        .zip(labels)
    {
        let dist: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        sums[y] += dist;
        counts[y] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Mean loss and accuracy per noise level, averaged over `repeats` draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeScan {
    pub noise_levels: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub mean_acc: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

impl LandscapeScan {
    /// `level,mean_loss,mean_acc` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,mean_loss,mean_acc\n");
        for i in 0..self.noise_levels.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.noise_levels[i], self.mean_loss[i], self.mean_acc[i]
            ));
        }
        out
    }
}

/// Mean balanced cross-entropy of the predicted logits and top-1 accuracy of
/// the post-hoc-adjusted probabilities on a labeled split.
pub fn eval_model_loss_acc(
    model: &InferenceModel,
    mode: PredictMode,
    x: &ArrayView2<f64>,
    labels: &[usize],
    prior: &ClassPrior,
    posthoc_tau: f64,
) -> Result<(f64, f64)> {
    let z = predict_logits(model, mode, x)?;
    let loss = mean_bc_loss(&z, labels, prior)?;
    let mut correct = 0usize;
    for (row, &y) in z.rows().into_iter().zip(labels) {
        let probs = posthoc_adjust(&row, prior, posthoc_tau)?;
        if argmax_row(&probs.view()) == y {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / labels.len() as f64))
}

fn parts_in_mode(model: &InferenceModel, mode: PredictMode) -> Result<Vec<usize>> {
    match mode {
        PredictMode::Single(k) => {
            if k >= model.num_experts() {
                return Err(EclError::InvalidInput(format!(
                    "expert index {k} out of range"
                )));
            }
            Ok(vec![k])
        }
        PredictMode::Ensemble => Ok((0..model.num_experts()).collect()),
    }
}

/// Adds `level * |group| * g/|g|` Gaussian noise to every weight group of the
/// parts that feed the prediction. Groups are each output unit's incoming
/// weight row plus one group per bias vector.
fn perturb_parts(
    model: &mut InferenceModel,
    parts: &[usize],
    level: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) {
    let mut noise = Vec::new();
    for &p in parts {
        let part = &mut model.parts[p];
        let mut groups: Vec<&mut [f64]> = Vec::new();
        for lin in part
            .encoder
            .layers
            .iter_mut()
            .chain(std::iter::once(&mut part.cls_head))
        {
            for row in lin.w.rows_mut() {
                groups.push(row.into_slice().expect("contiguous row"));
            }
            groups.push(lin.b.as_slice_mut().expect("contiguous bias"));
        }
        for group in groups {
            let w_norm = group.iter().map(|v| v * v).sum::<f64>().sqrt();
            noise.clear();
            noise.extend((0..group.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let g_norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
            if g_norm == 0.0 {
                continue;
            }
            let scale = level * w_norm / g_norm;
            for (w, g) in group.iter_mut().zip(&noise) {
                *w += scale * g;
            }
        }
    }
    let _ = model;
}

/// Loss/accuracy landscape: for each noise level, perturb every weight group
/// by Gaussian noise normalized to the group's L2 norm, evaluate, and restore
/// the original weights. Level 0 reproduces the unperturbed metrics exactly.
#[allow(clippy::too_many_arguments)]
pub fn landscape_scan(
    model: &mut InferenceModel,
    mode: PredictMode,
    x: &ArrayView2<f64>,
    labels: &[usize],
    prior: &ClassPrior,
    posthoc_tau: f64,
    noise_levels: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<LandscapeScan> {
    if noise_levels.is_empty() {
        return Err(EclError::InvalidInput("need at least one noise level".into()));
    }
    if noise_levels.iter().any(|&l| !(l >= 0.0)) {
        return Err(EclError::InvalidInput("noise levels must be >= 0".into()));
    }
    if noise_levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(EclError::InvalidInput("noise levels must be ascending".into()));
    }
    if repeats == 0 {
        return Err(EclError::InvalidInput("repeats must be >= 1".into()));
    }
    let parts = parts_in_mode(model, mode)?;
    let snapshot: Vec<_> = parts.iter().map(|&p| model.parts[p].clone()).collect();

    let mut mean_loss = Vec::with_capacity(noise_levels.len());
    let mut mean_acc = Vec::with_capacity(noise_levels.len());
    for (li, &level) in noise_levels.iter().enumerate() {
        if level == 0.0 {
            let (loss, acc) = eval_model_loss_acc(model, mode, x, labels, prior, posthoc_tau)?;
            mean_loss.push(loss);
            mean_acc.push(acc);
            continue;
        }
        let mut loss_acc = 0.0;
        let mut acc_acc = 0.0;
        for rep in 0..repeats {
            let mut rng = rng_from(&[seed, stream::LANDSCAPE, li as u64, rep as u64]);
            perturb_parts(model, &parts, level, &mut rng);
            let result = eval_model_loss_acc(model, mode, x, labels, prior, posthoc_tau);
            for (&p, snap) in parts.iter().zip(&snapshot) {
                model.parts[p] = snap.clone();
            }
            let (loss, acc) = result?;
            loss_acc += loss;
            acc_acc += acc;
        }
        mean_loss.push(loss_acc / repeats as f64);
        mean_acc.push(acc_acc / repeats as f64);
    }
    Ok(LandscapeScan {
        noise_levels: noise_levels.to_vec(),
        mean_loss,
        mean_acc,
        repeats,
        seed,
    })
}

/// Plain count rows, one line per true class.
pub fn confusion_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Log-scaled companion of the confusion matrix: `ln(1 + count)` per cell.
pub fn confusion_log_csv(confusion: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let cells: Vec<String> = row.iter().map(|&v| format!("{}", (1.0 + v as f64).ln())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `class,count` rows of the per-class prediction histogram.
pub fn pred_histogram_csv(histogram: &[u64]) -> String {
    let mut out = String::from("class,count\n");
    for (class, &count) in histogram.iter().enumerate() {
        out.push_str(&format!("{class},{count}\n"));
    }
    out
}
