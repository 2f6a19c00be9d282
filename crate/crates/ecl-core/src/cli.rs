//! Command implementations behind the `ecl` binary.
//!
//! Each command reads one experiment config, writes its artifacts into
//! `<output.dir>/<run.name>/`, and echoes the resolved config there. Outputs
//! are byte-reproducible from (config, seed).

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::checkpoint::{load_model, Checkpoint};
use crate::collab::{
    fit, history_csv, mean_bc_loss, predict_logits, state_checkpoint, InferenceModel,
    PredictMode,
};
use crate::config::ExperimentConfig;
use crate::error::{EclError, Result};
use crate::losses::posthoc_adjust;
use crate::ltdata::{
    build_synthetic_lt_dataset, group_classes, read_dataset_csv, write_dataset_csv, ClassPrior,
    CountsProfile, SyntheticDataset,
};
use crate::metrics::{
    class_feature_distance, confusion_csv, confusion_log_csv, ece, evaluate, landscape_scan,
    pred_histogram_csv,
};

/// Options for `eval`.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: PredictMode,
    pub posthoc_tau: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mode: PredictMode::Ensemble, posthoc_tau: None, checkpoint: None, dataset: None }
    }
}

/// Options for `landscape`.
#[derive(Debug, Clone)]
pub struct LandscapeOptions {
    pub mode: PredictMode,
    pub posthoc_tau: Option<f64>,
    pub levels: Option<Vec<f64>>,
    pub repeats: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        Self {
            mode: PredictMode::Ensemble,
            posthoc_tau: None,
            levels: None,
            repeats: None,
            checkpoint: None,
            dataset: None,
        }
    }
}

fn ensure_run_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved"), config.resolved_text())?;
    Ok(dir)
}

fn dataset_path(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| config.data.path.clone())
        .unwrap_or_else(|| config.run_dir().join("dataset.csv"))
}

fn checkpoint_path(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.run_dir().join("ckpt.bin"))
}

/// Builds the synthetic dataset, writes the CSV and counts JSON, and prints
/// the Many/Medium/Few assignment.
pub fn cmd_make_dataset(config: &ExperimentConfig) -> Result<()> {
    let dir = ensure_run_dir(config)?;
    let spec = config.long_tail_spec()?;
    let dataset = build_synthetic_lt_dataset(
        &spec,
        config.data.feature_dim,
        config.data.separation,
        config.data.test_per_class,
    )?;
    write_dataset_csv(&dataset, &dataset_path(config, None))?;
    let profile = CountsProfile { counts: dataset.counts.clone(), gamma: config.data.gamma };
    std::fs::write(dir.join("counts.json"), profile.to_json())?;
    let groups = group_classes(&dataset.counts)?;
    println!(
        "train rows {} test rows {} | many {:?} medium {:?} few {:?}",
        dataset.train_len(),
        dataset.test_len(),
        groups.many,
        groups.medium,
        groups.few
    );
    Ok(())
}

/// Trains from the dataset file and writes `ckpt.bin` plus `history.csv`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let dir = ensure_run_dir(config)?;
    let dataset = read_dataset_csv(&dataset_path(config, None))?;
    let train_config = config.train_config(&dataset.counts)?;
    let state = fit(&dataset, &train_config)?;
    state_checkpoint(&state)?.write_to(&dir.join("ckpt.bin"))?;
    std::fs::write(dir.join("history.csv"), history_csv(&state.epoch_history))?;
    Ok(())
}

struct EvalInputs {
    dataset: SyntheticDataset,
    model: InferenceModel,
    prior: ClassPrior,
}

fn load_eval_inputs(
    config: &ExperimentConfig,
    ckpt: Option<&Path>,
    data: Option<&Path>,
) -> Result<EvalInputs> {
    let dataset = read_dataset_csv(&dataset_path(config, data))?;
    let checkpoint = Checkpoint::read_from(&checkpoint_path(config, ckpt))?;
    let loaded = load_model(&checkpoint)?;
    let model = InferenceModel::from_loaded(&loaded);
    if loaded.manifest.c != dataset.num_classes {
        return Err(EclError::Data(format!(
            "checkpoint has {} classes but dataset has {}",
            loaded.manifest.c, dataset.num_classes
        )));
    }
    if model.input_dim() != dataset.feature_dim {
        return Err(EclError::Data(format!(
            "checkpoint expects input dim {} but dataset has {}",
            model.input_dim(),
            dataset.feature_dim
        )));
    }
    let prior = config.class_prior(&dataset.counts)?;
    Ok(EvalInputs { dataset, model, prior })
}

fn check_mode(model: &InferenceModel, mode: PredictMode) -> Result<()> {
    if let PredictMode::Single(k) = mode {
        if k >= model.num_experts() {
            return Err(EclError::InvalidInput(format!(
                "expert index {k} out of range ({} experts)",
                model.num_experts()
            )));
        }
    }
    Ok(())
}

/// Evaluates a checkpoint on the test split and writes the metrics JSON,
/// reliability and confusion CSVs, the prediction histogram, per-expert
/// feature dumps, and the inter-expert feature distances.
pub fn cmd_eval(config: &ExperimentConfig, opts: &EvalOptions) -> Result<()> {
    let dir = ensure_run_dir(config)?;
    let inputs = load_eval_inputs(config, opts.checkpoint.as_deref(), opts.dataset.as_deref())?;
    check_mode(&inputs.model, opts.mode)?;
    let posthoc_tau = opts.posthoc_tau.unwrap_or(config.eval.posthoc_tau);
    let dataset = &inputs.dataset;

    let logits = predict_logits(&inputs.model, opts.mode, &dataset.test_x.view())?;
    let mut probs = Array2::<f64>::zeros(logits.dim());
    for (row, mut dst) in logits.rows().into_iter().zip(probs.rows_mut()) {
        dst.assign(&posthoc_adjust(&row, &inputs.prior, posthoc_tau)?);
    }

    let groups = group_classes(&dataset.counts)?;
    let mut report = evaluate(&probs.view(), &dataset.test_y, &groups)?;
    let (ece_value, bins) = ece(&probs.view(), &dataset.test_y, config.eval.ece_bins)?;
    report.ece = Some(ece_value);
    report.ece_binned = Some(bins.expected_gap());
    report.mean_loss = Some(mean_bc_loss(&logits, &dataset.test_y, &inputs.prior)?);

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(dir.join("metrics.json"), json)?;
    std::fs::write(dir.join("reliability.csv"), bins.to_csv())?;
    std::fs::write(dir.join("confusion.csv"), confusion_csv(&report.confusion))?;
    std::fs::write(dir.join("confusion_log.csv"), confusion_log_csv(&report.confusion))?;
    std::fs::write(dir.join("pred_histogram.csv"), pred_histogram_csv(&report.pred_histogram))?;

    // Feature dumps for external embedding tools, one file per expert, and
    // class-wise distances for every expert pair.
    let mut features = Vec::with_capacity(inputs.model.num_experts());
    for k in 0..inputs.model.num_experts() {
        let v = inputs.model.features(k, &dataset.test_x.view())?;
        let mut out = String::new();
        out.push_str("class");
        for j in 0..v.ncols() {
            out.push_str(&format!(",feature_{j}"));
        }
        out.push('\n');
        for (row, &y) in v.rows().into_iter().zip(&dataset.test_y) {
            out.push_str(&y.to_string());
            for value in row.iter() {
                out.push_str(&format!(",{value}"));
            }
            out.push('\n');
        }
        std::fs::write(dir.join(format!("features_expert{k}.csv")), out)?;
        features.push(v);
    }
    let mut dist_csv = String::from("expert_m,expert_n,class,distance\n");
    for m in 0..features.len() {
        for n in (m + 1)..features.len() {
            let d = class_feature_distance(
                &features[m].view(),
                &features[n].view(),
                &dataset.test_y,
                dataset.num_classes,
            )?;
            for (class, value) in d.iter().enumerate() {
                match value {
                    Some(v) => dist_csv.push_str(&format!("{m},{n},{class},{v}\n")),
                    None => dist_csv.push_str(&format!("{m},{n},{class},\n")),
                }
            }
        }
    }
    std::fs::write(dir.join("feature_distance.csv"), dist_csv)?;
    Ok(())
}

/// Runs the weight-perturbation landscape scan and writes `landscape.csv`.
pub fn cmd_landscape(config: &ExperimentConfig, opts: &LandscapeOptions) -> Result<()> {
    let dir = ensure_run_dir(config)?;
    let inputs = load_eval_inputs(config, opts.checkpoint.as_deref(), opts.dataset.as_deref())?;
    let mut model = inputs.model;
    check_mode(&model, opts.mode)?;
    let posthoc_tau = opts.posthoc_tau.unwrap_or(config.eval.posthoc_tau);
    let levels = opts.levels.clone().unwrap_or_else(|| config.eval.landscape_levels.clone());
    let repeats = opts.repeats.unwrap_or(config.eval.landscape_repeats);
    let scan = landscape_scan(
        &mut model,
        opts.mode,
        &inputs.dataset.test_x.view(),
        &inputs.dataset.test_y,
        &inputs.prior,
        posthoc_tau,
        &levels,
        repeats,
        config.seed,
    )?;
    std::fs::write(dir.join("landscape.csv"), scan.to_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config(dir: &Path) -> ExperimentConfig {
        let mut config = ExperimentConfig::parse_str(
            "data.num_classes = 3\n\
             data.n_max = 30\n\
             data.gamma = 10\n\
             data.feature_dim = 4\n\
             data.separation = 3.0\n\
             data.test_per_class = 8\n\
             model.encoder_widths = 8,6\n\
             model.embed_dim = 4\n\
             model.queue_size = 32\n\
             train.experts = 2\n\
             train.epochs = 2\n\
             train.batch_size = 8\n\
             eval.landscape_levels = 0,0.5\n\
             eval.landscape_repeats = 2\n",
        )
        .unwrap();
        config.output_dir = dir.to_path_buf();
        config
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let config = test_config(tmp.path());
        cmd_make_dataset(&config).unwrap();
        cmd_train(&config).unwrap();
        cmd_eval(&config, &EvalOptions::default()).unwrap();
        cmd_landscape(&config, &LandscapeOptions::default()).unwrap();
        let dir = config.run_dir();
        for file in [
            "config.resolved",
            "dataset.csv",
            "counts.json",
            "ckpt.bin",
            "history.csv",
            "metrics.json",
            "reliability.csv",
            "confusion.csv",
            "confusion_log.csv",
            "pred_histogram.csv",
            "features_expert0.csv",
            "features_expert1.csv",
            "feature_distance.csv",
            "landscape.csv",
        ] {
            assert!(dir.join(file).exists(), "missing {file}");
        }
    }

    #[test]
    fn eval_requires_matching_shapes() {
        let tmp = tempfile::tempdir().unwrap();
        let config = test_config(tmp.path());
        cmd_make_dataset(&config).unwrap();
        cmd_train(&config).unwrap();
        // A dataset with a different feature dimension is rejected.
        let mut other = test_config(tmp.path());
        other.run_name = "other".into();
        other.data.feature_dim = 5;
        cmd_make_dataset(&other).unwrap();
        let opts = EvalOptions {
            dataset: Some(other.run_dir().join("dataset.csv")),
            checkpoint: Some(config.run_dir().join("ckpt.bin")),
            ..Default::default()
        };
        let err = cmd_eval(&other, &opts).unwrap_err();
        assert!(matches!(err, EclError::Data(_)));
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        let config = test_config(tmp.path());
        let err = cmd_train(&config).unwrap_err();
        assert!(matches!(err, EclError::Data(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn bad_expert_index_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let config = test_config(tmp.path());
        cmd_make_dataset(&config).unwrap();
        cmd_train(&config).unwrap();
        let opts = EvalOptions { mode: PredictMode::Single(5), ..Default::default() };
        assert!(cmd_eval(&config, &opts).is_err());
    }
}
