//! Experiment configuration.
//!
//! Flat `key = value` text with dotted section prefixes, e.g.
//! `train.alpha = 0.6`. Unknown keys are rejected; every omitted key takes
//! its documented default. [`ExperimentConfig::resolved_text`] echoes the
//! complete key set in canonical order so a run can be reproduced from the
//! echo alone.

use std::path::{Path, PathBuf};

use crate::collab::{BktScope, OptimizerKind, TrainConfig};
use crate::error::{EclError, Result};
use crate::expertnet::ExpertArch;
use crate::losses::KDConfig;
use crate::ltdata::{ClassPrior, LongTailSpec};

/// Target label prior assumed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPrior {
    /// Balanced test set (the usual long-tailed evaluation protocol).
    Uniform,
    /// Test distribution equals the train distribution; the bias vanishes.
    Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub num_classes: usize,
    pub n_max: usize,
    pub gamma: f64,
    pub feature_dim: usize,
    pub separation: f64,
    pub test_per_class: usize,
    pub jitter_sigma: f64,
    /// Explicit dataset file; defaults to `<run dir>/dataset.csv`.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub encoder_widths: Vec<usize>,
    pub embed_dim: usize,
    pub queue_size: usize,
    pub twin_momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub experts: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau_kd: f64,
    pub tau_con: f64,
    pub tau_bc: f64,
    pub prob_floor: f64,
    pub bkt_scope: BktScope,
    pub feature_kd_weighted: bool,
    pub target_prior: TargetPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub posthoc_tau: f64,
    pub ece_bins: usize,
    pub landscape_levels: Vec<f64>,
    pub landscape_repeats: usize,
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            output_dir: PathBuf::from("out"),
            seed: 42,
            data: DataSection {
                num_classes: 10,
                n_max: 100,
                gamma: 100.0,
                feature_dim: 16,
                separation: 3.0,
                test_per_class: 50,
                jitter_sigma: 0.1,
                path: None,
            },
            model: ModelSection {
                encoder_widths: vec![64, 64],
                embed_dim: 32,
                queue_size: 1024,
                twin_momentum: 0.999,
            },
            train: TrainSection {
                experts: 3,
                epochs: 30,
                batch_size: 64,
                learning_rate: 0.05,
                optimizer: OptimizerKind::SgdMomentum,
                sgd_momentum: 0.9,
                weight_decay: 0.0,
                alpha: 0.6,
                beta: 1.0,
                tau_kd: 1.0,
                tau_con: 1.0,
                tau_bc: 1.0,
                prob_floor: 1e-6,
                bkt_scope: BktScope::Student,
                feature_kd_weighted: false,
                target_prior: TargetPrior::Uniform,
            },
            eval: EvalSection {
                posthoc_tau: 0.0,
                ece_bins: 15,
                landscape_levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
                landscape_repeats: 5,
            },
        }
    }
}

fn bad_value(key: &str, value: &str) -> EclError {
    EclError::Config(format!("invalid value '{value}' for key '{key}'"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad_value(key, value)),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad_value(key, value)))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            EclError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                EclError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(EclError::Config(format!("duplicate key '{key}'")));
            }
            config.apply(key, value)?;
        }
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(bad_value(key, value));
                }
                self.run_name = value.to_string();
            }
            "output.dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "data.num_classes" => self.data.num_classes = parse_num(key, value)?,
            "data.n_max" => self.data.n_max = parse_num(key, value)?,
            "data.gamma" => self.data.gamma = parse_num(key, value)?,
            "data.feature_dim" => self.data.feature_dim = parse_num(key, value)?,
            "data.separation" => self.data.separation = parse_num(key, value)?,
            "data.test_per_class" => self.data.test_per_class = parse_num(key, value)?,
            "data.jitter_sigma" => self.data.jitter_sigma = parse_num(key, value)?,
            "data.path" => self.data.path = Some(PathBuf::from(value)),
            "model.encoder_widths" => self.model.encoder_widths = parse_list(key, value)?,
            "model.embed_dim" => self.model.embed_dim = parse_num(key, value)?,
            "model.queue_size" => self.model.queue_size = parse_num(key, value)?,
            "model.twin_momentum" => self.model.twin_momentum = parse_num(key, value)?,
            "train.experts" => self.train.experts = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "sgd-momentum" => OptimizerKind::SgdMomentum,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "train.sgd_momentum" => self.train.sgd_momentum = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.alpha" => self.train.alpha = parse_num(key, value)?,
            "train.beta" => self.train.beta = parse_num(key, value)?,
            "train.tau_kd" => self.train.tau_kd = parse_num(key, value)?,
            "train.tau_con" => self.train.tau_con = parse_num(key, value)?,
            "train.tau_bc" => self.train.tau_bc = parse_num(key, value)?,
            "train.prob_floor" => self.train.prob_floor = parse_num(key, value)?,
            "train.bkt_scope" => {
                self.train.bkt_scope = match value {
                    "student" => BktScope::Student,
                    "mean-over-experts" => BktScope::MeanOverExperts,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "train.feature_kd_weighted" => {
                self.train.feature_kd_weighted = parse_bool(key, value)?
            }
            "train.target_prior" => {
                self.train.target_prior = match value {
                    "uniform" => TargetPrior::Uniform,
                    "source" => TargetPrior::Source,
                    _ => return Err(bad_value(key, value)),
                }
            }
            "eval.posthoc_tau" => self.eval.posthoc_tau = parse_num(key, value)?,
            "eval.ece_bins" => self.eval.ece_bins = parse_num(key, value)?,
            "eval.landscape_levels" => self.eval.landscape_levels = parse_list(key, value)?,
            "eval.landscape_repeats" => self.eval.landscape_repeats = parse_num(key, value)?,
            _ => return Err(EclError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical echo with every key present; parsing it reproduces `self`.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("run.name", self.run_name.clone());
        push("output.dir", self.output_dir.display().to_string());
        push("seed", self.seed.to_string());
        push("data.num_classes", self.data.num_classes.to_string());
        push("data.n_max", self.data.n_max.to_string());
        push("data.gamma", self.data.gamma.to_string());
        push("data.feature_dim", self.data.feature_dim.to_string());
        push("data.separation", self.data.separation.to_string());
        push("data.test_per_class", self.data.test_per_class.to_string());
        push("data.jitter_sigma", self.data.jitter_sigma.to_string());
        if let Some(path) = &self.data.path {
            push("data.path", path.display().to_string());
        }
        let widths: Vec<String> =
            self.model.encoder_widths.iter().map(usize::to_string).collect();
        push("model.encoder_widths", widths.join(","));
        push("model.embed_dim", self.model.embed_dim.to_string());
        push("model.queue_size", self.model.queue_size.to_string());
        push("model.twin_momentum", self.model.twin_momentum.to_string());
        push("train.experts", self.train.experts.to_string());
        push("train.epochs", self.train.epochs.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.learning_rate", self.train.learning_rate.to_string());
        push(
            "train.optimizer",
            match self.train.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::SgdMomentum => "sgd-momentum".into(),
            },
        );
        push("train.sgd_momentum", self.train.sgd_momentum.to_string());
        push("train.weight_decay", self.train.weight_decay.to_string());
        push("train.alpha", self.train.alpha.to_string());
        push("train.beta", self.train.beta.to_string());
        push("train.tau_kd", self.train.tau_kd.to_string());
        push("train.tau_con", self.train.tau_con.to_string());
        push("train.tau_bc", self.train.tau_bc.to_string());
        push("train.prob_floor", self.train.prob_floor.to_string());
        push(
            "train.bkt_scope",
            match self.train.bkt_scope {
                BktScope::Student => "student".into(),
                BktScope::MeanOverExperts => "mean-over-experts".into(),
            },
        );
        push(
            "train.feature_kd_weighted",
            self.train.feature_kd_weighted.to_string(),
        );
        push(
            "train.target_prior",
            match self.train.target_prior {
                TargetPrior::Uniform => "uniform".into(),
                TargetPrior::Source => "source".into(),
            },
        );
        push("eval.posthoc_tau", self.eval.posthoc_tau.to_string());
        push("eval.ece_bins", self.eval.ece_bins.to_string());
        let levels: Vec<String> =
            self.eval.landscape_levels.iter().map(f64::to_string).collect();
        push("eval.landscape_levels", levels.join(","));
        push(
            "eval.landscape_repeats",
            self.eval.landscape_repeats.to_string(),
        );
        out
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn long_tail_spec(&self) -> Result<LongTailSpec> {
        LongTailSpec::new(
            self.data.num_classes,
            self.data.n_max,
            self.data.gamma,
            self.seed,
        )
    }

    /// Label prior implied by the train counts and the configured target.
    pub fn class_prior(&self, counts: &[usize]) -> Result<ClassPrior> {
        let p_source = crate::ltdata::compute_prior(counts)?;
        let p_target = match self.train.target_prior {
            TargetPrior::Uniform => vec![1.0 / counts.len() as f64; counts.len()],
            TargetPrior::Source => p_source.clone(),
        };
        ClassPrior::new(p_source, p_target, self.train.tau_bc)
    }

    /// Training configuration for a dataset with the given train counts.
    pub fn train_config(&self, counts: &[usize]) -> Result<TrainConfig> {
        let config = TrainConfig {
            num_experts: self.train.experts,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            twin_momentum: self.model.twin_momentum,
            prior: self.class_prior(counts)?,
            kd: KDConfig {
                tau_kd: self.train.tau_kd,
                alpha: self.train.alpha,
                beta: self.train.beta,
                tau_con: self.train.tau_con,
                prob_floor: self.train.prob_floor,
            },
            seed: self.seed,
            optimizer: self.train.optimizer,
            sgd_momentum: self.train.sgd_momentum,
            weight_decay: self.train.weight_decay,
            jitter_sigma: self.data.jitter_sigma,
            arch: ExpertArch {
                input_dim: self.data.feature_dim,
                encoder_widths: self.model.encoder_widths.clone(),
                num_classes: self.data.num_classes,
                embed_dim: self.model.embed_dim,
            },
            queue_size: self.model.queue_size,
            bkt_scope: self.train.bkt_scope,
            feature_kd_weighted: self.train.feature_kd_weighted,
        };
        config.validate().map_err(|e| EclError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.experts, 3);
        assert_eq!(c.train.alpha, 0.6);
        assert_eq!(c.train.beta, 1.0);
        assert_eq!(c.train.tau_kd, 1.0);
        assert_eq!(c.train.tau_con, 1.0);
        assert_eq!(c.train.tau_bc, 1.0);
        assert_eq!(c.model.twin_momentum, 0.999);
        assert_eq!(c.eval.ece_bins, 15);
    }

    #[test]
    fn parses_and_rejects() {
        let c = ExperimentConfig::parse_str(
            "# comment\ntrain.alpha = 0.3\nmodel.encoder_widths = 32, 16\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(c.train.alpha, 0.3);
        assert_eq!(c.model.encoder_widths, vec![32, 16]);
        assert_eq!(c.seed, 7);

        assert!(ExperimentConfig::parse_str("nonsense.key = 1\n").is_err());
        assert!(ExperimentConfig::parse_str("train.alpha\n").is_err());
        assert!(ExperimentConfig::parse_str("train.alpha = cows\n").is_err());
        assert!(ExperimentConfig::parse_str("seed = 1\nseed = 2\n").is_err());
        assert!(ExperimentConfig::parse_str("train.optimizer = adam\n").is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.alpha = 0.25;
        c.data.gamma = 50.0;
        c.data.path = Some(PathBuf::from("elsewhere/data.csv"));
        c.eval.landscape_levels = vec![0.0, 0.5];
        let echoed = ExperimentConfig::parse_str(&c.resolved_text()).unwrap();
        assert_eq!(c, echoed);
        // The echo is stable under a second round trip.
        assert_eq!(c.resolved_text(), echoed.resolved_text());
    }

    #[test]
    fn train_config_construction() {
        let c = ExperimentConfig::parse_str("data.num_classes = 3\ndata.feature_dim = 4\n")
            .unwrap();
        let tc = c.train_config(&[100, 10, 1]).unwrap();
        assert_eq!(tc.num_experts, 3);
        assert_eq!(tc.arch.num_classes, 3);
        assert_eq!(tc.prior.p_target, vec![1.0 / 3.0; 3]);
        assert!(tc.prior.p_source[0] > tc.prior.p_source[2]);
    }
}
