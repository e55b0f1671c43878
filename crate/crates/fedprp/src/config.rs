//! Experiment plans and their on-disk form: a flat `key = value` file with
//! explicit defaults. Every run directory gets the fully-resolved plan echoed
//! back, so a run is reproducible from its artifacts alone.

use std::path::PathBuf;

use crate::data::{PartitionSpec, PartitionStrategy};
use crate::error::{FedError, Result};
use crate::federation::{Algorithm, FederationConfig, LocInference};
use crate::model::LocalSchedule;
use crate::prototypes::DistanceKind;

/// Where the dataset comes from: generated Gaussian blobs, or CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub classes: usize,
    pub dim: usize,
    /// Balanced per-class training samples before long-tail skewing.
    pub per_class: usize,
    /// Balanced per-class held-out test samples (held out before skewing).
    pub test_per_class: usize,
    pub spread: f64,
    pub seed: u64,
    /// Standardize features per coordinate, fitted on the training pool.
    pub standardize: bool,
    /// When set, load train/test from CSV instead of generating blobs.
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

/// Which partitioner a plan uses; both parameter sets are carried so a plan
/// can be echoed and overridden without losing the inactive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Sharding,
    Dirichlet,
}

/// A fully-resolved experiment: data, skew, partition, federation, reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub data: DataSpec,
    /// Long-tail imbalance ratio in (0, 1]; 1 disables skewing.
    pub gamma: f64,
    pub strategy: StrategyKind,
    pub shards: usize,
    pub alpha: f64,
    pub partition_seed: u64,
    pub fed: FederationConfig,
    /// Rounds averaged for the summary table.
    pub report_window: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            data: DataSpec {
                classes: 10,
                dim: 32,
                per_class: 500,
                test_per_class: 100,
                spread: 1.0,
                seed: 42,
                standardize: true,
                train_file: None,
                test_file: None,
            },
            gamma: 0.1,
            strategy: StrategyKind::Sharding,
            shards: 4,
            alpha: 0.4,
            partition_seed: 7,
            fed: FederationConfig {
                num_clients: 20,
                clients_per_round: 8,
                rounds: 30,
                schedule: LocalSchedule {
                    t_shared: 25,
                    s_personal: 5,
                    lr: 0.01,
                    batch_size: 32,
                },
                lambda: 0.5,
                beta: 0.5,
                algorithm: Algorithm::FedPrp,
                seed: 1,
                distance: DistanceKind::SoftmaxKl,
                epsilon_prime: 0.0,
                weighted_agg: false,
                loc_inference: LocInference::Prototype,
                ce_only: false,
                hidden: vec![64, 64],
            },
            report_window: 10,
        }
    }
}

impl ExperimentPlan {
    pub fn partition_spec(&self) -> PartitionSpec {
        let strategy = match self.strategy {
            StrategyKind::Sharding => PartitionStrategy::Sharding {
                classes_per_client: self.shards,
            },
            StrategyKind::Dirichlet => PartitionStrategy::Dirichlet { alpha: self.alpha },
        };
        PartitionSpec {
            strategy,
            num_clients: self.fed.num_clients,
            seed: self.partition_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(FedError::Config("skew.gamma must be in (0, 1]".into()));
        }
        if self.report_window == 0 {
            return Err(FedError::Config("report.window must be >= 1".into()));
        }
        if self.data.train_file.is_some() != self.data.test_file.is_some() {
            return Err(FedError::Config(
                "data.train_file and data.test_file must be set together".into(),
            ));
        }
        if self.data.train_file.is_none() {
            if self.data.classes < 2 {
                return Err(FedError::Config("data.classes must be >= 2".into()));
            }
            if self.data.per_class == 0 || self.data.test_per_class == 0 {
                return Err(FedError::Config(
                    "data.per_class and data.test_per_class must be >= 1".into(),
                ));
            }
        }
        self.partition_spec().validate(self.data.classes)?;
        self.fed.validate()
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        FedError::Config(format!("line {line}: bad value {value:?} for key {key:?}"))
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(FedError::Config(format!(
            "line {line}: key {key:?} expects true or false, got {value:?}"
        ))),
    }
}

/// Parse the flat key/value config format, starting from the defaults so a
/// partial file is valid. Unknown keys are an error, not a warning.
pub fn parse_config(text: &str) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(FedError::Config(format!(
                "line {line}: expected `key = value`, got {raw:?}"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "seed" => plan.fed.seed = parse_field(key, value, line)?,
            "data.classes" => plan.data.classes = parse_field(key, value, line)?,
            "data.dim" => plan.data.dim = parse_field(key, value, line)?,
            "data.per_class" => plan.data.per_class = parse_field(key, value, line)?,
            "data.test_per_class" => plan.data.test_per_class = parse_field(key, value, line)?,
            "data.spread" => plan.data.spread = parse_field(key, value, line)?,
            "data.seed" => plan.data.seed = parse_field(key, value, line)?,
            "data.standardize" => plan.data.standardize = parse_bool(key, value, line)?,
            "data.train_file" => {
                plan.data.train_file =
                    (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "data.test_file" => {
                plan.data.test_file = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "skew.gamma" => plan.gamma = parse_field(key, value, line)?,
            "partition.strategy" => {
                plan.strategy = match value {
                    "sharding" => StrategyKind::Sharding,
                    "dirichlet" => StrategyKind::Dirichlet,
                    _ => {
                        return Err(FedError::Config(format!(
                            "line {line}: partition.strategy must be sharding or dirichlet, got {value:?}"
                        )))
                    }
                }
            }
            "partition.shards" => plan.shards = parse_field(key, value, line)?,
            "partition.alpha" => plan.alpha = parse_field(key, value, line)?,
            "partition.seed" => plan.partition_seed = parse_field(key, value, line)?,
            "fed.clients" => plan.fed.num_clients = parse_field(key, value, line)?,
            "fed.clients_per_round" => {
                plan.fed.clients_per_round = parse_field(key, value, line)?
            }
            "fed.rounds" => plan.fed.rounds = parse_field(key, value, line)?,
            "fed.t_shared" => plan.fed.schedule.t_shared = parse_field(key, value, line)?,
            "fed.s_personal" => plan.fed.schedule.s_personal = parse_field(key, value, line)?,
            "fed.lr" => plan.fed.schedule.lr = parse_field(key, value, line)?,
            "fed.batch" => plan.fed.schedule.batch_size = parse_field(key, value, line)?,
            "fed.lambda" => plan.fed.lambda = parse_field(key, value, line)?,
            "fed.beta" => plan.fed.beta = parse_field(key, value, line)?,
            "fed.epsilon_prime" => plan.fed.epsilon_prime = parse_field(key, value, line)?,
            "fed.distance" => {
                plan.fed.distance = match value {
                    "softmax_kl" => DistanceKind::SoftmaxKl,
                    "sq_euclidean" => DistanceKind::SquaredEuclidean,
                    _ => {
                        return Err(FedError::Config(format!(
                            "line {line}: fed.distance must be softmax_kl or sq_euclidean, got {value:?}"
                        )))
                    }
                }
            }
            "fed.algo" => {
                plan.fed.algorithm = match value {
                    "fedprp" => Algorithm::FedPrp,
                    "fedavg" => Algorithm::FedAvgBaseline,
                    "proto" => Algorithm::ProtoOnlyBaseline,
                    _ => {
                        return Err(FedError::Config(format!(
                            "line {line}: fed.algo must be fedprp, fedavg, or proto, got {value:?}"
                        )))
                    }
                }
            }
            "fed.loc_inference" => {
                plan.fed.loc_inference = match value {
                    "prototype" => LocInference::Prototype,
                    "classifier" => LocInference::Classifier,
                    _ => {
                        return Err(FedError::Config(format!(
                            "line {line}: fed.loc_inference must be prototype or classifier, got {value:?}"
                        )))
                    }
                }
            }
            "fed.weighted_agg" => plan.fed.weighted_agg = parse_bool(key, value, line)?,
            "fed.ce_only" => plan.fed.ce_only = parse_bool(key, value, line)?,
            "fed.hidden" => {
                let widths: Result<Vec<usize>> = value
                    .split(',')
                    .map(|w| parse_field::<usize>(key, w.trim(), line))
                    .collect();
                plan.fed.hidden = widths?;
            }
            "report.window" => plan.report_window = parse_field(key, value, line)?,
            _ => {
                return Err(FedError::Config(format!("line {line}: unknown key {key:?}")));
            }
        }
    }
    Ok(plan)
}

/// The fully-resolved plan in the same flat format `parse_config` reads.
pub fn echo_config(plan: &ExperimentPlan) -> String {
    let path_str = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    };
    let strategy = match plan.strategy {
        StrategyKind::Sharding => "sharding",
        StrategyKind::Dirichlet => "dirichlet",
    };
    let distance = match plan.fed.distance {
        DistanceKind::SoftmaxKl => "softmax_kl",
        DistanceKind::SquaredEuclidean => "sq_euclidean",
    };
    let loc = match plan.fed.loc_inference {
        LocInference::Prototype => "prototype",
        LocInference::Classifier => "classifier",
    };
    let hidden = plan
        .fed
        .hidden
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "seed = {}\n\
         data.classes = {}\n\
         data.dim = {}\n\
         data.per_class = {}\n\
         data.test_per_class = {}\n\
         data.spread = {:?}\n\
         data.seed = {}\n\
         data.standardize = {}\n\
         data.train_file = {}\n\
         data.test_file = {}\n\
         skew.gamma = {:?}\n\
         partition.strategy = {}\n\
         partition.shards = {}\n\
         partition.alpha = {:?}\n\
         partition.seed = {}\n\
         fed.clients = {}\n\
         fed.clients_per_round = {}\n\
         fed.rounds = {}\n\
         fed.t_shared = {}\n\
         fed.s_personal = {}\n\
         fed.lr = {:?}\n\
         fed.batch = {}\n\
         fed.lambda = {:?}\n\
         fed.beta = {:?}\n\
         fed.epsilon_prime = {:?}\n\
         fed.distance = {}\n\
         fed.algo = {}\n\
         fed.loc_inference = {}\n\
         fed.weighted_agg = {}\n\
         fed.ce_only = {}\n\
         fed.hidden = {}\n\
         report.window = {}\n",
        plan.fed.seed,
        plan.data.classes,
        plan.data.dim,
        plan.data.per_class,
        plan.data.test_per_class,
        plan.data.spread,
        plan.data.seed,
        plan.data.standardize,
        path_str(&plan.data.train_file),
        path_str(&plan.data.test_file),
        plan.gamma,
        strategy,
        plan.shards,
        plan.alpha,
        plan.partition_seed,
        plan.fed.num_clients,
        plan.fed.clients_per_round,
        plan.fed.rounds,
        plan.fed.schedule.t_shared,
        plan.fed.schedule.s_personal,
        plan.fed.schedule.lr,
        plan.fed.schedule.batch_size,
        plan.fed.lambda,
        plan.fed.beta,
        plan.fed.epsilon_prime,
        distance,
        plan.fed.algorithm.as_str(),
        loc,
        plan.fed.weighted_agg,
        plan.fed.ce_only,
        hidden,
        plan.report_window,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentPlan::default());
        assert!(ExperimentPlan::default().validate().is_ok());
    }

    #[test]
    fn echo_round_trips() {
        let mut plan = ExperimentPlan::default();
        plan.gamma = 0.5;
        plan.strategy = StrategyKind::Dirichlet;
        plan.alpha = 0.05;
        plan.fed.algorithm = Algorithm::FedAvgBaseline;
        plan.fed.hidden = vec![16, 8, 4];
        plan.data.train_file = Some(PathBuf::from("/tmp/train.csv"));
        plan.data.test_file = Some(PathBuf::from("/tmp/test.csv"));
        let echoed = echo_config(&plan);
        assert_eq!(parse_config(&echoed).unwrap(), plan);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "\n# a comment\nskew.gamma = 0.5  # trailing\n\nfed.rounds = 3\n";
        let plan = parse_config(text).unwrap();
        assert_eq!(plan.gamma, 0.5);
        assert_eq!(plan.fed.rounds, 3);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config("fed.rounds = 2\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn bad_value_reports_key() {
        let err = parse_config("fed.lambda = high\n").unwrap_err();
        assert!(err.to_string().contains("fed.lambda"), "{err}");
    }

    #[test]
    fn missing_equals_is_an_error() {
        assert!(parse_config("fed.rounds 2\n").is_err());
    }

    #[test]
    fn validate_rejects_bad_gamma_and_window() {
        let mut plan = ExperimentPlan::default();
        plan.gamma = 0.0;
        assert!(plan.validate().is_err());
        plan.gamma = 0.5;
        plan.report_window = 0;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn validate_rejects_half_file_spec() {
        let mut plan = ExperimentPlan::default();
        plan.data.train_file = Some(PathBuf::from("/tmp/train.csv"));
        assert!(plan.validate().is_err());
    }

    #[test]
    fn hidden_widths_parse_as_list() {
        let plan = parse_config("fed.hidden = 32, 16,8\n").unwrap();
        assert_eq!(plan.fed.hidden, vec![32, 16, 8]);
    }
}
