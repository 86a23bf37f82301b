use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::client::{ClientConfig, ClientNode, ClientState, Estimator, SeedShift};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::prng::{gaussian_vector, mix64, SeedValue};
use crate::server::ServerConfig;
use crate::tasks::{dirichlet_partition, random_spd_quadratic, Dataset, LocalData, LossTask, ParamVector};
use crate::zo::{StepRule, ZOConfig};

const INIT_DOMAIN: u64 = 0x1A17_0000_0000_0001;

/// Loss family and data of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskSpec {
    /// A separate random SPD quadratic per client.
    Quadratic {
        dim: usize,
        #[serde(default = "default_lambda_min")]
        lambda_min: f64,
        #[serde(default = "default_lambda_max")]
        lambda_max: f64,
    },
    /// Synthetic least squares with a common minimizer.
    LeastSquares {
        dim: usize,
        rows: usize,
        #[serde(default = "default_clusters")]
        clusters: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Two-blob logistic regression (`dim` includes the bias feature).
    Logistic {
        dim: usize,
        rows: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// Two-blob classification with a one-hidden-layer network.
    TinyMlp {
        inputs: usize,
        hidden: usize,
        rows: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// Rows from a CSV file (last column is the label) fitted by least
    /// squares or logistic regression.
    Csv { path: String, loss: CsvLoss },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvLoss {
    LeastSquares,
    Logistic,
}

fn default_lambda_min() -> f64 {
    0.5
}
fn default_lambda_max() -> f64 {
    2.0
}
fn default_clusters() -> usize {
    4
}
fn default_spread() -> f64 {
    1.0
}
fn default_separation() -> f64 {
    3.0
}
fn default_mu() -> f64 {
    1e-3
}
fn default_width() -> u64 {
    4
}
fn default_true() -> bool {
    true
}
fn default_one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Decomfl,
    Fedavg,
    FedzoCommon,
    FedzoIndependent,
    FedavgTopk,
    FedcomQ8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Sequential,
    #[default]
    Parallel,
}

/// A complete experiment, read from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub dataset_seed: u64,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub perturbations: usize,
    pub rounds: u64,
    pub lr: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Dirichlet concentration for the non-IID split; rows are dealt
    /// round-robin when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Rows per local step, drawn with replacement; 0 uses the whole shard.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub algorithm: Algorithm,
    /// Coordinates kept by `fedavg_topk`.
    #[serde(default)]
    pub topk: Option<usize>,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default)]
    pub materialize_server_model: bool,
    /// Secret of the client-side seed shift.
    #[serde(default)]
    pub seed_shift: Option<u64>,
    #[serde(default)]
    pub compensation_sync: bool,
    /// Deliver outstanding history to every client after the last round.
    #[serde(default = "default_true")]
    pub final_sync: bool,
    #[serde(default = "default_true")]
    pub prune_history: bool,
    /// Skip all loss evaluations; clients answer with zero scalars. Only the
    /// ledger is meaningful.
    #[serde(default)]
    pub accounting_only: bool,
    #[serde(default)]
    pub max_lag: Option<u64>,
    #[serde(default)]
    pub master_seed: u64,
    /// Standard deviation of the Gaussian initial model; zero starts at the
    /// origin.
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_width")]
    pub report_width: u64,
    #[serde(default)]
    pub execution: ExecutionMode,
    /// Write a metrics row every this many rounds (and after the last).
    #[serde(default = "default_one")]
    pub eval_every: u64,
    /// Record wall-clock time per row; off writes 0 so files are comparable.
    #[serde(default = "default_true")]
    pub wall_clock: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn zo(&self) -> ZOConfig {
        ZOConfig { mu: self.mu, perturbations: self.perturbations, lr: self.lr, local_steps: self.local_steps }
    }

    pub fn rule(&self) -> StepRule {
        match self.momentum {
            Some(beta) => StepRule::Momentum { beta },
            None => StepRule::Sgd,
        }
    }

    pub fn execution(&self) -> Execution {
        match self.execution {
            ExecutionMode::Sequential => Execution::Sequential,
            ExecutionMode::Parallel => Execution::Parallel,
        }
    }

    pub fn shift(&self) -> Option<SeedShift> {
        self.seed_shift.map(|secret| SeedShift::Xor { secret })
    }

    pub fn master(&self) -> SeedValue {
        SeedValue(self.master_seed)
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            zo: self.zo(),
            rule: self.rule(),
            estimator: self.estimator,
            compensation: self.compensation_sync,
            max_lag: self.max_lag,
        }
    }

    pub fn baseline(&self) -> Option<BaselineKind> {
        match self.algorithm {
            Algorithm::Decomfl => None,
            Algorithm::Fedavg => Some(BaselineKind::Fedavg),
            Algorithm::FedzoCommon => Some(BaselineKind::FedzoCommon),
            Algorithm::FedzoIndependent => Some(BaselineKind::FedzoIndependent),
            Algorithm::FedavgTopk => Some(BaselineKind::FedavgTopk { k: self.topk.unwrap_or(0) }),
            Algorithm::FedcomQ8 => Some(BaselineKind::FedcomQ8),
        }
    }

    pub fn task(&self) -> Result<LossTask> {
        Ok(match &self.task {
            TaskSpec::Quadratic { dim, .. } => LossTask::quadratic(*dim),
            TaskSpec::LeastSquares { dim, .. } => LossTask::least_squares(*dim),
            TaskSpec::Logistic { dim, .. } => LossTask::logistic(*dim),
            TaskSpec::TinyMlp { inputs, hidden, .. } => LossTask::tiny_mlp(*inputs, *hidden),
            TaskSpec::Csv { path, loss } => {
                let cols = load_csv(path)?.cols();
                match loss {
                    CsvLoss::LeastSquares => LossTask::least_squares(cols),
                    CsvLoss::Logistic => LossTask::logistic(cols),
                }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_clients == 0 {
            return fail("num_clients must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return fail(format!(
                "clients_per_round must lie in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            ));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be finite and non-negative".into());
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return fail(format!("alpha must be positive, got {alpha}"));
            }
        }
        if self.report_width != 4 && self.report_width != 8 {
            return fail(format!("report_width must be 4 or 8, got {}", self.report_width));
        }
        self.zo().validate()?;
        self.rule().validate()?;
        let task = self.task()?;
        if task.dim() == 0 {
            return Err(Error::EmptyDimension);
        }
        if let Some(kind) = self.baseline() {
            kind.validate(task.dim())?;
            if self.materialize_server_model || self.seed_shift.is_some() || self.compensation_sync {
                return fail("protocol variants apply to decomfl only".into());
            }
        }
        if self.seed_shift.is_some() && self.materialize_server_model {
            return Err(Error::Config(
                "seed_shift and materialize_server_model are incompatible: the server cannot regenerate shifted perturbations"
                    .into(),
            ));
        }
        if self.compensation_sync && self.momentum.is_some() {
            return fail("compensation_sync is specific to plain SGD".into());
        }
        Ok(())
    }

    /// Initial global model.
    pub fn initial_model(&self) -> Result<ParamVector> {
        let dim = self.task()?.dim();
        if self.init_scale == 0.0 {
            return Ok(ParamVector::zeros(dim));
        }
        let z = gaussian_vector(SeedValue(mix64(self.master_seed ^ INIT_DOMAIN)), dim)?;
        Ok(ParamVector::new(z.as_slice().iter().map(|v| v * self.init_scale).collect()))
    }

    pub fn server_config(&self) -> Result<ServerConfig> {
        Ok(ServerConfig {
            num_clients: self.num_clients,
            clients_per_round: self.clients_per_round,
            zo: self.zo(),
            rule: self.rule(),
            master: self.master(),
            materialize: if self.materialize_server_model { Some(self.initial_model()?) } else { None },
            seed_shift: self.seed_shift.is_some(),
        })
    }

    /// Per-client local data, in client-id order. Deterministic in the config.
    pub fn local_data(&self) -> Result<Vec<LocalData>> {
        let seed = self.dataset_seed;
        let dataset = match &self.task {
            TaskSpec::Quadratic { dim, lambda_min, lambda_max } => {
                return (0..self.num_clients)
                    .map(|i| {
                        random_spd_quadratic(*dim, *lambda_min, *lambda_max, mix64(seed ^ mix64(i as u64 + 1)))
                            .map(LocalData::Fixed)
                    })
                    .collect();
            }
            TaskSpec::LeastSquares { dim, rows, clusters, spread } => {
                Dataset::synthetic_least_squares(*rows, *dim, *clusters, *spread, seed)?.dataset
            }
            TaskSpec::Logistic { dim, rows, separation } => Dataset::synthetic_blobs(*rows, *dim, *separation, seed)?,
            TaskSpec::TinyMlp { inputs, rows, separation, .. } => {
                Dataset::synthetic_blobs(*rows, *inputs, *separation, seed)?
            }
            TaskSpec::Csv { path, .. } => load_csv(path)?,
        };
        let dataset = Arc::new(dataset);
        let shards: Vec<Vec<usize>> = match self.alpha {
            Some(alpha) => dirichlet_partition(&dataset, self.num_clients, alpha, SeedValue(seed))?
                .into_iter()
                .map(|s| s.indices)
                .collect(),
            None => {
                if self.num_clients > dataset.len() {
                    return Err(Error::InfeasiblePartition { clients: self.num_clients, samples: dataset.len() });
                }
                (0..self.num_clients)
                    .map(|i| (i..dataset.len()).step_by(self.num_clients).collect())
                    .collect()
            }
        };
        let data_seed = SeedValue(mix64(seed ^ self.master_seed));
        Ok(shards
            .into_iter()
            .map(|indices| LocalData::Shard {
                dataset: Arc::clone(&dataset),
                indices,
                batch_size: self.batch_size,
                data_seed,
            })
            .collect())
    }

    /// The client node with id `id`, as built by loopback runs and by a
    /// joining TCP client alike.
    pub fn client_node(&self, id: usize, data: LocalData) -> Result<ClientNode> {
        Ok(ClientNode {
            state: ClientState::new(id, self.initial_model()?, self.rule(), self.shift()),
            task: self.task()?,
            data,
            cfg: self.client_config(),
        })
    }
}

fn load_csv(path: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {path}: {e}")))?;
    Dataset::from_csv(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> &'static str {
        r#"{"task": {"kind": "least_squares", "dim": 4, "rows": 40},
            "num_clients": 4, "clients_per_round": 2, "local_steps": 1,
            "perturbations": 2, "rounds": 3, "lr": 0.1}"#
    }

    #[test]
    fn defaults() {
        let cfg = ExperimentConfig::from_json(base()).unwrap();
        assert_eq!(cfg.mu, 1e-3);
        assert_eq!(cfg.report_width, 4);
        assert!(cfg.final_sync && cfg.prune_history && cfg.wall_clock);
        assert_eq!(cfg.algorithm, Algorithm::Decomfl);
        assert_eq!(cfg.local_data().unwrap().len(), 4);
    }

    #[test]
    fn oversampling_is_a_config_error() {
        let text = base().replace("\"clients_per_round\": 2", "\"clients_per_round\": 5");
        let err = ExperimentConfig::from_json(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn shift_and_materialize_conflict() {
        let text = base().replace("\"lr\": 0.1", "\"lr\": 0.1, \"seed_shift\": 7, \"materialize_server_model\": true");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = base().replace("\"lr\": 0.1", "\"lr\": 0.1, \"lr_decay\": 2");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::from_json(base()).unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
