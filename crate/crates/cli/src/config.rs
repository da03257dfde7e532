//! Experiment configuration, read from a TOML file.

use std::path::PathBuf;

use rlpf::checkpoint::config_hash;
use rlpf::methods::Method;
use rlpf::ssm::{MarkovDynamic, PolyaDynamic, RegimeBank, TrueDynamic};
use rlpf::training::{Grid, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Markov,
    Polya,
}

impl std::str::FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "markov" => Ok(Experiment::Markov),
            "polya" => Ok(Experiment::Polya),
            other => Err(CliError::User(format!(
                "unknown experiment `{other}`; expected markov or polya"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub n_regimes: usize,
    pub t_final: usize,
    pub n_trajectories: usize,
    pub seed: u64,
    pub method: String,
    /// Methods run by `pipeline`, in table order.
    pub methods: Vec<String>,
    pub repeats: usize,
    pub output: PathBuf,
    pub jobs: usize,
    /// Also write the packed binary form of each split.
    pub packed: bool,
    /// Select hyperparameters by grid search in `pipeline`.
    pub grid_search: bool,
    pub train: TrainSection,
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::Markov,
            n_regimes: 8,
            t_final: 20,
            n_trajectories: 2000,
            seed: 0,
            method: "rlpf-lambda".into(),
            methods: vec![],
            repeats: 20,
            output: PathBuf::from("runs"),
            jobs: 1,
            packed: false,
            grid_search: false,
            train: TrainSection::default(),
            grid: GridSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_particles: usize,
    pub eval_particles: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub chunk: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lambda: d.lambda,
            alpha: d.alpha,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            train_particles: d.train_particles,
            eval_particles: d.eval_particles,
            batch_size: d.batch_size,
            batches_per_epoch: d.batches_per_epoch,
            max_epochs: d.max_epochs,
            patience: d.patience,
            chunk: d.chunk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = Grid::default();
        GridSection {
            lambda: g.lambda,
            alpha: g.alpha,
            learning_rate: g.learning_rate,
        }
    }
}

/// The fields that determine a run's results. `output`, `jobs`,
/// `repeats` and the pipeline's method list do not.
#[derive(Serialize)]
struct Canonical<'a> {
    experiment: Experiment,
    n_regimes: usize,
    t_final: usize,
    n_trajectories: usize,
    seed: u64,
    method: &'a str,
    train: &'a TrainSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::User(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let user = |m: String| Err(CliError::User(m));
        if self.n_regimes == 0 || self.n_regimes > RegimeBank::default().n_regimes() {
            return user(format!(
                "n_regimes must be between 1 and {}",
                RegimeBank::default().n_regimes()
            ));
        }
        if self.n_trajectories < 4 {
            return user("n_trajectories must be at least 4".into());
        }
        if self.repeats == 0 {
            return user("repeats must be positive".into());
        }
        self.method()?;
        for m in &self.methods {
            m.parse::<Method>().map_err(|e| CliError::User(e.to_string()))?;
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::User(e.to_string()))?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method, CliError> {
        self.method
            .parse()
            .map_err(|e: rlpf::methods::UnknownMethod| CliError::User(e.to_string()))
    }

    pub fn pipeline_methods(&self) -> Result<Vec<Method>, CliError> {
        if self.methods.is_empty() {
            return Ok(vec![self.method()?]);
        }
        self.methods
            .iter()
            .map(|m| m.parse().map_err(|e: rlpf::methods::UnknownMethod| CliError::User(e.to_string())))
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            train_particles: t.train_particles,
            eval_particles: t.eval_particles,
            batch_size: t.batch_size,
            batches_per_epoch: t.batches_per_epoch,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: self.seed,
            chunk: t.chunk,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            lambda: self.grid.lambda.clone(),
            alpha: self.grid.alpha.clone(),
            learning_rate: self.grid.learning_rate.clone(),
        }
    }

    pub fn bank(&self) -> RegimeBank {
        RegimeBank::default()
            .subset(&(0..self.n_regimes).collect::<Vec<_>>())
            .expect("n_regimes validated")
    }

    pub fn dynamic(&self) -> TrueDynamic {
        match self.experiment {
            Experiment::Markov => {
                TrueDynamic::Markov(MarkovDynamic::cyclic(self.n_regimes, 0.8, 0.15))
            }
            Experiment::Polya => TrueDynamic::Polya(PolyaDynamic {
                n_regimes: self.n_regimes,
            }),
        }
    }

    /// Digest of the result-determining fields.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = Canonical {
            experiment: self.experiment,
            n_regimes: self.n_regimes,
            t_final: self.t_final,
            n_trajectories: self.n_trajectories,
            seed: self.seed,
            method: &self.method,
            train: &self.train,
        };
        config_hash(&toml::to_string(&canonical).expect("config serializes"))
    }

    pub fn experiment_name(&self) -> &'static str {
        match self.experiment {
            Experiment::Markov => "markov",
            Experiment::Polya => "polya",
        }
    }
}
