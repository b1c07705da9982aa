//! Run configuration: a flat TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BinarizationMode, Split};
use crate::fisher::SolveRoute;
use crate::model::{Architecture, Encoding};
use crate::trainers::{Algorithm, FisherSource, OptimizerKind, TrainerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "3by3")]
    ThreeByThree,
    #[serde(rename = "minimnist")]
    MiniMnist,
    #[serde(rename = "mnist")]
    Mnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::ThreeByThree => "3by3",
            DatasetKind::MiniMnist => "minimnist",
            DatasetKind::Mnist => "mnist",
        }
    }

    /// Layer sizes from the top hidden layer down to (but excluding) the visible layer.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            DatasetKind::ThreeByThree => vec![6, 3],
            DatasetKind::MiniMnist => vec![100, 50, 20, 10, 10],
            DatasetKind::Mnist => vec![300, 200, 100, 75, 50, 35, 30, 25, 20, 15, 10, 10],
        }
    }

    pub fn visible(self) -> usize {
        match self {
            DatasetKind::ThreeByThree => 9,
            DatasetKind::MiniMnist => 196,
            DatasetKind::Mnist => 784,
        }
    }

    /// Learning rate and damping used when the config leaves them unset.
    pub fn default_lr_damping(self, alg: Algorithm) -> (f64, f64) {
        match (self, alg) {
            (DatasetKind::ThreeByThree, Algorithm::Ws | Algorithm::Rws) => (2.0, 0.0),
            (DatasetKind::ThreeByThree, _) => (0.1, 0.001),
            (DatasetKind::MiniMnist, Algorithm::Ws) => (0.02, 0.0),
            (DatasetKind::MiniMnist, Algorithm::Rws) => (0.05, 0.0),
            (DatasetKind::MiniMnist, _) => (0.002, 0.05),
            (DatasetKind::Mnist, Algorithm::Ws | Algorithm::Rws) => (0.02, 0.0),
            (DatasetKind::Mnist, _) => (0.02, 0.1),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3by3" => Ok(DatasetKind::ThreeByThree),
            "minimnist" => Ok(DatasetKind::MiniMnist),
            "mnist" => Ok(DatasetKind::Mnist),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Everything a training run needs. Unset optional fields resolve to
/// dataset-specific defaults in [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub dataset: DatasetKind,
    /// Hidden layer sizes, lowest hidden layer first (visible size comes from the dataset).
    pub layers: Option<Vec<usize>>,
    pub encoding: Encoding,
    pub binarization: BinarizationMode,
    pub lr: Option<f64>,
    pub damping: Option<f64>,
    pub samples: usize,
    pub kstep: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub route: SolveRoute,
    pub fisher_p_source: FisherSource,
    pub q_wake: Option<bool>,
    /// Bar probability of the 3by3 generator.
    pub bar_prob: f64,
    /// Training/validation draws from the 3by3 distribution.
    pub train_size: usize,
    pub val_size: usize,
    /// Use only the first `train_limit` training images.
    pub train_limit: Option<usize>,
    /// Use only the first `eval_limit` images for the IS log-likelihood.
    pub eval_limit: Option<usize>,
    /// IS log-likelihood every `eval_every` epochs and at the end; 0 disables it.
    pub eval_every: usize,
    pub is_samples: usize,
    pub eval_split: Split,
    /// Posterior samples per datum for the validation loss.
    pub val_samples: usize,
    /// Checkpoint every this many epochs (and always at the end); 0 = end only.
    pub checkpoint_every: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Nrws,
            dataset: DatasetKind::MiniMnist,
            layers: None,
            encoding: Encoding::PlusMinusOne,
            binarization: BinarizationMode::B,
            lr: None,
            damping: None,
            samples: 10,
            kstep: 50,
            optimizer: OptimizerKind::Sgd,
            batch_size: 100,
            epochs: 100,
            seed: 0,
            route: SolveRoute::Auto,
            fisher_p_source: FisherSource::Wake,
            q_wake: None,
            bar_prob: 0.5,
            train_size: 1000,
            val_size: 500,
            train_limit: None,
            eval_limit: None,
            eval_every: 10,
            is_samples: 10_000,
            eval_split: Split::Test,
            val_samples: 10,
            checkpoint_every: 10,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills dataset defaults for layers, learning rate and damping, then validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let (lr, damping) = c.dataset.default_lr_damping(c.algorithm);
        c.lr.get_or_insert(lr);
        c.damping.get_or_insert(damping);
        c.layers.get_or_insert_with(|| c.dataset.default_hidden());
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.as_ref().is_some_and(|l| l.is_empty() || l.contains(&0)) {
            return Err(Error::Config("layers must be a nonempty list of positive sizes".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.is_samples == 0 || self.val_samples == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        if self.dataset == DatasetKind::ThreeByThree && (self.train_size == 0 || self.val_size == 0) {
            return Err(Error::Config("3by3 train and validation sizes must be positive".into()));
        }
        self.trainer_config().validate()
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let mut sizes = vec![self.dataset.visible()];
        sizes.extend(self.layers.clone().unwrap_or_else(|| self.dataset.default_hidden()));
        Architecture::new(sizes, self.encoding)
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let (lr, damping) = self.dataset.default_lr_damping(self.algorithm);
        TrainerConfig {
            algorithm: self.algorithm,
            samples: self.samples,
            lr: self.lr.unwrap_or(lr),
            alpha: self.damping.unwrap_or(damping),
            kstep: self.kstep,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            route: self.route,
            fisher_p_source: self.fisher_p_source,
            q_wake: self.q_wake,
        }
    }

    /// Directory holding MNIST IDX files: the configured one, `$HELMHOLTZ_DATA`,
    /// `./data/mnist-10k`, or the subset bundled with the source tree.
    pub fn data_root(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var("HELMHOLTZ_DATA") {
            return PathBuf::from(d);
        }
        let local = PathBuf::from("data/mnist-10k");
        if local.is_dir() {
            return local;
        }
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
    }
}

/// Parses a comma-separated list, e.g. `"100,50,20"`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("cannot parse list entry {t:?}"))))
        .collect()
}
