//! Experiment configuration: named seeds, task-order presets, and the
//! sectioned config file that drives the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::replay::{Balance, PolicyKind};
use crate::taskgen::TaskKind;

pub const CONFIG_SCHEMA: u32 = 1;

/// Replay batch sizes accepted by the sweep command.
pub const SWEEP_REPLAY_SIZES: [usize; 4] = [8, 16, 32, 64];

/// Deterministic seed mixing (splitmix64 finalizer over the pair).
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a string tag into a seed; used to give each run an independent
/// deterministic stream.
pub fn mix_seed_str(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix_seed(base, h)
}

/// The three fixed task-order presets. Preset ids are 1-based.
pub fn permutation_preset(id: usize) -> Option<[TaskKind; 7]> {
    use TaskKind::*;
    match id {
        1 => Some([Center, OutInCenter, LeftRight, UpDown, TwoByTwoGrid, ThreeByThreeGrid, OutInGrid]),
        2 => Some([UpDown, Center, OutInCenter, OutInGrid, ThreeByThreeGrid, TwoByTwoGrid, LeftRight]),
        3 => Some([TwoByTwoGrid, LeftRight, OutInGrid, UpDown, ThreeByThreeGrid, Center, OutInCenter]),
        _ => None,
    }
}

pub const ALL_PERMUTATIONS: [usize; 3] = [1, 2, 3];

/// Named seeds so each stage is independently reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: u64,
    pub init: u64,
    pub stream: u64,
    pub subset: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { dataset: 1, init: 2, stream: 3, subset: 4 }
    }
}

impl Seeds {
    /// Derives all four seeds from a single override value.
    pub fn from_master(master: u64) -> Self {
        Seeds {
            dataset: mix_seed_str(master, "dataset"),
            init: mix_seed_str(master, "init"),
            stream: mix_seed_str(master, "stream"),
            subset: mix_seed_str(master, "subset"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermSelector {
    All,
    One(usize),
}

impl PermSelector {
    pub fn ids(self) -> Vec<usize> {
        match self {
            PermSelector::All => ALL_PERMUTATIONS.to_vec(),
            PermSelector::One(i) => vec![i],
        }
    }
}

/// Everything a run needs: scale, protocol, learner set, seeds, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub permutations: PermSelector,
    pub learners: Vec<String>,
    pub policy: PolicyKind,
    pub balance: Balance,
    pub replay_size: usize,
    pub seeds: Seeds,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA,
            train_per_task: 600,
            test_per_task: 200,
            epochs: 50,
            batch_size: 32,
            learning_rate: 3e-4,
            permutations: PermSelector::All,
            learners: vec!["fine_tune_stream".into(), "partial_replay".into()],
            policy: PolicyKind::MinReplays,
            balance: Balance::Unbalanced,
            replay_size: 32,
            seeds: Seeds::default(),
            out_dir: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {0}: {1}")]
    Parse(String, String),
    #[error("unsupported schema_version {0} (expected {CONFIG_SCHEMA})")]
    Schema(u32),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// On-disk layout: sectioned key-value layout with explicit schema version.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    schema_version: u32,
    #[serde(default)]
    dataset: FileDataset,
    #[serde(default)]
    training: FileTraining,
    #[serde(default)]
    experiment: FileExperiment,
    #[serde(default)]
    seeds: FileSeeds,
    #[serde(default)]
    output: FileOutput,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDataset {
    train_per_task: usize,
    test_per_task: usize,
}

impl Default for FileDataset {
    fn default() -> Self {
        FileDataset { train_per_task: 600, test_per_task: 200 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTraining {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
}

impl Default for FileTraining {
    fn default() -> Self {
        FileTraining { epochs: 50, batch_size: 32, learning_rate: 3e-4 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileExperiment {
    permutations: String,
    learners: Vec<String>,
    policy: String,
    balance: String,
    replay_size: usize,
}

impl Default for FileExperiment {
    fn default() -> Self {
        FileExperiment {
            permutations: "all".into(),
            learners: vec!["fine_tune_stream".into(), "partial_replay".into()],
            policy: "min_replays".into(),
            balance: "unbalanced".into(),
            replay_size: 32,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSeeds {
    dataset: u64,
    init: u64,
    stream: u64,
    subset: u64,
}

impl Default for FileSeeds {
    fn default() -> Self {
        let s = Seeds::default();
        FileSeeds { dataset: s.dataset, init: s.init, stream: s.stream, subset: s.subset }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOutput {
    dir: String,
}

impl Default for FileOutput {
    fn default() -> Self {
        FileOutput { dir: "results".into() }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let file: FileConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse(origin.to_string(), e.to_string()))?;
        if file.schema_version != CONFIG_SCHEMA {
            return Err(ConfigError::Schema(file.schema_version));
        }
        let permutations = match file.experiment.permutations.as_str() {
            "all" => PermSelector::All,
            other => {
                let id: usize = other.parse().map_err(|_| ConfigError::Invalid {
                    field: "experiment.permutations",
                    reason: format!("expected 1|2|3|all, got {other:?}"),
                })?;
                if permutation_preset(id).is_none() {
                    return Err(ConfigError::Invalid {
                        field: "experiment.permutations",
                        reason: format!("preset {id} does not exist"),
                    });
                }
                PermSelector::One(id)
            }
        };
        let policy = PolicyKind::parse(&file.experiment.policy).ok_or(ConfigError::Invalid {
            field: "experiment.policy",
            reason: format!("unknown policy {:?}", file.experiment.policy),
        })?;
        let balance = Balance::parse(&file.experiment.balance).ok_or(ConfigError::Invalid {
            field: "experiment.balance",
            reason: format!("unknown balance mode {:?}", file.experiment.balance),
        })?;
        let cfg = ExperimentConfig {
            schema_version: file.schema_version,
            train_per_task: file.dataset.train_per_task,
            test_per_task: file.dataset.test_per_task,
            epochs: file.training.epochs,
            batch_size: file.training.batch_size,
            learning_rate: file.training.learning_rate,
            permutations,
            learners: file.experiment.learners,
            policy,
            balance,
            replay_size: file.experiment.replay_size,
            seeds: Seeds {
                dataset: file.seeds.dataset,
                init: file.seeds.init,
                stream: file.seeds.stream,
                subset: file.seeds.subset,
            },
            out_dir: PathBuf::from(file.output.dir),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        let file = FileConfig {
            schema_version: self.schema_version,
            dataset: FileDataset {
                train_per_task: self.train_per_task,
                test_per_task: self.test_per_task,
            },
            training: FileTraining {
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
            },
            experiment: FileExperiment {
                permutations: match self.permutations {
                    PermSelector::All => "all".into(),
                    PermSelector::One(i) => i.to_string(),
                },
                learners: self.learners.clone(),
                policy: self.policy.name().into(),
                balance: self.balance.name().into(),
                replay_size: self.replay_size,
            },
            seeds: FileSeeds {
                dataset: self.seeds.dataset,
                init: self.seeds.init,
                stream: self.seeds.stream,
                subset: self.seeds.subset,
            },
            output: FileOutput { dir: self.out_dir.display().to_string() },
        };
        toml::to_string_pretty(&file).expect("config serializes")
    }

    /// Loads a config file and applies environment overrides. Only seeds and
    /// the output directory may be overridden from the environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    pub fn apply_env_overrides(&mut self) -> Result<(), ConfigError> {
        let seed_var = |name: &'static str| -> Result<Option<u64>, ConfigError> {
            match std::env::var(name) {
                Ok(v) => v.parse::<u64>().map(Some).map_err(|_| ConfigError::Invalid {
                    field: name,
                    reason: format!("expected integer seed, got {v:?}"),
                }),
                Err(_) => Ok(None),
            }
        };
        if let Some(v) = seed_var("RAVENCL_SEED_DATASET")? {
            self.seeds.dataset = v;
        }
        if let Some(v) = seed_var("RAVENCL_SEED_INIT")? {
            self.seeds.init = v;
        }
        if let Some(v) = seed_var("RAVENCL_SEED_STREAM")? {
            self.seeds.stream = v;
        }
        if let Some(v) = seed_var("RAVENCL_SEED_SUBSET")? {
            self.seeds.subset = v;
        }
        if let Ok(dir) = std::env::var("RAVENCL_OUT_DIR") {
            self.out_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(ConfigError::Invalid {
                field: "dataset",
                reason: "train_per_task and test_per_task must be positive".into(),
            });
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid {
                field: "training",
                reason: "epochs and batch_size must be positive".into(),
            });
        }
        if self.replay_size == 0 {
            return Err(ConfigError::Invalid {
                field: "experiment.replay_size",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Shrinks the workload for smoke testing; semantics are unchanged.
    pub fn fast_profile(mut self) -> Self {
        self.train_per_task = self.train_per_task.min(120);
        self.test_per_task = self.test_per_task.min(60);
        self.epochs = self.epochs.min(20);
        self
    }
}
