//! JSON experiment configs. Every struct rejects unknown fields; omitted
//! fields take the defaults below.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use copra_core::connect::{CurveMetric, MergeMethod};
use copra_core::data::{self, Dataset, PretrainConfig};
use copra_core::prune::StructuredSpec;
use copra_core::schedule::ScheduleMode;
use copra_core::shapley::ValueMetric;
use copra_core::train::TrainConfig;
use copra_core::BaseNet;

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// The blob source task the default base is pretrained on.
    Source,
    TaskA,
    TaskB,
    Blobs { k: usize, d: usize, n_per_class: usize, spread: f64, seed: u64 },
    Spirals { k: usize, n_per_class: usize, noise: f64, seed: u64 },
    Rings { k: usize, n_per_class: usize, noise: f64, seed: u64 },
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        has_header: bool,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

fn yes() -> bool {
    true
}

impl TaskSpec {
    pub fn load(&self) -> Result<Dataset> {
        let ds = match self {
            TaskSpec::Source => data::source_task()?,
            TaskSpec::TaskA => data::task_a()?,
            TaskSpec::TaskB => data::task_b()?,
            TaskSpec::Blobs { k, d, n_per_class, spread, seed } => data::gen_blobs(*k, *d, *n_per_class, *spread, *seed)?,
            TaskSpec::Spirals { k, n_per_class, noise, seed } => data::gen_spirals(*k, *n_per_class, *noise, *seed)?,
            TaskSpec::Rings { k, n_per_class, noise, seed } => data::gen_rings(*k, *n_per_class, *noise, *seed)?,
            TaskSpec::Csv { path, has_header, num_classes } => {
                data::load_csv(path, *has_header, *num_classes).with_context(|| format!("reading {}", path.display()))?
            }
        };
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction: 0.2, seed: 1 }
    }
}

/// A task together with its train/test split.
pub fn load_split(task: &TaskSpec, split: &SplitSpec) -> Result<(Dataset, Dataset)> {
    Ok(task.load()?.split(split.test_fraction, split.seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub source: TaskSpec,
    /// Layer widths; defaults to five hidden layers of 32 around the source
    /// task's input and class counts.
    pub dims: Option<Vec<usize>>,
    pub recipe: PretrainConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec { source: TaskSpec::Source, dims: None, recipe: PretrainConfig::default() }
    }
}

impl PretrainSpec {
    pub fn build(&self) -> Result<BaseNet> {
        let source = self.source.load()?;
        let dims = self.dims.clone().unwrap_or_else(|| data::default_dims(source.dim(), source.num_classes()));
        Ok(data::pretrain_base(&dims, &source, &self.recipe)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSpec {
    Path(PathBuf),
    Pretrain(PretrainSpec),
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec::Pretrain(PretrainSpec::default())
    }
}

impl BaseSpec {
    pub fn load(&self) -> Result<BaseNet> {
        match self {
            BaseSpec::Path(p) => data::load_base(p).with_context(|| format!("loading base {}", p.display())),
            BaseSpec::Pretrain(spec) => spec.build(),
        }
    }
}

pub fn load_adapters(path: &Path, base: &BaseNet) -> Result<copra_core::AdapterSet> {
    let (set, dims) = data::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if dims != base.dims() {
        bail!("checkpoint {} was trained for dims {:?}, base has {:?}", path.display(), dims, base.dims());
    }
    set.check_compatible(base)?;
    Ok(set)
}

pub type PretrainCmd = PretrainSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub train: TrainConfig,
    /// One run per seed; empty means `[train.seed]`.
    pub seeds: Vec<u64>,
    /// Also write every checkpoint as a flattened parameter row.
    pub export_params: bool,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            seeds: Vec::new(),
            export_params: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub adapters: Vec<PathBuf>,
    /// Merge weights; uniform when omitted.
    pub weights: Option<Vec<f64>>,
    pub method: MergeMethod,
}

impl Default for MergeCmd {
    fn default() -> Self {
        MergeCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            adapters: Vec::new(),
            weights: None,
            method: MergeMethod::Fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub a1: PathBuf,
    pub a2: PathBuf,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub pairs: Vec<PairSpec>,
    pub methods: Vec<MergeMethod>,
    pub grid_points: usize,
    pub metric: CurveMetric,
}

impl Default for InterpCmd {
    fn default() -> Self {
        InterpCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            pairs: Vec::new(),
            methods: vec![MergeMethod::Fusion, MergeMethod::Mixture, MergeMethod::FusionAlign],
            grid_points: 11,
            metric: CurveMetric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyChoice {
    Exact,
    Multilinear,
    /// Run both and report per-layer agreement.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapleyCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub adapters: Vec<PathBuf>,
    pub method: ShapleyChoice,
    pub q_points: usize,
    pub samples: usize,
    pub seed: u64,
    pub metric: ValueMetric,
}

impl Default for ShapleyCmd {
    fn default() -> Self {
        ShapleyCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            adapters: Vec::new(),
            method: ShapleyChoice::Multilinear,
            q_points: 21,
            samples: 64,
            seed: 0,
            metric: ValueMetric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub adapters: Vec<PathBuf>,
    pub structured: Vec<StructuredSpec>,
    pub sparsities: Vec<f64>,
}

impl Default for PruneCmd {
    fn default() -> Self {
        PruneCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            adapters: Vec::new(),
            structured: StructuredSpec::standard_variants(),
            sparsities: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

fn both_strategies() -> Vec<ScheduleMode> {
    vec![ScheduleMode::Copra, ScheduleMode::Full]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub clients: usize,
    /// One replicate per seed; each replicate draws its own shards.
    pub seeds: Vec<u64>,
    pub strategies: Vec<ScheduleMode>,
    pub train: TrainConfig,
    /// Weight clients by shard size instead of uniformly.
    pub weight_by_shard: bool,
    /// Procrustes-align every client to client 0 before fusing.
    pub align: bool,
    /// Give every client the full training set (fusion fixed-point check).
    pub identical_clients: bool,
}

impl Default for FedCmd {
    fn default() -> Self {
        FedCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            clients: 5,
            seeds: vec![1, 2, 3, 4, 5],
            strategies: both_strategies(),
            train: TrainConfig::default(),
            weight_by_shard: false,
            align: false,
            identical_clients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtlCmd {
    pub base: BaseSpec,
    pub tasks: [TaskSpec; 2],
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    pub strategies: Vec<ScheduleMode>,
    pub train: TrainConfig,
    /// Weight on the second task's adapters.
    pub c: f64,
}

impl Default for MtlCmd {
    fn default() -> Self {
        MtlCmd {
            base: BaseSpec::default(),
            tasks: [TaskSpec::TaskA, TaskSpec::TaskB],
            split: SplitSpec::default(),
            seeds: vec![1, 2, 3, 4, 5],
            strategies: both_strategies(),
            train: TrainConfig::default(),
            c: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCmd {
    pub base: BaseSpec,
    pub task: TaskSpec,
    pub split: SplitSpec,
    pub learning_rates: Vec<f64>,
    pub steps: Vec<usize>,
    pub strategies: Vec<ScheduleMode>,
    /// The two seeds merged in every cell.
    pub seeds: [u64; 2],
    /// Template for everything the grid does not vary.
    pub train: TrainConfig,
    /// Points in the merged-accuracy-vs-steps series of the best cells.
    pub series_points: usize,
}

impl Default for AblateCmd {
    fn default() -> Self {
        AblateCmd {
            base: BaseSpec::default(),
            task: TaskSpec::TaskA,
            split: SplitSpec::default(),
            learning_rates: vec![5e-4, 1e-3, 5e-3],
            steps: vec![250, 500, 1000],
            strategies: both_strategies(),
            seeds: [1, 2],
            train: TrainConfig::default(),
            series_points: 10,
        }
    }
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("config {} does not match the schema", path.display()))
}
