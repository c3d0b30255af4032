//! End-to-end experiment plumbing shared by the command line and the tests:
//! one declarative config, the downstream few-shot splits, profile
//! derivation and a single entry point that trains any adapter variant.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, AdapterSet};
use crate::error::{Error, Result};
use crate::importance::{score_model, ImportanceScores, Method, Provenance};
use crate::linalg::{choose_rank_k, svd};
use crate::model::{pretrain, Architecture, BaseModel, Dataset, PretrainConfig, PretrainOutcome, TaskSpec};
use crate::slt::SltConfig;
use crate::sparsity::{
    balanced_profile, derive_profile, profile_to_element_masks, profile_to_masks, pyramidal_profile, MaskMode,
    SparsityProfile, Step,
};
use crate::training::{
    few_shot_sample, mean_std, multi_task_train, sweep, thread_cap, train_adapters, RunRecord, SweepSummary, TaskData,
    TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Few-shot samples per class for training; as many again go to validation.
    pub shots: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveConfig {
    pub method: Method,
    pub tau: f64,
    /// Indices dropped per move; 0 selects the automatic 1% chunks.
    pub step: usize,
    /// Spectral energy used to size the subspace for `svd` scores.
    pub energy: f64,
}

impl DeriveConfig {
    pub fn step(&self) -> Step {
        if self.step == 0 {
            Step::Auto
        } else {
            Step::Fixed(self.step)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Seed of the adapter initialization.
    pub init_seed: u64,
    /// Seed of random masks.
    pub mask_seed: u64,
    /// Softmax temperature of stochastic masks.
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub learning_rates: Vec<f64>,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pretrain_task: TaskSpec,
    pub downstream_task: TaskSpec,
    /// Extra tasks trained alongside the downstream task in `multi` mode.
    #[serde(default)]
    pub extra_tasks: Vec<TaskSpec>,
    pub architecture: Architecture,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub derive: DeriveConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub slt: Option<SltConfig>,
    /// Where command outputs go unless overridden on the command line.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "palora-out".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hex digest of the normalized config.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        crate::training::hex(&Sha256::digest(self.to_toml().as_bytes())[..6])
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.pretrain_task.validate().map_err(wrap)?;
        self.downstream_task.validate().map_err(wrap)?;
        for t in &self.extra_tasks {
            t.validate().map_err(wrap)?;
            if t.input_dim != self.downstream_task.input_dim || t.classes != self.downstream_task.classes {
                return Err(Error::Config("extra tasks must match the downstream shape".into()));
            }
        }
        if self.pretrain_task.input_dim != self.downstream_task.input_dim
            || self.pretrain_task.classes != self.downstream_task.classes
        {
            return Err(Error::Config(
                "pretrain and downstream tasks must share input_dim and classes".into(),
            ));
        }
        self.train.validate()?;
        if self.data.shots == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config("shots and test_per_class must be positive".into()));
        }
        if !(self.derive.tau > 0.0 && self.derive.tau < 1.0) {
            return Err(Error::Config("derive.tau must lie in (0, 1)".into()));
        }
        if !(self.derive.energy > 0.0 && self.derive.energy <= 1.0) {
            return Err(Error::Config("derive.energy must lie in (0, 1]".into()));
        }
        if !(self.adapter.temperature > 0.0) {
            return Err(Error::Config("adapter.temperature must be positive".into()));
        }
        if self.sweep.seeds.is_empty() || self.sweep.learning_rates.is_empty() {
            return Err(Error::Config("sweep needs at least one seed and learning rate".into()));
        }
        if self.sweep.top_k == 0 || self.sweep.top_k > self.sweep.seeds.len() * self.sweep.learning_rates.len() {
            return Err(Error::Config("sweep.top_k must be in 1..=runs".into()));
        }
        if let Some(s) = &self.slt {
            s.validate()?;
        }
        Ok(())
    }
}

/// Adapter variant to train.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Dense adapters on every layer.
    Lora,
    /// Masks derived from a profile.
    Masked(MaskMode),
    Pyramidal(f64),
    Balanced(f64),
    /// Element masks at the profile's element rates.
    Element,
    /// Downstream plus extra tasks, one dense adapter each.
    Multi,
}

impl Mode {
    pub fn needs_profile(self) -> bool {
        matches!(self, Mode::Masked(_) | Mode::Element)
    }

    pub fn needs_scores(self) -> bool {
        matches!(
            self,
            Mode::Masked(MaskMode::Targeted | MaskMode::Stochastic(_) | MaskMode::Inverted)
        )
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rate = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad rate in mode `{s}`")))
        };
        match s.split_once(':') {
            Some(("pyramidal", p)) => Ok(Mode::Pyramidal(rate(p)?)),
            Some(("balanced", p)) => Ok(Mode::Balanced(rate(p)?)),
            None if s == "pyramidal" || s == "balanced" => Err(Error::InvalidArgument(format!(
                "mode `{s}` needs a rate, e.g. `{s}:0.5`"
            ))),
            _ => match s {
                "lora" => Ok(Mode::Lora),
                "element" => Ok(Mode::Element),
                "multi" => Ok(Mode::Multi),
                other => other.parse::<MaskMode>().map(Mode::Masked),
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Lora => f.write_str("lora"),
            Mode::Masked(MaskMode::Partial) => f.write_str("partial"),
            Mode::Masked(MaskMode::Targeted) => f.write_str("targeted"),
            Mode::Masked(MaskMode::Inverted) => f.write_str("inverted"),
            Mode::Masked(MaskMode::Stochastic(t)) => write!(f, "stochastic:{t}"),
            Mode::Pyramidal(p) => write!(f, "pyramidal:{p}"),
            Mode::Balanced(p) => write!(f, "balanced:{p}"),
            Mode::Element => f.write_str("element"),
            Mode::Multi => f.write_str("multi"),
        }
    }
}

/// Few-shot training and validation sets plus a held-out test set.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn splits_for(task: &TaskSpec, data: &DataConfig) -> Result<Splits> {
    let pool = task.sample(2 * data.shots, data.seed)?;
    let (train, val) = few_shot_sample(&pool, data.shots, data.seed ^ 0x5407)?;
    let test = task.sample(data.test_per_class, data.seed.wrapping_add(0x7e57))?;
    Ok(Splits { train, val, test })
}

pub fn downstream_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    splits_for(&cfg.downstream_task, &cfg.data)
}

pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    pretrain(&cfg.pretrain_task, &cfg.architecture, &cfg.pretrain)
}

/// Importance scores of every layer on the few-shot training set.
pub fn importance_scores(model: &BaseModel, cfg: &ExperimentConfig, splits: &Splits) -> Result<Vec<ImportanceScores>> {
    let provenance = Provenance {
        dataset: dataset_label(&cfg.downstream_task),
        seed: cfg.data.seed,
    };
    score_model(model, cfg.derive.method, &splits.train, &provenance, |_, w| {
        choose_rank_k(&svd(w)?.singular_values, cfg.derive.energy)
    })
}

pub fn derive(
    model: &BaseModel,
    cfg: &ExperimentConfig,
    splits: &Splits,
) -> Result<(SparsityProfile, Vec<ImportanceScores>)> {
    let scores = importance_scores(model, cfg, splits)?;
    let profile = derive_profile(
        model,
        &splits.train,
        &scores,
        cfg.derive.tau,
        cfg.derive.step(),
        cfg.data.seed,
    )?;
    Ok((profile, scores))
}

pub fn dataset_label(task: &TaskSpec) -> String {
    let kind = serde_json::to_value(&task.kind).expect("task kind serializes");
    let name = match &kind {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Object(map) => map.keys().next().cloned().unwrap_or_default(),
        _ => String::new(),
    };
    format!("{name}-{}", task.seed)
}

/// Seeds for one run: training shuffle, adapter init and mask sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub train: u64,
    pub init: u64,
    pub masks: u64,
}

impl RunSeeds {
    pub fn for_run(cfg: &ExperimentConfig, run_seed: u64) -> Self {
        let mix = run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Self {
            train: run_seed,
            init: cfg.adapter.init_seed ^ mix,
            masks: cfg.adapter.mask_seed ^ mix.rotate_left(17),
        }
    }
}

/// What a run needs besides the config.
pub struct RunInputs<'a> {
    pub model: &'a BaseModel,
    pub splits: &'a Splits,
    pub profile: Option<&'a SparsityProfile>,
    pub scores: Option<&'a [ImportanceScores]>,
}

/// Builds the adapter set a mode trains.
pub fn build_adapters(
    inputs: &RunInputs<'_>,
    cfg: &ExperimentConfig,
    mode: Mode,
    seeds: RunSeeds,
) -> Result<AdapterSet> {
    let model = inputs.model;
    let (d, alpha) = (cfg.train.rank, cfg.train.alpha);
    let need_profile = || {
        inputs
            .profile
            .ok_or_else(|| Error::Config(format!("mode `{mode}` needs a sparsity profile")))
    };
    match mode {
        Mode::Lora | Mode::Multi => AdapterSet::dense(model, d, alpha, seeds.init),
        Mode::Masked(mask_mode) => {
            if mode.needs_scores() && inputs.scores.is_none() {
                return Err(Error::Config(format!("mode `{mode}` needs importance scores")));
            }
            let masks = profile_to_masks(need_profile()?, mask_mode, inputs.scores, seeds.masks)?;
            AdapterSet::masked(model, d, alpha, seeds.init, &masks)
        }
        Mode::Pyramidal(p) => {
            let profile = pyramidal_profile(p, &model.layer_dims())?;
            let masks = profile_to_masks(&profile, MaskMode::Partial, None, seeds.masks)?;
            AdapterSet::masked(model, d, alpha, seeds.init, &masks)
        }
        Mode::Balanced(p) => {
            let profile = balanced_profile(p, &model.layer_dims())?;
            let masks = profile_to_masks(&profile, MaskMode::Partial, None, seeds.masks)?;
            AdapterSet::masked(model, d, alpha, seeds.init, &masks)
        }
        Mode::Element => {
            let masks = profile_to_element_masks(need_profile()?, seeds.masks)?;
            AdapterSet::element_masked(model, d, alpha, seeds.init, &masks)
        }
    }
}

/// Trains one variant with one run seed and learning rate. Multi mode
/// returns one record per task, downstream first.
pub fn run_mode(
    inputs: &RunInputs<'_>,
    cfg: &ExperimentConfig,
    mode: Mode,
    run_seed: u64,
    learning_rate: f64,
) -> Result<(Vec<RunRecord>, Vec<AdapterSet>)> {
    let seeds = RunSeeds::for_run(cfg, run_seed);
    let train_cfg = TrainConfig {
        seed: seeds.train,
        learning_rate,
        ..cfg.train.clone()
    };
    let method = mode.to_string();
    let label = dataset_label(&cfg.downstream_task);
    if mode == Mode::Multi {
        if cfg.extra_tasks.is_empty() {
            return Err(Error::Config("mode `multi` needs extra_tasks".into()));
        }
        let mut names = vec![label.clone()];
        let mut splits = vec![inputs.splits.clone()];
        for (i, t) in cfg.extra_tasks.iter().enumerate() {
            names.push(format!("{}#{}", dataset_label(t), i + 1));
            splits.push(splits_for(t, &cfg.data)?);
        }
        let mut bank = AdapterBank::default();
        for name in &names {
            bank.insert(name.clone(), build_adapters(inputs, cfg, mode, seeds)?);
        }
        let tasks: Vec<TaskData<'_>> = names
            .iter()
            .zip(&splits)
            .map(|(n, s)| TaskData {
                name: n,
                train: &s.train,
                val: &s.val,
                test: Some(&s.test),
            })
            .collect();
        let records = multi_task_train(inputs.model, &mut bank, &tasks, &train_cfg, &method)?;
        let sets = names.iter().map(|n| bank.get(n).cloned()).collect::<Result<Vec<_>>>()?;
        return Ok((records, sets));
    }
    let mut adapters = build_adapters(inputs, cfg, mode, seeds)?;
    let task = TaskData {
        name: &label,
        train: &inputs.splits.train,
        val: &inputs.splits.val,
        test: Some(&inputs.splits.test),
    };
    let record = train_adapters(inputs.model, &mut adapters, task, &train_cfg, &method)?;
    Ok((vec![record], vec![adapters]))
}

/// Every (learning rate, seed) pair of the sweep section for one mode,
/// summarized over the top runs by validation accuracy.
pub fn sweep_mode(inputs: &RunInputs<'_>, cfg: &ExperimentConfig, mode: Mode) -> Result<SweepSummary> {
    if mode == Mode::Multi {
        return Err(Error::Config("mode `multi` cannot be swept".into()));
    }
    let grid: Vec<TrainConfig> = cfg
        .sweep
        .learning_rates
        .iter()
        .map(|&lr| TrainConfig {
            learning_rate: lr,
            ..cfg.train.clone()
        })
        .collect();
    sweep(&grid, &cfg.sweep.seeds, cfg.sweep.top_k, |c| {
        let (mut records, _) = run_mode(inputs, cfg, mode, c.seed, c.learning_rate)?;
        Ok(records.remove(0))
    })
}

/// Runs a list of (run seed, learning rate) jobs, concurrently up to the
/// thread cap. Results come back in job order.
pub fn run_jobs(
    inputs: &RunInputs<'_>,
    cfg: &ExperimentConfig,
    mode: Mode,
    jobs: &[(u64, f64)],
) -> Result<Vec<(Vec<RunRecord>, Vec<AdapterSet>)>> {
    use rayon::prelude::*;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, lr)| run_mode(inputs, cfg, mode, seed, lr))
            .collect()
    })
}

/// Per (method, dataset) aggregate over run records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub dataset: String,
    pub runs: usize,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
    pub mean_val_accuracy: f64,
    pub mean_params: f64,
    /// Per-layer mean of the residual norms.
    pub mean_residual_norms: Vec<f64>,
}

pub fn aggregate(records: &[RunRecord]) -> Result<Vec<MethodSummary>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no run records to aggregate".into()));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.method, &r.dataset)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, dataset), rs)| {
            let tests: Vec<f64> = rs.iter().filter_map(|r| r.test_accuracy).collect();
            let (mean_test, std_test) = mean_std(&tests);
            let vals: Vec<f64> = rs.iter().map(|r| r.best_val_accuracy).collect();
            let params: Vec<f64> = rs.iter().map(|r| r.trainable_params as f64).collect();
            let layers = rs[0].residual_norms.len();
            if rs.iter().any(|r| r.residual_norms.len() != layers) {
                return Err(Error::Format(format!("records of `{method}` disagree on depth")));
            }
            let norms = (0..layers)
                .map(|l| rs.iter().map(|r| r.residual_norms[l]).sum::<f64>() / rs.len() as f64)
                .collect();
            Ok(MethodSummary {
                method: method.to_string(),
                dataset: dataset.to_string(),
                runs: rs.len(),
                mean_test_accuracy: mean_test,
                std_test_accuracy: std_test,
                mean_val_accuracy: mean_std(&vals).0,
                mean_params: mean_std(&params).0,
                mean_residual_norms: norms,
            })
        })
        .collect()
}

pub fn summaries_csv(rows: &[MethodSummary]) -> String {
    let mut out =
        String::from("method,dataset,runs,mean_test_acc,std_test_acc,mean_val_acc,mean_params,mean_residual_norm\n");
    for r in rows {
        let norm = if r.mean_residual_norms.is_empty() {
            0.0
        } else {
            r.mean_residual_norms.iter().sum::<f64>() / r.mean_residual_norms.len() as f64
        };
        writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?},{:?}",
            r.method,
            r.dataset,
            r.runs,
            r.mean_test_accuracy,
            r.std_test_accuracy,
            r.mean_val_accuracy,
            r.mean_params,
            norm
        )
        .unwrap();
    }
    out
}
