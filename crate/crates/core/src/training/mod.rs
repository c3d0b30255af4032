//! Fine-tuning adapters on a frozen model.

pub mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBank, AdapterSet};
use crate::analysis::residual_norm_per_layer;
use crate::error::{Error, Result};
use crate::model::{accuracy_from_logits, shuffle, BaseModel, Dataset};
use crate::tensor::{Matrix, NodeId, Reduction, Tape};

pub use optim::{cosine_lr, AdamState, AdamW};

pub const DEFAULT_LR_GRID: [f64; 4] = [1e-4, 5e-4, 1e-3, 5e-3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// 0 means the whole training set per step.
    pub batch_size: usize,
    pub seed: u64,
    pub scheduler: Scheduler,
    pub early_stop_patience: usize,
    pub rank: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Wall-clock timing makes records differ between runs; off by default.
    #[serde(default)]
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            min_learning_rate: 0.0,
            weight_decay: 0.0,
            epochs: 200,
            batch_size: 0,
            seed: 0,
            scheduler: Scheduler::Cosine,
            early_stop_patience: 20,
            rank: 4,
            alpha: 8.0,
            tau: 0.90,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("tau must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Scheduler::Constant => self.learning_rate,
            Scheduler::Cosine => cosine_lr(epoch, self.epochs, self.learning_rate, self.min_learning_rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    /// Mean training loss of each completed epoch.
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Epoch whose adapters were kept; 0 is the untrained initialization.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub trainable_params: usize,
    pub residual_norms: Vec<f64>,
    pub wall_time_s: f64,
    pub model_hash: String,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run records serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("run record: {e}")))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// `shots` samples per class for training and a disjoint `shots` per class
/// for validation, both ordered class by class.
pub fn few_shot_sample(data: &Dataset, shots: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..data.classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if members.len() < 2 * shots {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, need {}",
                members.len(),
                2 * shots
            )));
        }
        shuffle(&mut members, &mut rng);
        train.extend_from_slice(&members[..shots]);
        val.extend_from_slice(&members[shots..2 * shots]);
    }
    Ok((data.subset(&train), data.subset(&val)))
}

/// Mean cross-entropy of column-wise softmax logits.
pub fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (c, &label) in labels.iter().enumerate() {
        let col = logits.col(c);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - col[label];
    }
    total / labels.len() as f64
}

/// One task's data for a training run.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub name: &'a str,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

struct TaskRun {
    adapters: AdapterSet,
    best: AdapterSet,
    initial: AdapterSet,
    states: Vec<Option<(AdamState, AdamState)>>,
    trainable: Vec<Option<(Matrix, Matrix)>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    train_loss: Vec<f64>,
    val_accuracy: Vec<f64>,
    best_epoch: usize,
    best_acc: f64,
    best_loss: f64,
    since_best: usize,
    active: bool,
    epoch_loss: f64,
}

/// Per-layer gradients for the (B, A) adapter factors.
type FactorGrads = Vec<Option<(Matrix, Matrix)>>;

/// Loss on a batch and the gradients for every adapter factor.
fn adapter_step_grads(model: &BaseModel, adapters: &AdapterSet, batch: &Dataset) -> Result<(f64, FactorGrads)> {
    let mut tape = Tape::new();
    let params = model.place_on_tape(&mut tape, |_| false);
    let leaves: Vec<Option<(NodeId, NodeId)>> = adapters
        .layers
        .iter()
        .map(|slot| {
            slot.as_ref()
                .map(|a| (tape.leaf(a.lora.b.clone()), tape.leaf(a.lora.a.clone())))
        })
        .collect();
    let x = tape.constant(batch.inputs.clone());
    let logits = model.forward_tape(&mut tape, &params, x, |tape, l, input| {
        match (&adapters.layers[l], leaves[l]) {
            (Some(adapter), Some((b, a))) => adapter.contribution_on_tape(tape, b, a, input).map(Some),
            _ => Ok(None),
        }
    })?;
    let loss = tape.softmax_cross_entropy(logits, &batch.labels, Reduction::Mean)?;
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::Divergence(format!("training loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let out = leaves
        .iter()
        .map(|ids| ids.map(|(b, a)| (grads.take(b), grads.take(a))))
        .collect();
    Ok((value, out))
}

fn evaluate(model: &BaseModel, adapters: &AdapterSet, data: &Dataset) -> Result<(f64, f64)> {
    let logits = model.forward(&data.inputs, Some(adapters))?;
    Ok((
        accuracy_from_logits(&logits, &data.labels),
        mean_cross_entropy(&logits, &data.labels),
    ))
}

/// Trains one adapter set per task. Each epoch walks the tasks' batches
/// round-robin; every batch only updates its own task's adapters. Tasks stop
/// independently when validation accuracy has not improved for `patience`
/// epochs, and each keeps its best-validation adapters.
pub fn multi_task_train(
    model: &BaseModel,
    bank: &mut AdapterBank,
    tasks: &[TaskData<'_>],
    cfg: &TrainConfig,
    method: &str,
) -> Result<Vec<RunRecord>> {
    if !(cfg.learning_rate > 0.0) || cfg.early_stop_patience == 0 {
        return Err(Error::Config(
            "learning_rate must be positive and patience at least 1".into(),
        ));
    }
    if tasks.len() != bank.members.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tasks for {} adapters",
            tasks.len(),
            bank.members.len()
        )));
    }
    let started = Instant::now();
    let hash = model.weights_hash();
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };

    let mut runs = Vec::with_capacity(tasks.len());
    for task in tasks {
        let adapters = bank.get(task.name)?.clone();
        adapters.check_fits(model)?;
        if task.train.is_empty() || task.val.is_empty() {
            return Err(Error::InvalidArgument(format!("task {} has an empty split", task.name)));
        }
        let (acc, loss) = evaluate(model, &adapters, task.val)?;
        runs.push(TaskRun {
            states: adapters
                .layers
                .iter()
                .map(|s| {
                    s.as_ref()
                        .map(|a| (AdamState::new(&a.lora.b), AdamState::new(&a.lora.a)))
                })
                .collect(),
            trainable: adapters
                .layers
                .iter()
                .map(|s| s.as_ref().map(|a| a.trainable_masks()))
                .collect(),
            best: adapters.clone(),
            initial: adapters.clone(),
            adapters,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..task.train.len()).collect(),
            train_loss: Vec::new(),
            val_accuracy: Vec::new(),
            best_epoch: 0,
            best_acc: acc,
            best_loss: loss,
            since_best: 0,
            active: true,
            epoch_loss: 0.0,
        });
    }

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut max_batches = 0;
        for (run, task) in runs.iter_mut().zip(tasks) {
            if run.active {
                shuffle(&mut run.order, &mut run.rng);
                run.epoch_loss = 0.0;
                max_batches = max_batches.max(batch_count(task.train.len(), cfg.batch_size));
            }
        }
        for b in 0..max_batches {
            for (run, task) in runs.iter_mut().zip(tasks) {
                if !run.active {
                    continue;
                }
                let size = batch_len(task.train.len(), cfg.batch_size);
                let Some(chunk) = run.order.chunks(size).nth(b) else {
                    continue;
                };
                let batch = task.train.subset(chunk);
                let (loss, grads) = adapter_step_grads(model, &run.adapters, &batch).map_err(|e| match e {
                    Error::Divergence(msg) => {
                        Error::Divergence(format!("task {} epoch {epoch} batch {b}: {msg}", task.name))
                    }
                    other => other,
                })?;
                run.epoch_loss += loss * chunk.len() as f64;
                for (l, g) in grads.into_iter().enumerate() {
                    let (Some((gb, ga)), Some(adapter), Some((sb, sa)), Some((tb, ta))) = (
                        g,
                        run.adapters.layers[l].as_mut(),
                        run.states[l].as_mut(),
                        run.trainable[l].as_ref(),
                    ) else {
                        continue;
                    };
                    opt.step(&mut adapter.lora.b, &gb, sb, lr, Some(tb))?;
                    opt.step(&mut adapter.lora.a, &ga, sa, lr, Some(ta))?;
                }
            }
        }
        for (run, task) in runs.iter_mut().zip(tasks) {
            if !run.active {
                continue;
            }
            run.train_loss.push(run.epoch_loss / task.train.len() as f64);
            let (acc, loss) = evaluate(model, &run.adapters, task.val)?;
            run.val_accuracy.push(acc);
            if acc > run.best_acc || (acc == run.best_acc && loss < run.best_loss) {
                run.best_acc = acc;
                run.best_loss = loss;
                run.best_epoch = epoch + 1;
                run.best = run.adapters.clone();
                run.since_best = 0;
            } else {
                run.since_best += 1;
                if run.since_best >= cfg.early_stop_patience {
                    run.active = false;
                }
            }
        }
        if runs.iter().all(|r| !r.active) {
            break;
        }
    }

    if model.weights_hash() != hash {
        return Err(Error::Contract("frozen weights changed during training".into()));
    }
    for run in &runs {
        check_masked_entries(&run.initial, &run.best, &run.trainable)?;
        check_masked_entries(&run.initial, &run.adapters, &run.trainable)?;
    }
    let wall = if cfg.record_timing {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let mut records = Vec::with_capacity(runs.len());
    for (run, task) in runs.into_iter().zip(tasks) {
        let test_accuracy = match task.test {
            Some(t) => Some(evaluate(model, &run.best, t)?.0),
            None => None,
        };
        records.push(RunRecord {
            config: cfg.clone(),
            method: method.to_string(),
            dataset: task.name.to_string(),
            seed: cfg.seed,
            train_loss: run.train_loss,
            val_accuracy: run.val_accuracy,
            best_epoch: run.best_epoch,
            best_val_accuracy: run.best_acc,
            test_accuracy,
            trainable_params: run.best.trainable_count(),
            residual_norms: residual_norm_per_layer(&run.best)?,
            wall_time_s: wall,
            model_hash: hex(&hash),
        });
        bank.insert(task.name, run.best);
    }
    Ok(records)
}

/// Every factor entry outside its trainable mask must be bitwise identical
/// to its initial value.
fn check_masked_entries(
    initial: &AdapterSet,
    trained: &AdapterSet,
    trainable: &[Option<(Matrix, Matrix)>],
) -> Result<()> {
    for (l, ((a, b), masks)) in initial.layers.iter().zip(&trained.layers).zip(trainable).enumerate() {
        let (Some(a), Some(b), Some((mb, ma))) = (a, b, masks) else {
            continue;
        };
        for (init, now, mask) in [(&a.lora.b, &b.lora.b, mb), (&a.lora.a, &b.lora.a, ma)] {
            let moved = init
                .data()
                .iter()
                .zip(now.data())
                .zip(mask.data())
                .any(|((x, y), m)| *m == 0.0 && x.to_bits() != y.to_bits());
            if moved {
                return Err(Error::Contract(format!("masked adapter entries moved in layer {l}")));
            }
        }
    }
    Ok(())
}

fn batch_len(n: usize, batch_size: usize) -> usize {
    if batch_size == 0 {
        n.max(1)
    } else {
        batch_size.min(n.max(1))
    }
}

fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_len(n, batch_size))
}

/// Trains a single adapter set in place and returns its record.
pub fn train_adapters(
    model: &BaseModel,
    adapters: &mut AdapterSet,
    task: TaskData<'_>,
    cfg: &TrainConfig,
    method: &str,
) -> Result<RunRecord> {
    let mut bank = AdapterBank::default();
    bank.insert(task.name, adapters.clone());
    let mut records = multi_task_train(model, &mut bank, &[task], cfg, method)?;
    *adapters = bank.members.remove(task.name).expect("trained member returned");
    Ok(records.remove(0))
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub lr: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub params: usize,
    pub runtime_s: f64,
}

impl From<&RunRecord> for SweepRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            method: r.method.clone(),
            dataset: r.dataset.clone(),
            seed: r.seed,
            lr: r.config.learning_rate,
            val_acc: r.best_val_accuracy,
            test_acc: r.test_accuracy.unwrap_or(f64::NAN),
            params: r.trainable_params,
            runtime_s: r.wall_time_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Indices into `rows`, best validation accuracy first.
    pub ranking: Vec<usize>,
    pub top_k: usize,
    pub top_k_mean_test: f64,
    pub top_k_std_test: f64,
}

/// Orders rows by validation accuracy, highest first; ties keep row order.
pub fn rank_by_validation(rows: &[SweepRow]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[b].val_acc.total_cmp(&rows[a].val_acc));
    idx
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: Vec<SweepRow>, top_k: usize) -> Result<SweepSummary> {
    if top_k == 0 || top_k > rows.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k {top_k} must be in 1..={}",
            rows.len()
        )));
    }
    let ranking = rank_by_validation(&rows);
    let tests: Vec<f64> = ranking[..top_k].iter().map(|&i| rows[i].test_acc).collect();
    let (mean, std) = mean_std(&tests);
    Ok(SweepSummary {
        rows,
        ranking,
        top_k,
        top_k_mean_test: mean,
        top_k_std_test: std,
    })
}

/// Worker count from `PALORA_THREADS`, defaulting to all cores.
pub fn thread_cap() -> Option<usize> {
    std::env::var("PALORA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
}

/// Runs every (config, seed) pair, possibly concurrently, and summarizes the
/// top `top_k` runs by validation accuracy. Rows come back in grid order.
pub fn sweep<F>(grid: &[TrainConfig], seeds: &[u64], top_k: usize, run: F) -> Result<SweepSummary>
where
    F: Fn(&TrainConfig) -> Result<RunRecord> + Sync,
{
    use rayon::prelude::*;

    let jobs: Vec<TrainConfig> = grid
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| TrainConfig { seed: s, ..c.clone() }))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| jobs.par_iter().map(&run).collect::<Result<Vec<_>>>())?;
    summarize(records.iter().map(SweepRow::from).collect(), top_k)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,dataset,seed,lr,val_acc,test_acc,params,runtime_s\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{},{:?}",
            r.method, r.dataset, r.seed, r.lr, r.val_acc, r.test_acc, r.params, r.runtime_s
        )
        .unwrap();
    }
    out
}
