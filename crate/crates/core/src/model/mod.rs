//! Frozen base networks and the adapter-aware forward pass
//! `h = act((W + ΔW) x + b)`.

mod task;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, NodeId, Reduction, Tape};
use crate::training::optim::{AdamState, AdamW};

pub use task::{argmax_column, Dataset, TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => crate::tensor::gelu(x),
            Activation::Identity => x,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Gelu),
            2 => Ok(Activation::Identity),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer {
    /// out x in
    pub weight: Matrix,
    /// out x 1
    pub bias: Matrix,
    pub activation: Activation,
}

impl FrozenLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Supplies the additive weight update for a layer, if any.
pub trait DeltaProvider {
    fn delta(&self, layer: usize) -> Result<Option<Matrix>>;
}

impl DeltaProvider for [Option<Matrix>] {
    fn delta(&self, layer: usize) -> Result<Option<Matrix>> {
        Ok(self.get(layer).cloned().flatten())
    }
}

impl DeltaProvider for Vec<Option<Matrix>> {
    fn delta(&self, layer: usize) -> Result<Option<Matrix>> {
        self.as_slice().delta(layer)
    }
}

/// Hidden widths and activation of an MLP; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    /// Four hidden layers of width 64 plus the classifier.
    fn default() -> Self {
        Self {
            hidden: vec![64; 4],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    layers: Vec<FrozenLayer>,
    pub task: TaskSpec,
    pub seed: u64,
}

/// Node ids of the model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl BaseModel {
    pub fn new(layers: Vec<FrozenLayer>, task: TaskSpec, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (l.out_dim(), 1) {
                return Err(Error::dim("BaseModel::new", format!("layer {i} bias shape")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    "BaseModel::new",
                    format!(
                        "layer {i} emits {} features, layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers, task, seed })
    }

    /// Seeded random initialization (uniform, fan-in scaled).
    pub fn init(task: &TaskSpec, arch: &Architecture, seed: u64) -> Result<Self> {
        let mut widths = vec![task.input_dim];
        widths.extend(&arch.hidden);
        widths.push(task.classes);
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                FrozenLayer {
                    weight: Matrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    bias: Matrix::zeros(w[1], 1),
                    activation: if i == last {
                        Activation::Identity
                    } else {
                        arch.activation
                    },
                }
            })
            .collect();
        Self::new(layers, task.clone(), seed)
    }

    pub fn layers(&self) -> &[FrozenLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// (out, in) for every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    /// SHA-256 over every weight and bias block.
    pub fn weights_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.weight.to_bytes());
            h.update(l.bias.to_bytes());
            h.update([l.activation.tag()]);
        }
        h.finalize().into()
    }

    /// Copy with the weight of `layer` replaced.
    pub fn with_layer_weight(&self, layer: usize, weight: Matrix) -> Result<BaseModel> {
        let mut out = self.clone();
        let slot = out
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer}")))?;
        if slot.weight.shape() != weight.shape() {
            return Err(Error::dim("with_layer_weight", "replacement shape"));
        }
        slot.weight = weight;
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix, adapters: Option<&dyn DeltaProvider>) -> Result<Matrix> {
        self.forward_overriding(x, adapters, None)
    }

    /// Forward pass where `layer_override` substitutes one layer's weight
    /// without touching the model.
    pub fn forward_overriding(
        &self,
        x: &Matrix,
        adapters: Option<&dyn DeltaProvider>,
        layer_override: Option<(usize, &Matrix)>,
    ) -> Result<Matrix> {
        if x.rows() != self.input_dim() {
            return Err(Error::dim(
                "forward",
                format!("input has {} features, model expects {}", x.rows(), self.input_dim()),
            ));
        }
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let base = match layer_override {
                Some((idx, w)) if idx == l => w,
                _ => &layer.weight,
            };
            let delta = match adapters {
                Some(a) => a.delta(l)?,
                None => None,
            };
            let z = match delta {
                Some(d) => {
                    if d.shape() != base.shape() {
                        return Err(Error::dim(
                            "forward",
                            format!("adapter delta {:?} for layer {l} of {:?}", d.shape(), base.shape()),
                        ));
                    }
                    base.add(&d)?.matmul(&h)?
                }
                None => base.matmul(&h)?,
            };
            let act = layer.activation;
            h = z.add_column_broadcast(&layer.bias)?.map(|v| act.apply(v));
        }
        Ok(h)
    }

    /// Places weights and biases on `tape`; `trainable(l)` selects layers
    /// whose parameters become gradient-tracked leaves.
    pub fn place_on_tape(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> TapeParams {
        let mut weights = Vec::with_capacity(self.depth());
        let mut biases = Vec::with_capacity(self.depth());
        for (l, layer) in self.layers.iter().enumerate() {
            if trainable(l) {
                weights.push(tape.leaf(layer.weight.clone()));
                biases.push(tape.leaf(layer.bias.clone()));
            } else {
                weights.push(tape.constant(layer.weight.clone()));
                biases.push(tape.constant(layer.bias.clone()));
            }
        }
        TapeParams { weights, biases }
    }

    /// Records the forward pass on `tape`. `extra(tape, l, input)` may return
    /// a node to add to `W_l · input` (the adapter contribution `ΔW_l · input`).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &TapeParams,
        x: NodeId,
        mut extra: impl FnMut(&mut Tape, usize, NodeId) -> Result<Option<NodeId>>,
    ) -> Result<NodeId> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = tape.matmul(params.weights[l], h)?;
            if let Some(add) = extra(tape, l, h)? {
                z = tape.add(z, add)?;
            }
            let z = tape.add_bias(z, params.biases[l])?;
            h = layer.activation.on_tape(tape, z)?;
        }
        Ok(h)
    }

    /// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
    pub fn accuracy(&self, adapters: Option<&dyn DeltaProvider>, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
        }
        let logits = self.forward(&data.inputs, adapters)?;
        Ok(accuracy_from_logits(&logits, &data.labels))
    }
}

pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(c, &l)| argmax_column(logits, *c) == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub samples_per_class: usize,
    pub holdout_per_class: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            batch_size: 0,
            samples_per_class: 64,
            holdout_per_class: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: BaseModel,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub final_loss: f64,
}

/// Trains every layer on the task, then freezes the result.
pub fn pretrain(spec: &TaskSpec, arch: &Architecture, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    spec.validate()?;
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "pretraining needs epochs >= 1 and a positive learning rate".into(),
        ));
    }
    let train = spec.sample(cfg.samples_per_class, cfg.seed)?;
    let holdout = spec.sample(cfg.holdout_per_class, cfg.seed.wrapping_add(1))?;
    let mut model = BaseModel::init(spec, arch, cfg.seed ^ 0x5eed_0001)?;

    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut w_state: Vec<AdamState> = model.layers.iter().map(|l| AdamState::new(&l.weight)).collect();
    let mut b_state: Vec<AdamState> = model.layers.iter().map(|l| AdamState::new(&l.bias)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c_4000);
    let n = train.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_loss = f64::NAN;

    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let data = train.subset(chunk);
            let mut tape = Tape::new();
            let params = model.place_on_tape(&mut tape, |_| true);
            let x = tape.constant(data.inputs.clone());
            let logits = model.forward_tape(&mut tape, &params, x, |_, _, _| Ok(None))?;
            let loss = tape.softmax_cross_entropy(logits, &data.labels, Reduction::Mean)?;
            let lv = tape.value(loss).get(0, 0);
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("pretraining loss {lv}")));
            }
            epoch_loss += lv * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            for (l, layer) in model.layers.iter_mut().enumerate() {
                let gw = grads.take(params.weights[l]);
                let gb = grads.take(params.biases[l]);
                opt.step(&mut layer.weight, &gw, &mut w_state[l], cfg.learning_rate, None)?;
                opt.step(&mut layer.bias, &gb, &mut b_state[l], cfg.learning_rate, None)?;
            }
        }
        final_loss = epoch_loss / n as f64;
        if !final_loss.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss {final_loss}")));
        }
    }

    let train_accuracy = model.accuracy(None, &train)?;
    let holdout_accuracy = model.accuracy(None, &holdout)?;
    Ok(PretrainOutcome {
        model,
        train_accuracy,
        holdout_accuracy,
        final_loss,
    })
}

/// Fisher-Yates with the given stream.
pub(crate) fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model() -> BaseModel {
        let layer = FrozenLayer {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(3, 1),
            activation: Activation::Identity,
        };
        let task = TaskSpec {
            kind: TaskKind::GaussianMixture,
            classes: 3,
            input_dim: 3,
            noise: 0.0,
            seed: 0,
        };
        BaseModel::new(vec![layer], task, 0).unwrap()
    }

    #[test]
    fn identity_model_with_unit_delta() {
        let model = identity_model();
        let mut e11 = Matrix::zeros(3, 3);
        e11.set(0, 0, 1.0);
        let deltas = vec![Some(e11)];
        let x = Matrix::column(&[2.0, -1.0, 0.5]);
        let out = model.forward(&x, Some(&deltas)).unwrap();
        assert_eq!(out.data(), &[4.0, -1.0, 0.5]);
    }

    #[test]
    fn zero_deltas_match_frozen_forward_bitwise() {
        let task = TaskSpec {
            kind: TaskKind::GaussianMixture,
            classes: 3,
            input_dim: 5,
            noise: 1.0,
            seed: 1,
        };
        let model = BaseModel::init(&task, &Architecture::default(), 3).unwrap();
        let data = task.sample(4, 2).unwrap();
        let zeros: Vec<Option<Matrix>> = model
            .layer_dims()
            .iter()
            .map(|&(m, n)| Some(Matrix::zeros(m, n)))
            .collect();
        let a = model.forward(&data.inputs, None).unwrap();
        let b = model.forward(&data.inputs, Some(&zeros)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatches_rejected() {
        let model = identity_model();
        assert!(model.forward(&Matrix::zeros(2, 1), None).is_err());
        let bad = vec![Some(Matrix::zeros(2, 2))];
        assert!(model.forward(&Matrix::zeros(3, 1), Some(&bad)).is_err());
        let l1 = FrozenLayer {
            weight: Matrix::zeros(4, 3),
            bias: Matrix::zeros(4, 1),
            activation: Activation::Relu,
        };
        let l2 = FrozenLayer {
            weight: Matrix::zeros(2, 5),
            bias: Matrix::zeros(2, 1),
            activation: Activation::Identity,
        };
        assert!(BaseModel::new(vec![l1, l2], identity_model().task, 0).is_err());
    }

    #[test]
    fn constant_logits_accuracy_uses_lowest_index() {
        let layer = FrozenLayer {
            weight: Matrix::zeros(4, 2),
            bias: Matrix::zeros(4, 1),
            activation: Activation::Identity,
        };
        let task = TaskSpec {
            kind: TaskKind::GaussianMixture,
            classes: 4,
            input_dim: 2,
            noise: 1.0,
            seed: 0,
        };
        let model = BaseModel::new(vec![layer], task.clone(), 0).unwrap();
        let data = task.sample(5, 0).unwrap();
        assert_eq!(model.accuracy(None, &data).unwrap(), 0.25);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = identity_model();
        let empty = Dataset::new(Matrix::zeros(3, 0), vec![], 3).unwrap();
        assert!(model.accuracy(None, &empty).is_err());
    }

    #[test]
    fn teacher_labels_its_own_data_perfectly() {
        let task = TaskSpec {
            kind: TaskKind::TeacherRelabel,
            classes: 3,
            input_dim: 6,
            noise: 0.0,
            seed: 21,
        };
        let data = task.sample(10, 4).unwrap();
        assert_eq!(task.teacher().accuracy(None, &data).unwrap(), 1.0);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let task = TaskSpec {
            kind: TaskKind::GaussianMixture,
            classes: 3,
            input_dim: 5,
            noise: 1.0,
            seed: 1,
        };
        let arch = Architecture {
            hidden: vec![7, 6],
            activation: Activation::Gelu,
        };
        let model = BaseModel::init(&task, &arch, 8).unwrap();
        let data = task.sample(3, 2).unwrap();
        let mut tape = Tape::new();
        let params = model.place_on_tape(&mut tape, |_| false);
        let x = tape.constant(data.inputs.clone());
        let out = model.forward_tape(&mut tape, &params, x, |_, _, _| Ok(None)).unwrap();
        assert_eq!(tape.value(out), &model.forward(&data.inputs, None).unwrap());
    }
}
