//! Synthetic classification tasks standing in for real pretraining and
//! downstream datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, BaseModel, FrozenLayer};
use crate::tensor::Matrix;

/// Distance scale between mixture means relative to unit noise.
const MEAN_SCALE: f64 = 1.0;
/// Hidden width of the random teacher used by `TeacherRelabel`.
const TEACHER_HIDDEN: usize = 32;
/// Rejection-sampling budget per requested sample for label-driven tasks.
const SAMPLING_BUDGET: usize = 2000;
/// Reference inputs used to standardize the teacher's logits.
const TEACHER_REFERENCE: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// Isotropic Gaussian clusters around seeded means.
    GaussianMixture,
    /// The clusters of `GaussianMixture` with the same seed, rotated by
    /// `angle` radians in consecutive coordinate planes, with the labels of
    /// the first `swapped_pairs` class pairs exchanged.
    RotatedMixture { angle: f64, swapped_pairs: usize },
    /// Labels from interleaved bands over the first two coordinates.
    XorBands { band_width: f64 },
    /// Labels assigned by a seeded random teacher network.
    TeacherRelabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Inputs as columns (`input_dim x samples`) with one label per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.cols() != labels.len() {
            return Err(Error::dim(
                "Dataset::new",
                format!("{} inputs, {} labels", inputs.cols(), labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_columns(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Concatenates `times` copies of the dataset.
    pub fn repeated(&self, times: usize) -> Dataset {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("a task needs at least 2 classes".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise {} must be >= 0", self.noise)));
        }
        match self.kind {
            TaskKind::RotatedMixture { angle, swapped_pairs } => {
                if !angle.is_finite() {
                    return Err(Error::InvalidArgument("rotation angle must be finite".into()));
                }
                if 2 * swapped_pairs > self.classes {
                    return Err(Error::InvalidArgument(format!(
                        "cannot swap {swapped_pairs} pairs among {} classes",
                        self.classes
                    )));
                }
            }
            TaskKind::XorBands { band_width } => {
                if !(band_width > 0.0) {
                    return Err(Error::InvalidArgument("band_width must be positive".into()));
                }
                if self.input_dim < 2 {
                    return Err(Error::InvalidArgument("xor_bands needs input_dim >= 2".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Cluster centres; identical for every mixture kind sharing `seed`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                (0..self.input_dim)
                    .map(|_| MEAN_SCALE * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    /// The random teacher network used for `TeacherRelabel` labels.
    pub fn teacher(&self) -> BaseModel {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7eac_4e12);
        let widths = [self.input_dim, TEACHER_HIDDEN, self.classes];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (3.0 / w[0] as f64).sqrt();
                FrozenLayer {
                    weight: Matrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    bias: Matrix::from_fn(w[1], 1, |_, _| rng.random_range(-0.1..0.1)),
                    activation: if i == 0 { Activation::Relu } else { Activation::Identity },
                }
            })
            .collect::<Vec<_>>();
        let raw = BaseModel::new(layers, self.clone(), self.seed).expect("teacher widths chain");
        // Standardize each output logit over a reference draw so that no class
        // is starved under argmax labelling.
        let reference = Matrix::from_fn(self.input_dim, TEACHER_REFERENCE, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let logits = raw.forward(&reference, None).expect("teacher shapes");
        let mut layers = raw.layers().to_vec();
        let last = layers.last_mut().expect("two layers");
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / var.sqrt().max(1e-12);
            for c in 0..last.weight.cols() {
                last.weight.set(r, c, last.weight.get(r, c) * inv);
            }
            last.bias.set(r, 0, (last.bias.get(r, 0) - mean) * inv);
        }
        BaseModel::new(layers, self.clone(), self.seed).expect("teacher widths chain")
    }

    /// Draws `per_class` samples of every class, ordered class by class.
    pub fn sample(&self, per_class: usize, sample_seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let dim = self.input_dim;
        let mut columns: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.classes];

        match &self.kind {
            TaskKind::GaussianMixture | TaskKind::RotatedMixture { .. } => {
                let means = self.class_means();
                for (class, mean) in means.iter().enumerate() {
                    for _ in 0..per_class {
                        let x: Vec<f64> = mean
                            .iter()
                            .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        columns[class].push(x);
                    }
                }
                if let TaskKind::RotatedMixture { angle, swapped_pairs } = self.kind {
                    for bucket in &mut columns {
                        for x in bucket.iter_mut() {
                            rotate_planes(x, angle);
                        }
                    }
                    for p in 0..swapped_pairs {
                        columns.swap(2 * p, 2 * p + 1);
                    }
                }
            }
            TaskKind::XorBands { band_width } => {
                self.rejection_sample(&mut rng, per_class, &mut columns, |x| {
                    let a = ((x[0] + 1.0) / band_width).floor() as i64;
                    let b = ((x[1] + 1.0) / band_width).floor() as i64;
                    (a + b).rem_euclid(self.classes as i64) as usize
                })?;
            }
            TaskKind::TeacherRelabel => {
                let teacher = self.teacher();
                self.rejection_sample(&mut rng, per_class, &mut columns, |x| {
                    let logits = teacher.forward(&Matrix::column(x), None).expect("teacher shapes");
                    argmax_column(&logits, 0)
                })?;
            }
        }

        let total = per_class * self.classes;
        let mut inputs = Matrix::zeros(dim, total);
        let mut labels = Vec::with_capacity(total);
        let mut col = 0;
        for (class, bucket) in columns.iter().enumerate() {
            for x in bucket {
                for (r, v) in x.iter().enumerate() {
                    inputs.set(r, col, *v);
                }
                labels.push(class);
                col += 1;
            }
        }
        Dataset::new(inputs, labels, self.classes)
    }

    fn rejection_sample(
        &self,
        rng: &mut ChaCha8Rng,
        per_class: usize,
        columns: &mut [Vec<Vec<f64>>],
        label_of: impl Fn(&[f64]) -> usize,
    ) -> Result<()> {
        let budget = SAMPLING_BUDGET * per_class.max(1) * self.classes;
        let mut filled = 0;
        let needed = per_class * self.classes;
        for _ in 0..budget {
            if filled == needed {
                return Ok(());
            }
            let clean: Vec<f64> = match self.kind {
                TaskKind::XorBands { .. } => (0..self.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                _ => (0..self.input_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            let label = label_of(&clean);
            if columns[label].len() < per_class {
                let x = clean
                    .iter()
                    .map(|v| v + self.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                columns[label].push(x);
                filled += 1;
            }
        }
        if filled == needed {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "could not populate every class with {per_class} samples"
            )))
        }
    }
}

/// Rotates consecutive coordinate pairs (0,1), (2,3), ... by `angle`.
fn rotate_planes(x: &mut [f64], angle: f64) {
    let (s, c) = angle.sin_cos();
    for pair in x.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}

/// Index of the largest entry of column `col`; ties go to the lowest index.
pub fn argmax_column(m: &Matrix, col: usize) -> usize {
    let mut best = 0;
    for r in 1..m.rows() {
        if m.get(r, col) > m.get(best, col) {
            best = r;
        }
    }
    best
}
