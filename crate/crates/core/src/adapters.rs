//! Low-rank adapters `ΔW = (alpha/d) B A` and their row/column and
//! element-level masks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseModel, DeltaProvider};
use crate::tensor::{Matrix, NodeId, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// m x d
    pub b: Matrix,
    /// d x n
    pub a: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix, alpha: f64) -> Result<Self> {
        let d = b.cols();
        if a.rows() != d {
            return Err(Error::dim(
                "LoraAdapter::new",
                format!("B is {:?}, A is {:?}", b.shape(), a.shape()),
            ));
        }
        if d == 0 || d > b.rows().min(a.cols()) {
            return Err(Error::InvalidArgument(format!(
                "rank {d} must be in 1..={}",
                b.rows().min(a.cols())
            )));
        }
        Ok(Self { b, a, alpha })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// (m, n) of the adapted weight.
    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn dense_delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .scale(self.scaling())
    }
}

/// `B = 0` and `A ~ U[-1/sqrt(n), 1/sqrt(n)]`, so the initial delta is zero.
pub fn init_adapter(m: usize, n: usize, d: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    if d == 0 || d > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {d} must be in 1..={} for a {m}x{n} layer",
            m.min(n)
        )));
    }
    let bound = 1.0 / (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(d, n, |_, _| rng.random_range(-bound..=bound));
    LoraAdapter::new(Matrix::zeros(m, d), a, alpha)
}

/// Row mask over the outputs (rows of B) and column mask over the inputs
/// (columns of A), with the Bernoulli rates they were drawn at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub row: Vec<bool>,
    pub col: Vec<bool>,
    pub p_row: f64,
    pub p_col: f64,
    pub seed: u64,
}

impl MaskPair {
    pub fn ones(m: usize, n: usize) -> Self {
        Self {
            row: vec![true; m],
            col: vec![true; n],
            p_row: 1.0,
            p_col: 1.0,
            seed: 0,
        }
    }

    pub fn row_ones(&self) -> usize {
        self.row.iter().filter(|b| **b).count()
    }

    pub fn col_ones(&self) -> usize {
        self.col.iter().filter(|b| **b).count()
    }

    pub fn row_factors(&self) -> Vec<f64> {
        self.row.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn col_factors(&self) -> Vec<f64> {
        self.col.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Element-level mask `U` on `ΔW`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementMask {
    pub mask: Matrix,
    pub p: f64,
}

impl ElementMask {
    pub fn new(mask: Matrix, p: f64) -> Result<Self> {
        if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidArgument("element mask entries must be 0 or 1".into()));
        }
        Ok(Self { mask, p })
    }
}

fn check_rate(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} rate {p} outside [0, 1]")))
    }
}

/// i.i.d. Bernoulli row and column masks; rows are drawn first from one stream.
pub fn sample_mask_pair(m: usize, n: usize, p_row: f64, p_col: f64, seed: u64) -> Result<MaskPair> {
    check_rate(p_row, "row")?;
    check_rate(p_col, "column")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = (0..m).map(|_| rng.random::<f64>() < p_row).collect();
    let col = (0..n).map(|_| rng.random::<f64>() < p_col).collect();
    Ok(MaskPair {
        row,
        col,
        p_row,
        p_col,
        seed,
    })
}

pub fn sample_element_mask(m: usize, n: usize, p: f64, seed: u64) -> Result<ElementMask> {
    check_rate(p, "element")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = Matrix::from_fn(m, n, |_, _| if rng.random::<f64>() < p { 1.0 } else { 0.0 });
    Ok(ElementMask { mask, p })
}

/// `(alpha/d) (u_row ⊙ B)(A ⊙ u_col)`.
pub fn masked_delta(adapter: &LoraAdapter, mask: &MaskPair) -> Result<Matrix> {
    let (m, n) = adapter.shape();
    if mask.row.len() != m || mask.col.len() != n {
        return Err(Error::dim(
            "masked_delta",
            format!("mask {}x{} for a {m}x{n} adapter", mask.row.len(), mask.col.len()),
        ));
    }
    let d = adapter.rank();
    let b = adapter.b.scale_rows_cols(&mask.row_factors(), &vec![1.0; d])?;
    let a = adapter.a.scale_rows_cols(&vec![1.0; d], &mask.col_factors())?;
    Ok(b.matmul(&a)?.scale(adapter.scaling()))
}

/// `(alpha/d) (B A) ⊙ U`.
pub fn element_masked_delta(adapter: &LoraAdapter, mask: &ElementMask) -> Result<Matrix> {
    if mask.mask.shape() != adapter.shape() {
        return Err(Error::dim(
            "element_masked_delta",
            format!("mask {:?} for adapter {:?}", mask.mask.shape(), adapter.shape()),
        ));
    }
    adapter.dense_delta().hadamard(&mask.mask)
}

/// Realized element retention: row-ones fraction times column-ones fraction.
pub fn effective_element_rate(mask: &MaskPair) -> f64 {
    let r = if mask.row.is_empty() {
        0.0
    } else {
        mask.row_ones() as f64 / mask.row.len() as f64
    };
    let c = if mask.col.is_empty() {
        0.0
    } else {
        mask.col_ones() as f64 / mask.col.len() as f64
    };
    r * c
}

/// Adapter entries that can receive gradient: `d (ones(u_row) + ones(u_col))`.
pub fn trainable_parameter_count(adapter: &LoraAdapter, mask: &MaskPair) -> usize {
    adapter.rank() * (mask.row_ones() + mask.col_ones())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Masking {
    Dense,
    RowCol(MaskPair),
    Element(ElementMask),
}

/// An adapter attached to one layer together with its (static) mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter {
    pub lora: LoraAdapter,
    pub masking: Masking,
}

impl LayerAdapter {
    pub fn dense(lora: LoraAdapter) -> Self {
        Self {
            lora,
            masking: Masking::Dense,
        }
    }

    pub fn with_mask(lora: LoraAdapter, mask: MaskPair) -> Result<Self> {
        let (m, n) = lora.shape();
        if mask.row.len() != m || mask.col.len() != n {
            return Err(Error::dim("LayerAdapter::with_mask", "mask does not fit adapter"));
        }
        Ok(Self {
            lora,
            masking: Masking::RowCol(mask),
        })
    }

    pub fn with_element_mask(lora: LoraAdapter, mask: ElementMask) -> Result<Self> {
        if mask.mask.shape() != lora.shape() {
            return Err(Error::dim(
                "LayerAdapter::with_element_mask",
                "mask does not fit adapter",
            ));
        }
        Ok(Self {
            lora,
            masking: Masking::Element(mask),
        })
    }

    pub fn delta(&self) -> Result<Matrix> {
        match &self.masking {
            Masking::Dense => Ok(self.lora.dense_delta()),
            Masking::RowCol(mask) => masked_delta(&self.lora, mask),
            Masking::Element(mask) => element_masked_delta(&self.lora, mask),
        }
    }

    pub fn mask_pair(&self) -> Option<&MaskPair> {
        match &self.masking {
            Masking::RowCol(m) => Some(m),
            _ => None,
        }
    }

    /// Row and column activity: which rows of B and columns of A can change.
    fn activity(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = self.lora.shape();
        match &self.masking {
            Masking::Dense => (vec![1.0; m], vec![1.0; n]),
            Masking::RowCol(mask) => (mask.row_factors(), mask.col_factors()),
            Masking::Element(e) => {
                let rows = (0..m)
                    .map(|r| {
                        if e.mask.row(r).iter().any(|v| *v != 0.0) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let cols = e
                    .mask
                    .col_sums()
                    .iter()
                    .map(|s| if *s != 0.0 { 1.0 } else { 0.0 })
                    .collect();
                (rows, cols)
            }
        }
    }

    /// 0/1 matrices shaped like B and A marking entries the optimizer may update.
    pub fn trainable_masks(&self) -> (Matrix, Matrix) {
        let d = self.lora.rank();
        let (rows, cols) = self.activity();
        let b = Matrix::from_fn(rows.len(), d, |r, _| rows[r]);
        let a = Matrix::from_fn(d, cols.len(), |_, c| cols[c]);
        (b, a)
    }

    pub fn trainable_count(&self) -> usize {
        let (rows, cols) = self.activity();
        let ones = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        self.lora.rank() * (ones(&rows) + ones(&cols))
    }

    /// Records `ΔW · input` on the tape given leaf ids for B and A.
    pub fn contribution_on_tape(&self, tape: &mut Tape, b: NodeId, a: NodeId, input: NodeId) -> Result<NodeId> {
        let s = self.lora.scaling();
        match &self.masking {
            Masking::Dense => {
                let t = tape.matmul(a, input)?;
                let u = tape.matmul(b, t)?;
                tape.scale(u, s)
            }
            Masking::RowCol(_) => {
                let (bm, am) = self.trainable_masks();
                let bm = tape.constant(bm);
                let am = tape.constant(am);
                let b_masked = tape.hadamard(b, bm)?;
                let a_masked = tape.hadamard(a, am)?;
                let t = tape.matmul(a_masked, input)?;
                let u = tape.matmul(b_masked, t)?;
                tape.scale(u, s)
            }
            Masking::Element(e) => {
                let u = tape.constant(e.mask.clone());
                let ba = tape.matmul(b, a)?;
                let masked = tape.hadamard(ba, u)?;
                let scaled = tape.scale(masked, s)?;
                tape.matmul(scaled, input)
            }
        }
    }
}

/// One optional adapter per model layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub layers: Vec<Option<LayerAdapter>>,
}

impl AdapterSet {
    /// Dense adapters of rank `d` on every layer; layer `l` uses seed `seed + l`.
    pub fn dense(model: &BaseModel, d: usize, alpha: f64, seed: u64) -> Result<Self> {
        let layers = model
            .layer_dims()
            .iter()
            .enumerate()
            .map(|(l, &(m, n))| {
                init_adapter(m, n, d.min(m.min(n)), alpha, seed.wrapping_add(l as u64))
                    .map(|lora| Some(LayerAdapter::dense(lora)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Dense adapters with the given per-layer masks applied.
    pub fn masked(model: &BaseModel, d: usize, alpha: f64, seed: u64, masks: &[MaskPair]) -> Result<Self> {
        if masks.len() != model.depth() {
            return Err(Error::dim(
                "AdapterSet::masked",
                format!("{} masks for {} layers", masks.len(), model.depth()),
            ));
        }
        let mut set = Self::dense(model, d, alpha, seed)?;
        for (slot, mask) in set.layers.iter_mut().zip(masks) {
            let lora = slot.take().expect("dense set fills every layer").lora;
            *slot = Some(LayerAdapter::with_mask(lora, mask.clone())?);
        }
        Ok(set)
    }

    pub fn element_masked(model: &BaseModel, d: usize, alpha: f64, seed: u64, masks: &[ElementMask]) -> Result<Self> {
        if masks.len() != model.depth() {
            return Err(Error::dim("AdapterSet::element_masked", "mask count"));
        }
        let mut set = Self::dense(model, d, alpha, seed)?;
        for (slot, mask) in set.layers.iter_mut().zip(masks) {
            let lora = slot.take().expect("dense set fills every layer").lora;
            *slot = Some(LayerAdapter::with_element_mask(lora, mask.clone())?);
        }
        Ok(set)
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().flatten().map(|a| a.trainable_count()).sum()
    }

    /// Checks every adapter fits its layer.
    pub fn check_fits(&self, model: &BaseModel) -> Result<()> {
        if self.layers.len() != model.depth() {
            return Err(Error::dim(
                "AdapterSet",
                format!("{} adapter slots for {} layers", self.layers.len(), model.depth()),
            ));
        }
        for (l, (slot, dims)) in self.layers.iter().zip(model.layer_dims()).enumerate() {
            if let Some(a) = slot {
                if a.lora.shape() != dims {
                    return Err(Error::dim(
                        "AdapterSet",
                        format!("adapter {:?} on layer {l} of {:?}", a.lora.shape(), dims),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn masks(&self) -> Vec<Option<MaskPair>> {
        self.layers
            .iter()
            .map(|s| s.as_ref().and_then(|a| a.mask_pair().cloned()))
            .collect()
    }
}

impl DeltaProvider for AdapterSet {
    fn delta(&self, layer: usize) -> Result<Option<Matrix>> {
        match self.layers.get(layer) {
            Some(Some(a)) => a.delta().map(Some),
            _ => Ok(None),
        }
    }
}

/// Named, independent adapter sets sharing one frozen model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterBank {
    pub members: BTreeMap<String, AdapterSet>,
}

impl AdapterBank {
    pub fn insert(&mut self, name: impl Into<String>, set: AdapterSet) {
        self.members.insert(name.into(), set);
    }

    pub fn get(&self, name: &str) -> Result<&AdapterSet> {
        self.members
            .get(name)
            .ok_or_else(|| Error::UnknownAdapter(name.to_string()))
    }
}

/// Forward pass with only the `active` member's deltas applied.
pub fn multi_adapter_forward(model: &BaseModel, bank: &AdapterBank, active: &str, x: &Matrix) -> Result<Matrix> {
    let set = bank.get(active)?;
    set.check_fits(model)?;
    model.forward(x, Some(set))
}
