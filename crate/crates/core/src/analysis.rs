//! Post-hoc diagnostics: adapter residual norms, mask overlap and the size
//! of the retained subnetwork.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, ElementMask, MaskPair};
use crate::error::{Error, Result};
use crate::model::{BaseModel, DeltaProvider};
use crate::sparsity::SparsityProfile;

/// Frobenius norm of each layer's effective (masked) delta; 0 for layers
/// without an adapter.
pub fn residual_norm_per_layer(adapters: &AdapterSet) -> Result<Vec<f64>> {
    (0..adapters.layers.len())
        .map(|l| Ok(adapters.delta(l)?.map_or(0.0, |d| d.frobenius_norm())))
        .collect()
}

/// Residual norms divided by the frozen weight's Frobenius norm.
pub fn normalized_residual_norms(adapters: &AdapterSet, model: &BaseModel) -> Result<Vec<f64>> {
    adapters.check_fits(model)?;
    let norms = residual_norm_per_layer(adapters)?;
    Ok(norms
        .iter()
        .zip(model.layers())
        .map(|(n, layer)| {
            let w = layer.weight.frobenius_norm();
            if w == 0.0 {
                0.0
            } else {
                n / w
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapKind {
    /// Intersection over union.
    #[default]
    Jaccard,
    /// Intersection over the smaller set.
    OverMin,
}

fn ones(mask: &MaskPair) -> BTreeSet<(u8, usize)> {
    let rows = mask.row.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| (0u8, i));
    let cols = mask.col.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| (1u8, j));
    rows.chain(cols).collect()
}

/// Overlap of retained indices, with rows and columns pooled into one index
/// set. Two empty masks overlap fully.
pub fn mask_overlap_with(a: &MaskPair, b: &MaskPair, kind: OverlapKind) -> Result<f64> {
    if a.row.len() != b.row.len() || a.col.len() != b.col.len() {
        return Err(Error::dim("mask_overlap", "masks cover different shapes"));
    }
    let (sa, sb) = (ones(a), ones(b));
    let inter = sa.intersection(&sb).count();
    let denom = match kind {
        OverlapKind::Jaccard => sa.union(&sb).count(),
        OverlapKind::OverMin => sa.len().min(sb.len()),
    };
    Ok(if denom == 0 { 1.0 } else { inter as f64 / denom as f64 })
}

pub fn mask_overlap(a: &MaskPair, b: &MaskPair) -> Result<f64> {
    mask_overlap_with(a, b, OverlapKind::Jaccard)
}

/// Upper bound on the fraction of each layer's elements an adapter under the
/// profile can touch: `retained_rows * retained_cols / (m n)`.
pub fn subnetwork_fraction(profile: &SparsityProfile) -> Vec<f64> {
    profile
        .layers
        .iter()
        .map(|r| (r.retained_rows * r.retained_cols) as f64 / (r.m * r.n) as f64)
        .collect()
}

/// Exact fractions for sampled masks.
pub fn mask_fraction(mask: &MaskPair) -> f64 {
    (mask.row_ones() * mask.col_ones()) as f64 / (mask.row.len() * mask.col.len()) as f64
}

pub fn element_mask_fraction(mask: &ElementMask) -> f64 {
    mask.mask.sum() / mask.mask.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    ResidualNorms,
    Overlap,
    Fractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kind: ReportKind,
    /// One entry per layer.
    pub values: Vec<f64>,
    /// Free-form labels: methods, seeds, datasets compared.
    pub metadata: Vec<(String, String)>,
}

impl AnalysisReport {
    pub fn new(kind: ReportKind, values: Vec<f64>, metadata: Vec<(String, String)>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("report values must be finite".into()));
        }
        if kind == ReportKind::Overlap && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("overlap values must lie in [0, 1]".into()));
        }
        Ok(Self { kind, values, metadata })
    }

    pub fn to_csv(&self) -> String {
        let kind = serde_json::to_value(self.kind).expect("enum serializes");
        let kind = kind.as_str().expect("unit variant");
        let mut out = String::from("kind,layer,value\n");
        for (l, v) in self.values.iter().enumerate() {
            writeln!(out, "{kind},{l},{v:?}").unwrap();
        }
        out
    }
}
