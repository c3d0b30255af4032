//! Per-layer sparsity derivation and the profiles built from it.
//!
//! A layer's rows and columns are dropped from the frozen weight in reverse
//! importance order, alternating rows and columns, for as long as few-shot
//! accuracy stays at or above `tau * mu`, where `mu` is the unmasked accuracy.
//! The surviving counts become that layer's adapter sparsity.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::adapters::{sample_element_mask, sample_mask_pair, ElementMask, MaskPair};
use crate::error::{Error, Result};
use crate::importance::{deterministic_top_indices, ranking, stochastic_indices, ImportanceScores, Method};
use crate::model::{accuracy_from_logits, BaseModel, Dataset};
use crate::tensor::Matrix;

pub const DEFAULT_TAU: f64 = 0.90;
pub const PROFILE_HEADER: &str = "palora-profile v1";

/// Indices removed per derivation move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// `max(1, ceil(dim / 100))`, refined to single indices by bisection.
    Auto,
    Fixed(usize),
}

impl Step {
    fn chunk(self, dim: usize) -> usize {
        match self {
            Step::Auto => dim.div_ceil(100).max(1),
            Step::Fixed(s) => s.max(1),
        }
        .min(dim.max(1))
    }
}

/// One evaluated point of the derivation loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub rows: usize,
    pub cols: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDerivation {
    pub retained_rows: usize,
    pub retained_cols: usize,
    /// Set when even full retention misses the threshold.
    pub warning: bool,
    pub baseline: f64,
    /// Every state the loop evaluated, in order.
    pub probes: Vec<Probe>,
}

/// Accuracy of `model` on `data` with only `layer`'s weight restricted to
/// the given rows and columns.
pub fn masked_layer_accuracy(
    model: &BaseModel,
    layer: usize,
    data: &Dataset,
    keep_rows: &[bool],
    keep_cols: &[bool],
) -> Result<f64> {
    let w = &model.layers()[layer].weight;
    let rf: Vec<f64> = keep_rows.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let cf: Vec<f64> = keep_cols.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let masked = w.scale_rows_cols(&rf, &cf)?;
    let logits = model.forward_overriding(&data.inputs, None, Some((layer, &masked)))?;
    Ok(accuracy_from_logits(&logits, &data.labels))
}

/// Order in which indices are dropped: lowest score first, and among equal
/// scores the higher index first.
pub fn drop_order(scores: &[f64]) -> Vec<usize> {
    let mut r = ranking(scores);
    r.reverse();
    r
}

struct Evaluator<'a> {
    model: &'a BaseModel,
    layer: usize,
    data: &'a Dataset,
    row_order: Vec<usize>,
    col_order: Vec<usize>,
    probes: Vec<Probe>,
}

impl Evaluator<'_> {
    fn eval(&mut self, rows_dropped: usize, cols_dropped: usize) -> Result<f64> {
        let m = self.row_order.len();
        let n = self.col_order.len();
        let mut keep_rows = vec![true; m];
        for &i in &self.row_order[..rows_dropped] {
            keep_rows[i] = false;
        }
        let mut keep_cols = vec![true; n];
        for &j in &self.col_order[..cols_dropped] {
            keep_cols[j] = false;
        }
        let acc = masked_layer_accuracy(self.model, self.layer, self.data, &keep_rows, &keep_cols)?;
        self.probes.push(Probe {
            rows: m - rows_dropped,
            cols: n - cols_dropped,
            accuracy: acc,
        });
        Ok(acc)
    }
}

/// Runs the drop loop on one layer. `row_scores`/`col_scores` rank its
/// output and input indices.
pub fn derive_layer_sparsity(
    model: &BaseModel,
    layer: usize,
    data: &Dataset,
    row_scores: &[f64],
    col_scores: &[f64],
    tau: f64,
    step: Step,
) -> Result<LayerDerivation> {
    if layer >= model.depth() {
        return Err(Error::InvalidArgument(format!("no layer {layer}")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1)")));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("derivation set is empty".into()));
    }
    let (m, n) = model.layers()[layer].weight.shape();
    if row_scores.len() != m || col_scores.len() != n {
        return Err(Error::dim(
            "derive_layer_sparsity",
            format!("{}+{} scores for a {m}x{n} layer", row_scores.len(), col_scores.len()),
        ));
    }
    let baseline = model.accuracy(None, data)?;
    let threshold = tau * baseline;

    let chunk_r = step.chunk(m);
    let chunk_c = step.chunk(n);
    let max_drop_r = m - chunk_r;
    let max_drop_c = n - chunk_c;

    let mut ev = Evaluator {
        model,
        layer,
        data,
        row_order: drop_order(row_scores),
        col_order: drop_order(col_scores),
        probes: Vec::new(),
    };

    let full = ev.eval(0, 0)?;
    if full < threshold {
        return Ok(LayerDerivation {
            retained_rows: m,
            retained_cols: n,
            warning: true,
            baseline,
            probes: ev.probes,
        });
    }

    let (mut dr, mut dc) = (0usize, 0usize);
    let mut rows_turn = true;
    loop {
        let room_r = max_drop_r - dr;
        let room_c = max_drop_c - dc;
        let move_rows = if rows_turn { room_r > 0 } else { room_c == 0 };
        let (size, is_row) = if move_rows && room_r > 0 {
            (chunk_r.min(room_r), true)
        } else if room_c > 0 {
            (chunk_c.min(room_c), false)
        } else {
            break;
        };
        rows_turn = !is_row;
        let (nr, nc) = if is_row { (dr + size, dc) } else { (dr, dc + size) };
        if ev.eval(nr, nc)? >= threshold {
            dr = nr;
            dc = nc;
            continue;
        }
        // The chunk failed: bisect for the largest passing partial move.
        let (mut lo, mut hi) = (0usize, size);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let (tr, tc) = if is_row { (dr + mid, dc) } else { (dr, dc + mid) };
            if ev.eval(tr, tc)? >= threshold {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if is_row {
            dr += lo;
        } else {
            dc += lo;
        }
        break;
    }
    Ok(LayerDerivation {
        retained_rows: m - dr,
        retained_cols: n - dc,
        warning: false,
        baseline,
        probes: ev.probes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProfileKind {
    Derived,
    Pyramidal(f64),
    Balanced(f64),
}

/// How a derived profile was produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivation {
    pub tau: f64,
    pub mu: f64,
    pub method: Method,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    pub m: usize,
    pub n: usize,
    pub retained_rows: usize,
    pub retained_cols: usize,
    pub p_row: f64,
    pub p_col: f64,
    pub element_rate: f64,
    pub warning: bool,
}

impl LayerRecord {
    fn from_counts(layer: usize, (m, n): (usize, usize), rows: usize, cols: usize, warning: bool) -> Self {
        let p_row = rows as f64 / m as f64;
        let p_col = cols as f64 / n as f64;
        Self {
            layer,
            m,
            n,
            retained_rows: rows,
            retained_cols: cols,
            p_row,
            p_col,
            element_rate: p_row * p_col,
            warning,
        }
    }

    fn from_rate(layer: usize, (m, n): (usize, usize), rate: f64) -> Self {
        let side = rate.sqrt();
        Self {
            layer,
            m,
            n,
            retained_rows: (side * m as f64).round() as usize,
            retained_cols: (side * n as f64).round() as usize,
            p_row: side,
            p_col: side,
            element_rate: rate,
            warning: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityProfile {
    pub kind: ProfileKind,
    pub derivation: Option<Derivation>,
    pub layers: Vec<LayerRecord>,
}

/// Derives every layer independently. Element scores are reduced to rows
/// and columns by summation.
pub fn derive_profile(
    model: &BaseModel,
    data: &Dataset,
    scores: &[ImportanceScores],
    tau: f64,
    step: Step,
    seed: u64,
) -> Result<SparsityProfile> {
    if scores.len() != model.depth() {
        return Err(Error::dim(
            "derive_profile",
            format!("{} score sets for {} layers", scores.len(), model.depth()),
        ));
    }
    let method = scores.first().map(|s| s.method).unwrap_or(Method::Svd);
    let mut layers = Vec::with_capacity(model.depth());
    let mut mu = 0.0;
    for (l, s) in scores.iter().enumerate() {
        let reduced = crate::importance::ensure_row_col(s)?;
        let (rows, cols) = reduced.as_row_col()?;
        let d = derive_layer_sparsity(model, l, data, rows, cols, tau, step)?;
        mu = d.baseline;
        layers.push(LayerRecord::from_counts(
            l,
            model.layer_dims()[l],
            d.retained_rows,
            d.retained_cols,
            d.warning,
        ));
    }
    Ok(SparsityProfile {
        kind: ProfileKind::Derived,
        derivation: Some(Derivation { tau, mu, method, seed }),
        layers,
    })
}

/// Rounds to 15 significant digits, removing binary representation noise
/// from products of short decimals (so `0.8^2` is `0.64`).
fn round_decimal(x: f64) -> f64 {
    format!("{x:.14e}").parse().expect("formatted float parses")
}

/// Element rate `p^l` at 1-based layer `l`.
pub fn pyramidal_rate(p: f64, layer_one_based: usize) -> f64 {
    round_decimal(p.powi(layer_one_based as i32))
}

pub fn pyramidal_profile(p: f64, dims: &[(usize, usize)]) -> Result<SparsityProfile> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("pyramidal rate {p} outside (0, 1]")));
    }
    let layers = dims
        .iter()
        .enumerate()
        .map(|(l, &d)| LayerRecord::from_rate(l, d, pyramidal_rate(p, l + 1)))
        .collect();
    Ok(SparsityProfile {
        kind: ProfileKind::Pyramidal(p),
        derivation: None,
        layers,
    })
}

pub fn balanced_profile(p: f64, dims: &[(usize, usize)]) -> Result<SparsityProfile> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("balanced rate {p} outside [0, 1]")));
    }
    let layers = dims
        .iter()
        .enumerate()
        .map(|(l, &d)| LayerRecord::from_rate(l, d, p))
        .collect();
    Ok(SparsityProfile {
        kind: ProfileKind::Balanced(p),
        derivation: None,
        layers,
    })
}

pub fn invert_mask_pair(mask: &MaskPair) -> MaskPair {
    MaskPair {
        row: mask.row.iter().map(|b| !b).collect(),
        col: mask.col.iter().map(|b| !b).collect(),
        p_row: 1.0 - mask.p_row,
        p_col: 1.0 - mask.p_col,
        seed: mask.seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Random masks at the profile's rates.
    Partial,
    /// Exactly the top-scoring rows and columns at the profile's counts.
    Targeted,
    /// Softmax sampling of rows and columns at the given temperature.
    Stochastic(f64),
    /// Complement of the targeted masks.
    Inverted,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None => match s {
                "partial" => Ok(MaskMode::Partial),
                "targeted" => Ok(MaskMode::Targeted),
                "inverted" => Ok(MaskMode::Inverted),
                "stochastic" => Ok(MaskMode::Stochastic(1.0)),
                _ => Err(Error::InvalidArgument(format!("unknown mask mode `{s}`"))),
            },
            Some(("stochastic", t)) => t
                .parse()
                .map(MaskMode::Stochastic)
                .map_err(|_| Error::InvalidArgument(format!("bad temperature `{t}`"))),
            _ => Err(Error::InvalidArgument(format!("unknown mask mode `{s}`"))),
        }
    }
}

/// Layer `l` masks are drawn with seed `seed + l`.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_add(layer as u64)
}

pub fn profile_to_masks(
    profile: &SparsityProfile,
    mode: MaskMode,
    scores: Option<&[ImportanceScores]>,
    seed: u64,
) -> Result<Vec<MaskPair>> {
    let scored = |l: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let all = scores.ok_or_else(|| Error::InvalidArgument("this mask mode needs importance scores".into()))?;
        let s = all
            .get(l)
            .ok_or_else(|| Error::dim("profile_to_masks", "fewer score sets than layers"))?;
        let reduced = crate::importance::ensure_row_col(s)?;
        let (r, c) = reduced.as_row_col()?;
        Ok((r.to_vec(), c.to_vec()))
    };
    profile
        .layers
        .iter()
        .map(|rec| {
            let s = layer_seed(seed, rec.layer);
            match mode {
                MaskMode::Partial => sample_mask_pair(rec.m, rec.n, rec.p_row, rec.p_col, s),
                MaskMode::Targeted | MaskMode::Inverted => {
                    let (r, c) = scored(rec.layer)?;
                    check_len(&r, &c, rec)?;
                    let t = deterministic_top_indices(&r, &c, rec.retained_rows, rec.retained_cols)?;
                    Ok(if mode == MaskMode::Inverted {
                        invert_mask_pair(&t)
                    } else {
                        t
                    })
                }
                MaskMode::Stochastic(temp) => {
                    let (r, c) = scored(rec.layer)?;
                    check_len(&r, &c, rec)?;
                    stochastic_indices(&r, &c, rec.retained_rows, rec.retained_cols, temp, s)
                }
            }
        })
        .collect()
}

fn check_len(r: &[f64], c: &[f64], rec: &LayerRecord) -> Result<()> {
    if r.len() != rec.m || c.len() != rec.n {
        return Err(Error::dim(
            "profile_to_masks",
            format!("scores for layer {} do not match {}x{}", rec.layer, rec.m, rec.n),
        ));
    }
    Ok(())
}

/// Element-level masks at each layer's element rate.
pub fn profile_to_element_masks(profile: &SparsityProfile, seed: u64) -> Result<Vec<ElementMask>> {
    profile
        .layers
        .iter()
        .map(|rec| sample_element_mask(rec.m, rec.n, rec.element_rate, layer_seed(seed, rec.layer)))
        .collect()
}

impl SparsityProfile {
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|r| (r.m, r.n)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{PROFILE_HEADER}").unwrap();
        match self.kind {
            ProfileKind::Derived => writeln!(out, "kind derived").unwrap(),
            ProfileKind::Pyramidal(p) => writeln!(out, "kind pyramidal {p:?}").unwrap(),
            ProfileKind::Balanced(p) => writeln!(out, "kind balanced {p:?}").unwrap(),
        }
        writeln!(
            out,
            "layer m n retained_rows retained_cols p_row p_col element_rate tau mu method seed warning"
        )
        .unwrap();
        for r in &self.layers {
            let (tau, mu, method, seed) = match &self.derivation {
                Some(d) => (
                    format!("{:?}", d.tau),
                    format!("{:?}", d.mu),
                    d.method.to_string(),
                    d.seed.to_string(),
                ),
                None => ("-".into(), "-".into(), "-".into(), "-".into()),
            };
            writeln!(
                out,
                "{} {} {} {} {} {:?} {:?} {:?} {tau} {mu} {method} {seed} {}",
                r.layer,
                r.m,
                r.n,
                r.retained_rows,
                r.retained_cols,
                r.p_row,
                r.p_col,
                r.element_rate,
                u8::from(r.warning)
            )
            .unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("profile: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(PROFILE_HEADER) {
            return Err(bad("missing or unsupported header"));
        }
        let kind_line = lines.next().ok_or_else(|| bad("missing kind line"))?;
        let kind_fields: Vec<&str> = kind_line.split_whitespace().collect();
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
        let kind = match kind_fields.as_slice() {
            ["kind", "derived"] => ProfileKind::Derived,
            ["kind", "pyramidal", p] => ProfileKind::Pyramidal(float(p)?),
            ["kind", "balanced", p] => ProfileKind::Balanced(float(p)?),
            _ => return Err(bad("bad kind line")),
        };
        lines.next().ok_or_else(|| bad("missing column line"))?;
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad count `{s}`")));
        let mut layers = Vec::new();
        let mut derivation = None;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 13 {
                return Err(bad(&format!("expected 13 fields, found {}", f.len())));
            }
            if f[8] != "-" {
                derivation = Some(Derivation {
                    tau: float(f[8])?,
                    mu: float(f[9])?,
                    method: f[10].parse()?,
                    seed: f[11].parse().map_err(|_| bad("bad seed"))?,
                });
            }
            layers.push(LayerRecord {
                layer: count(f[0])?,
                m: count(f[1])?,
                n: count(f[2])?,
                retained_rows: count(f[3])?,
                retained_cols: count(f[4])?,
                p_row: float(f[5])?,
                p_col: float(f[6])?,
                element_rate: float(f[7])?,
                warning: f[12] == "1",
            });
        }
        Ok(Self {
            kind,
            derivation,
            layers,
        })
    }
}

/// Zeroes rows and columns of a weight outside the mask, as the derivation
/// loop sees it.
pub fn restrict_weight(w: &Matrix, mask: &MaskPair) -> Result<Matrix> {
    w.scale_rows_cols(&mask.row_factors(), &mask.col_factors())
}
