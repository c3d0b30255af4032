//! Importance scores for choosing which rows and columns of a layer to adapt.
//!
//! Scores come from the spectrum of the frozen weight (`Svd`), from the loss
//! gradient on the few-shot set (`Snip`), or from the gradient scaled by the
//! weight (`Imp`). Element scores reduce to row/column scores by summation.

use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::MaskPair;
use crate::error::{Error, Result};
use crate::linalg::{leverage_scores, truncated_svd};
use crate::model::{BaseModel, Dataset};
use crate::tensor::{Matrix, Reduction, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svd,
    Snip,
    Imp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Svd => "svd",
            Method::Snip => "snip",
            Method::Imp => "imp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(Method::Svd),
            "snip" => Ok(Method::Snip),
            "imp" => Ok(Method::Imp),
            other => Err(Error::InvalidArgument(format!("unknown importance method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Granularity {
    Element(Matrix),
    RowCol { rows: Vec<f64>, cols: Vec<f64> },
}

/// Where a set of scores came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub layer: usize,
    pub values: Granularity,
    pub method: Method,
    pub provenance: Provenance,
}

fn check_scores<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::Contract(format!("importance score {v} is not finite and >= 0")));
        }
    }
    Ok(())
}

impl ImportanceScores {
    pub fn element(layer: usize, scores: Matrix, method: Method, provenance: Provenance) -> Result<Self> {
        check_scores(scores.data())?;
        Ok(Self {
            layer,
            values: Granularity::Element(scores),
            method,
            provenance,
        })
    }

    pub fn row_col(
        layer: usize,
        rows: Vec<f64>,
        cols: Vec<f64>,
        method: Method,
        provenance: Provenance,
    ) -> Result<Self> {
        check_scores(rows.iter().chain(&cols))?;
        Ok(Self {
            layer,
            values: Granularity::RowCol { rows, cols },
            method,
            provenance,
        })
    }

    pub fn as_element(&self) -> Result<&Matrix> {
        match &self.values {
            Granularity::Element(m) => Ok(m),
            Granularity::RowCol { .. } => Err(Error::InvalidArgument("expected element-level scores".into())),
        }
    }

    pub fn as_row_col(&self) -> Result<(&[f64], &[f64])> {
        match &self.values {
            Granularity::RowCol { rows, cols } => Ok((rows, cols)),
            Granularity::Element(_) => Err(Error::InvalidArgument("expected row/column scores".into())),
        }
    }
}

/// Leverage scores of the top-`k` singular subspace of `w`.
pub fn svd_importance(w: &Matrix, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let lev = leverage_scores(&truncated_svd(w, k)?);
    Ok((lev.rows, lev.cols))
}

/// `|dL/dW_l|` with `L` the summed cross-entropy over `batch`.
pub fn snip_importance(model: &BaseModel, layer: usize, batch: &Dataset) -> Result<Matrix> {
    let grad = layer_gradient(model, layer, batch)?;
    Ok(grad.map(f64::abs))
}

/// `|W_l ⊙ dL/dW_l|`.
pub fn imp_importance(model: &BaseModel, layer: usize, batch: &Dataset) -> Result<Matrix> {
    let grad = layer_gradient(model, layer, batch)?;
    Ok(model.layers()[layer].weight.hadamard(&grad)?.map(f64::abs))
}

/// Gradient of the summed loss with respect to one frozen weight, taken on a
/// private tape so the model itself is never touched.
pub fn layer_gradient(model: &BaseModel, layer: usize, batch: &Dataset) -> Result<Matrix> {
    if layer >= model.depth() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for depth {}",
            model.depth()
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("importance batch is empty".into()));
    }
    let mut tape = Tape::new();
    let params = model.place_on_tape(&mut tape, |l| l == layer);
    let x = tape.constant(batch.inputs.clone());
    let logits = model.forward_tape(&mut tape, &params, x, |_, _, _| Ok(None))?;
    let loss = tape.softmax_cross_entropy(logits, &batch.labels, Reduction::Sum)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(params.weights[layer]))
}

/// Scores for every layer under `method`. `svd_rank(l, spectrum)` picks the
/// subspace size for spectral scores.
pub fn score_model(
    model: &BaseModel,
    method: Method,
    batch: &Dataset,
    provenance: &Provenance,
    mut svd_rank: impl FnMut(usize, &Matrix) -> Result<usize>,
) -> Result<Vec<ImportanceScores>> {
    (0..model.depth())
        .map(|l| match method {
            Method::Svd => {
                let w = &model.layers()[l].weight;
                let k = svd_rank(l, w)?;
                let (rows, cols) = svd_importance(w, k)?;
                ImportanceScores::row_col(l, rows, cols, method, provenance.clone())
            }
            Method::Snip => {
                let s = snip_importance(model, l, batch)?;
                ImportanceScores::element(l, s, method, provenance.clone())
            }
            Method::Imp => {
                let s = imp_importance(model, l, batch)?;
                ImportanceScores::element(l, s, method, provenance.clone())
            }
        })
        .collect()
}

/// Row sums and column sums of element scores. Row/column scores pass through.
pub fn reduce_to_row_col(scores: &ImportanceScores) -> Result<ImportanceScores> {
    let m = scores.as_element()?;
    ImportanceScores::row_col(
        scores.layer,
        m.row_sums(),
        m.col_sums(),
        scores.method,
        scores.provenance.clone(),
    )
}

/// Same, accepting either granularity.
pub fn ensure_row_col(scores: &ImportanceScores) -> Result<ImportanceScores> {
    match scores.values {
        Granularity::Element(_) => reduce_to_row_col(scores),
        Granularity::RowCol { .. } => Ok(scores.clone()),
    }
}

/// Indices sorted by descending score, ties to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn top_mask(scores: &[f64], count: usize) -> Result<Vec<bool>> {
    if count > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {count} of {} indices",
            scores.len()
        )));
    }
    let mut mask = vec![false; scores.len()];
    for &i in &ranking(scores)[..count] {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn deterministic_top_indices(rows: &[f64], cols: &[f64], count_row: usize, count_col: usize) -> Result<MaskPair> {
    Ok(MaskPair {
        row: top_mask(rows, count_row)?,
        col: top_mask(cols, count_col)?,
        p_row: ratio(count_row, rows.len()),
        p_col: ratio(count_col, cols.len()),
        seed: 0,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Draws `count` distinct indices one at a time from `softmax(scores / t)`
/// restricted to the indices not yet chosen.
fn softmax_draw(scores: &[f64], count: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if count > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {count} of {} indices",
            scores.len()
        )));
    }
    let mut chosen = vec![false; scores.len()];
    let mut weights = vec![0.0; scores.len()];
    for _ in 0..count {
        let max = scores
            .iter()
            .zip(&chosen)
            .filter(|(_, c)| !**c)
            .map(|(s, _)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (i, s) in scores.iter().enumerate() {
            weights[i] = if chosen[i] {
                0.0
            } else {
                ((s - max) / temperature).exp()
            };
            total += weights[i];
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            pick = Some(i);
            if target < *w {
                break;
            }
            target -= w;
        }
        chosen[pick.expect("at least one unchosen index with positive weight")] = true;
    }
    Ok(chosen)
}

/// Samples rows (first) and then columns without replacement from a
/// temperature softmax over their scores.
pub fn stochastic_indices(
    rows: &[f64],
    cols: &[f64],
    count_row: usize,
    count_col: usize,
    temperature: f64,
    seed: u64,
) -> Result<MaskPair> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = softmax_draw(rows, count_row, temperature, &mut rng)?;
    let col = softmax_draw(cols, count_col, temperature, &mut rng)?;
    Ok(MaskPair {
        row,
        col,
        p_row: ratio(count_row, rows.len()),
        p_col: ratio(count_col, cols.len()),
        seed,
    })
}

/// Adds to every row `i` of layer `l` the importance arriving at neuron `i`
/// from layer `l + 1` (column `i` sums of its scores), rescaled so the added
/// vector's mean matches layer `l`'s mean score. The last layer is unchanged,
/// and each layer receives the original, not the already augmented, scores
/// of its successor.
pub fn flow_reweigh_matrices(scores: &[Matrix]) -> Result<Vec<Matrix>> {
    for (l, pair) in scores.windows(2).enumerate() {
        if pair[0].rows() != pair[1].cols() {
            return Err(Error::dim(
                "flow_reweigh",
                format!(
                    "layer {l} has {} outputs but layer {} takes {} inputs",
                    pair[0].rows(),
                    l + 1,
                    pair[1].cols()
                ),
            ));
        }
    }
    let mut out = scores.to_vec();
    for l in 0..scores.len().saturating_sub(1) {
        let incoming = scores[l + 1].col_sums();
        let incoming_mean = incoming.iter().sum::<f64>() / incoming.len() as f64;
        if incoming_mean == 0.0 {
            continue;
        }
        let receiving_mean = scores[l].sum() / scores[l].len() as f64;
        let factor = receiving_mean / incoming_mean;
        let current = &scores[l];
        out[l] = Matrix::from_fn(current.rows(), current.cols(), |r, c| {
            current.get(r, c) + factor * incoming[r]
        });
    }
    Ok(out)
}

pub fn flow_reweigh(scores: &[ImportanceScores]) -> Result<Vec<ImportanceScores>> {
    let mats = scores
        .iter()
        .map(|s| s.as_element().cloned())
        .collect::<Result<Vec<_>>>()?;
    flow_reweigh_matrices(&mats)?
        .into_iter()
        .zip(scores)
        .map(|(m, s)| ImportanceScores::element(s.layer, m, s.method, s.provenance.clone()))
        .collect()
}

/// CSV with columns `layer,kind,index,score,method,seed`; element scores are
/// reduced to rows and columns first.
pub fn scores_to_csv(scores: &[ImportanceScores]) -> Result<String> {
    let mut out = String::from("layer,kind,index,score,method,seed\n");
    for s in scores {
        let reduced = ensure_row_col(s)?;
        let (rows, cols) = reduced.as_row_col()?;
        for (kind, values) in [("row", rows), ("col", cols)] {
            for (i, v) in values.iter().enumerate() {
                writeln!(out, "{},{kind},{i},{v:e},{},{}", s.layer, s.method, s.provenance.seed)
                    .expect("writing to a String");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, FrozenLayer, TaskKind, TaskSpec};

    fn tiny_task(input_dim: usize, classes: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::GaussianMixture,
            classes,
            input_dim,
            noise: 0.5,
            seed: 3,
        }
    }

    fn two_layer(w1: Matrix, w2: Matrix) -> BaseModel {
        let task = tiny_task(w1.cols(), w2.rows());
        let layers = vec![
            FrozenLayer {
                bias: Matrix::zeros(w1.rows(), 1),
                weight: w1,
                activation: Activation::Relu,
            },
            FrozenLayer {
                bias: Matrix::zeros(w2.rows(), 1),
                weight: w2,
                activation: Activation::Identity,
            },
        ];
        BaseModel::new(layers, task, 0).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn finite_difference(model: &BaseModel, layer: usize, batch: &Dataset) -> Matrix {
        let loss = |m: &BaseModel| {
            let logits = m.forward(&batch.inputs, None).unwrap();
            let mut total = 0.0;
            for (c, &label) in batch.labels.iter().enumerate() {
                let col = logits.col(c);
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - col[label];
            }
            total
        };
        let w = &model.layers()[layer].weight;
        let h = 1e-6;
        Matrix::from_fn(w.rows(), w.cols(), |r, c| {
            let mut plus = w.clone();
            plus.set(r, c, w.get(r, c) + h);
            let mut minus = w.clone();
            minus.set(r, c, w.get(r, c) - h);
            (loss(&model.with_layer_weight(layer, plus).unwrap())
                - loss(&model.with_layer_weight(layer, minus).unwrap()))
                / (2.0 * h)
        })
    }

    fn batch(model: &BaseModel, n: usize, seed: u64) -> Dataset {
        let x = random(model.input_dim(), n, seed);
        let labels = (0..n).map(|i| i % model.output_dim()).collect();
        Dataset::new(x, labels, model.output_dim()).unwrap()
    }

    #[test]
    fn svd_scores_of_diagonal() {
        let w = Matrix::diag(&[3.0, 2.0, 1.0]);
        let (rows, cols) = svd_importance(&w, 2).unwrap();
        for (got, want) in rows.iter().zip([1.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in cols.iter().zip([1.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_scores_of_orthogonal_are_uniform() {
        let (s, c) = (0.6, 0.8);
        let w = Matrix::from_rows(&[&[c, -s], &[s, c]]).unwrap();
        let (rows, cols) = svd_importance(&w, 2).unwrap();
        assert!(rows.iter().chain(&cols).all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn snip_matches_finite_differences() {
        let model = two_layer(random(3, 3, 1), random(3, 3, 2));
        let data = batch(&model, 5, 9);
        for layer in 0..2 {
            let snip = snip_importance(&model, layer, &data).unwrap();
            let fd = finite_difference(&model, layer, &data).map(f64::abs);
            for (a, b) in snip.data().iter().zip(fd.data()) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dead_relu_row_scores_zero() {
        let mut w1 = random(3, 3, 1);
        for c in 0..3 {
            w1.set(1, c, 0.0);
        }
        let mut model = two_layer(w1, random(3, 3, 2));
        // positive inputs and a negative bias keep hidden unit 1 off everywhere
        let mut layers = model.layers().to_vec();
        layers[0].bias.set(1, 0, -1.0);
        model = BaseModel::new(layers, model.task.clone(), 0).unwrap();
        let data = batch(&model, 4, 3);
        let s = snip_importance(&model, 0, &data).unwrap();
        assert!(s.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_batch_doubles_scores() {
        let model = two_layer(random(4, 3, 5), random(3, 4, 6));
        let data = batch(&model, 6, 2);
        let once = snip_importance(&model, 0, &data).unwrap();
        let twice = snip_importance(&model, 0, &data.repeated(2)).unwrap();
        assert!(twice.max_abs_diff(&once.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn imp_is_snip_times_weight() {
        let mut w1 = random(4, 3, 5);
        w1.set(0, 0, 0.0);
        let model = two_layer(w1.clone(), random(3, 4, 6));
        let data = batch(&model, 6, 2);
        let snip = snip_importance(&model, 0, &data).unwrap();
        let imp = imp_importance(&model, 0, &data).unwrap();
        assert_eq!(imp.get(0, 0), 0.0);
        let oracle = snip.hadamard(&w1.map(f64::abs)).unwrap();
        assert!(imp.max_abs_diff(&oracle).unwrap() < 1e-15);
        let fd = finite_difference(&model, 0, &data).hadamard(&w1).unwrap().map(f64::abs);
        for (a, b) in imp.data().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn importance_leaves_model_untouched() {
        let model = two_layer(random(4, 3, 5), random(3, 4, 6));
        let before = model.weights_hash();
        let data = batch(&model, 6, 2);
        snip_importance(&model, 1, &data).unwrap();
        imp_importance(&model, 0, &data).unwrap();
        assert_eq!(before, model.weights_hash());
    }

    #[test]
    fn reduction_cases() {
        let p = Provenance::default();
        let ones = ImportanceScores::element(0, Matrix::filled(2, 3, 1.0), Method::Snip, p.clone()).unwrap();
        let r = reduce_to_row_col(&ones).unwrap();
        let (rows, cols) = r.as_row_col().unwrap();
        assert_eq!(rows, &[3.0, 3.0]);
        assert_eq!(cols, &[2.0, 2.0, 2.0]);
        let mut single = Matrix::zeros(3, 3);
        single.set(1, 2, 0.5);
        let r = reduce_to_row_col(&ImportanceScores::element(0, single, Method::Imp, p.clone()).unwrap()).unwrap();
        assert_eq!(r.as_row_col().unwrap(), (&[0.0, 0.5, 0.0][..], &[0.0, 0.0, 0.5][..]));
        assert!(reduce_to_row_col(&r).is_err());
        assert!(ImportanceScores::element(0, Matrix::filled(1, 1, -1.0), Method::Imp, p).is_err());
    }

    #[test]
    fn reduction_matches_loop() {
        let m = random(5, 4, 11).map(f64::abs);
        let r =
            reduce_to_row_col(&ImportanceScores::element(0, m.clone(), Method::Snip, Provenance::default()).unwrap())
                .unwrap();
        let (rows, cols) = r.as_row_col().unwrap();
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..4 {
                s += m.get(i, j);
            }
            assert!((rows[i] - s).abs() < 1e-15);
        }
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..5 {
                s += m.get(i, j);
            }
            assert!((cols[j] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn top_indices_cases() {
        let m = deterministic_top_indices(&[3.0, 1.0, 2.0], &[1.0], 2, 1).unwrap();
        assert_eq!(m.row, vec![true, false, true]);
        assert_eq!(m.col, vec![true]);
        let all = deterministic_top_indices(&[0.0, 0.0], &[5.0, 1.0], 2, 2).unwrap();
        assert!(all.row.iter().chain(&all.col).all(|b| *b));
        let tie = deterministic_top_indices(&[1.0, 1.0, 1.0], &[], 1, 0).unwrap();
        assert_eq!(tie.row, vec![true, false, false]);
        assert!(deterministic_top_indices(&[1.0], &[1.0], 2, 1).is_err());
    }

    #[test]
    fn tiny_temperature_matches_deterministic() {
        let rows = [0.3, 0.9, 0.1, 0.5, 0.7];
        let cols = [2.0, 1.0, 3.0];
        let det = deterministic_top_indices(&rows, &cols, 3, 2).unwrap();
        for seed in 0..20 {
            let sto = stochastic_indices(&rows, &cols, 3, 2, 1e-6, seed).unwrap();
            assert_eq!((sto.row, sto.col), (det.row.clone(), det.col.clone()));
        }
        assert!(stochastic_indices(&rows, &cols, 1, 1, 0.0, 0).is_err());
        assert!(stochastic_indices(&rows, &cols, 1, 1, -1.0, 0).is_err());
        assert_eq!(
            stochastic_indices(&rows, &cols, 2, 1, 0.5, 7).unwrap(),
            stochastic_indices(&rows, &cols, 2, 1, 0.5, 7).unwrap()
        );
    }

    #[test]
    fn uniform_scores_pick_uniformly() {
        let n = 8;
        let draws = 10_000;
        let mut counts = vec![0usize; n];
        for seed in 0..draws {
            let m = stochastic_indices(&vec![1.0; n], &[], 1, 0, 1.0, seed).unwrap();
            counts[m.row.iter().position(|b| *b).unwrap()] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.5 * sigma, "{c}");
        }
    }

    #[test]
    fn flow_cases() {
        let a = random(3, 2, 1).map(f64::abs);
        assert_eq!(
            flow_reweigh_matrices(std::slice::from_ref(&a)).unwrap(),
            vec![a.clone()]
        );
        let zero_next = flow_reweigh_matrices(&[a.clone(), Matrix::zeros(4, 3)]).unwrap();
        assert_eq!(zero_next[0], a);
        assert!(flow_reweigh_matrices(&[a.clone(), Matrix::zeros(4, 2)]).is_err());
    }

    #[test]
    fn flow_two_layer_by_hand() {
        // layer 0: 2x2 with mean 1; layer 1: 1x2 column sums [2, 6] with mean 4
        let s0 = Matrix::from_rows(&[&[1.0, 1.0], &[0.5, 1.5]]).unwrap();
        let s1 = Matrix::from_rows(&[&[2.0, 6.0]]).unwrap();
        let out = flow_reweigh_matrices(&[s0, s1.clone()]).unwrap();
        // incoming scaled by 1/4 -> [0.5, 1.5]
        let expected = Matrix::from_rows(&[&[1.5, 1.5], &[2.0, 3.0]]).unwrap();
        assert!(out[0].max_abs_diff(&expected).unwrap() < 1e-15);
        assert_eq!(out[1], s1);
    }

    #[test]
    fn csv_layout() {
        let s = ImportanceScores::row_col(
            2,
            vec![0.5],
            vec![1.0, 0.0],
            Method::Svd,
            Provenance {
                dataset: "d".into(),
                seed: 4,
            },
        )
        .unwrap();
        let csv = scores_to_csv(&[s]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,kind,index,score,method,seed");
        assert_eq!(lines[1], "2,row,0,5e-1,svd,4");
        assert_eq!(lines.len(), 4);
    }

    proptest::proptest! {
        #[test]
        fn ranking_is_scale_invariant(scores in proptest::collection::vec(0.0f64..10.0, 1..20), c in 0.01f64..100.0, frac in 0.0f64..1.0) {
            let k = (frac * scores.len() as f64) as usize;
            let scaled: Vec<f64> = scores.iter().map(|v| v * c).collect();
            let a = deterministic_top_indices(&scores, &[], k, 0).unwrap();
            let b = deterministic_top_indices(&scaled, &[], k, 0).unwrap();
            proptest::prop_assert_eq!(a.row, b.row);
        }

        #[test]
        fn top_indices_match_sort_oracle(scores in proptest::collection::vec(0u8..5, 1..20), frac in 0.0f64..1.0) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let k = (frac * scores.len() as f64) as usize;
            let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..).collect();
            // stable sort by descending score keeps lower indices first among ties
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut oracle = vec![false; scores.len()];
            for (_, i) in &pairs[..k] {
                oracle[*i] = true;
            }
            proptest::prop_assert_eq!(deterministic_top_indices(&scores, &[], k, 0).unwrap().row, oracle);
        }
    }
}
