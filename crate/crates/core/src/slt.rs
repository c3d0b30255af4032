//! Width bounds for finding a masked random adapter that approximates a
//! target adapter, and an experiment that searches for such masks directly.
//!
//! The target is a rank-`n_T` adapter `B_T A_T`; the candidate is a wider
//! random adapter `B A` whose individual factor entries may be switched off.
//! Both have entries drawn from `U[-1, 1]`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Largest mask space the exhaustive search will enumerate.
pub const EXHAUSTIVE_LIMIT_BITS: usize = 20;

/// Ceiling that ignores floating-point noise: values within `1e-9`
/// (relative) of an integer are taken as that integer.
pub fn tolerant_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `log(1 / (1 - p))`, accurate for small `p`.
fn log_inv_complement(p: f64) -> f64 {
    -(-p).ln_1p()
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// `C N^(1+g) / log(1/(1-p_min))^(1+g) * log(1 / min(eps_min, delta))`.
pub fn rho(c: f64, n_t: f64, min_p: f64, gamma: f64, min_eps_l: f64, delta: f64) -> Result<f64> {
    if !(c > 0.0) || !(n_t > 0.0) || !(gamma >= 0.0) {
        return Err(Error::InvalidArgument("rho needs C > 0, N_T > 0 and gamma >= 0".into()));
    }
    open_unit("p_min", min_p)?;
    open_unit("eps_min", min_eps_l)?;
    open_unit("delta", delta)?;
    let e = 1.0 + gamma;
    Ok(c * n_t.powf(e) / log_inv_complement(min_p).powf(e) * (1.0 / min_eps_l.min(delta)).ln())
}

/// Per-layer tolerance. `later_norms` are the infinity norms of the target
/// weights of layers `l+1 ..= L-1`; an empty slice is the empty product.
pub fn epsilon_l(eps: f64, n_lora_last: f64, depth: usize, b_prev: f64, later_norms: &[f64]) -> Result<f64> {
    open_unit("epsilon", eps)?;
    if depth < 2 {
        return Err(Error::InvalidArgument("epsilon_l needs depth >= 2".into()));
    }
    if !(n_lora_last > 0.0) || !(b_prev >= 0.0) || !b_prev.is_finite() {
        return Err(Error::InvalidArgument(
            "epsilon_l needs n > 0 and a finite B >= 0".into(),
        ));
    }
    if later_norms.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("weight norms must be finite and >= 0".into()));
    }
    let l = depth as f64;
    let product: f64 = later_norms.iter().map(|w| w + eps / l).product();
    Ok(eps / (n_lora_last * l) / ((1.0 + b_prev) * (1.0 + eps / l) * product))
}

/// `sup_x ||x||_1` over the columns of a feature matrix.
pub fn sup_l1(features: &Matrix) -> f64 {
    (0..features.cols())
        .map(|c| features.col(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// The real-valued width bound before rounding up.
pub fn width_bound_value(n_t: f64, p_next: f64, eps_l: f64, delta: f64, rho: f64, c: f64) -> Result<f64> {
    open_unit("p_next", p_next)?;
    open_unit("delta", delta)?;
    if !(eps_l > 0.0) || !(rho > 0.0) || !(c > 0.0) || !(n_t > 0.0) {
        return Err(Error::InvalidArgument(
            "width bound needs positive eps_l, rho, C, n_T".into(),
        ));
    }
    let floor = eps_l.min(delta / rho);
    Ok(c * n_t / log_inv_complement(p_next) * (1.0 / floor).ln())
}

/// Minimum candidate width `ceil(C n_T / log(1/(1-p_next)) * log(1/min(eps_l, delta/rho)))`.
pub fn width_bound(n_t: usize, p_next: f64, eps_l: f64, delta: f64, rho: f64, c: f64) -> Result<u64> {
    let v = width_bound_value(n_t as f64, p_next, eps_l, delta, rho, c)?;
    Ok(tolerant_ceil(v).max(0.0) as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Search {
    Exhaustive,
    Greedy,
}

impl Search {
    pub fn as_str(self) -> &'static str {
        match self {
            Search::Exhaustive => "exhaustive",
            Search::Greedy => "greedy",
        }
    }
}

/// A two-factor adapter `B A` (m x w times w x n) without scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub b: Matrix,
    pub a: Matrix,
}

impl Factors {
    pub fn uniform(m: usize, width: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_fn(m, width, |_, _| rng.random_range(-1.0..=1.0));
        let a = Matrix::from_fn(width, n, |_, _| rng.random_range(-1.0..=1.0));
        Self { b, a }
    }

    pub fn width(&self) -> usize {
        self.b.cols()
    }

    fn bits(&self) -> usize {
        self.b.len() + self.a.len()
    }
}

/// Edge masks for both factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMask {
    pub b: Matrix,
    pub a: Matrix,
}

impl FactorMask {
    pub fn ones(f: &Factors) -> Self {
        Self {
            b: Matrix::filled(f.b.rows(), f.b.cols(), 1.0),
            a: Matrix::filled(f.a.rows(), f.a.cols(), 1.0),
        }
    }

    pub fn density(&self) -> f64 {
        (self.b.sum() + self.a.sum()) / (self.b.len() + self.a.len()) as f64
    }

    fn from_bits(f: &Factors, bits: u64) -> Self {
        let nb = f.b.len();
        let b = Matrix::from_fn(f.b.rows(), f.b.cols(), |r, c| {
            ((bits >> (r * f.b.cols() + c)) & 1) as f64
        });
        let a = Matrix::from_fn(f.a.rows(), f.a.cols(), |r, c| {
            ((bits >> (nb + r * f.a.cols() + c)) & 1) as f64
        });
        Self { b, a }
    }
}

/// `max_x ||T x - (B ⊙ U_B)(A ⊙ U_A) x||_2` over the columns of `samples`.
pub fn approximation_error(target: &Factors, wide: &Factors, mask: &FactorMask, samples: &Matrix) -> Result<f64> {
    let t = target.b.matmul(&target.a)?.matmul(samples)?;
    let w = wide
        .b
        .hadamard(&mask.b)?
        .matmul(&wide.a.hadamard(&mask.a)?)?
        .matmul(samples)?;
    Ok(max_column_norm(&t.sub(&w)?))
}

fn max_column_norm(e: &Matrix) -> f64 {
    (0..e.cols())
        .map(|c| e.col(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Approximation {
    pub error: f64,
    pub mask: FactorMask,
}

/// Best mask found for approximating `target` by a masked `wide`.
pub fn empirical_approximation(
    target: &Factors,
    wide: &Factors,
    samples: &Matrix,
    search: Search,
) -> Result<Approximation> {
    if target.b.rows() != wide.b.rows() || target.a.cols() != wide.a.cols() {
        return Err(Error::dim("empirical_approximation", "target and wide outputs differ"));
    }
    if samples.rows() != wide.a.cols() || samples.cols() == 0 {
        return Err(Error::dim(
            "empirical_approximation",
            "samples do not fit the input size",
        ));
    }
    match search {
        Search::Exhaustive => exhaustive(target, wide, samples),
        Search::Greedy => greedy(target, wide, samples),
    }
}

fn exhaustive(target: &Factors, wide: &Factors, samples: &Matrix) -> Result<Approximation> {
    let bits = wide.bits();
    if bits > EXHAUSTIVE_LIMIT_BITS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search over {bits} mask bits exceeds 2^{EXHAUSTIVE_LIMIT_BITS}"
        )));
    }
    let mut best: Option<Approximation> = None;
    for code in 0..(1u64 << bits) {
        let mask = FactorMask::from_bits(wide, code);
        let error = approximation_error(target, wide, &mask, samples)?;
        if best.as_ref().is_none_or(|b| error < b.error) {
            best = Some(Approximation { error, mask });
        }
    }
    Ok(best.expect("at least the empty mask is evaluated"))
}

/// Local search over single-bit flips.
///
/// Starts with every edge of `A` kept and every edge of `B` dropped, so the
/// output is zero but each `B` flip adds one scaled hidden unit. Each round
/// applies the flip with the lowest resulting error (lowest bit index on
/// ties) if it strictly improves, for at most `10 * bits` rounds.
fn greedy(target: &Factors, wide: &Factors, samples: &Matrix) -> Result<Approximation> {
    let (m, w) = wide.b.shape();
    let n = wide.a.cols();
    let s = samples.cols();
    let mut mask = FactorMask {
        b: Matrix::zeros(m, w),
        a: Matrix::filled(w, n, 1.0),
    };
    // hidden = (A ⊙ U_A) X, residual = T X - (B ⊙ U_B) hidden
    let mut hidden = wide.a.matmul(samples)?;
    let mut residual = target.b.matmul(&target.a)?.matmul(samples)?;
    let mut sq: Vec<f64> = (0..s).map(|c| residual.col(c).iter().map(|v| v * v).sum()).collect();
    let mut error = sq.iter().cloned().fold(0.0, f64::max).sqrt();
    let bits = wide.bits();
    let mut trial = vec![0.0; s];

    for _ in 0..10 * bits {
        let mut best: Option<(f64, usize)> = None;
        for bit in 0..bits {
            if bit < m * w {
                let (i, k) = (bit / w, bit % w);
                // toggling U_B[i,k] shifts residual row i by -/+ B[i,k] hidden[k,:]
                let sign = if mask.b.get(i, k) == 0.0 { -1.0 } else { 1.0 };
                let coef = sign * wide.b.get(i, k);
                for c in 0..s {
                    let old = residual.get(i, c);
                    let new = old + coef * hidden.get(k, c);
                    trial[c] = sq[c] - old * old + new * new;
                }
            } else {
                let idx = bit - m * w;
                let (k, j) = (idx / n, idx % n);
                // toggling U_A[k,j] shifts hidden[k,:] by +/- A[k,j] X[j,:]
                let sign = if mask.a.get(k, j) == 0.0 { 1.0 } else { -1.0 };
                let coef = sign * wide.a.get(k, j);
                for c in 0..s {
                    let dh = coef * samples.get(j, c);
                    let mut acc = 0.0;
                    for i in 0..m {
                        let v = residual.get(i, c) - wide.b.get(i, k) * mask.b.get(i, k) * dh;
                        acc += v * v;
                    }
                    trial[c] = acc;
                }
            }
            let e = trial.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt();
            if best.is_none_or(|(be, _)| e < be) {
                best = Some((e, bit));
            }
        }
        let Some((e, bit)) = best else { break };
        if !(e < error) {
            break;
        }
        if bit < m * w {
            let (i, k) = (bit / w, bit % w);
            let on = mask.b.get(i, k) == 0.0;
            mask.b.set(i, k, if on { 1.0 } else { 0.0 });
            let coef = if on { -1.0 } else { 1.0 } * wide.b.get(i, k);
            for c in 0..s {
                residual.set(i, c, residual.get(i, c) + coef * hidden.get(k, c));
            }
        } else {
            let idx = bit - m * w;
            let (k, j) = (idx / n, idx % n);
            let on = mask.a.get(k, j) == 0.0;
            mask.a.set(k, j, if on { 1.0 } else { 0.0 });
            let coef = if on { 1.0 } else { -1.0 } * wide.a.get(k, j);
            for c in 0..s {
                let dh = coef * samples.get(j, c);
                hidden.set(k, c, hidden.get(k, c) + dh);
                for i in 0..m {
                    let v = residual.get(i, c) - wide.b.get(i, k) * mask.b.get(i, k) * dh;
                    residual.set(i, c, v);
                }
            }
        }
        for (c, slot) in sq.iter_mut().enumerate() {
            *slot = residual.col(c).iter().map(|v| v * v).sum();
        }
        error = sq.iter().cloned().fold(0.0, f64::max).sqrt();
    }
    // report the exact error of the final mask rather than the running value
    let error = approximation_error(target, wide, &mask, samples)?;
    Ok(Approximation { error, mask })
}

/// Settings for the bound calculators and the width experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SltConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    pub c: f64,
    /// Per-layer sparsity of the candidate network.
    pub sparsity: Vec<f64>,
    /// Per-layer widths of the target network.
    pub target_widths: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub samples: usize,
    pub widths: Vec<usize>,
    pub trials: usize,
    pub search: Search,
    pub seed: u64,
}

impl Default for SltConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 0.1,
            gamma: 0.0,
            c: 1.0,
            sparsity: vec![0.5, 0.5],
            target_widths: vec![2, 2],
            input_dim: 3,
            output_dim: 3,
            samples: 16,
            widths: vec![4, 8, 16, 32],
            trials: 50,
            search: Search::Greedy,
            seed: 0,
        }
    }
}

impl SltConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("epsilon and delta must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0) || !(self.c > 0.0) {
            return bad("gamma must be >= 0 and c > 0");
        }
        if self.sparsity.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || self.sparsity.is_empty() {
            return bad("sparsity rates must lie in (0, 1)");
        }
        if self.target_widths.is_empty() || self.target_widths.contains(&0) {
            return bad("target widths must be positive");
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.samples == 0 || self.widths.contains(&0) {
            return bad("dimensions, samples and widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub width: usize,
    pub trial: usize,
    pub search: Search,
    pub best_error: f64,
    pub mask_density: f64,
    pub seed: u64,
}

/// Seed of the target drawn for `trial`; shared across widths.
pub fn target_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64)
}

/// Seed of the wide candidate for (`width`, `trial`).
pub fn wide_seed(seed: u64, width: usize, trial: usize) -> u64 {
    target_seed(seed, trial) ^ ((width as u64) << 32) ^ 0x5a5a_0000_0000_0001
}

/// Runs every (width, trial) pair. Trial `t` uses the same target and sample
/// set for every width.
pub fn width_experiment(cfg: &SltConfig) -> Result<Vec<TrialRow>> {
    cfg.validate()?;
    let rank = cfg.target_widths[0];
    let mut rows = Vec::with_capacity(cfg.widths.len() * cfg.trials);
    for &width in &cfg.widths {
        for trial in 0..cfg.trials {
            let ts = target_seed(cfg.seed, trial);
            let target = Factors::uniform(cfg.output_dim, rank, cfg.input_dim, ts);
            let mut rng = ChaCha8Rng::seed_from_u64(ts ^ 0xd47a);
            let samples = Matrix::from_fn(cfg.input_dim, cfg.samples, |_, _| rng.random_range(-1.0..=1.0));
            let ws = wide_seed(cfg.seed, width, trial);
            let wide = Factors::uniform(cfg.output_dim, width, cfg.input_dim, ws);
            let best = empirical_approximation(&target, &wide, &samples, cfg.search)?;
            rows.push(TrialRow {
                width,
                trial,
                search: cfg.search,
                best_error: best.error,
                mask_density: best.mask.density(),
                seed: ws,
            });
        }
    }
    Ok(rows)
}

/// Bounds for the config's target network: a linear chain
/// `input_dim -> target_widths...` drawn like trial 0's target, evaluated on
/// trial 0's samples, with the widest candidate as the last LoRA width.
pub fn config_bounds(cfg: &SltConfig) -> Result<BoundSummary> {
    cfg.validate()?;
    let ts = target_seed(cfg.seed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(ts ^ 0xd47a);
    let samples = Matrix::from_fn(cfg.input_dim, cfg.samples, |_, _| rng.random_range(-1.0..=1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(ts ^ 0xb0);
    let mut fan_in = cfg.input_dim;
    let mut features = samples;
    let (mut norms, mut bounds) = (Vec::new(), Vec::new());
    for &w in &cfg.target_widths {
        let weight = Matrix::from_fn(w, fan_in, |_, _| rng.random_range(-1.0..=1.0));
        bounds.push(sup_l1(&features));
        norms.push(weight.inf_norm());
        features = weight.matmul(&features)?;
        fan_in = w;
    }
    let widest = cfg.widths.iter().copied().max().unwrap_or(1) as f64;
    bound_summary(cfg, &norms, &bounds, widest)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median best error per width, in the order widths first appear.
pub fn median_by_width(rows: &[TrialRow]) -> Vec<(usize, f64)> {
    let mut widths: Vec<usize> = Vec::new();
    for r in rows {
        if !widths.contains(&r.width) {
            widths.push(r.width);
        }
    }
    widths
        .into_iter()
        .map(|w| {
            let mut errs: Vec<f64> = rows.iter().filter(|r| r.width == w).map(|r| r.best_error).collect();
            (w, median(&mut errs))
        })
        .collect()
}

pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from("width,trial,search,best_error,mask_density,seed\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:?},{:?},{}",
            r.width,
            r.trial,
            r.search.as_str(),
            r.best_error,
            r.mask_density,
            r.seed
        )
        .unwrap();
    }
    out
}

/// Bound calculators evaluated for a config: per-layer `eps_l`, `rho` and the
/// width each candidate layer needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub epsilon_l: Vec<f64>,
    pub rho: f64,
    pub width_bounds: Vec<u64>,
}

/// Evaluates the bounds for a target network given its later-layer weight
/// norms and input feature bounds. Layer `l` uses `norms[l+1..depth-1]` and
/// `feature_bounds[l]` as the sup-norm of its input features.
pub fn bound_summary(cfg: &SltConfig, norms: &[f64], feature_bounds: &[f64], n_lora_last: f64) -> Result<BoundSummary> {
    cfg.validate()?;
    let depth = cfg.target_widths.len();
    if depth < 2 || norms.len() != depth || feature_bounds.len() != depth || cfg.sparsity.len() != depth {
        return Err(Error::Config(
            "bounds need depth >= 2 and one norm, feature bound and sparsity per layer".into(),
        ));
    }
    let eps: Vec<f64> = (0..depth)
        .map(|l| {
            let later = if l + 1 < depth - 1 {
                &norms[l + 1..depth - 1]
            } else {
                &[][..]
            };
            epsilon_l(cfg.epsilon, n_lora_last, depth, feature_bounds[l], later)
        })
        .collect::<Result<_>>()?;
    let n_t: usize =
        cfg.target_widths.windows(2).map(|w| w[0] * w[1]).sum::<usize>() + cfg.input_dim * cfg.target_widths[0];
    let min_p = cfg.sparsity.iter().cloned().fold(1.0, f64::min);
    let min_eps = eps.iter().cloned().fold(1.0, f64::min);
    let r = rho(cfg.c, n_t as f64, min_p, cfg.gamma, min_eps, cfg.delta)?;
    let widths = (0..depth)
        .map(|l| {
            let p_next = cfg.sparsity[(l + 1).min(depth - 1)];
            width_bound(cfg.target_widths[l], p_next, eps[l], cfg.delta, r, cfg.c)
        })
        .collect::<Result<_>>()?;
    Ok(BoundSummary {
        epsilon_l: eps,
        rho: r,
        width_bounds: widths,
    })
}
