//! Truncated SVD by one-sided (Hestenes) Jacobi and leverage scores.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;
/// A column pair is considered orthogonal once |<a,b>| <= TOL * |a| |b|.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
/// Spectral energy used to pick `k` when the caller does not fix it.
pub const DEFAULT_ENERGY: f64 = 0.90;

/// Top-`k` singular triplets of a matrix `W ≈ P diag(S) Q`.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    /// m x k, orthonormal columns.
    pub left: Matrix,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// k x n, orthonormal rows.
    pub right: Matrix,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.left.rows(), self.rank(), |r, c| {
            self.left.get(r, c) * self.singular_values[c]
        });
        scaled.matmul(&self.right).expect("factor shapes agree by construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeverageScores {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

/// Full thin SVD: returns all `min(m, n)` triplets.
pub fn svd(w: &Matrix) -> Result<TruncatedSvd> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if m >= n {
        let (u, s, v) = jacobi_tall(w)?;
        Ok(finish(u, s, v))
    } else {
        let (v, s, u) = jacobi_tall(&w.transpose())?;
        Ok(finish(u, s, v))
    }
}

/// Top-`k` singular triplets, `1 <= k <= min(m, n)`.
pub fn truncated_svd(w: &Matrix, k: usize) -> Result<TruncatedSvd> {
    let max_k = w.rows().min(w.cols());
    if k == 0 || k > max_k {
        return Err(Error::InvalidArgument(format!("rank k={k} outside 1..={max_k}")));
    }
    let full = svd(w)?;
    let left = Matrix::from_fn(full.left.rows(), k, |r, c| full.left.get(r, c));
    let right = Matrix::from_fn(k, full.right.cols(), |r, c| full.right.get(r, c));
    Ok(TruncatedSvd {
        left,
        singular_values: full.singular_values[..k].to_vec(),
        right,
    })
}

/// Row scores are squared row norms of the left factor; column scores the
/// squared column norms of the right factor.
pub fn leverage_scores(svd: &TruncatedSvd) -> LeverageScores {
    let rows = (0..svd.left.rows())
        .map(|r| svd.left.row(r).iter().map(|v| v * v).sum::<f64>())
        .collect();
    let mut cols = vec![0.0; svd.right.cols()];
    for r in 0..svd.right.rows() {
        for (c, v) in svd.right.row(r).iter().enumerate() {
            cols[c] += v * v;
        }
    }
    LeverageScores { rows, cols }
}

/// Smallest `k` whose leading singular values carry `energy` of the squared mass.
pub fn choose_rank_k(singular_values: &[f64], energy: f64) -> Result<usize> {
    if singular_values.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy fraction {energy} outside (0, 1]"
        )));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let target = energy * total;
    let mut cumulative = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        cumulative += s * s;
        if cumulative >= target {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.len())
}

type Columns = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Orthogonalizes the columns of a tall matrix (m >= n). Returns
/// (left vectors, singular values, right vectors), each as columns, unsorted.
fn jacobi_tall(w: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (m, n) = w.shape();
    let mut g: Columns = (0..n).map(|c| w.col(c)).collect();
    let mut v: Columns = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= ORTHOGONALITY_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let sigma: Vec<f64> = g.iter().map(|col| dot(col, col).sqrt()).collect();
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let negligible = sigma_max * f64::EPSILON * (m.max(n) as f64);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut u: Columns = Vec::with_capacity(n);
    let mut pending = Vec::new();
    let mut s_sorted = Vec::with_capacity(n);
    let mut v_sorted = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        s_sorted.push(sigma[j]);
        v_sorted.push(v[j].clone());
        if sigma[j] > negligible && sigma[j] > 0.0 {
            u.push(g[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            u.push(vec![0.0; m]);
            pending.push(slot);
        }
    }
    complete_basis(&mut u, &pending, m);
    Ok((u, s_sorted, v_sorted))
}

/// Fills the listed slots with unit vectors orthogonal to all others.
fn complete_basis(u: &mut Columns, pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in pending {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, other) in u.iter().enumerate() {
                    if j == slot || (pending.contains(&j) && dot(other, other) == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                u[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Applies the sign convention (largest-magnitude left entry positive) and
/// packs columns into matrices.
fn finish(mut u: Columns, s: Vec<f64>, mut v: Columns) -> TruncatedSvd {
    for (uj, vj) in u.iter_mut().zip(v.iter_mut()) {
        let mut best = 0;
        for (i, x) in uj.iter().enumerate() {
            if x.abs() > uj[best].abs() {
                best = i;
            }
        }
        if uj[best] < 0.0 {
            uj.iter_mut().for_each(|x| *x = -*x);
            vj.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let m = u.first().map_or(0, |c| c.len());
    let n = v.first().map_or(0, |c| c.len());
    let k = s.len();
    TruncatedSvd {
        left: Matrix::from_fn(m, k, |r, c| u[c][r]),
        singular_values: s,
        right: Matrix::from_fn(k, n, |r, c| v[r][c]),
    }
}
