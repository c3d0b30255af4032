//! Oracles shared by the integration tests and the acceptance runner. The
//! oracles themselves never call the library's linear algebra or derivation.

#![allow(dead_code)]

use palora::adapters::{init_adapter, sample_mask_pair, AdapterSet, LayerAdapter};
use palora::linalg::truncated_svd;
use palora::model::{Activation, Architecture, BaseModel, Dataset, FrozenLayer, TaskKind, TaskSpec};
use palora::slt::{epsilon_l, rho, width_bound, width_bound_value};
use palora::tensor::{NodeId, Reduction, Tape};
use palora::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub const FD_STEP: f64 = 1e-6;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Relative error with a floor so that two near-zero gradients compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds a scalar from leaf values on a fresh tape.
pub type Builder<'a> = dyn Fn(&mut Tape, &[NodeId]) -> NodeId + 'a;

/// Largest relative error between reverse-mode gradients and central
/// differences over every entry of every input.
pub fn max_gradient_error(inputs: &[Matrix], build: &Builder<'_>) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward");
    let eval = |xs: &[Matrix]| {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|m| t.leaf(m.clone())).collect();
        let out = build(&mut t, &ids);
        t.value(out).get(0, 0)
    };
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let g = grads.wrt(*id);
        for e in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[e], fd));
        }
    }
    worst
}

/// Pushes entries away from the ReLU kink so that the finite difference
/// stays on one linear piece.
pub fn off_kink(m: Matrix) -> Matrix {
    m.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// A random scalar projection `sum(out ⊙ R)` that exercises every output entry.
pub fn project(tape: &mut Tape, out: NodeId, rng_seed: u64) -> NodeId {
    let (r, c) = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let weights = tape.constant(random_matrix(r, c, &mut rng));
    let h = tape.hadamard(out, weights).unwrap();
    tape.sum(h).unwrap()
}

/// One named gradient check per differentiable operation, each over
/// `points` random inputs. Returns (name, worst relative error).
pub fn gradient_suite(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    type Case = (
        &'static str,
        fn(&mut ChaCha8Rng) -> (Vec<Matrix>, Box<Builder<'static>>),
    );
    let cases: Vec<Case> = vec![
        ("matmul", |rng| {
            (
                vec![random_matrix(3, 4, rng), random_matrix(4, 2, rng)],
                Box::new(|t, x| {
                    let y = t.matmul(x[0], x[1]).unwrap();
                    project(t, y, 1)
                }),
            )
        }),
        ("add", |rng| {
            (
                vec![random_matrix(3, 2, rng), random_matrix(3, 2, rng)],
                Box::new(|t, x| {
                    let y = t.add(x[0], x[1]).unwrap();
                    project(t, y, 2)
                }),
            )
        }),
        ("sub", |rng| {
            (
                vec![random_matrix(2, 3, rng), random_matrix(2, 3, rng)],
                Box::new(|t, x| {
                    let y = t.sub(x[0], x[1]).unwrap();
                    project(t, y, 3)
                }),
            )
        }),
        ("hadamard", |rng| {
            (
                vec![random_matrix(3, 3, rng), random_matrix(3, 3, rng)],
                Box::new(|t, x| {
                    let y = t.hadamard(x[0], x[1]).unwrap();
                    project(t, y, 4)
                }),
            )
        }),
        ("add_bias", |rng| {
            (
                vec![random_matrix(3, 4, rng), random_matrix(3, 1, rng)],
                Box::new(|t, x| {
                    let y = t.add_bias(x[0], x[1]).unwrap();
                    project(t, y, 5)
                }),
            )
        }),
        ("scale", |rng| {
            (
                vec![random_matrix(2, 4, rng)],
                Box::new(|t, x| {
                    let y = t.scale(x[0], -1.7).unwrap();
                    project(t, y, 6)
                }),
            )
        }),
        ("relu", |rng| {
            (
                vec![off_kink(random_matrix(4, 3, rng))],
                Box::new(|t, x| {
                    let y = t.relu(x[0]).unwrap();
                    project(t, y, 7)
                }),
            )
        }),
        ("gelu", |rng| {
            (
                vec![random_matrix(4, 3, rng).scale(3.0)],
                Box::new(|t, x| {
                    let y = t.gelu(x[0]).unwrap();
                    project(t, y, 8)
                }),
            )
        }),
        ("square", |rng| {
            (
                vec![random_matrix(3, 3, rng)],
                Box::new(|t, x| {
                    let y = t.square(x[0]).unwrap();
                    project(t, y, 9)
                }),
            )
        }),
        ("sum", |rng| {
            (
                vec![random_matrix(3, 5, rng)],
                Box::new(|t, x| {
                    let h = t.square(x[0]).unwrap();
                    t.sum(h).unwrap()
                }),
            )
        }),
        ("cross_entropy_mean", |rng| {
            (
                vec![random_matrix(4, 5, rng).scale(2.0)],
                Box::new(|t, x| {
                    t.softmax_cross_entropy(x[0], &[0, 3, 1, 2, 3], Reduction::Mean)
                        .unwrap()
                }),
            )
        }),
        ("cross_entropy_sum", |rng| {
            (
                vec![random_matrix(3, 4, rng).scale(2.0)],
                Box::new(|t, x| t.softmax_cross_entropy(x[0], &[2, 0, 1, 1], Reduction::Sum).unwrap()),
            )
        }),
        ("masked_lora_layer", |rng| {
            // Frozen relu layer plus a masked adapter: gradients w.r.t. B and A.
            let w = random_matrix(4, 3, rng);
            let bias = random_matrix(4, 1, rng);
            let input = random_matrix(3, 5, rng);
            let mask = sample_mask_pair(4, 3, 0.7, 0.7, rng.random()).unwrap();
            let mut lora = init_adapter(4, 3, 2, 4.0, rng.random()).unwrap();
            lora.b = random_matrix(4, 2, rng);
            let adapter = LayerAdapter::with_mask(lora.clone(), mask).unwrap();
            (
                vec![lora.b, lora.a],
                Box::new(move |t, x| {
                    let wn = t.constant(w.clone());
                    let bn = t.constant(bias.clone());
                    let xn = t.constant(input.clone());
                    let base = t.matmul(wn, xn).unwrap();
                    let delta = adapter.contribution_on_tape(t, x[0], x[1], xn).unwrap();
                    let pre = t.add(base, delta).unwrap();
                    let pre = t.add_bias(pre, bn).unwrap();
                    let out = t.relu(pre).unwrap();
                    project(t, out, 10)
                }),
            )
        }),
    ];
    for (name, make) in cases {
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let (inputs, build) = make(&mut rng);
            worst = worst.max(max_gradient_error(&inputs, &*build));
        }
        results.push((name, worst));
    }
    results
}

/// Full SVD by one-sided Jacobi on the rows of `w` (Rutishauser rotations,
/// sweeps until every row pair is orthogonal to 1e-15). Returns the
/// singular values in descending order.
pub fn oracle_singular_values(w: &Matrix) -> Vec<f64> {
    let (m, n) = w.shape();
    // Work on whichever orientation has fewer vectors to orthogonalize.
    let mut vecs: Vec<Vec<f64>> = if m <= n {
        (0..m).map(|r| w.row(r).to_vec()).collect()
    } else {
        (0..n).map(|c| w.col(c)).collect()
    };
    let k = vecs.len();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha: f64 = vecs[p].iter().map(|v| v * v).sum();
                let beta: f64 = vecs[q].iter().map(|v| v * v).sum();
                let gamma: f64 = vecs[p].iter().zip(&vecs[q]).map(|(a, b)| a * b).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..vecs[p].len() {
                    let (a, b) = (vecs[p][i], vecs[q][i]);
                    vecs[p][i] = c * a - s * b;
                    vecs[q][i] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = vecs
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// A random matrix up to 16 x 16; every fifth one is rank deficient.
pub fn svd_case(i: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = rng.random_range(1..=16);
    let n = rng.random_range(1..=16);
    let w = random_matrix(m, n, rng);
    if i % 5 == 4 && m.min(n) > 2 {
        let r = rng.random_range(1..m.min(n));
        let left = random_matrix(m, r, rng);
        let right = random_matrix(r, n, rng);
        return left.matmul(&right).unwrap();
    }
    w
}

/// Two-layer network for the minimality check. Layer 0 is the rank-1
/// `u v^T` with `u = v = (1, 1, 0, 0)`; layer 1 sums the first two hidden
/// units into logit 0 and the last two into logit 1. Class 0 holds inputs
/// with `x0 + x1 > 1.5`, so both supported rows and columns are needed.
pub fn constructed_two_layer() -> (BaseModel, Dataset) {
    let w0 = Matrix::from_fn(4, 4, |r, c| if r < 2 && c < 2 { 1.0 } else { 0.0 });
    let w1 = Matrix::from_rows(&[&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]]).unwrap();
    let layers = vec![
        FrozenLayer {
            weight: w0,
            bias: Matrix::zeros(4, 1),
            activation: Activation::Identity,
        },
        FrozenLayer {
            weight: w1,
            bias: Matrix::from_rows(&[&[-3.0], &[0.0]]).unwrap(),
            activation: Activation::Identity,
        },
    ];
    let task = TaskSpec {
        kind: TaskKind::GaussianMixture,
        classes: 2,
        input_dim: 4,
        noise: 0.0,
        seed: 0,
    };
    let model = BaseModel::new(layers, task, 0).unwrap();
    let inputs = Matrix::from_rows(&[
        &[1.0, 0.9, 1.0, 0.1, 0.3, 0.0],
        &[1.0, 0.9, 0.9, 0.1, 0.2, 0.1],
        &[0.2, 0.7, 0.5, 0.9, 0.4, 0.8],
        &[0.6, 0.1, 0.3, 0.2, 1.0, 0.5],
    ])
    .unwrap();
    let data = Dataset::new(inputs, vec![0, 0, 0, 1, 1, 1], 2).unwrap();
    (model, data)
}

/// Order indices are dropped in: ascending score, higher index first on ties.
pub fn oracle_drop_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    idx
}

/// Accuracy with the first `dr` rows and `dc` columns of the drop orders
/// zeroed in `layer`, built by hand.
pub fn oracle_masked_accuracy(model: &BaseModel, layer: usize, data: &Dataset, rows: &[usize], cols: &[usize]) -> f64 {
    let mut w = model.layers()[layer].weight.clone();
    for &r in rows {
        for c in 0..w.cols() {
            w.set(r, c, 0.0);
        }
    }
    for &c in cols {
        for r in 0..w.rows() {
            w.set(r, c, 0.0);
        }
    }
    model.with_layer_weight(layer, w).unwrap().accuracy(None, data).unwrap()
}

/// Exhaustive step-1 sweep: evaluates every (rows dropped, cols dropped)
/// pair, then walks the alternating schedule (rows first, one index kept per
/// dimension) to the last passing state. Returns (retained rows, retained
/// cols, the grid).
pub fn oracle_derivation(
    model: &BaseModel,
    layer: usize,
    data: &Dataset,
    row_scores: &[f64],
    col_scores: &[f64],
    tau: f64,
) -> (usize, usize, Vec<Vec<f64>>) {
    let (m, n) = model.layers()[layer].weight.shape();
    let ro = oracle_drop_order(row_scores);
    let co = oracle_drop_order(col_scores);
    let grid: Vec<Vec<f64>> = (0..m)
        .map(|dr| {
            (0..n)
                .map(|dc| oracle_masked_accuracy(model, layer, data, &ro[..dr], &co[..dc]))
                .collect()
        })
        .collect();
    let threshold = tau * model.accuracy(None, data).unwrap();
    if grid[0][0] < threshold {
        return (m, n, grid);
    }
    let (mut dr, mut dc, mut rows_turn) = (0, 0, true);
    loop {
        let can_r = dr + 1 < m;
        let can_c = dc + 1 < n;
        let (nr, nc) = match (rows_turn, can_r, can_c) {
            (true, true, _) | (false, true, false) => (dr + 1, dc),
            (_, _, true) => (dr, dc + 1),
            _ => break,
        };
        rows_turn = nr == dr;
        if grid[nr][nc] < threshold {
            break;
        }
        dr = nr;
        dc = nc;
    }
    (m - dr, n - dc, grid)
}

/// Worst singular-value gap and worst Eckart-Young mismatch over `count`
/// random matrices.
pub fn svd_agreement(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sv_gap, mut tail_gap): (f64, f64) = (0.0, 0.0);
    for i in 0..count {
        let w = svd_case(i, &mut rng);
        let oracle = oracle_singular_values(&w);
        let k = rng.random_range(1..=oracle.len());
        let svd = truncated_svd(&w, k).unwrap();
        for (a, b) in svd.singular_values.iter().zip(&oracle) {
            sv_gap = sv_gap.max((a - b).abs());
        }
        let residual = w.sub(&svd.reconstruct()).unwrap().frobenius_norm();
        let tail = oracle[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let scale = tail.max(1e-6 * w.frobenius_norm()).max(f64::MIN_POSITIVE);
        tail_gap = tail_gap.max((residual - tail).abs() / scale);
    }
    (sv_gap, tail_gap)
}

const BOUND_FIXTURES: &str = include_str!("../fixtures/bounds.json");

fn num(v: &Value) -> f64 {
    match v {
        Value::String(s) => s.parse().unwrap(),
        other => other.as_f64().unwrap(),
    }
}

/// Worst relative error per calculator and the number of ceiling mismatches.
pub fn fixture_errors() -> (f64, f64, f64, usize, usize) {
    let root: Value = serde_json::from_str(BOUND_FIXTURES).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let mut worst_rho: f64 = 0.0;
    for c in root["rho"].as_array().unwrap() {
        let got = rho(
            num(&c["c"]),
            num(&c["n_t"]),
            num(&c["min_p"]),
            num(&c["gamma"]),
            num(&c["min_eps"]),
            num(&c["delta"]),
        )
        .unwrap();
        worst_rho = worst_rho.max(rel(got, num(&c["expected"])));
    }
    let mut worst_eps: f64 = 0.0;
    for c in root["epsilon_l"].as_array().unwrap() {
        let norms: Vec<f64> = c["norms"].as_array().unwrap().iter().map(num).collect();
        let got = epsilon_l(
            num(&c["eps"]),
            num(&c["n"]),
            c["depth"].as_u64().unwrap() as usize,
            num(&c["b_prev"]),
            &norms,
        )
        .unwrap();
        worst_eps = worst_eps.max(rel(got, num(&c["expected"])));
    }
    let mut worst_width: f64 = 0.0;
    let mut mismatches = 0;
    let cases = root["width_bound"].as_array().unwrap();
    for c in cases {
        let n_t = c["n_t"].as_u64().unwrap() as usize;
        let args = (
            num(&c["p_next"]),
            num(&c["eps_l"]),
            num(&c["delta"]),
            num(&c["rho"]),
            num(&c["c"]),
        );
        let v = width_bound_value(n_t as f64, args.0, args.1, args.2, args.3, args.4).unwrap();
        worst_width = worst_width.max(rel(v, num(&c["value"])));
        if width_bound(n_t, args.0, args.1, args.2, args.3, args.4).unwrap() != c["expected"].as_u64().unwrap() {
            mismatches += 1;
        }
    }
    let total = root["rho"].as_array().unwrap().len() + root["epsilon_l"].as_array().unwrap().len() + cases.len();
    (worst_rho, worst_eps, worst_width, mismatches, total)
}

/// Cross-entropy through a GELU network with dense adapters, differentiated
/// with respect to every adapter factor.
pub fn model_gradient_error() -> f64 {
    let task = TaskSpec {
        kind: TaskKind::GaussianMixture,
        classes: 3,
        input_dim: 4,
        noise: 0.5,
        seed: 9,
    };
    let arch = Architecture {
        hidden: vec![5],
        activation: Activation::Gelu,
    };
    let model = BaseModel::init(&task, &arch, 4).unwrap();
    let data = task.sample(3, 1).unwrap();
    let mut set = AdapterSet::dense(&model, 2, 4.0, 3).unwrap();
    // Non-zero B so gradients reach A as well.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for slot in set.layers.iter_mut().flatten() {
        let (m, d) = slot.lora.b.shape();
        slot.lora.b = random_matrix(m, d, &mut rng);
    }
    let factors: Vec<palora::Matrix> = set
        .layers
        .iter()
        .flatten()
        .flat_map(|a| [a.lora.b.clone(), a.lora.a.clone()])
        .collect();
    max_gradient_error(&factors, &|t, ids| {
        let params = model.place_on_tape(t, |_| false);
        let x = t.constant(data.inputs.clone());
        let logits = model
            .forward_tape(t, &params, x, |t, l, h| {
                let a = set.layers[l].as_ref().unwrap();
                a.contribution_on_tape(t, ids[2 * l], ids[2 * l + 1], h).map(Some)
            })
            .unwrap();
        t.softmax_cross_entropy(logits, &data.labels, Reduction::Mean).unwrap()
    })
}
