//! Shared oracles and instance generators for integration tests.
#![allow(dead_code)]

use fedrane::data::derived_rng;
use fedrane::lra::{self, LraConfig};
use fedrane::model::{Architecture, FlatParams, MLPParams};
use fedrane::numeric::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Solves `A p = 1/p` by damped Newton on `F(p) = A p − 1/p` with Jacobian
/// `A + diag(1/p²)`, halving the step until `p` stays positive and `‖F‖`
/// shrinks. Linear systems use Gaussian elimination, independent of the
/// library's solvers.
pub fn newton_bargain(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let residual = |p: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).map(|j| a[i][j] * p[j]).sum::<f64>() - 1.0 / p[i])
            .collect()
    };
    let size = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut p: Vec<f64> = (0..n).map(|i| 1.0 / a[i][i].sqrt()).collect();
    let mut f = residual(&p);
    for _ in 0..200 {
        if size(&f) < 1e-15 {
            break;
        }
        let mut jac: Vec<Vec<f64>> = a.to_vec();
        for i in 0..n {
            jac[i][i] += 1.0 / (p[i] * p[i]);
        }
        let step = gauss_solve(jac, f.clone());
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = p.iter().zip(&step).map(|(x, s)| x - t * s).collect();
            if trial.iter().all(|&x| x > 0.0) {
                let ft = residual(&trial);
                if size(&ft) < size(&f) {
                    p = trial;
                    f = ft;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    p
}

pub fn gauss_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / m[i][i];
    }
    x
}

/// Dot products of every column pair, by double loop.
pub fn gram_by_loops(g: &Matrix) -> Vec<Vec<f64>> {
    let k = g.cols();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (0..g.rows()).map(|r| g.get(r, i) * g.get(r, j)).sum())
                .collect()
        })
        .collect()
}

pub fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while out.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &out {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// `d × k` matrix `U·diag(σ)·Vᵀ` with `cond(GᵀG) = (σ_max/σ_min)² ≤ max_cond`
/// and overall scale drawn log-uniformly from `[0.5, 2]`.
pub fn conditioned_deviations(rng: &mut impl Rng, d: usize, k: usize, max_cond: f64) -> Matrix {
    let u = orthonormal_columns(rng, d, k);
    let v = orthonormal_columns(rng, k, k);
    let scale = 2f64.powf(rng.random_range(-1.0..1.0));
    let sigma: Vec<f64> = (0..k)
        .map(|i| {
            let e = if i == 0 { 0.0 } else if i == 1 { 1.0 } else { rng.random_range(0.0..1.0) };
            scale * max_cond.powf(0.5 * e)
        })
        .collect();
    let mut g = Matrix::zeros(d, k);
    for r in 0..d {
        for c in 0..k {
            let x: f64 = (0..k).map(|i| u[i][r] * sigma[i] * v[i][c]).sum();
            g.set(r, c, x);
        }
    }
    g
}

/// `Tr (M)^(1/2)` of a symmetric positive-definite `M` by Denman–Beavers
/// iteration, which needs only inverses and no eigendecomposition.
pub fn trace_sqrt(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut y = m.clone();
    let mut z = Matrix::identity(n);
    for _ in 0..100 {
        let yi = inverse_by_gauss(&y);
        let zi = inverse_by_gauss(&z);
        let ny = y.add(&zi).unwrap().scale(0.5);
        let nz = z.add(&yi).unwrap().scale(0.5);
        let change = ny.sub(&y).unwrap().frobenius_norm();
        y = ny;
        z = nz;
        if change <= 1e-14 * y.frobenius_norm() {
            break;
        }
    }
    y.trace()
}

fn inverse_by_gauss(m: &Matrix) -> Matrix {
    let n = m.rows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (i, v) in gauss_solve(rows.clone(), e).into_iter().enumerate() {
            inv.set(i, j, v);
        }
    }
    inv
}

/// `½‖P − PB‖²_F + 2λ Tr (BBᵀ + εI)^(1/2)`, evaluated with loops and
/// [`trace_sqrt`].
pub fn slim_objective_oracle(p: &Matrix, b: &Matrix, lambda: f64, eps: f64) -> f64 {
    let n = p.rows();
    let mut fit = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pb: f64 = (0..n).map(|k| p.get(i, k) * b.get(k, j)).sum();
            fit += (p.get(i, j) - pb).powi(2);
        }
    }
    let mut bbt = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..n).map(|k| b.get(i, k) * b.get(j, k)).sum();
            bbt.set(i, j, v + if i == j { eps } else { 0.0 });
        }
    }
    0.5 * fit + 2.0 * lambda * trace_sqrt(&bbt)
}

/// Worst relative mismatch between `grad` and central differences of
/// `loss` over every coordinate, with magnitudes floored at `floor`.
pub fn fd_mismatch(values: &[f64], grad: &[f64], h: f64, floor: f64, loss: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut x = values.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor));
    }
    worst
}

/// Initialized weights with biases drawn in [−0.5, 0.5]. Zero biases put
/// hidden units fed by near-zero augmented embeddings on the ReLU kink,
/// where central differences straddle a non-differentiable point.
pub fn off_kink_params(arch: &Architecture, rng: &mut impl Rng) -> MLPParams {
    let mut params = MLPParams::init(arch, rng);
    for layer in params.extractor.iter_mut().chain(params.predictor.iter_mut()) {
        for v in layer.bias.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    params
}

/// Worst relative mismatch between the end-to-end training gradient
/// (cross-entropy plus weighted contrastive term through two
/// message-passing steps) and central differences with h = 1e-5, over
/// every trainable weight of a B = 4, d_emb = 8 instance.
pub fn end_to_end_mismatch(seed: u64, softmax: bool) -> f64 {
    let arch = Architecture {
        input: 5,
        extractor_hidden: vec![6],
        d_emb: 8,
        predictor_hidden: vec![6],
        classes: 3,
        mp_steps: 2,
    };
    let mut rng = derived_rng(seed, &[7]);
    let params = off_kink_params(&arch, &mut rng);
    let x = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let cfg = LraConfig {
        attention_softmax: softmax,
        ..LraConfig::default()
    };
    let (_, grad, _) = lra::loss_and_grad(&params, &x, &labels, &cfg).unwrap();
    let layout = params.layout();
    fd_mismatch(&params.flatten().values, &grad.values, 1e-5, 1e-6, |v| {
        let p = params.unflatten(&FlatParams::new(layout.clone(), v.to_vec()).unwrap()).unwrap();
        lra::loss_and_grad(&p, &x, &labels, &cfg).unwrap().0.total
    })
}
