//! Nash-bargaining aggregation of client deviations.
//!
//! The bargaining weights `p > 0` solve `GᵀG p = 1/p`. They are found by a
//! convex-concave procedure: with `A = GᵀG` and `q = A p`, the concave
//! objective `φ(p) = Σ_k log p_k + log q_k` (optionally plus `c·Σ_k q_k`) is
//! linearized at the current iterate, leaving a linear objective over the
//! convex set `{φ_k(p) ≥ 0}` whose only point with `φ = 0` is the root. Each subproblem is solved by a
//! log-barrier interior-point method with damped Newton steps inside a
//! multiplicative trust box around the current iterate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FlatParams;
use crate::numeric::{dot, norm, Matrix};

/// Client deviations `Δθ_k = θ_k − θ`, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMatrix {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl DeviationMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let dim = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("deviation matrix needs at least one column"))?;
        if columns.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("deviation columns differ in length"));
        }
        Ok(Self { dim, columns })
    }

    /// From a `d × K` matrix whose columns are deviations.
    pub fn from_matrix(g: &Matrix) -> Result<Self> {
        Self::from_columns((0..g.cols()).map(|k| g.column(k)).collect())
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.k());
        for (k, c) in self.columns.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m.set(i, k, v);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    /// `G · p`.
    pub fn combine(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.k() {
            return Err(Error::invalid(format!(
                "{} weights for {} deviations",
                p.len(),
                self.k()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (c, &w) in self.columns.iter().zip(p) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

pub fn compute_deviations(theta: &FlatParams, clients: &[FlatParams]) -> Result<DeviationMatrix> {
    let columns = clients
        .iter()
        .map(|c| {
            theta.check_layout(c)?;
            Ok(c.values.iter().zip(&theta.values).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    DeviationMatrix::from_columns(columns)
}

/// `GᵀG`.
pub fn gram(g: &DeviationMatrix) -> Matrix {
    let k = g.k();
    let mut a = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(g.column(i), g.column(j));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

/// `u_k = Δθ_kᵀ δ` for every client.
pub fn utilities(g: &DeviationMatrix, delta: &[f64]) -> Result<Vec<f64>> {
    if delta.len() != g.dim() {
        return Err(Error::invalid(format!(
            "update has dimension {}, deviations {}",
            delta.len(),
            g.dim()
        )));
    }
    Ok(g.columns.iter().map(|c| dot(c, delta)).collect())
}

/// `θ + G·p`.
pub fn aggregate(theta: &FlatParams, g: &DeviationMatrix, p: &[f64]) -> Result<FlatParams> {
    if theta.dim() != g.dim() {
        return Err(Error::invalid(format!(
            "parameters have dimension {}, deviations {}",
            theta.dim(),
            g.dim()
        )));
    }
    let step = g.combine(p)?;
    let values = theta.values.iter().zip(&step).map(|(a, b)| a + b).collect();
    FlatParams::new(theta.layout.clone(), values)
}

/// Sample-count proportional weights.
pub fn fedavg_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("sample counts sum to zero"));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `‖(A p) ⊙ p − 1‖_∞`.
pub fn kkt_residual(a: &Matrix, p: &[f64]) -> f64 {
    let q = a.matvec(p).expect("gram is K×K");
    q.iter()
        .zip(p)
        .map(|(qk, pk)| (qk * pk - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashOptions {
    pub max_outer: usize,
    /// Newton iterations per barrier stage.
    pub max_inner: usize,
    pub tol: f64,
    pub util_eps: f64,
    /// Weight on the `Σ_k q_k` term of the objective. At 1 the objective
    /// can have critical points other than the root of `A p = 1/p`; at 0
    /// every constraint multiplier at the root equals 1, so the root is
    /// always a fixed point of the linearization.
    pub utility_sum_weight: f64,
    pub init: Option<Vec<f64>>,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            max_outer: 20,
            max_inner: 200,
            tol: 1e-6,
            util_eps: 1e-8,
            utility_sum_weight: 0.0,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashSolution {
    pub p: Vec<f64>,
    /// KKT residual over clients that took part in the bargain.
    pub residual: f64,
    pub converged: bool,
    /// Outer (linearization) iterations performed.
    pub iterations: usize,
    /// `u_k(G·p)` for every client.
    pub utilities: Vec<f64>,
}

/// Trust box `[p/ρ, ρ·p]` around each linearization point.
const TRUST_RATIO: f64 = 4.0;
/// Margin `φ_k ≥ δ` required of the starting point.
const PHASE_ONE_MARGIN: f64 = 0.1;
const PHASE_ONE_SWEEPS: usize = 100;
const MU_START: f64 = 1.0;
const MU_END: f64 = 1e-12;
const ARMIJO_C: f64 = 1e-4;
const ARMIJO_BETA: f64 = 0.5;
const MAX_BACKTRACKS: usize = 80;

/// Solves the bargain. Columns are first put in a canonical order (by
/// their contents), so permuting clients permutes the result bit for bit.
pub fn nash_solve(g: &DeviationMatrix, opts: &NashOptions) -> Result<NashSolution> {
    let mut order: Vec<usize> = (0..g.k()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&g.columns[a], &g.columns[b]);
        x.iter()
            .zip(y)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let canonical = DeviationMatrix {
        dim: g.dim,
        columns: order.iter().map(|&i| g.columns[i].clone()).collect(),
    };
    let opts = NashOptions {
        init: opts.init.as_ref().map(|init| {
            if init.len() == order.len() {
                order.iter().map(|&i| init[i]).collect()
            } else {
                init.clone()
            }
        }),
        ..opts.clone()
    };
    let sol = solve_ordered(&canonical, &opts)?;
    let mut p = vec![0.0; order.len()];
    let mut utilities = vec![0.0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        p[i] = sol.p[pos];
        utilities[i] = sol.utilities[pos];
    }
    Ok(NashSolution { p, utilities, ..sol })
}

fn solve_ordered(g: &DeviationMatrix, opts: &NashOptions) -> Result<NashSolution> {
    let k = g.k();
    let norms: Vec<f64> = g.columns.iter().map(|c| norm(c)).collect();
    // Clients that did not move have nothing to bargain for; they keep
    // weight zero.
    let active: Vec<usize> = (0..k).filter(|&i| norms[i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::NoDeviation);
    }
    if let Some(init) = &opts.init {
        if init.len() != k || init.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("initial weights must be K positive values"));
        }
    }

    let full = gram(g);
    let n = active.len();
    let mut a = Matrix::zeros(n, n);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            a.set(r, c, full.get(i, j));
        }
    }
    let p0: Vec<f64> = active
        .iter()
        .map(|&i| match &opts.init {
            Some(init) => init[i],
            None => 1.0 / norms[i].max(opts.util_eps),
        })
        .collect();

    let (sub, converged, iterations) = solve_active(&a, p0, opts);
    let mut p = vec![0.0; k];
    for (&i, v) in active.iter().zip(&sub) {
        p[i] = *v;
    }
    let residual = kkt_residual(&a, &sub);
    let utilities = full.matvec(&p)?;
    Ok(NashSolution {
        p,
        residual,
        converged,
        iterations,
        utilities,
    })
}

fn solve_active(a: &Matrix, p0: Vec<f64>, opts: &NashOptions) -> (Vec<f64>, bool, usize) {
    let mut p = match phase_one(a, p0.clone(), opts.util_eps) {
        Some(p) => p,
        None => return (p0, false, 0),
    };
    let mut best = (kkt_residual(a, &p), p.clone());
    for outer in 1..=opts.max_outer {
        let next = match linearized_step(a, &p, opts) {
            Some(next) => next,
            None => return (best.1, false, outer),
        };
        let step = next
            .iter()
            .zip(&p)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        p = next;
        let r = kkt_residual(a, &p);
        if r <= best.0 {
            best = (r, p.clone());
        }
        if step < opts.tol {
            return (p, true, outer);
        }
    }
    (best.1, false, opts.max_outer)
}

/// `φ_k(p) = log p_k + log max(q_k, ε)`.
fn phi(a: &Matrix, p: &[f64], eps: f64) -> Vec<f64> {
    let q = a.matvec(p).expect("gram is K×K");
    p.iter()
        .zip(&q)
        .map(|(pk, qk)| pk.ln() + qk.max(eps).ln())
        .collect()
}

/// Finds a start with every utility positive and `φ_k ≥ δ`.
///
/// Clients with nonpositive utility are repaired by exact coordinate-wise
/// minimization of `½pᵀAp − Σ log p`, whose per-coordinate minimizer always
/// has `p_k q_k = 1`. A uniform rescale by `s` then shifts every `φ_k` by
/// `2 log s`, which lifts the smallest to the margin.
fn phase_one(a: &Matrix, mut p: Vec<f64>, eps: f64) -> Option<Vec<f64>> {
    let n = p.len();
    let mut sweeps = 0;
    while a.matvec(&p).ok()?.iter().any(|&q| q <= eps) {
        if sweeps == PHASE_ONE_SWEEPS {
            return None;
        }
        for k in 0..n {
            let akk = a.get(k, k);
            let rest = dot(a.row(k), &p) - akk * p[k];
            // Positive root of akk·x² + rest·x − 1, in a cancellation-free form.
            p[k] = if rest >= 0.0 {
                2.0 / (rest + (rest * rest + 4.0 * akk).sqrt())
            } else {
                (-rest + (rest * rest + 4.0 * akk).sqrt()) / (2.0 * akk)
            };
        }
        sweeps += 1;
    }
    let lowest = phi(a, &p, eps).into_iter().fold(f64::INFINITY, f64::min);
    if lowest < PHASE_ONE_MARGIN {
        let s = (0.5 * (PHASE_ONE_MARGIN - lowest)).exp();
        p.iter_mut().for_each(|v| *v *= s);
    }
    Some(p)
}

/// Solves one linearized subproblem around `center`.
fn linearized_step(a: &Matrix, center: &[f64], opts: &NashOptions) -> Option<Vec<f64>> {
    let n = center.len();
    let q = a.matvec(center).ok()?;
    let inv_q: Vec<f64> = q.iter().map(|v| 1.0 / v.max(opts.util_eps)).collect();
    let a_one = a.matvec(&vec![1.0; n]).ok()?;
    let a_inv_q = a.matvec(&inv_q).ok()?;
    let weights: Vec<f64> = (0..n)
        .map(|k| opts.utility_sum_weight * a_one[k] + 1.0 / center[k] + a_inv_q[k])
        .collect();
    let sub = Subproblem {
        a,
        weights,
        lo: center.iter().map(|v| v / TRUST_RATIO).collect(),
        hi: center.iter().map(|v| v * TRUST_RATIO).collect(),
        eps: opts.util_eps,
    };

    // Shifting by e^{0.05} raises every φ_k by 0.1, strictly inside the set.
    let mut x: Vec<f64> = center.iter().map(|v| v * 0.05f64.exp()).collect();
    if sub.barrier(&x, MU_START).is_none() {
        return None;
    }
    let mut mu = MU_START;
    while mu >= MU_END {
        x = sub.newton(x, mu, opts.max_inner);
        mu *= 0.1;
    }
    Some(x)
}

struct Subproblem<'a> {
    a: &'a Matrix,
    weights: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    eps: f64,
}

impl Subproblem<'_> {
    /// Barrier objective, or `None` outside the strict interior.
    fn barrier(&self, x: &[f64], mu: f64) -> Option<f64> {
        let mut f = dot(&self.weights, x);
        for (k, phik) in phi(self.a, x, self.eps).into_iter().enumerate() {
            let (l, h) = (x[k] - self.lo[k], self.hi[k] - x[k]);
            if !(phik > 0.0 && l > 0.0 && h > 0.0) {
                return None;
            }
            f -= mu * (phik.ln() + l.ln() + h.ln());
        }
        f.is_finite().then_some(f)
    }

    fn gradient_hessian(&self, x: &[f64], mu: f64) -> (Vec<f64>, Matrix) {
        let n = x.len();
        let q = self.a.matvec(x).expect("gram is K×K");
        let mut grad = self.weights.clone();
        let mut hess = Matrix::zeros(n, n);
        for k in 0..n {
            let phik = x[k].ln() + q[k].max(self.eps).ln();
            // ∇φ_k = e_k / x_k + a_k / q_k; the utility term vanishes when clamped.
            let clamped = q[k] <= self.eps;
            let mut dphi: Vec<f64> = if clamped {
                vec![0.0; n]
            } else {
                self.a.row(k).iter().map(|v| v / q[k]).collect()
            };
            dphi[k] += 1.0 / x[k];
            for i in 0..n {
                grad[i] -= mu * dphi[i] / phik;
            }
            // μ(∇φ∇φᵀ/φ² − ∇²φ/φ), with −∇²φ = e_k e_kᵀ/x_k² + a_k a_kᵀ/q_k².
            let s1 = mu / (phik * phik);
            let s2 = mu / phik;
            for i in 0..n {
                for j in 0..n {
                    let mut h = s1 * dphi[i] * dphi[j];
                    if !clamped {
                        h += s2 * self.a.get(k, i) * self.a.get(k, j) / (q[k] * q[k]);
                    }
                    hess.data_mut()[i * n + j] += h;
                }
            }
            hess.data_mut()[k * n + k] += s2 / (x[k] * x[k]);

            let (l, h) = (x[k] - self.lo[k], self.hi[k] - x[k]);
            grad[k] += -mu / l + mu / h;
            hess.data_mut()[k * n + k] += mu / (l * l) + mu / (h * h);
        }
        (grad, hess)
    }

    fn newton(&self, mut x: Vec<f64>, mu: f64, max_iter: usize) -> Vec<f64> {
        let Some(mut f) = self.barrier(&x, mu) else {
            return x;
        };
        for _ in 0..max_iter {
            let (grad, hess) = self.gradient_hessian(&x, mu);
            let Ok(step) = hess.cholesky_solve(&grad) else {
                break;
            };
            // Newton decrement λ² = ∇fᵀ H⁻¹ ∇f.
            let decrement = dot(&grad, &step);
            if !(decrement > 1e-14 * (1.0 + f.abs())) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(v, s)| v - t * s).collect();
                if let Some(ft) = self.barrier(&trial, mu) {
                    if ft <= f - ARMIJO_C * t * decrement {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                t *= ARMIJO_BETA;
            }
            match accepted {
                Some((trial, ft)) => {
                    x = trial;
                    f = ft;
                }
                None => break,
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(columns: &[&[f64]]) -> DeviationMatrix {
        DeviationMatrix::from_columns(columns.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn deviations_are_differences() {
        let theta = FlatParams::from_values(vec![1.0, 1.0]);
        let c1 = FlatParams::from_values(vec![3.0, 1.0]);
        let c2 = FlatParams::from_values(vec![1.0, 0.0]);
        let g = compute_deviations(&theta, &[c1, c2]).unwrap();
        assert_eq!(g.column(0), &[2.0, 0.0]);
        assert_eq!(g.column(1), &[0.0, -1.0]);
        let same = compute_deviations(&theta, &[theta.clone(), theta.clone()]).unwrap();
        assert_eq!(same.to_matrix(), Matrix::zeros(2, 2));
    }

    #[test]
    fn gram_of_orthonormal_and_zero() {
        assert_eq!(gram(&dev(&[&[1.0, 0.0], &[0.0, 1.0]])), Matrix::identity(2));
        assert_eq!(gram(&dev(&[&[0.0; 3], &[0.0; 3]])), Matrix::zeros(2, 2));
    }

    #[test]
    fn single_client_gets_unit_direction() {
        let g = dev(&[&[3.0, 4.0]]);
        let s = nash_solve(&g, &NashOptions::default()).unwrap();
        assert!((s.p[0] - 0.2).abs() < 1e-9);
        let step = g.combine(&s.p).unwrap();
        assert!((step[0] - 0.6).abs() < 1e-9 && (step[1] - 0.8).abs() < 1e-9);
        assert!(s.residual < 1e-8);
    }

    #[test]
    fn orthonormal_clients_get_unit_weights() {
        let s = nash_solve(&dev(&[&[1.0, 0.0], &[0.0, 1.0]]), &NashOptions::default()).unwrap();
        for v in s.p {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_deviation_is_an_error_and_idle_clients_get_zero() {
        assert!(matches!(
            nash_solve(&dev(&[&[0.0, 0.0]]), &NashOptions::default()),
            Err(Error::NoDeviation)
        ));
        let s = nash_solve(&dev(&[&[0.0, 0.0], &[0.0, 2.0]]), &NashOptions::default()).unwrap();
        assert_eq!(s.p[0], 0.0);
        assert!((s.p[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn opposed_clients_still_solve() {
        // Nearly opposite deviations: the starting point has a negative utility.
        let g = dev(&[&[1.0, 0.0], &[-3.0, 0.2]]);
        let s = nash_solve(&g, &NashOptions::default()).unwrap();
        assert!(s.converged, "{s:?}");
        assert!(s.residual < 1e-6);
        assert!(s.utilities.iter().all(|&u| u > 0.0));
    }

    #[test]
    fn aggregate_arithmetic() {
        let theta = FlatParams::from_values(vec![1.0, 1.0]);
        let g = dev(&[&[2.0, 0.0], &[0.0, -1.0]]);
        assert_eq!(aggregate(&theta, &g, &[0.5, 1.0]).unwrap().values, vec![2.0, 0.0]);
        let tiny = aggregate(&theta, &g, &[1e-14, 1e-14]).unwrap();
        assert!((tiny.values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fedavg_proportions() {
        assert_eq!(fedavg_weights(&[1, 1]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(fedavg_weights(&[3, 1]).unwrap(), vec![0.75, 0.25]);
        assert!(fedavg_weights(&[0, 0]).is_err());
    }

    #[test]
    fn utilities_are_inner_products() {
        let g = dev(&[&[1.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(utilities(&g, &[1.0, 2.0, 0.0]).unwrap(), vec![5.0, 0.0]);
        assert_eq!(utilities(&g, &[-2.0, 1.0, 0.0]).unwrap()[0], 0.0);
    }
}
