//! Local relational augmentation: per-batch relation mining between sample
//! embeddings, attentive message passing over the mined graph, and a
//! contrastive loss aligning each embedding with its augmented version.
//!
//! The mined graph is a constant of the loss: gradients flow through the
//! embeddings, attention and message-passing weights but not through the
//! relation solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, FlatParams, LraVars, MLPParams, ParamVars};
use crate::numeric::tape::normalize_rows;
use crate::numeric::{sym_eig, sym_eig_from, Mask, Matrix, Tape, Var};

pub const PEARSON_EPS: f64 = 1e-8;

/// Pearson correlation between every pair of rows, with norms floored at
/// `eps` and the diagonal forced to 1.
pub fn pearson_matrix(z: &Matrix, eps: f64) -> Result<Matrix> {
    if z.rows() < 1 || z.cols() < 2 {
        return Err(Error::invalid(format!(
            "correlation needs at least 2 coordinates, got {:?}",
            z.shape()
        )));
    }
    let (normed, _) = normalize_rows(z, eps);
    let mut p = normed.matmul_nt(&normed)?;
    for i in 0..p.rows() {
        p.set(i, i, 1.0);
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlimOptions {
    pub lambda_r: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub eps: f64,
}

impl Default for SlimOptions {
    fn default() -> Self {
        Self {
            lambda_r: 0.1,
            max_iter: 50,
            tol: 1e-6,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlimSolution {
    pub b: Matrix,
    pub iterations: usize,
    pub converged: bool,
    /// Alternated objective, starting at `(B, Φ) = (0, I)` and then after
    /// each `Φ` update.
    pub objective: Vec<f64>,
}

/// Objective minimized by the alternation, at `Φ = (BBᵀ + εI)^(-1/2)`:
/// `½‖P − PB‖²_F + λ_R [Tr(BᵀΦB) + ε Tr Φ + Tr Φ⁻¹] = ½‖P − PB‖²_F + 2λ_R Tr (BBᵀ + εI)^(1/2)`.
pub fn slim_objective(p: &Matrix, b: &Matrix, lambda_r: f64, eps: f64) -> Result<f64> {
    let eig = sym_eig(&b.matmul_nt(b)?)?;
    Ok(fit_term(p, b)? + penalty_term(&eig.values, lambda_r, eps))
}

fn fit_term(p: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(0.5 * p.sub(&p.matmul(b)?)?.frobenius_norm().powi(2))
}

fn penalty_term(eigenvalues: &[f64], lambda_r: f64, eps: f64) -> f64 {
    2.0 * lambda_r * eigenvalues.iter().map(|w| (w.max(0.0) + eps).sqrt()).sum::<f64>()
}

/// Alternates an exact zero-diagonal least-squares step for `B` with `Φ`
/// fixed and the closed-form `Φ = (BBᵀ + εI)^(-1/2)` for `B` fixed.
///
/// With `C = PᵀP` and `H = (C + λ_R(Φ + Φᵀ))⁻¹`, column `j` of the
/// constrained minimizer is `H c_j − γ_j H e_j` where `γ_j` makes entry `j`
/// vanish. When `Φ` is a multiple of the identity this is `B_ij = −H_ij/H_jj`.
pub fn slim_solve(p: &Matrix, opts: &SlimOptions) -> Result<SlimSolution> {
    if !p.is_square() {
        return Err(Error::NotSquare {
            rows: p.rows(),
            cols: p.cols(),
        });
    }
    if !(opts.lambda_r > 0.0) {
        return Err(Error::invalid("lambda_r must be positive"));
    }
    let n = p.rows();
    let c = p.matmul_tn(p)?;
    let mut b = Matrix::zeros(n, n);
    // Starting from Φ = I makes the first step the classic closed form
    // B_ij = −H_ij/H_jj. The value of the alternated objective at (0, I) is
    // ½‖P‖² + λ_R·n·(1 + ε).
    let mut phi = Matrix::identity(n);
    let mut objective = vec![fit_term(p, &b)? + opts.lambda_r * n as f64 * (1.0 + opts.eps)];
    let mut converged = false;
    let mut iterations = 0;
    let mut basis = Matrix::identity(n);

    while iterations < opts.max_iter {
        iterations += 1;
        let m = c.add(&phi.add(&phi.transpose())?.scale(opts.lambda_r))?;
        let h = m.symmetrized()?.inverse()?;
        let hc = h.matmul(&c)?;
        let mut next = hc.clone();
        for j in 0..n {
            let gamma = hc.get(j, j) / h.get(j, j);
            for i in 0..n {
                next.set(i, j, hc.get(i, j) - h.get(i, j) * gamma);
            }
            next.set(j, j, 0.0);
        }

        let eig = sym_eig_from(&next.matmul_nt(&next)?.symmetrized()?, &basis)?;
        phi = eig.reconstruct_with(|w| (w.max(0.0) + opts.eps).powf(-0.5));
        objective.push(fit_term(p, &next)? + penalty_term(&eig.values, opts.lambda_r, opts.eps));
        basis = eig.vectors;

        let change = next.sub(&b)?.frobenius_norm();
        b = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(SlimSolution {
        b,
        iterations,
        converged,
        objective,
    })
}

/// Mined weights `b`, adjacency `a = (|b| + |b|ᵀ)/2`, degrees `d` and
/// Laplacian `l = d − a`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalGraph {
    pub b: Matrix,
    pub a: Matrix,
    pub d: Matrix,
    pub l: Matrix,
}

pub fn build_graph(b: &Matrix) -> Result<RelationalGraph> {
    if !b.is_square() {
        return Err(Error::NotSquare {
            rows: b.rows(),
            cols: b.cols(),
        });
    }
    if b.diagonal().iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("mined weights must have a zero diagonal"));
    }
    let n = b.rows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (b.get(i, j).abs() + b.get(j, i).abs()));
        }
    }
    let degrees: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let d = Matrix::diag(&degrees);
    let l = d.sub(&a)?;
    Ok(RelationalGraph {
        b: b.clone(),
        a,
        d,
        l,
    })
}

impl RelationalGraph {
    /// `N_i = {j : a_ij > τ_edge} ∪ {i}`.
    pub fn neighborhoods(&self, tau_edge: f64) -> Mask {
        Mask::from_fn(self.a.rows(), self.a.cols(), |i, j| i == j || self.a.get(i, j) > tau_edge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LraConfig {
    pub enabled: bool,
    pub slim: SlimOptions,
    pub lambda_cd: f64,
    pub tau1: f64,
    pub tau_edge: f64,
    pub attention_softmax: bool,
}

impl Default for LraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            slim: SlimOptions::default(),
            lambda_cd: 0.2,
            tau1: 0.8,
            tau_edge: 1e-3,
            attention_softmax: false,
        }
    }
}

/// Records `α = (H W_m)(H W_n)ᵀ / √d` restricted to `mask`: excluded
/// entries are zeroed, or left out of a row softmax when `softmax` is set.
pub fn record_attention(
    tape: &mut Tape,
    h: Var,
    wm: Var,
    wn: Var,
    mask: &Mask,
    softmax: bool,
) -> Result<Var> {
    let d = tape.value(h).cols() as f64;
    let hm = tape.matmul(h, wm)?;
    let hn = tape.matmul(h, wn)?;
    let hnt = tape.transpose(hn)?;
    let raw = tape.matmul(hm, hnt)?;
    let scores = tape.scale(raw, 1.0 / d.sqrt())?;
    if softmax {
        tape.softmax_rows(scores, Some(mask.clone()))
    } else {
        let keep = tape.leaf(mask.to_matrix());
        tape.mul(scores, keep)
    }
}

/// Records `steps` rounds of `h ← α(h) · (h W)`, one weight set per step.
pub fn record_message_passing(
    tape: &mut Tape,
    z: Var,
    mask: &Mask,
    weights: &[LraVars],
    softmax: bool,
) -> Result<Var> {
    let mut h = z;
    for step in weights {
        let alpha = record_attention(tape, h, step.wm, step.wn, mask, softmax)?;
        let values = tape.matmul(h, step.w)?;
        h = tape.matmul(alpha, values)?;
    }
    Ok(h)
}

/// Records the contrastive loss with anchors `z_i`, positives `z̃_i` and
/// every other row of `[z; z̃]` as a negative, using Pearson similarity.
pub fn record_contrastive(tape: &mut Tape, z: Var, z_tilde: Var, tau1: f64) -> Result<Var> {
    let b = tape.value(z).rows();
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs at least 2 samples"));
    }
    if !(tau1 > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let stacked = tape.concat_rows(z, z_tilde)?;
    let sim = tape.pearson(z, stacked, PEARSON_EPS)?;
    let logits = tape.scale(sim, 1.0 / tau1)?;
    let others = Mask::from_fn(b, 2 * b, |i, j| i != j);
    let logp = tape.log_softmax_rows(logits, Some(others))?;
    let positives = tape.leaf(Mask::from_fn(b, 2 * b, |i, j| j == b + i).to_matrix());
    let picked = tape.mul(logp, positives)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

pub fn attention_weights(
    h: &Matrix,
    wm: &Matrix,
    wn: &Matrix,
    mask: &Mask,
    softmax: bool,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (h, wm, wn) = (tape.leaf(h.clone()), tape.leaf(wm.clone()), tape.leaf(wn.clone()));
    let out = record_attention(&mut tape, h, wm, wn, mask, softmax)?;
    Ok(tape.value(out).clone())
}

pub fn message_passing(
    z: &Matrix,
    graph: &RelationalGraph,
    weights: &[model::LraWeights],
    cfg: &LraConfig,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let vars: Vec<LraVars> = weights
        .iter()
        .map(|w| LraVars {
            w: tape.leaf(w.w.clone()),
            wm: tape.leaf(w.wm.clone()),
            wn: tape.leaf(w.wn.clone()),
        })
        .collect();
    let mask = graph.neighborhoods(cfg.tau_edge);
    let out = record_message_passing(&mut tape, zv, &mask, &vars, cfg.attention_softmax)?;
    Ok(tape.value(out).clone())
}

pub fn contrastive_loss(z: &Matrix, z_tilde: &Matrix, tau1: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(z.clone()), tape.leaf(z_tilde.clone()));
    let out = record_contrastive(&mut tape, a, b, tau1)?;
    Ok(tape.value(out).get(0, 0))
}

/// Mines the relational graph of a batch of embeddings.
pub fn mine_graph(z: &Matrix, slim: &SlimOptions) -> Result<(Matrix, SlimSolution, RelationalGraph)> {
    if !z.is_finite() {
        return Err(Error::NonFinite("embeddings"));
    }
    let p = pearson_matrix(z, PEARSON_EPS)?;
    let sol = slim_solve(&p, slim)?;
    let graph = build_graph(&sol.b)?;
    Ok((p, sol, graph))
}

/// One batch recorded on a tape: parameter leaves, embeddings and losses.
pub struct BatchGraph {
    pub tape: Tape,
    pub vars: ParamVars,
    pub z: Var,
    pub z_tilde: Var,
    pub logits: Var,
    pub pred_loss: Option<Var>,
    pub cd_loss: Option<Var>,
    pub loss: Option<Var>,
    pub mined: Option<MinedBatch>,
}

/// Relation-mining artifacts of one batch.
#[derive(Debug, Clone)]
pub struct MinedBatch {
    pub correlation: Matrix,
    pub slim: SlimSolution,
    pub graph: RelationalGraph,
}

/// Records extractor, augmentation and predictor for a batch, plus the
/// training loss when `labels` is given. With augmentation disabled (or
/// zero message-passing steps) `z̃ = z`; the contrastive term needs
/// augmentation and at least two samples.
pub fn record_batch(params: &MLPParams, x: &Matrix, labels: Option<&[usize]>, cfg: &LraConfig) -> Result<BatchGraph> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let xv = tape.leaf(x.clone());
    let z = model::record_extractor(&mut tape, &vars, xv)?;

    let mut mined = None;
    let z_tilde = if cfg.enabled && !vars.lra.is_empty() {
        let (correlation, slim, graph) = mine_graph(tape.value(z), &cfg.slim)?;
        let mask = graph.neighborhoods(cfg.tau_edge);
        let zt = record_message_passing(&mut tape, z, &mask, &vars.lra, cfg.attention_softmax)?;
        mined = Some(MinedBatch {
            correlation,
            slim,
            graph,
        });
        zt
    } else {
        z
    };
    let logits = model::record_predictor(&mut tape, &vars, z_tilde)?;

    let (mut pred_loss, mut cd_loss, mut loss) = (None, None, None);
    if let Some(labels) = labels {
        let pred = model::record_cross_entropy(&mut tape, logits, labels)?;
        pred_loss = Some(pred);
        loss = Some(pred);
        if cfg.enabled && cfg.lambda_cd > 0.0 && x.rows() >= 2 {
            let cd = record_contrastive(&mut tape, z, z_tilde, cfg.tau1)?;
            let weighted = tape.scale(cd, cfg.lambda_cd)?;
            loss = Some(tape.add(pred, weighted)?);
            cd_loss = Some(cd);
        }
    }
    Ok(BatchGraph {
        tape,
        vars,
        z,
        z_tilde,
        logits,
        pred_loss,
        cd_loss,
        loss,
        mined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub pred: f64,
    pub cd: f64,
}

/// Training loss of a batch and its gradient with respect to every
/// parameter.
pub fn loss_and_grad(
    params: &MLPParams,
    x: &Matrix,
    labels: &[usize],
    cfg: &LraConfig,
) -> Result<(BatchLoss, FlatParams, Option<MinedBatch>)> {
    let g = record_batch(params, x, Some(labels), cfg)?;
    let loss = g.loss.expect("labels given");
    let grads = g.tape.backward(loss)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.tape.value(v).get(0, 0));
    let breakdown = BatchLoss {
        total: value(Some(loss)),
        pred: value(g.pred_loss),
        cd: value(g.cd_loss),
    };
    Ok((breakdown, g.vars.gradients(&grads, &params.layout()), g.mined))
}

/// Embeddings `z`, augmented embeddings `z̃` and contrastive loss of a batch.
pub fn lra_forward(params: &MLPParams, x: &Matrix, cfg: &LraConfig) -> Result<(Matrix, Matrix, f64)> {
    let mut g = record_batch(params, x, None, cfg)?;
    let cd = if x.rows() >= 2 {
        let v = record_contrastive(&mut g.tape, g.z, g.z_tilde, cfg.tau1)?;
        g.tape.value(v).get(0, 0)
    } else {
        0.0
    };
    Ok((g.tape.value(g.z).clone(), g.tape.value(g.z_tilde).clone(), cd))
}

/// Class predictions for `x`, augmented within chunks of `chunk` rows.
pub fn predict_labels(params: &MLPParams, x: &Matrix, cfg: &LraConfig, chunk: usize) -> Result<Vec<usize>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(x.rows());
    let indices: Vec<usize> = (0..x.rows()).collect();
    for rows in indices.chunks(chunk) {
        let g = record_batch(params, &x.select_rows(rows), None, cfg)?;
        let logits = g.tape.value(g.logits);
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_anchors() {
        let z = Matrix::from_rows(&[[1.0, 2.0, 4.0], [1.0, 2.0, 4.0], [-1.0, -2.0, -4.0]]);
        let p = pearson_matrix(&z, PEARSON_EPS).unwrap();
        assert!((p.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((p.get(0, 2) + 1.0).abs() < 1e-15);
        assert_eq!(p.diagonal(), vec![1.0; 3]);
    }

    #[test]
    fn pearson_matches_covariance_formula() {
        let z = Matrix::from_rows(&[
            [0.3, -1.0, 2.2, 0.1, 0.0, 1.4],
            [1.1, 0.5, -0.7, 0.9, 2.0, -0.3],
            [-0.4, 0.8, 0.6, -1.5, 0.2, 0.7],
            [2.0, 1.9, -0.1, 0.3, -0.8, 0.5],
        ]);
        let p = pearson_matrix(&z, PEARSON_EPS).unwrap();
        let n = z.cols() as f64;
        let stats = |i: usize| {
            let m = z.row(i).iter().sum::<f64>() / n;
            (m, (z.row(i).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        for i in 0..4 {
            for j in 0..4 {
                let ((mi, si), (mj, sj)) = (stats(i), stats(j));
                let cov = (0..z.cols())
                    .map(|c| (z.get(i, c) - mi) * (z.get(j, c) - mj))
                    .sum::<f64>()
                    / n;
                assert!((p.get(i, j) - cov / (si * sj)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_rows_are_uncorrelated() {
        let z = Matrix::from_rows(&[[1.0, 1.0, 1.0], [0.0, 2.0, 5.0]]);
        let p = pearson_matrix(&z, PEARSON_EPS).unwrap();
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(0, 0), 1.0);
    }

    #[test]
    fn slim_zero_diagonal_and_deterministic() {
        let p = pearson_matrix(
            &Matrix::from_rows(&[[1.0, 0.2, -0.5, 0.3], [0.9, 0.1, -0.4, 0.6], [-0.2, 1.0, 0.4, 0.0]]),
            PEARSON_EPS,
        )
        .unwrap();
        let a = slim_solve(&p, &SlimOptions::default()).unwrap();
        let b = slim_solve(&p, &SlimOptions::default()).unwrap();
        assert_eq!(a.b, b.b);
        assert!(a.b.diagonal().iter().all(|&v| v == 0.0));
        for w in a.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn slim_step_reduces_to_scaled_identity_form() {
        // The first step starts from Φ = I: off-diagonal entries are −H_ij/H_jj.
        let p = Matrix::from_rows(&[[1.0, 0.6, -0.2], [0.6, 1.0, 0.1], [-0.2, 0.1, 1.0]]);
        let opts = SlimOptions {
            max_iter: 1,
            ..SlimOptions::default()
        };
        let sol = slim_solve(&p, &opts).unwrap();
        let h = p
            .matmul_tn(&p)
            .unwrap()
            .add_scaled_identity(2.0 * opts.lambda_r)
            .unwrap()
            .inverse()
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let want = -h.get(i, j) / h.get(j, j);
                    assert!((sol.b.get(i, j) - want).abs() < 1e-12 * want.abs().max(1e-6));
                }
            }
        }
    }

    #[test]
    fn graph_symmetrization_and_laplacian() {
        let mut b = Matrix::zeros(3, 3);
        b.set(0, 1, 2.0);
        b.set(1, 0, -4.0);
        b.set(2, 0, 0.5);
        let g = build_graph(&b).unwrap();
        assert_eq!(g.a.get(0, 1), 3.0);
        assert_eq!(g.a.get(1, 0), 3.0);
        assert_eq!(g.a.get(0, 2), 0.25);
        for i in 0..3 {
            assert!(g.l.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
        let empty = build_graph(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(empty.l, Matrix::zeros(2, 2));
        assert!(build_graph(&Matrix::identity(2)).is_err());
    }

    #[test]
    fn attention_of_unit_vectors() {
        let h = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]);
        let mask = Mask::from_fn(2, 2, |_, _| true);
        let i4 = Matrix::identity(4);
        let alpha = attention_weights(&h, &i4, &i4, &mask, false).unwrap();
        assert_eq!(alpha, Matrix::filled(2, 2, 0.5));
        let zero = attention_weights(&h, &Matrix::zeros(4, 4), &i4, &mask, false).unwrap();
        assert_eq!(zero, Matrix::zeros(2, 2));
    }

    #[test]
    fn contrastive_anchors() {
        let same = Matrix::from_rows(&[[1.0, 2.0, 0.5], [1.0, 2.0, 0.5]]);
        for tau in [0.1, 0.8, 1.0] {
            let l = contrastive_loss(&same, &same, tau).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-10);
        }
        assert!(contrastive_loss(&Matrix::zeros(1, 3), &Matrix::zeros(1, 3), 1.0).is_err());
    }
}
