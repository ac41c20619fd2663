//! Client model: MLP feature extractor, MLP predictor head and the
//! message-passing weights, plus flattening to a single parameter vector.
//!
//! Layers use the row convention: a batch `X` (one sample per row) maps to
//! `X·W + b`, so a weight has shape `fan_in × fan_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub extractor_hidden: Vec<usize>,
    pub d_emb: usize,
    pub predictor_hidden: Vec<usize>,
    pub classes: usize,
    pub mp_steps: usize,
}

impl Architecture {
    /// Default widths: two hidden layers of 64, a 64-dimensional embedding
    /// and one hidden predictor layer of 64.
    pub fn new(input: usize, classes: usize, mp_steps: usize) -> Self {
        Self {
            input,
            extractor_hidden: vec![64, 64],
            d_emb: 64,
            predictor_hidden: vec![64],
            classes,
            mp_steps,
        }
    }

    fn widths(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
        let mut w = vec![first];
        w.extend_from_slice(hidden);
        w.push(last);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: xavier(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Weights for one message-passing step: value map `w` and the two
/// attention projections `wm`, `wn`, each `d_emb × d_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct LraWeights {
    pub w: Matrix,
    pub wm: Matrix,
    pub wn: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MLPParams {
    pub extractor: Vec<Dense>,
    pub predictor: Vec<Dense>,
    pub lra: Vec<LraWeights>,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}

impl MLPParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let ext = Architecture::widths(arch.input, &arch.extractor_hidden, arch.d_emb);
        let pred = Architecture::widths(arch.d_emb, &arch.predictor_hidden, arch.classes);
        let extractor = ext.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect();
        let predictor = pred.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect();
        let d = arch.d_emb;
        let lra = (0..arch.mp_steps)
            .map(|_| LraWeights {
                w: xavier(d, d, rng),
                wm: xavier(d, d, rng),
                wn: xavier(d, d, rng),
            })
            .collect();
        Self {
            extractor,
            predictor,
            lra,
        }
    }

    pub fn d_emb(&self) -> usize {
        self.extractor.last().map_or(0, |l| l.weight.cols())
    }

    pub fn classes(&self) -> usize {
        self.predictor.last().map_or(0, |l| l.weight.cols())
    }

    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (group, layers) in [("extractor", &self.extractor), ("predictor", &self.predictor)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{group}.{i}.weight"), &l.weight));
                out.push((format!("{group}.{i}.bias"), &l.bias));
            }
        }
        for (i, s) in self.lra.iter().enumerate() {
            out.push((format!("lra.{i}.w"), &s.w));
            out.push((format!("lra.{i}.wm"), &s.wm));
            out.push((format!("lra.{i}.wn"), &s.wn));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layers in [&mut self.extractor, &mut self.predictor] {
            for l in layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for s in self.lra.iter_mut() {
            out.push(&mut s.w);
            out.push(&mut s.wm);
            out.push(&mut s.wn);
        }
        out
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let entries = self
            .named()
            .into_iter()
            .map(|(name, m)| {
                let e = LayoutEntry {
                    name,
                    shape: m.shape(),
                    offset,
                };
                offset += m.rows() * m.cols();
                e
            })
            .collect();
        Layout { entries }
    }

    pub fn flatten(&self) -> FlatParams {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.dim());
        for (_, m) in self.named() {
            values.extend_from_slice(m.data());
        }
        FlatParams { layout, values }
    }

    /// Rebuilds parameters with the architecture of `self` from `flat`.
    pub fn unflatten(&self, flat: &FlatParams) -> Result<Self> {
        if flat.layout != self.layout() {
            return Err(Error::LayoutMismatch(
                "flat parameters do not match this architecture".into(),
            ));
        }
        let mut out = self.clone();
        for (m, entry) in out.tensors_mut().into_iter().zip(&flat.layout.entries) {
            let n = entry.shape.0 * entry.shape.1;
            m.data_mut()
                .copy_from_slice(&flat.values[entry.offset..entry.offset + n]);
        }
        Ok(out)
    }

    /// Records every parameter as a tape leaf, in layout order.
    pub fn record(&self, tape: &mut Tape) -> ParamVars {
        let dense = |tape: &mut Tape, layers: &[Dense]| {
            layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect()
        };
        let extractor = dense(tape, &self.extractor);
        let predictor = dense(tape, &self.predictor);
        let lra = self
            .lra
            .iter()
            .map(|s| LraVars {
                w: tape.leaf(s.w.clone()),
                wm: tape.leaf(s.wm.clone()),
                wn: tape.leaf(s.wn.clone()),
            })
            .collect();
        ParamVars {
            extractor,
            predictor,
            lra,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LraVars {
    pub w: Var,
    pub wm: Var,
    pub wn: Var,
}

/// Tape handles for an [`MLPParams`], in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub extractor: Vec<(Var, Var)>,
    pub predictor: Vec<(Var, Var)>,
    pub lra: Vec<LraVars>,
}

impl ParamVars {
    fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in self.extractor.iter().chain(&self.predictor) {
            out.push(w);
            out.push(b);
        }
        for s in &self.lra {
            out.extend([s.w, s.wm, s.wn]);
        }
        out
    }

    /// Collects parameter adjoints into a vector with `layout`.
    pub fn gradients(&self, grads: &crate::numeric::Gradients, layout: &Layout) -> FlatParams {
        let mut values = Vec::with_capacity(layout.dim());
        for v in self.ordered() {
            values.extend_from_slice(grads.wrt(v).data());
        }
        FlatParams {
            layout: layout.clone(),
            values,
        }
    }
}

fn record_dense(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let xw = tape.matmul(h, w)?;
        h = tape.add_row(xw, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

pub fn record_extractor(tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
    record_dense(tape, &vars.extractor, x)
}

pub fn record_predictor(tape: &mut Tape, vars: &ParamVars, z: Var) -> Result<Var> {
    record_dense(tape, &vars.predictor, z)
}

/// Mean cross-entropy of `logits` against integer labels, on the tape.
pub fn record_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(logits).shape();
    let onehot = tape.leaf(one_hot(labels, n, c)?);
    let logp = tape.log_softmax_rows(logits, None)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

fn one_hot(labels: &[usize], n: usize, classes: usize) -> Result<Matrix> {
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let mut m = Matrix::zeros(n, classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

fn apply_dense(layers: &[Dense], x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = l.apply(&h)?;
        if i + 1 < layers.len() {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}

pub fn feature_extract(params: &MLPParams, x: &Matrix) -> Result<Matrix> {
    apply_dense(&params.extractor, x)
}

pub fn predict(params: &MLPParams, z: &Matrix) -> Result<Matrix> {
    apply_dense(&params.predictor, z)
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.shape();
    let onehot = one_hot(labels, n, c)?;
    let logp = crate::numeric::tape::log_softmax_rows(logits, None);
    Ok(-logp.hadamard(&onehot)?.sum() / n as f64)
}

pub fn total_loss(pred_loss: f64, cd_loss: f64, lambda_cd: f64) -> f64 {
    pred_loss + lambda_cd * cd_loss
}

/// Predictor-only loss and its gradient, with embeddings fed straight to
/// the head.
pub fn mlp_loss_and_grad(params: &MLPParams, x: &Matrix, labels: &[usize]) -> Result<(f64, FlatParams)> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let xv = tape.leaf(x.clone());
    let z = record_extractor(&mut tape, &vars, xv)?;
    let logits = record_predictor(&mut tape, &vars, z)?;
    let loss = record_cross_entropy(&mut tape, logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok((
        tape.value(loss).get(0, 0),
        vars.gradients(&grads, &params.layout()),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries
            .last()
            .map_or(0, |e| e.offset + e.shape.0 * e.shape.1)
    }

    /// A single unnamed block of `dim` values.
    pub fn flat(dim: usize) -> Self {
        Self {
            entries: vec![LayoutEntry {
                name: "values".into(),
                shape: (dim, 1),
                offset: 0,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl FlatParams {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if layout.dim() != values.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout holds {} values, got {}",
                layout.dim(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Unstructured parameters, for tests and the standalone solver.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            layout: Layout::flat(values.len()),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn check_layout(&self, other: &FlatParams) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(
                "parameter vectors come from different architectures".into(),
            ))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: FlatParams = serde_json::from_str(s)?;
        FlatParams::new(p.layout, p.values)
    }
}

pub fn sgd_step(params: &FlatParams, grads: &FlatParams, lr: f64) -> Result<FlatParams> {
    params.check_layout(grads)?;
    let values = params
        .values
        .iter()
        .zip(&grads.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(FlatParams {
        layout: params.layout.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            input: 3,
            extractor_hidden: vec![5],
            d_emb: 4,
            predictor_hidden: vec![4],
            classes: 3,
            mp_steps: 1,
        }
    }

    fn random_params(seed: u64) -> MLPParams {
        MLPParams::init(&small_arch(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_extractor_gives_zero_embedding() {
        let mut p = random_params(1);
        for l in &mut p.extractor {
            *l = Dense::zeros(l.weight.rows(), l.weight.cols());
        }
        let z = feature_extract(&p, &Matrix::filled(2, 3, 0.7)).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn identity_layer_passes_input() {
        let p = MLPParams {
            extractor: vec![Dense {
                weight: Matrix::identity(3),
                bias: Matrix::zeros(1, 3),
            }],
            predictor: vec![],
            lra: vec![],
        };
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]);
        assert_eq!(feature_extract(&p, &x).unwrap(), x);
    }

    #[test]
    fn two_layer_net_matches_hand_evaluation() {
        let p = MLPParams {
            extractor: vec![
                Dense {
                    weight: Matrix::from_rows(&[[1.0, -1.0], [2.0, 0.5]]),
                    bias: Matrix::from_rows(&[[0.5, -3.0]]),
                },
                Dense {
                    weight: Matrix::from_rows(&[[2.0], [-1.0]]),
                    bias: Matrix::from_rows(&[[0.25]]),
                },
            ],
            predictor: vec![],
            lra: vec![],
        };
        // x = (1, 1): hidden pre-activation (3.5, -3.5) → relu (3.5, 0) → 7 + 0.25.
        let z = feature_extract(&p, &Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(z.get(0, 0), 7.25);
    }

    #[test]
    fn cross_entropy_anchors() {
        let uniform = Matrix::zeros(2, 4);
        assert!((cross_entropy(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let saturated = Matrix::from_rows(&[[0.0, 30.0, 0.0]]);
        assert!(cross_entropy(&saturated, &[1]).unwrap() <= 1e-9);
        assert!(matches!(
            cross_entropy(&saturated, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = Matrix::from_rows(&[
            [0.3, -1.2, 2.0, 0.0, 0.7],
            [1.5, 1.5, -0.4, 0.2, -2.0],
            [-0.1, 0.9, 0.4, 3.1, 0.0],
        ]);
        let labels = [2, 0, 4];
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let denom: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            want -= (logits.get(i, y).exp() / denom).ln();
        }
        want /= 3.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_contrastive_term() {
        assert_eq!(total_loss(0.7, 5.0, 0.0), 0.7);
        assert!((total_loss(1.0, 2.0, 0.2) - 1.4).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 3.5, 1.0), 3.5);
    }

    #[test]
    fn sgd_arithmetic() {
        let p = FlatParams::from_values(vec![1.0, 1.0]);
        let g = FlatParams::from_values(vec![2.0, -2.0]);
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().values, vec![0.0, 2.0]);
        let zero = FlatParams::from_values(vec![0.0, 0.0]);
        assert_eq!(sgd_step(&p, &zero, 0.5).unwrap(), p);
        let other = FlatParams::from_values(vec![0.0; 3]);
        assert!(matches!(sgd_step(&p, &other, 0.5), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn sgd_descends_convex_quadratic() {
        // f(x) = ½ xᵀ diag(1, 4) x; curvature bound 4, so lr = 0.2 descends.
        let curv = [1.0, 4.0];
        let f = |x: &[f64]| 0.5 * x.iter().zip(curv).map(|(v, c)| c * v * v).sum::<f64>();
        let mut x = FlatParams::from_values(vec![1.0, -2.0]);
        let mut last = f(&x.values);
        for _ in 0..20 {
            let g = FlatParams::from_values(x.values.iter().zip(curv).map(|(v, c)| c * v).collect());
            x = sgd_step(&x, &g, 0.2).unwrap();
            let now = f(&x.values);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let p = random_params(3);
        let flat = p.flatten();
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert_eq!(flat.layout, random_params(4).layout());
        let json = flat.to_json().unwrap();
        assert_eq!(FlatParams::from_json(&json).unwrap(), flat);
    }

    #[test]
    fn flat_distance_is_layerwise() {
        let (a, b) = (random_params(5), random_params(6));
        let (fa, fb) = (a.flatten(), b.flatten());
        let direct: f64 = fa
            .values
            .iter()
            .zip(&fb.values)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let by_layer: f64 = a
            .named()
            .iter()
            .zip(b.named())
            .map(|((_, x), (_, y))| x.sub(y).unwrap().frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((direct - by_layer).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_direct_evaluation() {
        let p = random_params(7);
        let x = Matrix::from_rows(&[[0.1, 0.4, -0.3], [1.0, -0.5, 0.2]]);
        let labels = [2, 0];
        let (loss, grads) = mlp_loss_and_grad(&p, &x, &labels).unwrap();
        let direct = cross_entropy(&predict(&p, &feature_extract(&p, &x).unwrap()).unwrap(), &labels).unwrap();
        assert!((loss - direct).abs() < 1e-14);
        assert_eq!(grads.layout, p.layout());
        // Message-passing weights are unused without augmentation.
        let lra = p.layout().entries().iter().find(|e| e.name == "lra.0.wm").unwrap().clone();
        assert!(grads.values[lra.offset..lra.offset + 16].iter().all(|&g| g == 0.0));
    }
}
