//! Round loop of the federated simulation: local training with relational
//! augmentation on every client, aggregation on the server, and per-round
//! accuracy and consistency metrics.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, derived_rng, stream, Dataset, Partition};
use crate::error::{Error, Result};
use crate::gne::{self, DeviationMatrix, NashOptions};
use crate::lra::{self, LraConfig, SlimOptions};
use crate::model::{self, Architecture, FlatParams, MLPParams};
use crate::numeric::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Gne,
    Fedavg,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Gne => "gne",
            Aggregator::Fedavg => "fedavg",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gne" => Ok(Aggregator::Gne),
            "fedavg" => Ok(Aggregator::Fedavg),
            other => Err(Error::invalid(format!(
                "unknown aggregator {other:?} (expected gne or fedavg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: 4,
            dim: 8,
            per_class: 250,
            spread: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                dim,
                per_class,
                spread,
            } => data::generate_synthetic(*classes, *dim, *per_class, *spread, seed),
            DatasetSpec::Csv { path } => data::load_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_r: f64,
    pub lambda_cd: f64,
    pub tau1: f64,
    pub tau_edge: f64,
    pub mp_steps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub aggregator: Aggregator,
    pub lra_enabled: bool,
    pub attention_softmax: bool,
    pub slim_max_iter: usize,
    pub slim_tol: f64,
    pub extractor_hidden: Vec<usize>,
    pub d_emb: usize,
    pub predictor_hidden: Vec<usize>,
    /// Fraction of the data held out as the common G-FL test pool.
    pub holdout: f64,
    /// Fraction of each client's data used for local training.
    pub train_ratio: f64,
    pub dataset: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 20,
            rounds: 50,
            local_epochs: 5,
            batch_size: 128,
            lr: 0.5,
            lambda_r: 0.1,
            lambda_cd: 0.2,
            tau1: 0.8,
            tau_edge: 1e-3,
            mp_steps: 2,
            alpha: 0.5,
            seed: 0,
            aggregator: Aggregator::Gne,
            lra_enabled: true,
            attention_softmax: false,
            slim_max_iter: 50,
            slim_tol: 1e-6,
            extractor_hidden: vec![64, 64],
            d_emb: 64,
            predictor_hidden: vec![64],
            holdout: 0.1,
            train_ratio: 0.75,
            dataset: DatasetSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("d_emb", self.d_emb),
            ("slim_max_iter", self.slim_max_iter),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("lr", self.lr),
            ("lambda_r", self.lambda_r),
            ("tau1", self.tau1),
            ("alpha", self.alpha),
            ("slim_tol", self.slim_tol),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda_cd >= 0.0 && self.lambda_cd.is_finite()) {
            return Err(Error::invalid("lambda_cd must be nonnegative"));
        }
        if !(self.tau_edge >= 0.0 && self.tau_edge.is_finite()) {
            return Err(Error::invalid("tau_edge must be nonnegative"));
        }
        if self.extractor_hidden.contains(&0) || self.predictor_hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::invalid("holdout must lie in (0, 1)"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::invalid("train_ratio must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Model shape for a dataset. Without augmentation the message-passing
    /// weights are left out entirely.
    pub fn architecture(&self, input: usize, classes: usize) -> Architecture {
        Architecture {
            input,
            extractor_hidden: self.extractor_hidden.clone(),
            d_emb: self.d_emb,
            predictor_hidden: self.predictor_hidden.clone(),
            classes,
            mp_steps: if self.lra_enabled { self.mp_steps } else { 0 },
        }
    }

    pub fn lra_config(&self) -> LraConfig {
        LraConfig {
            enabled: self.lra_enabled,
            slim: SlimOptions {
                lambda_r: self.lambda_r,
                max_iter: self.slim_max_iter,
                tol: self.slim_tol,
                ..SlimOptions::default()
            },
            lambda_cd: self.lambda_cd,
            tau1: self.tau1,
            tau_edge: self.tau_edge,
            attention_softmax: self.attention_softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub gfl_accuracy: f64,
    /// Unweighted mean of `client_accuracy`.
    pub pfl_accuracy: f64,
    pub client_accuracy: Vec<f64>,
    /// [`ClientResult::last_epoch_loss`] per client; at round 0 the initial
    /// model's cross-entropy on each training split.
    pub per_client_loss: Vec<f64>,
    /// `cos(Δθ, Δθ_k)`; zeros at round 0 and when the global model did not
    /// move.
    pub cosine: Vec<f64>,
    /// Aggregation weights `p`.
    pub weights: Vec<f64>,
    /// KKT residual of the bargain, or −1 where it does not apply.
    pub bargain_residual: f64,
    pub converged: bool,
}

impl RoundMetrics {
    pub fn min_cosine(&self) -> f64 {
        self.cosine.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_cosine(&self) -> f64 {
        self.cosine.iter().sum::<f64>() / self.cosine.len().max(1) as f64
    }
}

/// Data shared by every round: the G-FL holdout, the client pool and the
/// client partitions (with local splits) over the pool.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub holdout: Dataset,
    pub pool: Dataset,
    pub partitions: Vec<Partition>,
}

/// Smallest client share; each local split needs two training and two
/// test samples.
const MIN_CLIENT_SAMPLES: usize = 4;

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let all = config.dataset.load(config.seed)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut derived_rng(config.seed, &[stream::HOLDOUT]));
    let n_hold = ((config.holdout * all.len() as f64).round() as usize).max(1);
    let (hold_idx, pool_idx) = order.split_at(n_hold);
    let mut hold_idx = hold_idx.to_vec();
    let mut pool_idx = pool_idx.to_vec();
    hold_idx.sort_unstable();
    pool_idx.sort_unstable();

    let (hx, hy) = all.subset(&hold_idx);
    let (px, py) = all.subset(&pool_idx);
    let holdout = Dataset {
        features: hx,
        labels: hy,
        classes: all.classes,
    };
    let pool = Dataset::new(px, py)?;
    if pool.classes != all.classes {
        return Err(Error::invalid("holdout removed every sample of a class"));
    }
    let partitions = data::dirichlet_partition_min(&pool, config.k, config.alpha, config.seed, MIN_CLIENT_SAMPLES)?
        .iter()
        .map(|p| data::split_local(p, config.train_ratio, config.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        holdout,
        pool,
        partitions,
    })
}

#[derive(Debug, Clone)]
pub struct ClientResult {
    pub params: FlatParams,
    /// Mean batch loss of the last epoch, or the plain cross-entropy on the
    /// training split if no batch ran.
    pub last_epoch_loss: f64,
    /// Mined graph of the final batch, if augmentation ran.
    pub last_graph: Option<lra::MinedBatch>,
}

/// Local training of one client from the global parameters. Batches are
/// reshuffled per `(client, round, epoch)`; batches of fewer than two
/// samples are skipped. Non-finite losses, embeddings or parameters stop
/// training with [`Error::Diverged`].
pub fn client_execute(
    client_id: usize,
    round: usize,
    theta: &FlatParams,
    template: &MLPParams,
    config: &RunConfig,
    partition: &Partition,
    dataset: &Dataset,
) -> Result<ClientResult> {
    if partition.train_indices.is_empty() {
        return Err(Error::invalid(format!("client {client_id} has no training data")));
    }
    let cfg = config.lra_config();
    let mut flat = theta.clone();
    let mut params = template.unflatten(&flat)?;
    let mut last_epoch_loss = None;
    let mut last_graph = None;
    for epoch in 0..config.local_epochs {
        let mut order = partition.train_indices.clone();
        let path = [stream::SHUFFLE, client_id as u64, round as u64, epoch as u64];
        order.shuffle(&mut derived_rng(config.seed, &path));
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let (x, y) = dataset.subset(batch);
            let diverged = Error::Diverged {
                client: client_id,
                round,
                epoch,
            };
            let (loss, grads, mined) = match lra::loss_and_grad(&params, &x, &y, &cfg) {
                Err(Error::NonFinite(_)) => return Err(diverged),
                other => other?,
            };
            flat = model::sgd_step(&flat, &grads, config.lr)?;
            if !loss.total.is_finite() || flat.values.iter().any(|v| !v.is_finite()) {
                return Err(diverged);
            }
            params = template.unflatten(&flat)?;
            total += loss.total;
            batches += 1;
            last_graph = mined;
        }
        if batches > 0 {
            last_epoch_loss = Some(total / batches as f64);
        }
    }
    let last_epoch_loss = match last_epoch_loss {
        Some(l) => l,
        None => plain_loss(&params, partition, dataset)?,
    };
    Ok(ClientResult {
        params: flat,
        last_epoch_loss,
        last_graph,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOutcome {
    pub theta: FlatParams,
    pub weights: Vec<f64>,
    /// −1 for FedAvg, where no bargain is solved.
    pub residual: f64,
    pub converged: bool,
    pub deviations: DeviationMatrix,
}

/// Builds the deviation matrix and applies the configured aggregation. If
/// no client moved, the global model is returned unchanged with zero
/// weights.
pub fn server_execute(
    theta: &FlatParams,
    client_params: &[FlatParams],
    counts: &[usize],
    config: &RunConfig,
) -> Result<ServerOutcome> {
    if client_params.is_empty() {
        return Err(Error::invalid("no client results to aggregate"));
    }
    if counts.len() != client_params.len() {
        return Err(Error::invalid("one sample count per client is required"));
    }
    let g = gne::compute_deviations(theta, client_params)?;
    let (weights, residual, converged) = match config.aggregator {
        Aggregator::Fedavg => (gne::fedavg_weights(counts)?, -1.0, true),
        Aggregator::Gne => {
            if (0..g.k()).all(|k| g.column(k).iter().all(|&v| v == 0.0)) {
                (vec![0.0; g.k()], 0.0, true)
            } else {
                let sol = gne::nash_solve(&g, &NashOptions::default())?;
                (sol.p, sol.residual, sol.converged)
            }
        }
    };
    let theta = gne::aggregate(theta, &g, &weights)?;
    Ok(ServerOutcome {
        theta,
        weights,
        residual,
        converged,
        deviations: g,
    })
}

/// `cos(Δθ_k, δ)` for every column, with 0 for zero-norm columns.
pub fn cosine_diagnostic(g: &DeviationMatrix, delta: &[f64]) -> Result<Vec<f64>> {
    if delta.len() != g.dim() {
        return Err(Error::invalid(format!(
            "update has dimension {}, deviations {}",
            delta.len(),
            g.dim()
        )));
    }
    let dn = norm(delta);
    if dn == 0.0 {
        return Err(Error::invalid("cosine with a zero update is undefined"));
    }
    Ok((0..g.k())
        .map(|k| {
            let c = g.column(k);
            let cn = norm(c);
            if cn == 0.0 {
                0.0
            } else {
                (dot(c, delta) / (cn * dn)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of `params` on `(x, y)`, with augmentation applied within
/// chunks of the training batch size.
pub fn evaluate(params: &MLPParams, x: &Matrix, y: &[usize], config: &RunConfig) -> Result<f64> {
    let predicted = lra::predict_labels(params, x, &config.lra_config(), config.batch_size)?;
    Ok(accuracy(&predicted, y))
}

/// Mined graph of a client's final batch in a round.
#[derive(Debug, Clone, Serialize)]
pub struct GraphRecord {
    pub round: usize,
    pub client: usize,
    pub correlation: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub slim_iterations: usize,
    pub slim_converged: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Vec<RoundMetrics>,
    pub graphs: Vec<GraphRecord>,
    pub final_params: FlatParams,
}

pub fn run(config: &RunConfig) -> Result<Vec<RoundMetrics>> {
    Ok(run_detailed(config, false)?.metrics)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// [`run`], optionally keeping each client's last mined graph per round.
pub fn run_detailed(config: &RunConfig, keep_graphs: bool) -> Result<RunReport> {
    let prep = prepare(config)?;
    let arch = config.architecture(prep.pool.dim(), prep.pool.classes);
    let template = MLPParams::init(&arch, &mut derived_rng(config.seed, &[stream::INIT]));
    let mut theta = template.flatten();
    let counts: Vec<usize> = prep.partitions.iter().map(|p| p.train_indices.len()).collect();

    let (hx, hy) = (&prep.holdout.features, &prep.holdout.labels);
    let client_eval = |params: &MLPParams, p: &Partition| -> Result<f64> {
        let (x, y) = prep.pool.subset(&p.test_indices);
        evaluate(params, &x, &y, config)
    };

    let mut metrics = Vec::with_capacity(config.rounds + 1);
    let client_accuracy = prep
        .partitions
        .iter()
        .map(|p| client_eval(&template, p))
        .collect::<Result<Vec<_>>>()?;
    let per_client_loss = prep
        .partitions
        .iter()
        .map(|p| plain_loss(&template, p, &prep.pool))
        .collect::<Result<Vec<_>>>()?;
    metrics.push(RoundMetrics {
        round: 0,
        gfl_accuracy: evaluate(&template, hx, hy, config)?,
        pfl_accuracy: mean(&client_accuracy),
        client_accuracy,
        per_client_loss,
        cosine: vec![0.0; config.k],
        weights: vec![0.0; config.k],
        bargain_residual: -1.0,
        converged: true,
    });

    let mut graphs = Vec::new();
    for round in 1..=config.rounds {
        let results = prep
            .partitions
            .par_iter()
            .enumerate()
            .map(|(c, p)| client_execute(c, round, &theta, &template, config, p, &prep.pool))
            .collect::<Result<Vec<_>>>()?;

        let client_accuracy = results
            .par_iter()
            .zip(&prep.partitions)
            .map(|(r, p)| client_eval(&template.unflatten(&r.params)?, p))
            .collect::<Result<Vec<_>>>()?;
        let local: Vec<FlatParams> = results.iter().map(|r| r.params.clone()).collect();
        let outcome = server_execute(&theta, &local, &counts, config)?;
        let delta: Vec<f64> = outcome.theta.values.iter().zip(&theta.values).map(|(a, b)| a - b).collect();
        let cosine = if norm(&delta) > 0.0 {
            cosine_diagnostic(&outcome.deviations, &delta)?
        } else {
            vec![0.0; config.k]
        };
        theta = outcome.theta;
        let global = template.unflatten(&theta)?;

        if keep_graphs {
            for (client, r) in results.iter().enumerate() {
                if let Some(m) = &r.last_graph {
                    graphs.push(GraphRecord {
                        round,
                        client,
                        correlation: rows(&m.correlation),
                        b: rows(&m.slim.b),
                        slim_iterations: m.slim.iterations,
                        slim_converged: m.slim.converged,
                    });
                }
            }
        }
        metrics.push(RoundMetrics {
            round,
            gfl_accuracy: evaluate(&global, hx, hy, config)?,
            pfl_accuracy: mean(&client_accuracy),
            client_accuracy,
            per_client_loss: results.iter().map(|r| r.last_epoch_loss).collect(),
            cosine,
            weights: outcome.weights,
            bargain_residual: outcome.residual,
            converged: outcome.converged,
        });
    }
    Ok(RunReport {
        metrics,
        graphs,
        final_params: theta,
    })
}

/// Cross-entropy of the unaugmented model on a client's training split.
fn plain_loss(params: &MLPParams, partition: &Partition, dataset: &Dataset) -> Result<f64> {
    let (x, y) = dataset.subset(&partition.train_indices);
    model::cross_entropy(&model::predict(params, &model::feature_extract(params, &x)?)?, &y)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
