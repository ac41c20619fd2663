//! Datasets, Dirichlet label-skew partitioning and local train/test splits.
//!
//! Every random choice comes from a ChaCha8 stream derived from the master
//! seed and a path of counters, so results never depend on call order
//! across clients.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Stream labels for [`derived_rng`].
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const HOLDOUT: u64 = 6;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// ChaCha8 generator keyed by `seed` and a path such as
/// `[stream::SHUFFLE, client, round, epoch]`.
pub fn derived_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let key = path
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)));
    ChaCha8Rng::seed_from_u64(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if !features.is_finite() {
            return Err(Error::invalid("non-finite feature value"));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let hist = histogram(&labels, classes);
        if let Some(missing) = hist.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Gaussian mixture with one isotropic component per class. Means sit on
/// the unit simplex vertices `e_c` when `dim ≥ classes`, otherwise evenly
/// on the unit circle in the first two coordinates. Samples are interleaved
/// by class.
pub fn generate_synthetic(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 || per_class < 8 {
        return Err(Error::invalid(
            "synthetic data needs classes ≥ 2, dim ≥ 2, per_class ≥ 8",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be finite and nonnegative"));
    }
    let mean = |c: usize| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        if dim >= classes {
            m[c] = 1.0;
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            m[0] = angle.cos();
            m[1] = angle.sin();
        }
        m
    };
    let means: Vec<Vec<f64>> = (0..classes).map(mean).collect();
    let mut rng = derived_rng(seed, &[stream::DATA]);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for m in &means[c] {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(m + spread * noise);
        }
        labels.push(c);
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels)
}

/// Comma-separated rows of features followed by an integer label; no header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(parse_err(row, "need at least one feature and a label".into()));
        }
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(parse_err(row, format!("expected {} fields", width.unwrap_or(0))));
        }
        let (label, feats) = fields.split_last().expect("non-empty");
        for f in feats {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(row, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| parse_err(row, format!("bad label {label:?}")))?,
        );
    }
    let Some(width) = width else {
        return Err(parse_err(1, "empty file".into()));
    };
    let features = Matrix::from_vec(labels.len(), width - 1, data)?;
    Dataset::new(features, labels).map_err(|e| parse_err(0, e.to_string()))
}

/// Writes the dataset in the format read by [`load_csv`], with
/// shortest round-trip float formatting.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        for v in ds.features.row(i) {
            write!(out, "{v},").expect("write to string");
        }
        writeln!(out, "{y}").expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Splits each class across `k` clients in Dirichlet(`alpha`) proportions.
/// Every client receives at least one sample.
pub fn dirichlet_partition(ds: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Vec<Partition>> {
    dirichlet_partition_min(ds, k, alpha, seed, 1)
}

/// [`dirichlet_partition`] requiring `min_size` samples per client. A draw
/// that leaves a client short is discarded whole and redrawn from a fresh
/// stream, up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn dirichlet_partition_min(
    ds: &Dataset,
    k: usize,
    alpha: f64,
    seed: u64,
    min_size: usize,
) -> Result<Vec<Partition>> {
    if k == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha must be positive and finite"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let by_class: Vec<Vec<usize>> = (0..ds.classes)
        .map(|c| (0..ds.len()).filter(|&i| ds.labels[i] == c).collect())
        .collect();

    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = derived_rng(seed, &[stream::PARTITION, attempt as u64]);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut valid = true;
        for members in &by_class {
            let Some(props) = dirichlet(&gamma, k, &mut rng) else {
                valid = false;
                break;
            };
            let counts = largest_remainder(&props, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let mut start = 0;
            for (client, &n) in counts.iter().enumerate() {
                assigned[client].extend_from_slice(&shuffled[start..start + n]);
                start += n;
            }
        }
        if valid && assigned.iter().all(|a| a.len() >= min_size) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(client_id, mut indices)| {
                    indices.sort_unstable();
                    Partition {
                        client_id,
                        indices,
                        train_indices: Vec::new(),
                        test_indices: Vec::new(),
                    }
                })
                .collect());
        }
    }
    Err(Error::PartitionFailed {
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

/// One Dirichlet(`alpha`, …, `alpha`) draw of length `k`.
pub fn dirichlet_proportions(alpha: f64, k: usize, rng: &mut impl Rng) -> Result<Option<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dirichlet(&gamma, k, rng))
}

/// Normalized Gamma draws; `None` if every draw underflowed.
fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut impl Rng) -> Option<Vec<f64>> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.into_iter().map(|g| g / total).collect())
}

/// Integer counts summing to `total`: floors of `p·total`, with the
/// leftover units going to the largest fractional parts (ties to the lower
/// index).
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Uniform random split of a client's indices: `round(ratio·n)` train
/// samples, the rest test.
pub fn split_local(p: &Partition, ratio: f64, seed: u64) -> Result<Partition> {
    if p.indices.len() < 4 {
        return Err(Error::invalid(format!(
            "client {} has {} samples; a split needs at least 4",
            p.client_id,
            p.indices.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split ratio must lie in (0, 1)"));
    }
    let mut shuffled = p.indices.clone();
    shuffled.shuffle(&mut derived_rng(seed, &[stream::SPLIT, p.client_id as u64]));
    let n_train = (ratio * shuffled.len() as f64).round() as usize;
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Partition {
        train_indices: train,
        test_indices: test,
        ..p.clone()
    })
}

/// Partitions with the parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub clients: Vec<Partition>,
}

impl PartitionSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Shannon entropy (nats) of a label histogram.
pub fn label_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
