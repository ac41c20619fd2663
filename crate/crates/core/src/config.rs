//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [federation]
//! k = 20
//! aggregator = gne
//!
//! [lra]
//! enabled = true
//! ```
//!
//! Keys are the [`RunConfig`] field names, grouped under `federation`,
//! `lra`, `model` and `data`. `#` starts a comment. Unknown sections and
//! keys are errors, reported with their line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::federation::{Aggregator, DatasetSpec, RunConfig};

const SECTIONS: [&str; 4] = ["federation", "lra", "model", "data"];

/// Applies the settings in `text` on top of `base`. `path` only labels
/// errors.
pub fn parse_onto(base: RunConfig, text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg = base;
    let mut data = DataKeys::from(&cfg.dataset);
    let mut section: Option<String> = None;
    let mut seen: Vec<(String, String)> = Vec::new();
    let mut data_line = 0;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("malformed section header {content:?}")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key = value, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section
            .clone()
            .ok_or_else(|| err(line, format!("key {key:?} appears before any section")))?;
        if seen.iter().any(|(s, k)| *s == sec && k == key) {
            return Err(err(line, format!("duplicate key {key:?} in [{sec}]")));
        }
        seen.push((sec.clone(), key.to_string()));
        if sec == "data" {
            data_line = line;
        }
        set(&mut cfg, &mut data, &sec, key, value).map_err(|m| err(line, m))?;
    }
    cfg.dataset = data.into_spec().map_err(|m| err(data_line, m))?;
    Ok(cfg)
}

pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
    parse_onto(RunConfig::default(), text, path)
}

pub fn load_onto(base: RunConfig, path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_onto(base, &text, path)
}

fn value<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("invalid value {v:?} for {key}"))
}

fn widths(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| value(key, w.trim())).collect()
}

/// Dataset keys gathered before the source is known.
#[derive(Default)]
struct DataKeys {
    source: String,
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    path: Option<PathBuf>,
}

impl From<&DatasetSpec> for DataKeys {
    fn from(spec: &DatasetSpec) -> Self {
        let synthetic = match DatasetSpec::default() {
            DatasetSpec::Synthetic {
                classes,
                dim,
                per_class,
                spread,
            } => (classes, dim, per_class, spread),
            DatasetSpec::Csv { .. } => unreachable!("default dataset is synthetic"),
        };
        match spec {
            DatasetSpec::Synthetic {
                classes,
                dim,
                per_class,
                spread,
            } => DataKeys {
                source: "synthetic".into(),
                classes: *classes,
                dim: *dim,
                per_class: *per_class,
                spread: *spread,
                path: None,
            },
            DatasetSpec::Csv { path } => DataKeys {
                source: "csv".into(),
                classes: synthetic.0,
                dim: synthetic.1,
                per_class: synthetic.2,
                spread: synthetic.3,
                path: Some(path.clone()),
            },
        }
    }
}

impl DataKeys {
    fn into_spec(self) -> std::result::Result<DatasetSpec, String> {
        match self.source.as_str() {
            "synthetic" => Ok(DatasetSpec::Synthetic {
                classes: self.classes,
                dim: self.dim,
                per_class: self.per_class,
                spread: self.spread,
            }),
            "csv" => self
                .path
                .map(|path| DatasetSpec::Csv { path })
                .ok_or_else(|| "data source csv needs a path".to_string()),
            other => Err(format!("unknown data source {other:?}")),
        }
    }
}

fn set(cfg: &mut RunConfig, data: &mut DataKeys, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
    match (section, key) {
        ("federation", "k") => cfg.k = value(key, v)?,
        ("federation", "rounds") => cfg.rounds = value(key, v)?,
        ("federation", "local_epochs") => cfg.local_epochs = value(key, v)?,
        ("federation", "batch_size") => cfg.batch_size = value(key, v)?,
        ("federation", "lr") => cfg.lr = value(key, v)?,
        ("federation", "alpha") => cfg.alpha = value(key, v)?,
        ("federation", "seed") => cfg.seed = value(key, v)?,
        ("federation", "aggregator") => {
            cfg.aggregator = v.parse::<Aggregator>().map_err(|e| e.to_string())?
        }
        ("federation", "holdout") => cfg.holdout = value(key, v)?,
        ("federation", "train_ratio") => cfg.train_ratio = value(key, v)?,
        ("lra", "enabled") => cfg.lra_enabled = value(key, v)?,
        ("lra", "lambda_r") => cfg.lambda_r = value(key, v)?,
        ("lra", "lambda_cd") => cfg.lambda_cd = value(key, v)?,
        ("lra", "tau1") => cfg.tau1 = value(key, v)?,
        ("lra", "tau_edge") => cfg.tau_edge = value(key, v)?,
        ("lra", "mp_steps") => cfg.mp_steps = value(key, v)?,
        ("lra", "attention_softmax") => cfg.attention_softmax = value(key, v)?,
        ("lra", "slim_max_iter") => cfg.slim_max_iter = value(key, v)?,
        ("lra", "slim_tol") => cfg.slim_tol = value(key, v)?,
        ("model", "extractor_hidden") => cfg.extractor_hidden = widths(key, v)?,
        ("model", "d_emb") => cfg.d_emb = value(key, v)?,
        ("model", "predictor_hidden") => cfg.predictor_hidden = widths(key, v)?,
        ("data", "source") => data.source = v.to_string(),
        ("data", "classes") => data.classes = value(key, v)?,
        ("data", "dim") => data.dim = value(key, v)?,
        ("data", "per_class") => data.per_class = value(key, v)?,
        ("data", "spread") => data.spread = value(key, v)?,
        ("data", "path") => data.path = Some(PathBuf::from(v)),
        _ => return Err(format!("unknown key {key:?} in [{section}]")),
    }
    Ok(())
}

fn join(ws: &[usize]) -> String {
    ws.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

/// Every setting of `cfg` in the file format; parsing it gives `cfg` back.
pub fn to_text(cfg: &RunConfig) -> String {
    let data = match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            per_class,
            spread,
        } => vec![
            ("source", "synthetic".to_string()),
            ("classes", classes.to_string()),
            ("dim", dim.to_string()),
            ("per_class", per_class.to_string()),
            ("spread", spread.to_string()),
        ],
        DatasetSpec::Csv { path } => vec![
            ("source", "csv".to_string()),
            ("path", path.display().to_string()),
        ],
    };
    let sections = [
        (
            "federation",
            vec![
                ("k", cfg.k.to_string()),
                ("rounds", cfg.rounds.to_string()),
                ("local_epochs", cfg.local_epochs.to_string()),
                ("batch_size", cfg.batch_size.to_string()),
                ("lr", cfg.lr.to_string()),
                ("alpha", cfg.alpha.to_string()),
                ("seed", cfg.seed.to_string()),
                ("aggregator", cfg.aggregator.to_string()),
                ("holdout", cfg.holdout.to_string()),
                ("train_ratio", cfg.train_ratio.to_string()),
            ],
        ),
        (
            "lra",
            vec![
                ("enabled", cfg.lra_enabled.to_string()),
                ("lambda_r", cfg.lambda_r.to_string()),
                ("lambda_cd", cfg.lambda_cd.to_string()),
                ("tau1", cfg.tau1.to_string()),
                ("tau_edge", cfg.tau_edge.to_string()),
                ("mp_steps", cfg.mp_steps.to_string()),
                ("attention_softmax", cfg.attention_softmax.to_string()),
                ("slim_max_iter", cfg.slim_max_iter.to_string()),
                ("slim_tol", cfg.slim_tol.to_string()),
            ],
        ),
        (
            "model",
            vec![
                ("extractor_hidden", join(&cfg.extractor_hidden)),
                ("d_emb", cfg.d_emb.to_string()),
                ("predictor_hidden", join(&cfg.predictor_hidden)),
            ],
        ),
        ("data", data),
    ];
    let mut s = String::new();
    for (i, (name, entries)) in sections.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        writeln!(s, "[{name}]").expect("write to string");
        for (k, v) in entries {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
    }
    s
}
