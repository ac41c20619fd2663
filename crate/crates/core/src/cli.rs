//! The `fedrane` command line: `run`, `solve-nash`, `partition` and
//! `report`.
//!
//! Exit codes: 0 on success, 1 for runtime failures, 2 for usage and
//! parse errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::data::{self, PartitionSet};
use crate::error::Error;
use crate::federation::{self, Aggregator, RoundMetrics, RunConfig};
use crate::gne::{self, DeviationMatrix, NashOptions};
use crate::numeric::Matrix;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const SEED_ENV: &str = "FEDRANE_SEED";

#[derive(Debug, Parser)]
#[command(name = "fedrane", version, about = "Federated learning with relational augmentation and Nash-bargaining aggregation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federated experiment and write its metrics.
    Run(RunArgs),
    /// Solve the bargaining weights for a deviation matrix given as JSON.
    SolveNash {
        input: PathBuf,
    },
    /// Write the client partitions and label histograms of a configuration.
    Partition(PartitionArgs),
    /// Summarize the runs found in a directory.
    Report {
        run_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
    #[arg(long)]
    pub no_lra: bool,
    #[arg(long)]
    pub attention_softmax: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Also write each client's last mined graph per round.
    #[arg(long)]
    pub dump_graphs: bool,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// A failed command: usage problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::SolveNash { input } => cmd_solve_nash(&input).map(|out| println!("{out}")),
        Command::Partition(args) => cmd_partition(&args),
        Command::Report { run_dir } => cmd_report(&run_dir).map(|table| print!("{table}")),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

/// Defaults, then `FEDRANE_SEED`, then the config file, then flags.
pub fn resolve_config(o: &Overrides) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
    }
    if let Some(path) = &o.config {
        cfg = config::load_onto(cfg, path).map_err(|e| match e {
            Error::Io { .. } => Failure::Runtime(e.to_string()),
            other => Failure::Usage(other.to_string()),
        })?;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(a) = o.aggregator {
        cfg.aggregator = a;
    }
    if o.no_lra {
        cfg.lra_enabled = false;
    }
    if o.attention_softmax {
        cfg.attention_softmax = true;
    }
    if let Some(alpha) = o.alpha {
        cfg.alpha = alpha;
    }
    if let Some(k) = o.clients {
        cfg.k = k;
    }
    if let Some(t) = o.rounds {
        cfg.rounds = t;
    }
    if let Some(e) = o.epochs {
        cfg.local_epochs = e;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Refuses a non-empty `out` unless `force` is set.
fn check_out(out: &Path, force: bool) -> CmdResult {
    if out.is_dir() {
        let occupied = fs::read_dir(out)
            .map_err(|e| Failure::Runtime(Error::io(out, e).to_string()))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Failure::Usage(format!(
                "{} is not empty; pass --force to replace it",
                out.display()
            )));
        }
    } else if out.exists() {
        return Err(Failure::Usage(format!("{} is not a directory", out.display())));
    }
    Ok(())
}

/// Writes a set of files into `out` all at once: they are staged in a
/// sibling directory that replaces `out` only after every write succeeded.
fn write_dir(out: &Path, force: bool, files: &[(&str, String)]) -> CmdResult {
    check_out(out, force)?;
    let io = |p: &Path, e: std::io::Error| Failure::Runtime(Error::io(p, e).to_string());
    let name = out
        .file_name()
        .ok_or_else(|| Failure::Usage(format!("{} has no directory name", out.display())))?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| io(&parent, e))?;
    let mut staged_name = OsString::from(".");
    staged_name.push(name);
    staged_name.push(".partial");
    let staged = parent.join(staged_name);
    if staged.exists() {
        fs::remove_dir_all(&staged).map_err(|e| io(&staged, e))?;
    }
    fs::create_dir(&staged).map_err(|e| io(&staged, e))?;
    for (file, contents) in files {
        let path = staged.join(file);
        fs::write(&path, contents).map_err(|e| io(&path, e))?;
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| io(out, e))?;
    }
    fs::rename(&staged, out).map_err(|e| io(out, e))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "log.json";
pub const SNAPSHOT_FILE: &str = "config.cfg";
pub const MODEL_FILE: &str = "model.json";
pub const GRAPHS_FILE: &str = "graphs.jsonl";
pub const COSINE_FILE: &str = "cosine_grid.csv";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub config: RunConfig,
    pub metrics: Vec<RoundMetrics>,
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = String::from("round,gfl,pfl,residual,converged,min_cosine,mean_cosine\n");
    for m in metrics {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.round,
            m.gfl_accuracy,
            m.pfl_accuracy,
            m.bargain_residual,
            m.converged,
            m.min_cosine(),
            m.mean_cosine()
        )
        .expect("write to string");
    }
    s
}

fn to_json<T: Serialize>(v: &T) -> CmdResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))
}

pub fn cmd_run(args: &RunArgs) -> CmdResult {
    let cfg = resolve_config(&args.overrides)?;
    check_out(&args.out, args.force)?;
    let report = federation::run_detailed(&cfg, args.dump_graphs)?;
    let log = RunLog {
        config: cfg.clone(),
        metrics: report.metrics,
    };
    let mut files = vec![
        (METRICS_FILE, metrics_csv(&log.metrics)),
        (LOG_FILE, to_json(&log)?),
        (SNAPSHOT_FILE, config::to_text(&cfg)),
        (MODEL_FILE, to_json(&report.final_params)?),
    ];
    if args.dump_graphs {
        let mut lines = String::new();
        for g in &report.graphs {
            lines.push_str(&serde_json::to_string(g).map_err(|e| Failure::Runtime(e.to_string()))?);
            lines.push('\n');
        }
        files.push((GRAPHS_FILE, lines));
    }
    write_dir(&args.out, args.force, &files)?;
    let last = log.metrics.last().expect("round 0 is always recorded");
    eprintln!(
        "{} rounds: G-FL {:.4}, P-FL {:.4} -> {}",
        cfg.rounds,
        last.gfl_accuracy,
        last.pfl_accuracy,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct NashInput {
    g: Vec<f64>,
    d: usize,
    k: usize,
}

#[derive(Debug, Serialize)]
struct NashOutput {
    p: Vec<f64>,
    residual: f64,
    converged: bool,
    utilities: Vec<f64>,
    iterations: usize,
}

/// Reads `{g, d, k}` (row-major `d × k`) and returns the solution as JSON.
pub fn cmd_solve_nash(input: &Path) -> CmdResult<String> {
    let text = fs::read_to_string(input).map_err(|e| Failure::Runtime(Error::io(input, e).to_string()))?;
    let parsed: NashInput =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    if parsed.g.len() != parsed.d * parsed.k || parsed.k == 0 {
        return Err(Failure::Usage(format!(
            "{}: g holds {} values, expected d·k = {}",
            input.display(),
            parsed.g.len(),
            parsed.d * parsed.k
        )));
    }
    let g = DeviationMatrix::from_matrix(&Matrix::from_vec(parsed.d, parsed.k, parsed.g)?)?;
    let sol = gne::nash_solve(&g, &NashOptions::default())?;
    let out = NashOutput {
        p: sol.p,
        residual: sol.residual,
        converged: sol.converged,
        utilities: sol.utilities,
        iterations: sol.iterations,
    };
    to_json(&out)
}

pub const PARTITION_FILE: &str = "partitions.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

/// Writes the partitions a run with the same configuration would use, and
/// one label histogram row per client.
pub fn cmd_partition(args: &PartitionArgs) -> CmdResult {
    let cfg = resolve_config(&args.overrides)?;
    check_out(&args.out, args.force)?;
    let prep = federation::prepare(&cfg)?;
    let set = PartitionSet {
        k: cfg.k,
        alpha: cfg.alpha,
        seed: cfg.seed,
        clients: prep.partitions,
    };
    let classes = prep.pool.classes;
    let mut hist = String::from("client");
    for c in 0..classes {
        write!(hist, ",class_{c}").expect("write to string");
    }
    hist.push_str(",entropy\n");
    for p in &set.clients {
        let labels: Vec<usize> = p.indices.iter().map(|&i| prep.pool.labels[i]).collect();
        let h = data::histogram(&labels, classes);
        write!(hist, "{}", p.client_id).expect("write to string");
        for n in &h {
            write!(hist, ",{n}").expect("write to string");
        }
        writeln!(hist, ",{}", data::label_entropy(&h)).expect("write to string");
    }
    let json = to_json(&set)?;
    write_dir(
        &args.out,
        args.force,
        &[(PARTITION_FILE, json), (HISTOGRAM_FILE, hist)],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub dir: PathBuf,
    pub final_gfl: f64,
    pub best_gfl: f64,
    pub final_pfl: f64,
    pub best_pfl: f64,
}

pub fn variant_name(cfg: &RunConfig) -> String {
    if cfg.lra_enabled {
        format!("{}+lra", cfg.aggregator)
    } else {
        cfg.aggregator.to_string()
    }
}

/// Run directories under `dir`: `dir` itself if it holds a log, otherwise
/// its immediate subdirectories that do, in name order.
pub fn find_runs(dir: &Path) -> CmdResult<Vec<PathBuf>> {
    if dir.join(LOG_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Failure::Runtime(Error::io(dir, e).to_string()))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LOG_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Failure::Runtime(format!("no run logs found under {}", dir.display())));
    }
    Ok(runs)
}

pub fn read_log(run: &Path) -> CmdResult<RunLog> {
    let path = run.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Failure::Runtime(Error::io(&path, e).to_string()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Rows are rounds, columns clients.
pub fn cosine_grid_csv(metrics: &[RoundMetrics]) -> String {
    let k = metrics.first().map_or(0, |m| m.cosine.len());
    let mut s = String::from("round");
    for c in 0..k {
        write!(s, ",client_{c}").expect("write to string");
    }
    s.push('\n');
    for m in metrics {
        write!(s, "{}", m.round).expect("write to string");
        for v in &m.cosine {
            write!(s, ",{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

/// Collects one row per run, sorted by final G-FL (descending), and writes
/// each run's cosine grid next to its log.
pub fn report_rows(dir: &Path) -> CmdResult<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for run in find_runs(dir)? {
        let log = read_log(&run)?;
        let last = log
            .metrics
            .last()
            .ok_or_else(|| Failure::Runtime(format!("{} has no metrics", run.display())))?;
        let best = |f: fn(&RoundMetrics) -> f64| log.metrics.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        rows.push(ReportRow {
            variant: variant_name(&log.config),
            dir: run.clone(),
            final_gfl: last.gfl_accuracy,
            best_gfl: best(|m| m.gfl_accuracy),
            final_pfl: last.pfl_accuracy,
            best_pfl: best(|m| m.pfl_accuracy),
        });
        let grid = run.join(COSINE_FILE);
        fs::write(&grid, cosine_grid_csv(&log.metrics))
            .map_err(|e| Failure::Runtime(Error::io(&grid, e).to_string()))?;
    }
    rows.sort_by(|a, b| b.final_gfl.total_cmp(&a.final_gfl).then_with(|| a.dir.cmp(&b.dir)));
    Ok(rows)
}

pub fn cmd_report(dir: &Path) -> CmdResult<String> {
    let rows = report_rows(dir)?;
    let mut s = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}  {}\n",
        "variant", "G-FL", "best", "P-FL", "best", "run"
    );
    for r in rows {
        writeln!(
            s,
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4}  {}",
            r.variant,
            r.final_gfl,
            r.best_gfl,
            r.final_pfl,
            r.best_pfl,
            r.dir.display()
        )
        .expect("write to string");
    }
    Ok(s)
}
