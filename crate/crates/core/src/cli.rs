//! The `iot` command line: certificates, single solves, experiments and the
//! limit checks, written as CSV tables and pretty JSON summaries.
//!
//! Every run is described by a [`RunConfig`]. It starts from per-command
//! defaults, is overlaid with an optional JSON file (`--config`), then with
//! explicit flags, and is echoed into every summary so a run can be replayed.
//!
//! ε always follows the Gaussian convention of [`GaussianModel`]; sample solves
//! use the matching Sinkhorn value `2ε`.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::IotError;
use crate::eot::SUPPORT_TOL;
use crate::gaussian::{
    gaussian_hessian, limit_certificate_inf, limit_certificate_zero, symmetric_certificate,
    symmetric_restricted_inverse_hessian, GaussianModel,
};
use crate::certificates::vanilla_certificate;
use crate::graph::{
    analytic_null_threshold, certificate_profile, gen_circular, gen_erdos_renyi, gen_planar, graph_model,
    log_grid, prepare_basis, run_population_trial, run_sparsistency_trial, sample_complexity_sweep,
    sample_coupling, shifted_laplacian_cost, Graph, TrialOptions, TrialResult, UNREACHABLE,
};
use crate::iot::{null_threshold, solve, SolverConfig};
use crate::limits::{glasso_solve, lasso_solve, LimitProblemSpec};
use crate::population::{solve_on_model, PopulationConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Usage problems exit with 2, numerical ones with 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<IotError> for CliError {
    fn from(e: IotError) -> Self {
        match e {
            IotError::Input(m) => CliError::Usage(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Usage(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("json: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Circular,
    Planar,
    Erdos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Lasso,
    Glasso,
    Both,
}

/// `start:stop:count`, log-spaced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSpec {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl LogSpec {
    pub fn values(&self) -> crate::Result<Vec<f64>> {
        log_grid(self.start, self.stop, self.count)
    }
}

impl FromStr for LogSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:count, got {s:?}"));
        }
        let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
        let start = num(parts[0])?;
        let stop = num(parts[1])?;
        let count = parts[2].trim().parse::<usize>().map_err(|e| format!("{:?}: {e}", parts[2]))?;
        if !(start > 0.0 && stop > 0.0 && start.is_finite() && stop.is_finite()) || count == 0 {
            return Err(format!("grid {s:?} needs positive finite endpoints and count ≥ 1"));
        }
        Ok(Self { start, stop, count })
    }
}

impl fmt::Display for LogSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // `{:?}` on f64 is the shortest string that parses back exactly.
        write!(f, "{:?}:{:?}:{}", self.start, self.stop, self.count)
    }
}

impl Serialize for LogSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LogSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a run depends on. Fields a command does not use are still
/// recorded, so one type serves all commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub command: String,
    pub graph: GraphKind,
    pub n: usize,
    /// Edge probability for `erdos`.
    pub p: f64,
    pub directed: bool,
    pub eps: Vec<f64>,
    /// Multiples of the analytic null threshold at each ε.
    pub lambda_grid: LogSpec,
    /// Absolute penalty for `solve`; overrides `lambda_rel`.
    pub lambda: Option<f64>,
    /// Penalty as a multiple of the null threshold (`solve`, `complexity`).
    pub lambda_rel: f64,
    pub samples: usize,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Exact moments instead of samples (`sparsistency`).
    pub population: bool,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub population_tol: f64,
    pub limit_tol: f64,
    pub branch: Branch,
    pub lambda0: f64,
    pub lasso_eps: LogSpec,
    pub glasso_eps: LogSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let trial = TrialOptions::default();
        Self {
            schema_version: SCHEMA_VERSION,
            command: String::new(),
            graph: GraphKind::Circular,
            n: 20,
            p: 0.1,
            directed: false,
            eps: vec![0.1, 1.0, 10.0],
            lambda_grid: LogSpec {
                start: 1.0,
                stop: 1e-3,
                count: 20,
            },
            lambda: None,
            lambda_rel: 0.05,
            samples: 10_000,
            n_grid: vec![250, 1000, 4000, 16000],
            seeds: vec![0, 1, 2],
            population: false,
            grad_tol: trial.grad_tol,
            max_iter: trial.max_iter,
            population_tol: PopulationConfig::default().tol,
            limit_tol: 1e-12,
            branch: Branch::Both,
            lambda0: 0.1,
            lasso_eps: LogSpec {
                start: 1.0,
                stop: 1e3,
                count: 7,
            },
            glasso_eps: LogSpec {
                start: 1.0,
                stop: 1e-3,
                count: 7,
            },
        }
    }
}

impl RunConfig {
    pub fn for_command(command: &str) -> Self {
        let mut c = Self {
            command: command.to_string(),
            ..Self::default()
        };
        match command {
            "complexity" => {
                c.n = 6;
                c.eps = vec![5.0];
                c.seeds = (0..10).collect();
            }
            "solve" => {
                c.n = 6;
                c.eps = vec![1.0];
                c.samples = 1000;
                c.seeds = vec![0];
            }
            "limits" => {
                c.n = 4;
                c.seeds = vec![0];
            }
            _ => {}
        }
        c
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n == 0 {
            return usage("--n must be positive");
        }
        if !(0.0..=1.0).contains(&self.p) {
            return usage(format!("--p must be in [0, 1], got {}", self.p));
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return usage("--eps needs positive finite values");
        }
        if self.seeds.is_empty() {
            return usage("--seeds needs at least one seed");
        }
        if !(self.grad_tol > 0.0) || self.max_iter == 0 {
            return usage("tolerances must be positive");
        }
        if !(self.lambda_rel >= 0.0) || !self.lambda_rel.is_finite() {
            return usage("--lambda-rel must be non-negative");
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return usage("--lambda must be non-negative");
            }
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return usage("--lambda0 must be non-negative");
        }
        Ok(())
    }

    fn trial_options(&self) -> TrialOptions {
        TrialOptions {
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
        }
    }

    pub fn build_graph(&self) -> CliResult<Graph> {
        let seed = self.seeds[0];
        Ok(match self.graph {
            GraphKind::Circular => gen_circular(self.n)?,
            GraphKind::Planar => gen_planar(self.n)?,
            GraphKind::Erdos => gen_erdos_renyi(self.n, self.p, seed)?,
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "iot", version, about = "Sparse inverse entropic optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certificate values z_ij of a graph cost for each ε.
    Certificate(CertificateArgs),
    /// Estimate a sparse cost from paired samples.
    Solve(SolveArgs),
    /// Recovery or sample-complexity experiments.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Distance to the Lasso (ε → ∞) and graphical lasso (ε → 0) limits.
    Limits(LimitsArgs),
}

#[derive(Debug, Subcommand)]
pub enum ExperimentKind {
    /// Support errors along a λ grid, per ε and seed.
    Sparsistency(SparsistencyArgs),
    /// ‖A_n − A_∞‖ over sample sizes and the log-log slope.
    Complexity(ComplexityArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON path; defaults to `<out>.summary.json` when `--out` is given.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub graph: Option<GraphKind>,
    /// Number of vertices.
    #[arg(long)]
    pub n: Option<usize>,
    /// Edge probability of the Erdős–Rényi graph.
    #[arg(long)]
    pub p: Option<f64>,
    /// Comma-separated ε values.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CertificateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Keep only arcs i → j with i > j (non-symmetric cost).
    #[arg(long)]
    pub directed: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sample CSV with header x0,…,y0,…; generated from the graph model when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of generated samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Absolute penalty in the units of the input data.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Penalty as a multiple of the data's null threshold.
    #[arg(long)]
    pub lambda_rel: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SparsistencyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `start:stop:count` in multiples of the analytic null threshold.
    #[arg(long)]
    pub lambda_grid: Option<LogSpec>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Use the exact Gaussian moments instead of samples.
    #[arg(long)]
    pub population: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    /// Penalty as a multiple of the analytic null threshold.
    #[arg(long)]
    pub lambda_rel: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct LimitsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// CSV matrix (no header) for Â; the graph's shifted Laplacian otherwise.
    #[arg(long)]
    pub a_hat: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub branch: Option<Branch>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// ε grid for the Lasso branch (λ = λ₀/ε).
    #[arg(long)]
    pub lasso_eps: Option<LogSpec>,
    /// ε grid for the graphical lasso branch (λ = λ₀ε).
    #[arg(long)]
    pub glasso_eps: Option<LogSpec>,
}

fn load_config(command: &str, common: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let mut c: RunConfig = serde_json::from_reader(io::BufReader::new(file))
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if c.command.is_empty() {
                c.command = command.to_string();
            }
            if c.command != command {
                return usage(format!("config is for {:?}, not {command:?}", c.command));
            }
            c
        }
        None => RunConfig::for_command(command),
    };
    if let Some(g) = common.graph {
        cfg.graph = g;
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(p) = common.p {
        cfg.p = p;
    }
    if let Some(e) = &common.eps {
        cfg.eps = e.clone();
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(t) = common.grad_tol {
        cfg.grad_tol = t;
    }
    if let Some(m) = common.max_iter {
        cfg.max_iter = m;
    }
    Ok(cfg)
}

/// Caps the global rayon pool with `IOT_THREADS`.
pub fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("IOT_THREADS") {
        let k: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("IOT_THREADS must be a positive integer, got {v:?}")))?;
        if k == 0 {
            return usage("IOT_THREADS must be positive");
        }
        // A second initialization (tests, embedding) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("iot: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    init_threads()?;
    match &cli.command {
        Command::Certificate(a) => cmd_certificate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Experiment { kind } => match kind {
            ExperimentKind::Sparsistency(a) => cmd_sparsistency(a),
            ExperimentKind::Complexity(a) => cmd_complexity(a),
        },
        Command::Limits(a) => cmd_limits(a),
    }
}

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut w = open_out(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Summary next to a CSV: explicit path, `<out>.summary.json`, or stderr.
fn write_summary<T: Serialize>(common: &CommonArgs, value: &T) -> CliResult<()> {
    let path = common.summary.clone().or_else(|| common.out.as_ref().map(|o| o.with_extension("summary.json")));
    match path {
        Some(p) => write_json(Some(&p), value),
        None => {
            let mut e = io::stderr();
            serde_json::to_writer_pretty(&mut e, value)?;
            writeln!(e)?;
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct CertificateCsvRow {
    i: usize,
    j: usize,
    /// Empty when `j` is unreachable from `i`.
    d_geod: Option<usize>,
    eps: f64,
    z: f64,
    on_support: bool,
}

#[derive(Debug, Serialize)]
struct MarginEntry {
    eps: f64,
    margin: f64,
}

#[derive(Debug, Serialize)]
struct CertificateSummary {
    schema_version: u32,
    csv_schema: &'static str,
    config: RunConfig,
    margins: Vec<MarginEntry>,
}

pub fn cmd_certificate(args: &CertificateArgs) -> CliResult<()> {
    let mut cfg = load_config("certificate", &args.common)?;
    if args.directed {
        cfg.directed = true;
    }
    cfg.validate()?;
    let g = cfg.build_graph()?;
    let profile = certificate_profile(&g, &cfg.eps, cfg.directed)?;
    let mut w = csv::Writer::from_writer(open_out(args.common.out.as_deref())?);
    for r in &profile.rows {
        w.serialize(CertificateCsvRow {
            i: r.i,
            j: r.j,
            d_geod: (r.d_geod != UNREACHABLE).then_some(r.d_geod),
            eps: r.eps,
            z: r.z,
            on_support: r.on_support,
        })?;
    }
    w.flush()?;
    let summary = CertificateSummary {
        schema_version: SCHEMA_VERSION,
        csv_schema: "certificate/1",
        margins: profile.margins.iter().map(|&(eps, margin)| MarginEntry { eps, margin }).collect(),
        config: cfg,
    };
    write_summary(&args.common, &summary)
}

/// Reads paired samples; the header must be `x0,…,x{d1-1},y0,…,y{d2-1}`.
pub fn read_samples(path: &Path) -> CliResult<(DMatrix<f64>, DMatrix<f64>)> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    read_samples_from(file)
}

pub fn read_samples_from<R: io::Read>(reader: R) -> CliResult<(DMatrix<f64>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CliError::Usage(format!("line 1: {e}")))?
        .clone();
    let d1 = header.iter().take_while(|h| h.starts_with('x')).count();
    let d2 = header.len() - d1;
    let expected: Vec<String> = (0..d1).map(|k| format!("x{k}")).chain((0..d2).map(|k| format!("y{k}"))).collect();
    if d1 == 0 || d2 == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return usage(format!(
            "line 1: header must be x0,…,x{{d1-1}},y0,…,y{{d2-1}}, got {:?}",
            header.iter().collect::<Vec<_>>().join(",")
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return usage(format!("line {line}: {e}")),
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() != d1 + d2 {
            return usage(format!("line {line}: expected {} fields, found {}", d1 + d2, record.len()));
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Usage(format!("line {line}: field {} is not a number: {field:?}", k + 1)))?;
            if !v.is_finite() {
                return usage(format!("line {line}: field {} is not finite", k + 1));
            }
            if k < d1 {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = xs.len() / d1;
    if n < 2 {
        return usage("need at least two sample rows");
    }
    Ok((DMatrix::from_row_slice(n, d1, &xs), DMatrix::from_row_slice(n, d2, &ys)))
}

pub fn write_samples<W: io::Write>(w: W, x: &DMatrix<f64>, y: &DMatrix<f64>) -> CliResult<()> {
    let mut wr = csv::Writer::from_writer(w);
    let header: Vec<String> = (0..x.ncols()).map(|k| format!("x{k}")).chain((0..y.ncols()).map(|k| format!("y{k}"))).collect();
    wr.write_record(&header)?;
    for i in 0..x.nrows() {
        let row: Vec<String> = x.row(i).iter().chain(y.row(i).iter()).map(|v| format!("{v:?}")).collect();
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Triplet {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SolveOutput {
    pub schema_version: u32,
    pub config: RunConfig,
    pub input: Option<String>,
    pub n_samples: usize,
    pub d1: usize,
    pub d2: usize,
    pub lambda: f64,
    /// Sinkhorn-convention regularization used by the solver (`2ε`).
    pub sinkhorn_eps: f64,
    /// Squared scale applied to the centered samples before solving.
    pub kappa: f64,
    /// Row-major dense estimate.
    pub a: Vec<Vec<f64>>,
    pub triplets: Vec<Triplet>,
    pub support: Vec<[usize; 2]>,
    pub kkt_sup: f64,
    pub objective: f64,
    pub optimality_residual: f64,
    pub marginal_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let mut cfg = load_config("solve", &args.common)?;
    if let Some(s) = args.samples {
        cfg.samples = s;
    }
    if args.lambda.is_some() {
        cfg.lambda = args.lambda;
    }
    if let Some(r) = args.lambda_rel {
        cfg.lambda_rel = r;
    }
    cfg.validate()?;
    if cfg.eps.len() != 1 {
        return usage("solve takes a single --eps value");
    }
    let eps = cfg.eps[0];
    let seed = cfg.seeds[0];
    let (x, y) = match &args.input {
        Some(path) => read_samples(path)?,
        None => {
            let g = cfg.build_graph()?;
            sample_coupling(&graph_model(&g, eps)?, cfg.samples, seed)?
        }
    };
    let (n, d1, d2) = (x.nrows(), x.ncols(), y.ncols());
    let (basis, kappa) = prepare_basis(x, y)?;
    // The objective is invariant under the rescaling when λ is divided by κ.
    let lambda_scaled = match cfg.lambda {
        Some(l) => l / kappa,
        None => cfg.lambda_rel * null_threshold(&basis)?,
    };
    let config = SolverConfig {
        lambda: lambda_scaled,
        eps: 2.0 * eps,
        grad_tol: cfg.grad_tol,
        max_iter: cfg.max_iter,
        seed,
        ..SolverConfig::default()
    };
    let sol = solve(&basis, &config)?;
    let a = sol.a.to_matrix(d1, d2) / kappa;
    let mut triplets = Vec::new();
    let mut support = Vec::new();
    for i in 0..d1 {
        for j in 0..d2 {
            if a[(i, j)].abs() > SUPPORT_TOL / kappa {
                triplets.push(Triplet { i, j, value: a[(i, j)] });
                support.push([i, j]);
            }
        }
    }
    let out = SolveOutput {
        schema_version: SCHEMA_VERSION,
        input: args.input.as_ref().map(|p| p.display().to_string()),
        n_samples: n,
        d1,
        d2,
        lambda: lambda_scaled * kappa,
        sinkhorn_eps: config.eps,
        kappa,
        a: (0..d1).map(|i| a.row(i).iter().copied().collect()).collect(),
        triplets,
        support,
        kkt_sup: sol.kkt_sup,
        objective: sol.objective,
        optimality_residual: sol.optimality_residual,
        marginal_residual: sol.marginal_residual,
        converged: sol.converged,
        iterations: sol.iterations,
        config: cfg,
    };
    if !out.converged {
        log::warn!("solver stopped before reaching the tolerance (residual {:e})", out.optimality_residual);
    }
    write_json(args.common.out.as_deref(), &out)
}

/// One CSV row per trial; shared by both experiment kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialCsvRow {
    pub lambda: f64,
    pub eps: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub support_errors: usize,
    pub l2_error: f64,
    pub margin: f64,
    pub converged: bool,
    pub status: String,
}

impl From<&TrialResult> for TrialCsvRow {
    fn from(r: &TrialResult) -> Self {
        Self {
            lambda: r.lambda,
            eps: r.eps,
            n_samples: r.n_samples,
            seed: r.seed,
            support_errors: r.support_errors,
            l2_error: r.l2_error,
            margin: r.margin,
            converged: r.converged,
            status: r.status.clone(),
        }
    }
}

fn write_trials(path: Option<&Path>, rows: &[TrialCsvRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(open_out(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BestEntry {
    eps: f64,
    seed: u64,
    min_support_errors: usize,
    best_lambda: f64,
}

#[derive(Debug, Serialize)]
struct SparsistencySummary {
    schema_version: u32,
    csv_schema: &'static str,
    config: RunConfig,
    rows: usize,
    failed: usize,
    best: Vec<BestEntry>,
}

pub fn cmd_sparsistency(args: &SparsistencyArgs) -> CliResult<()> {
    let mut cfg = load_config("sparsistency", &args.common)?;
    if let Some(g) = args.lambda_grid {
        cfg.lambda_grid = g;
    }
    if let Some(s) = args.samples {
        cfg.samples = s;
    }
    if args.population {
        cfg.population = true;
    }
    cfg.validate()?;
    let g = cfg.build_graph()?;
    let rel = cfg.lambda_grid.values()?;
    let seeds = if cfg.population { vec![0] } else { cfg.seeds.clone() };
    let jobs: Vec<(f64, u64)> = cfg.eps.iter().flat_map(|&e| seeds.iter().map(move |&s| (e, s))).collect();
    let opts = cfg.trial_options();
    let results: Vec<crate::Result<Vec<TrialResult>>> = jobs
        .par_iter()
        .map(|&(eps, seed)| {
            let top = analytic_null_threshold(&graph_model(&g, eps)?)?;
            let grid: Vec<f64> = rel.iter().map(|r| r * top).collect();
            if cfg.population {
                run_population_trial(&g, eps, &grid)
            } else {
                run_sparsistency_trial(&g, eps, &grid, cfg.samples, seed, &opts)
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for (res, &(eps, seed)) in results.into_iter().zip(&jobs) {
        let trials = res?;
        if let Some(b) = trials.iter().filter(|t| t.ok()).min_by_key(|t| t.support_errors) {
            best.push(BestEntry {
                eps,
                seed,
                min_support_errors: b.support_errors,
                best_lambda: b.lambda,
            });
        }
        rows.extend(trials.iter().map(TrialCsvRow::from));
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    write_trials(args.common.out.as_deref(), &rows)?;
    let summary = SparsistencySummary {
        schema_version: SCHEMA_VERSION,
        csv_schema: "trial/1",
        rows: rows.len(),
        failed,
        best,
        config: cfg,
    };
    write_summary(&args.common, &summary)?;
    if failed == rows.len() {
        return Err(CliError::Numerical("every trial failed".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MeanError {
    n_samples: usize,
    mean_l2_error: f64,
}

#[derive(Debug, Serialize)]
struct ComplexitySummary {
    schema_version: u32,
    csv_schema: &'static str,
    config: RunConfig,
    eps: f64,
    lambda: f64,
    margin: f64,
    slope: f64,
    slope_ci: [f64; 2],
    mean_errors: Vec<MeanError>,
    failed: usize,
}

pub fn cmd_complexity(args: &ComplexityArgs) -> CliResult<()> {
    let mut cfg = load_config("complexity", &args.common)?;
    if let Some(g) = &args.n_grid {
        cfg.n_grid = g.clone();
    }
    if let Some(r) = args.lambda_rel {
        cfg.lambda_rel = r;
    }
    cfg.validate()?;
    if cfg.eps.len() != 1 {
        return usage("complexity takes a single --eps value");
    }
    let eps = cfg.eps[0];
    let g = cfg.build_graph()?;
    let lambda = cfg.lambda_rel * analytic_null_threshold(&graph_model(&g, eps)?)?;
    let sweep = sample_complexity_sweep(&g, eps, lambda, &cfg.n_grid, &cfg.seeds, &cfg.trial_options())?;
    let rows: Vec<TrialCsvRow> = sweep
        .rows
        .iter()
        .map(|r| TrialCsvRow {
            lambda,
            eps,
            n_samples: r.n_samples,
            seed: r.seed,
            support_errors: r.support_errors,
            l2_error: r.error,
            margin: sweep.margin,
            converged: r.converged,
            status: r.status.clone(),
        })
        .collect();
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    write_trials(args.common.out.as_deref(), &rows)?;
    let summary = ComplexitySummary {
        schema_version: SCHEMA_VERSION,
        csv_schema: "trial/1",
        eps,
        lambda,
        margin: sweep.margin,
        slope: sweep.slope,
        slope_ci: [sweep.slope_ci.0, sweep.slope_ci.1],
        mean_errors: sweep
            .mean_errors
            .iter()
            .map(|&(n, e)| MeanError {
                n_samples: n,
                mean_l2_error: e,
            })
            .collect(),
        failed,
        config: cfg,
    };
    write_summary(&args.common, &summary)?;
    if failed == rows.len() {
        return Err(CliError::Numerical("every trial failed".into()));
    }
    Ok(())
}

/// Plain CSV matrix, one row per line, no header.
pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Usage(format!("line {}: {e}", k + 1)))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| CliError::Usage(format!("line {}: not a number: {f:?}", k + 1))))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return usage(format!("{}: expected a non-empty rectangular matrix", path.display()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[derive(Debug, Serialize)]
pub struct LimitRow {
    pub eps: f64,
    pub lambda: f64,
    /// `‖z_ε − z_limit‖∞`
    pub z_gap: f64,
    /// `‖A_ε − A_limit‖∞`
    pub a_gap: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize)]
pub struct LimitBranch {
    pub lambda0: f64,
    pub limit_a: Vec<Vec<f64>>,
    pub limit_objective: f64,
    pub rows: Vec<LimitRow>,
}

#[derive(Debug, Serialize)]
struct LimitsOutput {
    schema_version: u32,
    config: RunConfig,
    a_hat: Vec<Vec<f64>>,
    lasso: Option<LimitBranch>,
    glasso: Option<LimitBranch>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Large-ε comparison with identity covariances.
pub fn lasso_branch(a_hat: &DMatrix<f64>, lambda0: f64, eps_grid: &[f64], cfg: &RunConfig) -> CliResult<LimitBranch> {
    let (d1, d2) = a_hat.shape();
    let (sa, sb) = (DMatrix::identity(d1, d1), DMatrix::identity(d2, d2));
    let spec = LimitProblemSpec::lasso(sa.clone(), sb.clone(), a_hat.clone(), lambda0)?;
    let lim = lasso_solve(&spec, cfg.limit_tol)?;
    let pattern = crate::eot::CostVector::from_matrix(a_hat);
    let z_lim = limit_certificate_inf(&sa, &sb, &pattern)?;
    let rows = eps_grid
        .iter()
        .map(|&eps| -> CliResult<LimitRow> {
            let model = GaussianModel::new(sa.clone(), sb.clone(), a_hat.clone(), eps)?;
            let z = gaussian_hessian(&model)
                .and_then(|h| vanilla_certificate(&h, &pattern))
                .map_err(|e| CliError::Numerical(format!("certificate at eps = {eps}: {e}")))?;
            let lambda = lambda0 / eps;
            let pop = solve_on_model(&model, &PopulationConfig {
                tol: cfg.population_tol,
                ..PopulationConfig::new(lambda)
            })?;
            Ok(LimitRow {
                eps,
                lambda,
                z_gap: sup_diff(&z.z, &z_lim.z),
                a_gap: (&pop.a - &lim.a).amax(),
                converged: pop.converged && lim.converged,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(LimitBranch {
        lambda0,
        limit_a: rows_of(&lim.a),
        limit_objective: lim.objective,
        rows,
    })
}

/// Small-ε comparison; `Â` must be symmetric positive definite.
pub fn glasso_branch(a_hat: &DMatrix<f64>, lambda0: f64, eps_grid: &[f64], cfg: &RunConfig) -> CliResult<LimitBranch> {
    let spec = LimitProblemSpec::glasso(a_hat.clone(), lambda0)?;
    let lim = glasso_solve(&spec, cfg.limit_tol)?;
    let z_lim = limit_certificate_zero(a_hat)?;
    let rows = eps_grid
        .iter()
        .map(|&eps| -> CliResult<LimitRow> {
            let op = symmetric_restricted_inverse_hessian(a_hat, eps)
                .map_err(|e| CliError::Numerical(format!("restricted Hessian at eps = {eps}: {e}")))?;
            let z = symmetric_certificate(&op, a_hat)?;
            let lambda = lambda0 * eps;
            let model = GaussianModel::standard(a_hat.clone(), eps)?;
            let pop = solve_on_model(&model, &PopulationConfig {
                tol: cfg.population_tol,
                ..PopulationConfig::new(lambda)
            })?;
            Ok(LimitRow {
                eps,
                lambda,
                z_gap: sup_diff(&z.z, &z_lim.z),
                a_gap: (&pop.a - &lim.a).amax(),
                converged: pop.converged && lim.converged,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(LimitBranch {
        lambda0,
        limit_a: rows_of(&lim.a),
        limit_objective: lim.objective,
        rows,
    })
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn cmd_limits(args: &LimitsArgs) -> CliResult<()> {
    let mut cfg = load_config("limits", &args.common)?;
    if let Some(b) = args.branch {
        cfg.branch = b;
    }
    if let Some(l) = args.lambda0 {
        cfg.lambda0 = l;
    }
    if let Some(g) = args.lasso_eps {
        cfg.lasso_eps = g;
    }
    if let Some(g) = args.glasso_eps {
        cfg.glasso_eps = g;
    }
    cfg.validate()?;
    let a_hat = match &args.a_hat {
        Some(p) => read_matrix(p)?,
        None => shifted_laplacian_cost(&cfg.build_graph()?, 0.1, None)?,
    };
    // Ascending toward the limit: ε grows for the Lasso, shrinks for the glasso.
    let mut lasso_grid = cfg.lasso_eps.values()?;
    lasso_grid.reverse();
    let glasso_grid = cfg.glasso_eps.values()?;
    let lasso = matches!(cfg.branch, Branch::Lasso | Branch::Both)
        .then(|| lasso_branch(&a_hat, cfg.lambda0, &lasso_grid, &cfg))
        .transpose()?;
    let glasso = matches!(cfg.branch, Branch::Glasso | Branch::Both)
        .then(|| glasso_branch(&a_hat, cfg.lambda0, &glasso_grid, &cfg))
        .transpose()?;
    let out = LimitsOutput {
        schema_version: SCHEMA_VERSION,
        a_hat: rows_of(&a_hat),
        lasso,
        glasso,
        config: cfg,
    };
    write_json(args.common.out.as_deref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_spec_parses_and_prints() {
        let g: LogSpec = "1:1e-3:20".parse().unwrap();
        assert_eq!(g, LogSpec { start: 1.0, stop: 1e-3, count: 20 });
        assert_eq!(g.to_string().parse::<LogSpec>().unwrap(), g);
        assert_eq!(g.values().unwrap().len(), 20);
        assert!("1:2".parse::<LogSpec>().is_err());
        assert!("0:1:3".parse::<LogSpec>().is_err());
        assert!("1:2:0".parse::<LogSpec>().is_err());
    }

    #[test]
    fn config_round_trips() {
        for cmd in ["certificate", "solve", "sparsistency", "complexity", "limits"] {
            let c = RunConfig::for_command(cmd);
            let s = serde_json::to_string_pretty(&c).unwrap();
            let back: RunConfig = serde_json::from_str(&s).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn config_rejects_unknown_fields_and_versions() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"schema_version": 99}"#).unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn sample_csv_errors_name_the_line() {
        let bad = "x0,x1,y0\n1,2,3\n4,oops,6\n";
        let e = read_samples_from(bad.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let short = "x0,y0\n1,2\n3\n";
        let e = read_samples_from(short.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let header = "a,b\n1,2\n";
        assert!(read_samples_from(header.as_bytes()).unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn samples_round_trip_exactly() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, -2.5, 1e-17, 3.0, 7.25, 1.0 / 3.0]);
        let y = DMatrix::from_row_slice(3, 1, &[std::f64::consts::PI, -0.0, 2.0]);
        let mut buf = Vec::new();
        write_samples(&mut buf, &x, &y).unwrap();
        let (x2, y2) = read_samples_from(buf.as_slice()).unwrap();
        assert_eq!(x2, x);
        assert_eq!(y2, y);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(IotError::Input("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(IotError::Numerical("x".into())).exit_code(), 3);
        assert_eq!(
            CliError::from(IotError::Convergence {
                iterations: 1,
                residual: 1.0
            })
            .exit_code(),
            3
        );
        assert_eq!(main_with_args(["iot", "certificate", "--graph", "hexagon"]), 2);
        assert_eq!(main_with_args(["iot", "limits", "--lambda0=-1"]), 2);
    }
}
