//! Command-line front end: configuration, stages and artifact layout.
//!
//! Every command reads and writes plain files so stages can be rerun in
//! isolation. `pipeline` chains all of them inside one output directory.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    self, ErrorCurve, SingularProfile, DEFAULT_FACTOR_THRESHOLD, DEFAULT_GAP_RATIO, DEFAULT_MIN_COMMON_SHARE,
};
use crate::error::Error;
use crate::estimation;
use crate::linalg::Mat;
use crate::model::{MAFactorModel, ModelJson, SampleMatrix};
use crate::pseudopoly::{FrequencyGrid, PseudoPolyMatrix, SpectrumJson, DEFAULT_GRID_SIZE, DEFAULT_PSD_TOL};
use crate::solver::{self, DecompositionSolution, Orders, Residuals, SolveStatus, SolverSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NOT_PSD: i32 = 4;
pub const EXIT_NOT_CONVERGED: i32 = 5;

/// Caps the number of concurrent trials.
pub const THREADS_ENV: &str = "SPECTRAFACT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Draw a random factor model.
    Generate,
    /// Sample a model.
    Simulate,
    /// Estimate an MA spectrum from samples.
    Estimate,
    /// Split a spectrum into low-rank plus diagonal parts.
    Decompose,
    /// Error curves and factor count for a decomposition.
    Analyze,
    /// All of the above.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Decompose => "decompose",
            Command::Analyze => "analyze",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub spectrum: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Paths {
    fn named(&self) -> Vec<(&'static str, &PathBuf)> {
        [
            ("input", &self.input),
            ("model", &self.model),
            ("spectrum", &self.spectrum),
            ("out", &self.out),
            ("out_dir", &self.out_dir),
        ]
        .into_iter()
        .filter_map(|(k, p)| p.as_ref().map(|p| (k, p)))
        .collect()
    }
}

/// Fully defaulted run description. Serializes to a file `--config` accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub n: usize,
    pub r: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    pub seed: u64,
    /// Seed for the model draw; `seed` when absent. Samples always use `seed`.
    pub model_seed: Option<u64>,
    pub ar_order: Option<usize>,
    pub orders: Option<Orders>,
    pub solver: SolverSettings,
    pub grid_size: usize,
    pub threshold: f64,
    pub gap_ratio: f64,
    pub min_common_share: f64,
    pub header: bool,
    pub dump_iterates: Option<usize>,
    pub trials: usize,
    pub paths: Paths,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            n: 10,
            r: 3,
            m: 5,
            samples: 6000,
            seed: 1,
            model_seed: None,
            ar_order: None,
            orders: None,
            solver: SolverSettings::default(),
            grid_size: DEFAULT_GRID_SIZE,
            threshold: DEFAULT_FACTOR_THRESHOLD,
            gap_ratio: DEFAULT_GAP_RATIO,
            min_common_share: DEFAULT_MIN_COMMON_SHARE,
            header: false,
            dump_iterates: None,
            trials: 1,
            paths: Paths::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::config(msg));
        let p = &self.paths;
        let need = |key: &str, v: &Option<PathBuf>| -> Result<(), CliError> {
            if v.is_none() {
                return Err(CliError::config(format!(
                    "missing required field `{key}` for command {}",
                    self.command.name()
                )));
            }
            Ok(())
        };
        match self.command {
            Command::Generate => need("out", &p.out)?,
            Command::Simulate => {
                need("model", &p.model)?;
                need("out", &p.out)?;
            }
            Command::Estimate | Command::Decompose => {
                need("input", &p.input)?;
                need("out", &p.out)?;
            }
            Command::Analyze => {
                need("input", &p.input)?;
                need("out_dir", &p.out_dir)?;
            }
            Command::Pipeline => need("out_dir", &p.out_dir)?,
        }
        if self.dump_iterates.is_some() && self.command == Command::Decompose {
            need("out_dir", &p.out_dir)?;
        }
        let named = p.named();
        for (i, (ka, a)) in named.iter().enumerate() {
            if let Some((kb, _)) = named[i + 1..].iter().find(|(_, b)| b == a) {
                return fail(format!("paths `{ka}` and `{kb}` are both {}", a.display()));
            }
        }
        if self.n == 0 {
            return fail("`n` must be at least 1".into());
        }
        if self.r == 0 || self.r > self.n {
            return fail(format!("`r` must lie in 1..={}", self.n));
        }
        if self.samples == 0 {
            return fail("`N` must be at least 1".into());
        }
        if self.ar_order == Some(0) {
            return fail("`ar_order` must be at least 1".into());
        }
        if self.grid_size == 0 {
            return fail("`grid_size` must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return fail("`threshold` must lie in (0, 1]".into());
        }
        if self.gap_ratio.is_nan() || self.gap_ratio <= 1.0 {
            return fail("`gap_ratio` must exceed 1".into());
        }
        if !(0.0..1.0).contains(&self.min_common_share) {
            return fail("`min_common_share` must lie in [0, 1)".into());
        }
        if self.trials == 0 {
            return fail("`trials` must be at least 1".into());
        }
        if self.trials > 1 && self.command != Command::Pipeline {
            return fail("`trials` applies to the pipeline command only".into());
        }
        if self.dump_iterates == Some(0) {
            return fail("`dump_iterates` must be at least 1".into());
        }
        if let Some(Orders { mx, my, mz }) = self.orders {
            if !(mx <= my && my <= mz) {
                return fail(format!("`orders` must satisfy mx <= my <= mz, got {mx},{my},{mz}"));
            }
        }
        self.solver
            .validate()
            .map_err(|e| CliError::config(format!("`solver`: {e}")))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    command: Option<Command>,
    n: Option<usize>,
    r: Option<usize>,
    m: Option<usize>,
    #[serde(rename = "N")]
    samples: Option<usize>,
    seed: Option<u64>,
    model_seed: Option<u64>,
    ar_order: Option<usize>,
    orders: Option<Orders>,
    solver: Option<SolverOverrides>,
    grid_size: Option<usize>,
    threshold: Option<f64>,
    gap_ratio: Option<f64>,
    min_common_share: Option<f64>,
    header: Option<bool>,
    dump_iterates: Option<usize>,
    trials: Option<usize>,
    paths: Option<Paths>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverOverrides {
    tol_primal: Option<f64>,
    tol_cone: Option<f64>,
    tol_gap: Option<f64>,
    max_iter: Option<usize>,
    over_relaxation: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(
    name = "spectrafact",
    version,
    about = "Factor analysis of moving-average processes",
    arg_required_else_help = true
)]
struct Cli {
    /// Command to run (may instead come from the config file).
    #[arg(value_enum)]
    command: Option<Command>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observation dimension.
    #[arg(long)]
    n: Option<usize>,
    /// Number of common factors.
    #[arg(long)]
    r: Option<usize>,
    /// MA order.
    #[arg(long)]
    m: Option<usize>,
    /// Number of samples.
    #[arg(long = "N")]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the model draw (defaults to --seed).
    #[arg(long)]
    model_seed: Option<u64>,
    /// Autoregressive order for Durbin's method.
    #[arg(long)]
    ar_order: Option<usize>,
    /// Orders `mx,my,mz` of the observed, common and specific parts.
    #[arg(long, value_parser = parse_orders)]
    orders: Option<Orders>,
    /// Primal and cone tolerance of the solver.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Singular-value threshold of the factor count.
    #[arg(long)]
    threshold: Option<f64>,
    /// Consecutive-ratio gap of the factor count.
    #[arg(long)]
    gap_ratio: Option<f64>,
    /// Common-part share of the spectrum below which no factors are reported.
    #[arg(long)]
    min_common_share: Option<f64>,
    /// Write a column header into samples CSV.
    #[arg(long)]
    header: bool,
    /// Dump solver iterates every N iterations.
    #[arg(long, value_name = "N")]
    dump_iterates: Option<usize>,
    /// Run K pipelines with seeds seed..seed+K.
    #[arg(long, value_name = "K")]
    trials: Option<usize>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Estimated spectrum used by `analyze`.
    #[arg(long)]
    spectrum: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_orders(s: &str) -> Result<Orders, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [mx, my, mz] => Ok(Orders { mx, my, mz }),
        _ => Err(format!("expected three comma-separated orders, got {}", parts.len())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub stage: String,
    pub message: String,
}

impl CliError {
    fn new(code: i32, stage: &str, message: impl Into<String>) -> Self {
        Self {
            code,
            stage: stage.to_string(),
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, "config", message)
    }

    fn at(stage: &str, err: Error) -> Self {
        let code = match err {
            Error::NotPsd { .. } => EXIT_NOT_PSD,
            Error::InvalidDimensions(_) | Error::InconsistentOrders(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self::new(code, stage, err.to_string())
    }

    fn io(stage: &str, path: &Path, err: impl fmt::Display) -> Self {
        Self::new(EXIT_DATA, stage, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

/// Parses argv (program name first) and an optional `--config` file.
///
/// Help and version requests come back as an error with code 0 and the
/// rendered text as message.
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        let code = match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
            _ => EXIT_CONFIG,
        };
        CliError::new(code, "config", e.render().to_string())
    })?;
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read config file {}: {e}", path.display())))?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| CliError::config(format!("config file {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let command = cli
        .command
        .or(file.command)
        .ok_or_else(|| CliError::config("missing required field `command`"))?;

    let mut cfg = RunConfig::new(command);
    // File values first, flags on top.
    macro_rules! layer {
        ($($field:ident),*) => {
            $(
                if let Some(v) = file.$field { cfg.$field = v; }
                if let Some(v) = cli.$field { cfg.$field = v; }
            )*
        };
    }
    layer!(
        n,
        r,
        m,
        samples,
        seed,
        grid_size,
        threshold,
        gap_ratio,
        min_common_share,
        trials
    );
    cfg.model_seed = cli.model_seed.or(file.model_seed);
    cfg.ar_order = cli.ar_order.or(file.ar_order);
    cfg.orders = cli.orders.or(file.orders);
    cfg.dump_iterates = cli.dump_iterates.or(file.dump_iterates);
    cfg.header = cli.header || file.header.unwrap_or(false);

    if let Some(s) = file.solver {
        let d = &mut cfg.solver;
        d.tol_primal = s.tol_primal.unwrap_or(d.tol_primal);
        d.tol_cone = s.tol_cone.unwrap_or(d.tol_cone);
        d.tol_gap = s.tol_gap.unwrap_or(d.tol_gap);
        d.max_iter = s.max_iter.unwrap_or(d.max_iter);
        d.over_relaxation = s.over_relaxation.unwrap_or(d.over_relaxation);
    }
    if let Some(t) = cli.tol {
        cfg.solver.tol_primal = t;
        cfg.solver.tol_cone = t;
    }
    if let Some(k) = cli.max_iter {
        cfg.solver.max_iter = k;
    }

    let fp = file.paths.unwrap_or_default();
    cfg.paths = Paths {
        input: cli.input.or(fp.input),
        model: cli.model.or(fp.model),
        spectrum: cli.spectrum.or(fp.spectrum),
        out: cli.out.or(fp.out),
        out_dir: cli.out_dir.or(fp.out_dir),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Outcome of [`run`]. `code` is nonzero when a stage failed or the solver
/// stopped without converging; `stage` then names it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub code: i32,
    pub stage: Option<String>,
    pub message: Option<String>,
    pub artifacts: Vec<PathBuf>,
    pub summary: Option<Value>,
}

impl RunReport {
    fn failed(err: CliError, artifacts: Vec<PathBuf>) -> Self {
        Self {
            code: err.code,
            stage: Some(err.stage),
            message: Some(err.message),
            artifacts,
            summary: None,
        }
    }
}

/// Solver output as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultJson {
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: Residuals,
    pub psi_y: SpectrumJson,
    pub psi_z: SpectrumJson,
}

impl ResultJson {
    pub fn from_solution(sol: &DecompositionSolution) -> Self {
        Self {
            status: sol.status,
            objective: sol.objective,
            iterations: sol.iterations,
            residuals: sol.residuals,
            psi_y: sol.psi_y.to_json(),
            psi_z: sol.psi_z.to_json(),
        }
    }
}

pub fn run(cfg: &RunConfig) -> RunReport {
    let mut out = Artifacts::default();
    let result = match cfg.command {
        Command::Generate => generate(cfg, &mut out),
        Command::Simulate => simulate(cfg, &mut out),
        Command::Estimate => estimate(cfg, &mut out),
        Command::Decompose => decompose(cfg, &mut out),
        Command::Analyze => analyze(cfg, &mut out),
        Command::Pipeline => pipeline(cfg, &mut out),
    };
    match result {
        Ok(summary) => out.into_report(summary),
        Err(e) => RunReport::failed(e, out.paths),
    }
}

#[derive(Default)]
struct Artifacts {
    paths: Vec<PathBuf>,
    /// First non-fatal problem, e.g. a solve that hit `max_iter`.
    warning: Option<CliError>,
}

impl Artifacts {
    fn warn(&mut self, w: CliError) {
        self.warning.get_or_insert(w);
    }

    fn write(&mut self, stage: &str, path: &Path, contents: &str) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(stage, dir, e))?;
        }
        fs::write(path, contents).map_err(|e| CliError::io(stage, path, e))?;
        self.paths.push(path.to_path_buf());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, stage: &str, path: &Path, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(stage, path, e))?;
        text.push('\n');
        self.write(stage, path, &text)
    }

    fn into_report(self, summary: Option<Value>) -> RunReport {
        match self.warning {
            Some(w) => RunReport {
                code: w.code,
                stage: Some(w.stage),
                message: Some(w.message),
                artifacts: self.paths,
                summary,
            },
            None => RunReport {
                code: EXIT_OK,
                stage: None,
                message: None,
                artifacts: self.paths,
                summary,
            },
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::config(format!("missing required field `{key}`")))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &str, path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(stage, path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(stage, path, e))
}

fn read_model(stage: &str, path: &Path) -> Result<MAFactorModel, CliError> {
    let json: ModelJson = read_json(stage, path)?;
    MAFactorModel::from_json(&json).map_err(|e| CliError::at(stage, e))
}

fn read_spectrum(stage: &str, path: &Path) -> Result<PseudoPolyMatrix, CliError> {
    let json: SpectrumJson = read_json(stage, path)?;
    PseudoPolyMatrix::from_json(&json).map_err(|e| CliError::at(stage, e))
}

fn grid(cfg: &RunConfig) -> Result<FrequencyGrid, CliError> {
    FrequencyGrid::new(cfg.grid_size).map_err(|e| CliError::at("config", e))
}

fn generate(cfg: &RunConfig, out: &mut Artifacts) -> Result<Option<Value>, CliError> {
    let model = MAFactorModel::random(cfg.n, cfg.r, cfg.m, cfg.model_seed.unwrap_or(cfg.seed))
        .map_err(|e| CliError::at("generate", e))?;
    out.write_json("generate", required(&cfg.paths.out, "out")?, &model.to_json())?;
    Ok(None)
}

fn simulate(cfg: &RunConfig, out: &mut Artifacts) -> Result<Option<Value>, CliError> {
    let model = read_model("simulate", required(&cfg.paths.model, "model")?)?;
    let samples = model
        .simulate(cfg.samples, cfg.seed)
        .map_err(|e| CliError::at("simulate", e))?;
    out.write(
        "simulate",
        required(&cfg.paths.out, "out")?,
        &samples.to_csv(cfg.header),
    )?;
    Ok(None)
}

fn estimate(cfg: &RunConfig, out: &mut Artifacts) -> Result<Option<Value>, CliError> {
    let path = required(&cfg.paths.input, "input")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io("estimate", path, e))?;
    let samples = SampleMatrix::from_csv(&text).map_err(|e| CliError::at("estimate", e))?;
    let order = cfg.orders.map_or(cfg.m, |o| o.mx);
    let spectrum = estimate_spectrum(&samples, order, cfg.ar_order)?;
    out.write_json("estimate", required(&cfg.paths.out, "out")?, &spectrum.to_json())?;
    Ok(None)
}

fn estimate_spectrum(samples: &SampleMatrix, m: usize, p: Option<usize>) -> Result<PseudoPolyMatrix, CliError> {
    let vma = estimation::durbin_vma(samples, m, p).map_err(|e| CliError::at("estimate", e))?;
    Ok(estimation::spectrum_from_vma(&vma))
}

fn decompose(cfg: &RunConfig, out: &mut Artifacts) -> Result<Option<Value>, CliError> {
    let target = read_spectrum("decompose", required(&cfg.paths.input, "input")?)?;
    let dump = cfg.paths.out_dir.as_ref().map(|d| d.join("iterates"));
    let sol = solve_target(cfg, &target, dump.as_deref(), out)?;
    let result = ResultJson::from_solution(&sol);
    out.write_json("decompose", required(&cfg.paths.out, "out")?, &result)?;
    Ok(Some(json!({
        "status": result.status,
        "objective": result.objective,
        "iterations": result.iterations,
        "residuals": result.residuals,
    })))
}

/// Builds and solves the trace minimization; a solve that stops early is
/// recorded as a warning, not an error.
fn solve_target(
    cfg: &RunConfig,
    target: &PseudoPolyMatrix,
    dump_dir: Option<&Path>,
    out: &mut Artifacts,
) -> Result<DecompositionSolution, CliError> {
    let grid = grid(cfg)?;
    let problem = solver::build_problem_on_grid(target, cfg.orders, &grid, DEFAULT_PSD_TOL)
        .map_err(|e| CliError::at("decompose", e))?;
    let mut dump_err: Option<CliError> = None;
    let sol = match (cfg.dump_iterates, dump_dir) {
        (Some(every), Some(dir)) => {
            let mut written = Vec::new();
            let sol = solver::solve_with_observer(&problem, &cfg.solver, Some(every), |iter, y, z| {
                if dump_err.is_some() {
                    return;
                }
                for (name, mat) in [("Y", y), ("Z", z)] {
                    let path = dir.join(format!("{name}_{iter:08}.csv"));
                    let mut sink = Artifacts::default();
                    match sink.write("decompose", &path, &matrix_csv(mat)) {
                        Ok(()) => written.extend(sink.paths),
                        Err(e) => dump_err = Some(e),
                    }
                }
            })
            .map_err(|e| CliError::at("decompose", e))?;
            out.paths.extend(written);
            sol
        }
        _ => solver::solve(&problem, &cfg.solver).map_err(|e| CliError::at("decompose", e))?,
    };
    if let Some(e) = dump_err {
        return Err(e);
    }
    if sol.status != SolveStatus::Optimal {
        out.warn(CliError::new(
            EXIT_NOT_CONVERGED,
            "decompose",
            format!(
                "solver stopped with status {:?} after {} iterations",
                sol.status, sol.iterations
            ),
        ));
    }
    Ok(sol)
}

fn matrix_csv(m: &Mat) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn analyze(cfg: &RunConfig, out: &mut Artifacts) -> Result<Option<Value>, CliError> {
    let stage = "analyze";
    let result: ResultJson = read_json(stage, required(&cfg.paths.input, "input")?)?;
    let psi_y = PseudoPolyMatrix::from_json(&result.psi_y).map_err(|e| CliError::at(stage, e))?;
    let truth = match &cfg.paths.model {
        Some(p) => Some(read_model(stage, p)?.true_spectra()),
        None => None,
    };
    let estimate = match &cfg.paths.spectrum {
        Some(p) => Some(read_spectrum(stage, p)?),
        None => None,
    };
    let dir = required(&cfg.paths.out_dir, "out_dir")?;
    let grid = grid(cfg)?;

    let mut summary = serde_json::Map::new();
    summary.insert("status".into(), json!(result.status));
    summary.insert("objective".into(), json!(result.objective));
    if let (Some(t), Some(est)) = (&truth, &estimate) {
        let curve = error_curve(&t.psi_x, est, &grid)?;
        out.write(stage, &dir.join("error_psi_x.csv"), &curve.to_csv())?;
        summary.insert("m_e_psi_x".into(), json!(curve.mean()));
        summary.insert("median_e_psi_x".into(), json!(curve.median()));
    }
    // A model without common factors has no reference for the Ψ_y error.
    if let Some(t) = truth
        .as_ref()
        .filter(|t| t.psi_y.coeffs().iter().any(|c| c.amax() != 0.0))
    {
        let curve = error_curve(&t.psi_y, &psi_y, &grid)?;
        out.write(stage, &dir.join("error_psi_y.csv"), &curve.to_csv())?;
        summary.insert("m_e_psi_y".into(), json!(curve.mean()));
        summary.insert("median_e_psi_y".into(), json!(curve.median()));
    }
    let psi_z = PseudoPolyMatrix::from_json(&result.psi_z).map_err(|e| CliError::at(stage, e))?;
    let psi_x_hat = psi_y.add(&psi_z).map_err(|e| CliError::at(stage, e))?;
    let count = factor_count(cfg, &psi_y, &psi_x_hat, &grid)?;
    if let Some(p) = &count.profile {
        out.write(stage, &dir.join("singular_profile.csv"), &p.to_csv())?;
    }
    summary.insert("r_hat".into(), json!(count.r_hat));
    summary.insert("common_share".into(), json!(count.share));
    summary.insert("singular_profile".into(), json!(count.profile.map(|p| p.s)));
    let summary = Value::Object(summary);
    out.write_json(stage, &dir.join("analysis.json"), &summary)?;
    Ok(Some(summary))
}

struct FactorCount {
    r_hat: usize,
    share: f64,
    /// Absent when the common part is identically zero.
    profile: Option<SingularProfile>,
}

fn factor_count(
    cfg: &RunConfig,
    psi_y: &PseudoPolyMatrix,
    psi_x: &PseudoPolyMatrix,
    grid: &FrequencyGrid,
) -> Result<FactorCount, CliError> {
    let share = analysis::common_share(psi_y, psi_x, grid).map_err(|e| CliError::at("analyze", e))?;
    let profile = match analysis::normalized_singular_values(psi_y, grid) {
        Ok(p) => Some(p),
        Err(Error::ZeroSpectrum) => None,
        Err(e) => return Err(CliError::at("analyze", e)),
    };
    let r_hat = match &profile {
        Some(p) if share >= cfg.min_common_share => analysis::estimate_num_factors(p, cfg.threshold, cfg.gap_ratio),
        _ => 0,
    };
    Ok(FactorCount { r_hat, share, profile })
}

fn error_curve(truth: &PseudoPolyMatrix, est: &PseudoPolyMatrix, grid: &FrequencyGrid) -> Result<ErrorCurve, CliError> {
    analysis::pointwise_relative_error(truth, est, grid).map_err(|e| CliError::at("analyze", e))
}

fn pipeline(cfg: &RunConfig, out: &mut Artifacts) -> Result<Option<Value>, CliError> {
    let dir = required(&cfg.paths.out_dir, "out_dir")?.to_path_buf();
    if cfg.trials == 1 {
        let (summary, timing) = pipeline_once(cfg, cfg.seed, &dir, out)?;
        out.write_json("pipeline", &dir.join("summary.json"), &summary)?;
        out.write_json("pipeline", &dir.join("timing.json"), &timing)?;
        return Ok(Some(summary));
    }

    let seeds: Vec<u64> = (0..cfg.trials as u64).map(|i| cfg.seed + i).collect();
    let slots: Vec<Mutex<Option<TrialOutcome>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = thread_cap().min(seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let seed = seeds[i];
                let mut local = Artifacts::default();
                let trial_dir = dir.join(format!("seed_{seed}"));
                let result = pipeline_once(cfg, seed, &trial_dir, &mut local);
                *slots[i].lock().expect("trial slot") = Some(TrialOutcome {
                    result,
                    artifacts: local,
                });
            });
        }
    });

    let mut summaries = Vec::new();
    let mut timings = Vec::new();
    let mut failure: Option<CliError> = None;
    for (seed, slot) in seeds.iter().zip(slots) {
        let outcome = slot.into_inner().expect("trial slot").expect("every trial ran");
        out.paths.extend(outcome.artifacts.paths);
        if let Some(w) = outcome.artifacts.warning {
            out.warn(w);
        }
        match outcome.result {
            Ok((s, t)) => {
                summaries.push(s);
                timings.push(t);
            }
            Err(e) => {
                summaries.push(json!({
                    "seed": seed,
                    "error": {"stage": e.stage, "code": e.code, "message": e.message},
                }));
                failure.get_or_insert(e);
            }
        }
    }
    let merged = json!({ "trials": summaries });
    out.write_json("pipeline", &dir.join("summary.json"), &merged)?;
    out.write_json("pipeline", &dir.join("timing.json"), &json!({ "trials": timings }))?;
    match failure {
        Some(e) => Err(CliError::new(e.code, &e.stage, format!("trial failed: {}", e.message))),
        None => Ok(Some(merged)),
    }
}

struct TrialOutcome {
    result: Result<(Value, Value), CliError>,
    artifacts: Artifacts,
}

/// Worker count from `SPECTRAFACT_THREADS`, else the available cores.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One seeded run; returns the summary and the (nondeterministic) timings.
fn pipeline_once(cfg: &RunConfig, seed: u64, dir: &Path, out: &mut Artifacts) -> Result<(Value, Value), CliError> {
    let start = Instant::now();
    let mut timing = serde_json::Map::new();
    let mut lap = |name: &str, since: &mut Instant| {
        timing.insert(format!("{name}_seconds"), json!(since.elapsed().as_secs_f64()));
        *since = Instant::now();
    };
    let mut t = Instant::now();
    let grid = grid(cfg)?;

    let model_seed = cfg.model_seed.unwrap_or(seed);
    let model = MAFactorModel::random(cfg.n, cfg.r, cfg.m, model_seed).map_err(|e| CliError::at("generate", e))?;
    out.write_json("generate", &dir.join("model.json"), &model.to_json())?;
    lap("generate", &mut t);

    let samples = model
        .simulate(cfg.samples, seed)
        .map_err(|e| CliError::at("simulate", e))?;
    out.write("simulate", &dir.join("samples.csv"), &samples.to_csv(cfg.header))?;
    lap("simulate", &mut t);

    let order = cfg.orders.map_or(cfg.m, |o| o.mx);
    let psi_x_hat = estimate_spectrum(&samples, order, cfg.ar_order)?;
    out.write_json("estimate", &dir.join("spectrum.json"), &psi_x_hat.to_json())?;
    lap("estimate", &mut t);

    let dump = dir.join("iterates");
    let sol = solve_target(cfg, &psi_x_hat, Some(&dump), out)?;
    let result = ResultJson::from_solution(&sol);
    out.write_json("decompose", &dir.join("result.json"), &result)?;
    lap("decompose", &mut t);

    let truth = model.true_spectra();
    let ex = error_curve(&truth.psi_x, &psi_x_hat, &grid)?;
    let ey = error_curve(&truth.psi_y, &sol.psi_y, &grid)?;
    out.write("analyze", &dir.join("error_psi_x.csv"), &ex.to_csv())?;
    out.write("analyze", &dir.join("error_psi_y.csv"), &ey.to_csv())?;
    let count = factor_count(cfg, &sol.psi_y, &psi_x_hat, &grid)?;
    if let Some(p) = &count.profile {
        out.write("analyze", &dir.join("singular_profile.csv"), &p.to_csv())?;
    }
    lap("analyze", &mut t);

    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    run_cfg.trials = 1;
    run_cfg.paths = Paths {
        out_dir: Some(dir.to_path_buf()),
        ..Paths::default()
    };
    out.write_json("pipeline", &dir.join("config.json"), &run_cfg)?;

    let summary = json!({
        "seed": seed,
        "model_seed": model_seed,
        "n": cfg.n,
        "r": cfg.r,
        "m": cfg.m,
        "N": cfg.samples,
        "status": sol.status,
        "iterations": sol.iterations,
        "objective": sol.objective,
        "residuals": sol.residuals,
        "m_e_psi_x": ex.mean(),
        "m_e_psi_y": ey.mean(),
        "median_e_psi_x": ex.median(),
        "median_e_psi_y": ey.median(),
        "r_hat": count.r_hat,
        "common_share": count.share,
        "singular_profile": count.profile.map(|p| p.s),
    });
    timing.insert("seed".into(), json!(seed));
    timing.insert("total_seconds".into(), json!(start.elapsed().as_secs_f64()));
    Ok((summary, Value::Object(timing)))
}
