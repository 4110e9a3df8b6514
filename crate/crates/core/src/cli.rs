//! Command-line front-end.
//!
//! Parameters come from an optional JSON config file (`--config`) and from
//! flags; a flag overrides the config value of the same name. Reports go to
//! `--output`, else to `$GWPARK_OUT_DIR/<subcommand>.<csv|json>` when that
//! variable is set, else to standard output.
//!
//! Exit codes: 0 success, 2 configuration error, 3 estimator error, 4 I/O
//! error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{make_law, DistSpec, LawHandle};
use crate::montecarlo::{
    self, CarFamily, EstimateError, FluxDistribution, InfiniteConfig, SpinalFunctional,
    SweepConfig, WalkConfig,
};
use crate::parking::{park, CarLabels};
use crate::report::{self, format_float, Format, ReportRow};
use crate::rng::{domain, RngStream};
use crate::theory::{self, Extended, ModelParams};
use crate::trees::{self, Sampled, Tree};

pub const OUT_DIR_ENV: &str = "GWPARK_OUT_DIR";

const DEFAULT_REPS: u64 = 10_000;
const DEFAULT_SEED: u64 = 1;
const DEFAULT_STEP: f64 = 1e-4;
const DEFAULT_HEIGHT: usize = 200;
const DEFAULT_POOL: u64 = 200_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Estimator(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Estimator(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::InvalidConfig(_) | EstimateError::NoReplicates => {
                CliError::Config(e.to_string())
            }
            EstimateError::Tree(trees::TreeError::Inadmissible(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Estimator(e.to_string()),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InfMethod {
    Direct,
    Walk,
}

/// Every parameter a subcommand may read. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Offspring law, e.g. `poisson:1` or `geometric:0.5`.
    #[arg(long, value_parser = parse_dist)]
    pub offspring: Option<DistSpec>,
    /// Car law, e.g. `poisson:0.25` or `finite:0=0.5,2=0.5`.
    #[arg(long, value_parser = parse_dist)]
    pub cars: Option<DistSpec>,
    /// Car family for sweeps: poisson, geometric, bernoulli, binomial:<trials>.
    #[arg(long)]
    pub car_family: Option<String>,
    /// Tree size for conditioned trees.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<u64>,
    /// Replicates of the conditioned estimator in a sweep.
    #[arg(long)]
    pub n_reps: Option<u64>,
    /// Vertex cap for unconditioned trees.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Truncation height of Kesten's tree.
    #[arg(long)]
    pub height: Option<usize>,
    /// Comma-separated car means.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Thinning time in [0, 1].
    #[arg(long)]
    pub t: Option<f64>,
    /// RK4 step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Spinal functional height.
    #[arg(long)]
    pub h0: Option<usize>,
    /// Spinal functional top size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<InfMethod>,
    /// Size of the flux pool of the walk estimator.
    #[arg(long)]
    pub pool_size: Option<u64>,
    /// Flux above which an infinite-tree replicate counts as diverged.
    #[arg(long)]
    pub threshold: Option<u64>,
    /// Tree for park-demo: path<N>, star<N> or degrees:<d0,d1,...>.
    #[arg(long)]
    pub tree: Option<String>,
    /// Cars per vertex in preorder for park-demo, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<u32>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

fn parse_dist(s: &str) -> Result<DistSpec, String> {
    DistSpec::parse_shorthand(s).map_err(|e| e.to_string())
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Fields set in `flags` replace those of `self`.
    pub fn merged(mut self, flags: ExperimentConfig) -> Self {
        overlay!(self, flags; offspring, cars, car_family, n, reps, n_reps, cap, height, grid, t, step,
            h0, k, method, pool_size, threshold, tree, labels, seed, output, format);
        self
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn reps(&self) -> Result<u64, CliError> {
        positive(self.reps.unwrap_or(DEFAULT_REPS), "reps")
    }

    fn cap(&self) -> Result<usize, CliError> {
        positive(self.cap.unwrap_or(montecarlo::DEFAULT_CAP), "cap")
    }

    fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    fn offspring(&self) -> Result<LawHandle, CliError> {
        let spec = self
            .offspring
            .as_ref()
            .ok_or_else(|| config_err("--offspring is required"))?;
        let law = make_law(spec).map_err(config_err)?;
        trees::require_offspring(&law).map_err(config_err)?;
        Ok(law)
    }

    fn cars(&self) -> Result<LawHandle, CliError> {
        let spec = self
            .cars
            .as_ref()
            .ok_or_else(|| config_err("--cars is required"))?;
        let law = make_law(spec).map_err(config_err)?;
        if law.is_delta(1) {
            eprintln!("warning: exactly one car per vertex; every vertex parks its own car and the flux is 0");
        }
        Ok(law)
    }

    fn n(&self) -> Result<usize, CliError> {
        positive(self.n.ok_or_else(|| config_err("--n is required"))?, "n")
    }
}

fn positive<T: PartialOrd + Default + Copy>(v: T, name: &str) -> Result<T, CliError> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{name} must be positive")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gwpark",
    version,
    about = "Parking on critical Galton–Watson trees"
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Θ, the regime and t_max.
    Regime(ExperimentConfig),
    /// Closed-form mean flux Φ(t).
    Phi(ExperimentConfig),
    /// Φ(t) by RK4, next to the closed form.
    Ode(ExperimentConfig),
    /// Samples a tree (conditioned on --n when given) and dumps it.
    SampleTree(ExperimentConfig),
    /// Parks the given labels on a small tree.
    ParkDemo(ExperimentConfig),
    /// E[φ(T)] on unconditioned trees.
    MeanFlux(ExperimentConfig),
    /// P(root of T is parked).
    ParkedProb(ExperimentConfig),
    /// φ(T_n)/n on conditioned trees.
    FluxN(ExperimentConfig),
    /// Law of the root flux of Kesten's tree.
    FluxInf(ExperimentConfig),
    /// Both sides of the spinal decomposition.
    SpinalCheck(ExperimentConfig),
    /// One report row per car mean of --grid.
    Sweep(ExperimentConfig),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Regime(_) => "regime",
            Command::Phi(_) => "phi",
            Command::Ode(_) => "ode",
            Command::SampleTree(_) => "sample-tree",
            Command::ParkDemo(_) => "park-demo",
            Command::MeanFlux(_) => "mean-flux",
            Command::ParkedProb(_) => "parked-prob",
            Command::FluxN(_) => "flux-n",
            Command::FluxInf(_) => "flux-inf",
            Command::SpinalCheck(_) => "spinal-check",
            Command::Sweep(_) => "sweep",
        }
    }

    fn flags(&self) -> &ExperimentConfig {
        match self {
            Command::Regime(c)
            | Command::Phi(c)
            | Command::Ode(c)
            | Command::SampleTree(c)
            | Command::ParkDemo(c)
            | Command::MeanFlux(c)
            | Command::ParkedProb(c)
            | Command::FluxN(c)
            | Command::FluxInf(c)
            | Command::SpinalCheck(c)
            | Command::Sweep(c) => c,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// exit code. Text output goes to `stdout`, diagnostics to `stderr`.
pub fn run_with<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(stdout, "{e}");
            } else {
                let _ = write!(stderr, "{e}");
            }
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(
        argv,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let cfg = base.merged(cli.command.flags().clone());
    let name = cli.command.name();
    let out = Output {
        cfg: &cfg,
        name,
        stdout,
    };
    match &cli.command {
        Command::Regime(_) => regime(&cfg, out),
        Command::Phi(_) => phi(&cfg, out),
        Command::Ode(_) => ode(&cfg, out),
        Command::SampleTree(_) => sample_tree(&cfg, out),
        Command::ParkDemo(_) => park_demo(&cfg, out),
        Command::MeanFlux(_) => mean_flux(&cfg, out),
        Command::ParkedProb(_) => parked_prob(&cfg, out),
        Command::FluxN(_) => flux_n(&cfg, out),
        Command::FluxInf(_) => flux_inf(&cfg, out),
        Command::SpinalCheck(_) => spinal(&cfg, out),
        Command::Sweep(_) => sweep(&cfg, out),
    }
}

struct Output<'a> {
    cfg: &'a ExperimentConfig,
    name: &'static str,
    stdout: &'a mut dyn Write,
}

impl Output<'_> {
    fn path(&self, ext: &str) -> Option<PathBuf> {
        if let Some(p) = &self.cfg.output {
            return Some(p.clone());
        }
        std::env::var_os(OUT_DIR_ENV)
            .map(|dir| Path::new(&dir).join(format!("{}.{ext}", self.name)))
    }

    fn write(self, text: &str, ext: &str) -> Result<(), CliError> {
        match self.path(ext) {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)
                        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
                }
                std::fs::write(&path, text)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
            }
            None => self
                .stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Io(e.to_string())),
        }
    }

    /// `key=value` lines.
    fn text(self, lines: &[(&str, String)]) -> Result<(), CliError> {
        let body: String = lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        self.write(&body, "txt")
    }

    fn report(self, rows: &[ReportRow]) -> Result<(), CliError> {
        let format = self.cfg.format();
        self.write(&report::render(rows, format), format.extension())
    }
}

fn extended(x: Extended) -> String {
    format_float(x.to_f64())
}

fn params(cfg: &ExperimentConfig) -> Result<ModelParams, CliError> {
    ModelParams::from_laws(&cfg.cars()?, &cfg.offspring()?).map_err(config_err)
}

fn regime(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let r = theory::classify(&params(cfg)?);
    out.text(&[
        ("theta", format_float(r.theta)),
        ("regime", r.kind.name().into()),
        (
            "t_max",
            r.t_max.map(extended).unwrap_or_else(|| "undefined".into()),
        ),
    ])
}

fn time(cfg: &ExperimentConfig) -> Result<f64, CliError> {
    let t = cfg.t.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&t) {
        return Err(config_err(format!("t = {t} is outside [0, 1]")));
    }
    Ok(t)
}

fn phi(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let value = theory::phi_closed_form(time(cfg)?, &params(cfg)?).map_err(config_err)?;
    out.text(&[("phi", extended(value))])
}

fn ode(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let p = params(cfg)?;
    let t = time(cfg)?;
    let step = cfg.step.unwrap_or(DEFAULT_STEP);
    let numeric = theory::phi_ode(t, &p, step).map_err(|e| CliError::Estimator(e.to_string()))?;
    let closed = theory::phi_closed_form(t, &p).map_err(config_err)?;
    out.text(&[
        ("phi_ode", format_float(numeric)),
        ("phi_closed", extended(closed)),
        ("abs_diff", format_float((numeric - closed.to_f64()).abs())),
    ])
}

fn sample_tree(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let nu = cfg.offspring()?;
    let mut rng = RngStream::derive(cfg.seed(), domain::CLI, 0);
    let tree = match cfg.n {
        Some(n) => trees::sample_gw_conditioned(&nu, n, &mut rng).map_err(config_err)?,
        None => match trees::sample_gw(&nu, &mut rng, cfg.cap()?).map_err(config_err)? {
            Sampled::Complete(t) => t,
            Sampled::Overflow(m) => {
                return Err(CliError::Estimator(format!(
                    "tree overflowed the cap after {} vertices",
                    m.partial_count
                )))
            }
        },
    };
    out.write(&tree.dump(), "txt")
}

fn demo_tree(spec: &str) -> Result<Tree, CliError> {
    let size = |s: &str| -> Result<usize, CliError> {
        s.parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| config_err(format!("bad tree {spec:?}")))
    };
    if let Some(n) = spec.strip_prefix("path") {
        Ok(Tree::path(size(n)?))
    } else if let Some(n) = spec.strip_prefix("star") {
        Ok(Tree::star(size(n)?))
    } else if let Some(d) = spec.strip_prefix("degrees:") {
        let degrees = d
            .split(',')
            .map(|x| x.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| config_err(format!("bad tree {spec:?}")))?;
        Tree::from_degrees(degrees).map_err(config_err)
    } else {
        Err(config_err(format!(
            "bad tree {spec:?}: expected path<N>, star<N> or degrees:<list>"
        )))
    }
}

fn park_demo(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let tree = demo_tree(
        cfg.tree
            .as_deref()
            .ok_or_else(|| config_err("--tree is required"))?,
    )?;
    let labels = CarLabels::new(
        cfg.labels
            .clone()
            .ok_or_else(|| config_err("--labels is required"))?,
    );
    let r = park(&tree, &labels).map_err(config_err)?;
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(",");
    out.text(&[
        ("flux", r.flux.to_string()),
        (
            "occupied",
            join(&mut r.occupied.iter().map(|&o| (o as u8).to_string())),
        ),
        (
            "edge_flux",
            join(&mut r.edge_flux.iter().skip(1).map(|f| f.to_string())),
        ),
    ])
}

/// A row with the theory columns filled in.
fn theory_row(cars: &LawHandle, offspring: &LawHandle, seed: u64) -> ReportRow {
    let mut row = ReportRow::empty(seed);
    row.m = Some(cars.mean());
    if let Ok(p) = ModelParams::from_laws(cars, offspring) {
        let r = theory::classify(&p);
        row.theta = Some(r.theta);
        row.regime = Some(r.kind.name().into());
        row.phi1_closed = theory::phi_closed_form(1.0, &p).ok().map(Extended::to_f64);
    }
    row
}

fn note_cap(stderr_note: bool, shift: f64, name: &str) {
    if stderr_note {
        eprintln!(
            "note: {name} moved by {} when the cap was doubled",
            format_float(shift)
        );
    }
}

fn mean_flux(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let (nu, cars) = (cfg.offspring()?, cfg.cars()?);
    let run = montecarlo::run_gw_parking(&nu, &cars, cfg.reps()?, cfg.cap()?, cfg.seed())?;
    let e = run.mean_flux()?;
    note_cap(e.cap_sensitive, e.shift, "mean flux");
    let mut row = theory_row(&cars, &nu, cfg.seed());
    row.set_mean_flux(&e.estimate);
    row.overflow_frac = Some(run.overflow_fraction());
    out.report(&[row.rounded()])
}

fn parked_prob(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let (nu, cars) = (cfg.offspring()?, cfg.cars()?);
    let run = montecarlo::run_gw_parking(&nu, &cars, cfg.reps()?, cfg.cap()?, cfg.seed())?;
    let e = run.root_parked()?;
    note_cap(e.cap_sensitive, e.shift, "root-parked probability");
    let mut row = theory_row(&cars, &nu, cfg.seed());
    row.set_parked_prob(&e.estimate);
    row.overflow_frac = Some(run.overflow_fraction());
    out.report(&[row.rounded()])
}

fn flux_n(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let (nu, cars) = (cfg.offspring()?, cfg.cars()?);
    let r = montecarlo::estimate_flux_conditioned(&nu, &cars, cfg.n()?, cfg.reps()?, cfg.seed())?;
    let mut row = theory_row(&cars, &nu, cfg.seed());
    row.set_flux_per_n(&r.estimate);
    out.report(&[row.rounded()])
}

#[derive(Serialize)]
struct FluxInfReport<'a> {
    method: InfMethod,
    height: usize,
    replicates: u64,
    overflow_count: u64,
    diverged_count: u64,
    diverged: bool,
    mean: String,
    se: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    z_mean: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    z_se: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pool: Option<&'a montecarlo::PoolDiagnostics>,
    /// `[flux, count]` pairs.
    histogram: Vec<(u64, u64)>,
}

fn flux_inf(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let (nu, cars) = (cfg.offspring()?, cfg.cars()?);
    let height = cfg.height.unwrap_or(DEFAULT_HEIGHT);
    let reps = cfg.reps()?;
    let method = cfg.method.unwrap_or(InfMethod::Direct);
    let threshold = cfg.threshold.unwrap_or(montecarlo::DIVERGENCE_THRESHOLD);
    let (dist, walk): (FluxDistribution, Option<montecarlo::WalkReport>) = match method {
        InfMethod::Direct => {
            let c = InfiniteConfig {
                height,
                reps,
                cap: cfg.cap()?,
                seed: cfg.seed(),
                divergence_threshold: threshold,
            };
            (
                montecarlo::estimate_flux_infinite_direct(&nu, &cars, &c)?,
                None,
            )
        }
        InfMethod::Walk => {
            let c = WalkConfig {
                height,
                reps,
                pool_size: positive(cfg.pool_size.unwrap_or(DEFAULT_POOL), "pool_size")?,
                pool_cap: cfg.cap()?,
                seed: cfg.seed(),
                divergence_threshold: threshold,
            };
            let w = montecarlo::estimate_flux_infinite_walk(&nu, &cars, &c)?;
            if w.pool.too_small {
                eprintln!(
                    "warning: flux pool too small: {} draws from {} values (ratio {})",
                    w.pool.consumed,
                    w.pool.size,
                    format_float(w.pool.resampling_ratio)
                );
            }
            (w.distribution.clone(), Some(w))
        }
    };
    let mean = dist.mean();
    let rep = FluxInfReport {
        method,
        height,
        replicates: dist.replicates,
        overflow_count: dist.overflow_count,
        diverged_count: dist.diverged_count,
        diverged: dist.diverged,
        mean: format_float(mean.point),
        se: format_float(mean.std_error),
        seed: cfg.seed(),
        z_mean: walk.as_ref().map(|w| format_float(w.z_mean.point)),
        z_se: walk.as_ref().map(|w| format_float(w.z_mean.std_error)),
        pool: walk.as_ref().map(|w| &w.pool),
        histogram: dist.histogram().into_iter().collect(),
    };
    match cfg.format() {
        Format::Json => {
            let mut s =
                serde_json::to_string_pretty(&rep).map_err(|e| CliError::Io(e.to_string()))?;
            s.push('\n');
            out.write(&s, "json")
        }
        Format::Csv => {
            let mut s = String::from("flux,count\n");
            for (f, c) in &rep.histogram {
                s.push_str(&format!("{f},{c}\n"));
            }
            if dist.diverged {
                eprintln!(
                    "warning: {} of {} replicates exceeded flux {threshold}",
                    dist.diverged_count,
                    dist.values.len()
                );
            }
            eprintln!("mean={} se={} diverged={}", rep.mean, rep.se, rep.diverged);
            out.write(&s, "csv")
        }
    }
}

fn spinal(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let nu = cfg.offspring()?;
    let functional = match (cfg.h0, cfg.k) {
        (Some(height), Some(top_size)) => SpinalFunctional::HeightTopSize { height, top_size },
        (None, None) => SpinalFunctional::Zero,
        _ => return Err(config_err("--h0 and --k go together")),
    };
    let r = montecarlo::spinal_check(&nu, functional, cfg.reps()?, cfg.seed())?;
    out.text(&[
        ("lhs", format_float(r.lhs.point)),
        ("lhs_se", format_float(r.lhs.std_error)),
        ("rhs", format_float(r.rhs.point)),
        ("rhs_se", format_float(r.rhs.std_error)),
        ("z", format_float(r.difference().abs() / r.combined_se())),
        ("seed", cfg.seed().to_string()),
    ])
}

fn sweep(cfg: &ExperimentConfig, out: Output) -> Result<(), CliError> {
    let nu = cfg.offspring()?;
    let family =
        CarFamily::parse(cfg.car_family.as_deref().unwrap_or("poisson")).map_err(config_err)?;
    let grid = cfg.grid.clone().unwrap_or_default();
    if let Some(bad) = grid.iter().find(|m| !m.is_finite()) {
        return Err(config_err(format!("grid value {bad} is not finite")));
    }
    let sc = SweepConfig {
        reps: cfg.reps()?,
        cap: cfg.cap()?,
        conditioned_n: cfg.n,
        conditioned_reps: positive(cfg.n_reps.unwrap_or(100), "n_reps")?,
        seed: cfg.seed(),
    };
    let rows = montecarlo::sweep(&nu, family, &grid, &sc);
    for r in &rows {
        if let Some(e) = &r.error {
            eprintln!("warning: m = {}: {e}", r.m);
        }
        if r.cap_sensitive {
            eprintln!("note: m = {}: estimates moved by at least one standard error when the cap was doubled", r.m);
        }
    }
    let report: Vec<ReportRow> = rows.iter().map(ReportRow::from).collect();
    out.report(&report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(
            std::iter::once("gwpark").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn regime_example() {
        let (code, out, _) = run_capture(&[
            "regime",
            "--offspring",
            "poisson:1",
            "--cars",
            "poisson:0.25",
        ]);
        assert_eq!(code, 0);
        assert_eq!(
            out,
            "theta=5.00000000e-1\nregime=subcritical\nt_max=2.43844719e0\n"
        );
    }

    #[test]
    fn phi_example() {
        let (code, out, _) = run_capture(&[
            "phi",
            "--t",
            "1",
            "--offspring",
            "poisson:1",
            "--cars",
            "poisson:0.25",
        ]);
        assert_eq!(code, 0);
        assert_eq!(out, "phi=4.28932188e-2\n");
    }

    #[test]
    fn park_demo_example() {
        let (code, out, _) = run_capture(&["park-demo", "--tree", "path3", "--labels", "0,1,2"]);
        assert_eq!(code, 0);
        assert_eq!(out, "flux=0\noccupied=1,1,1\nedge_flux=1,1\n");
    }

    #[test]
    fn config_errors_exit_2() {
        assert_eq!(run_capture(&["regime", "--offspring", "poisson:1"]).0, 2);
        assert_eq!(
            run_capture(&["regime", "--offspring", "cauchy:1", "--cars", "poisson:1"]).0,
            2
        );
        assert_eq!(
            run_capture(&[
                "mean-flux",
                "--offspring",
                "poisson:0.9",
                "--cars",
                "poisson:0.1"
            ])
            .0,
            2
        );
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(
            run_capture(&["park-demo", "--tree", "loop3", "--labels", "1"]).0,
            2
        );
    }

    #[test]
    fn estimator_error_exits_3() {
        let (code, _, err) = run_capture(&[
            "mean-flux",
            "--offspring",
            "finite:0=0.001,1=0.998,2=0.001",
            "--cars",
            "poisson:0.2",
            "--reps",
            "5",
            "--cap",
            "1",
        ]);
        assert_eq!(code, 3, "{err}");
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn config_merge() {
        let base = ExperimentConfig::from_json(
            r#"{"reps": 10, "seed": 3, "cars": {"family": "poisson", "rate": 0.5}}"#,
        )
        .unwrap();
        let flags = ExperimentConfig {
            seed: Some(9),
            ..Default::default()
        };
        let m = base.merged(flags);
        assert_eq!((m.reps, m.seed), (Some(10), Some(9)));
        assert_eq!(m.cars, Some(DistSpec::Poisson { rate: 0.5 }));
        assert!(ExperimentConfig::from_json(r#"{"repz": 10}"#).is_err());
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let (code, out, _) = run_capture(&["sweep", "--offspring", "poisson:1"]);
        assert_eq!(code, 0);
        assert_eq!(out, format!("{}\n", report::CSV_HEADER));
    }
}
