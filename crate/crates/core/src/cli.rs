//! Batch front end: `varadhan-lab <subcommand> [--config FILE] [--set k=v]...`.
//!
//! Every run writes `config.toml` (the resolved configuration, output directory reset)
//! and `manifest.json` next to its artifacts. The manifest records the config hash, seed, subcommand and the
//! sha256 of each artifact; on failure it is still written with `status = "failed"`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mc::{endpoint_samples, moments, support_convergence, varadhan_sweep, write_support_csv, DensityCurve};
use crate::noise::ControlH;
use crate::rate::{write_profile_csv, RateOptions, RateSolver};
use crate::solver::{simulate, Propagator};
use crate::validation;

#[derive(Debug, Parser)]
#[command(name = "varadhan-lab", version, about = "Small-noise SPDE density asymptotics")]
pub struct Cli {
    /// TOML configuration file; defaults apply when omitted
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// override one key, e.g. `--set grid.nx=128` (repeatable)
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// worker threads for replica loops
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// shorthand for `--set grid.seed=S`
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory, overriding `output.directory`
    #[arg(long, global = true, env = "VARADHAN_LAB_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// print the resolved configuration and a cost estimate, then exit
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// one solution field on one noise path
    Simulate,
    /// KDE of u(t,x) for each level in `model.eps_list`
    Density,
    /// rate function at `task.y` or over `task.y_grid`
    Rate,
    /// eps^2 log p(y) against -I(y)
    Varadhan,
    /// support probe over `task.budgets` and C1/C2 approximations over `task.levels`
    Support,
    /// built-in numerical checks
    Validate {
        /// include the slow nonlinear Varadhan comparison
        #[arg(long)]
        full: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Density => "density",
            Command::Rate => "rate",
            Command::Varadhan => "varadhan",
            Command::Support => "support",
            Command::Validate { .. } => "validate",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub timestamp: String,
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub version: String,
    pub status: String,
    pub error: Option<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Collects artifacts written into one output directory.
struct Outputs {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, entries: Vec::new() })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.entries.push(ArtifactEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn put_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(name, &buf)
    }
}

/// Resolves the configuration from file, `--set`, `--seed` and `--out`.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("grid.seed={s}"));
    }
    if let Some(o) = &cli.out {
        let quoted = toml::Value::String(o.display().to_string()).to_string();
        overrides.push(format!("output.directory={quoted}"));
    }
    match &cli.config {
        Some(p) => ExperimentConfig::from_file(p, &overrides),
        None => ExperimentConfig::parse("", &overrides),
    }
}

/// Rough cost of one run: bytes held by the propagator and one trajectory, and
/// floating-point work for the replica loops.
pub fn estimate(cfg: &ExperimentConfig, command: &Command) -> (usize, f64) {
    let g = &cfg.grid;
    let points = g.nx.pow(cfg.model.dim as u32);
    let modes = (2 * g.nk).pow(cfg.model.dim as u32);
    let kernel = g.nt * points * 16;
    let traj = 2 * (g.nt + 1) * points * 8;
    let path = g.nt * modes * 8;
    let bytes = kernel + traj + path;
    let fft = points as f64 * (points as f64).log2().max(1.0);
    let per_solve = (g.nt * g.nt) as f64 * fft * 4.0;
    let solves = match command {
        Command::Simulate => 1.0,
        Command::Density => (cfg.task.replicas * cfg.model.eps_list.len()) as f64,
        Command::Rate => 2000.0 * cfg.task.y_grid.len().max(1) as f64,
        Command::Varadhan => (cfg.task.replicas * cfg.model.eps_list.len()) as f64,
        Command::Support => (cfg.task.replicas * cfg.task.levels.len() * 3) as f64,
        Command::Validate { .. } => 0.0,
    };
    (bytes, solves * per_solve)
}

fn rate_options(cfg: &ExperimentConfig) -> RateOptions {
    RateOptions { tol_c: cfg.task.tol_c, seed: cfg.grid.seed, ..Default::default() }
}

fn targets(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    if !cfg.task.y_grid.is_empty() {
        return Ok(cfg.task.y_grid.clone());
    }
    cfg.task.y.map(|y| vec![y]).ok_or_else(|| Error::Config("task.y or task.y_grid is required".into()))
}

fn run_simulate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid_spec()?;
    let prop = Propagator::new(&model, &grid)?;
    let path = prop.sample_path(0);
    let field = simulate(&model, &grid, &path)?;
    let obs = cfg.observation()?;
    out.put_with("field_slice.csv", |b| field.write_slice_csv(obs.time_index, b))?;
    out.put_with("path.csv", |b| path.write_csv(b))?;
    if cfg.writes_binary() {
        out.put_with("field.bin", |b| field.write_binary(b))?;
        out.put_with("path.bin", |b| path.write_binary(b))?;
    }
    let u = field.at(obs.time_index, obs.point_index);
    out.put(
        "endpoint.json",
        serde_json::to_string_pretty(&serde_json::json!({ "t": obs.t, "x": obs.x, "u": u }))?.as_bytes(),
    )
}

fn run_density(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid_spec()?;
    let obs = cfg.observation()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["eps", "y", "p_hat", "se", "log_p", "log_se"])?;
    let mut summary = Vec::new();
    for &eps in &cfg.model.eps_list {
        let prop = Propagator::new(&model.with_eps(eps), &grid)?;
        let u: Vec<f64> = endpoint_samples(&prop, &obs, eps, cfg.task.replicas, None, 0)?.iter().map(|s| s.u).collect();
        let y_grid = if cfg.task.y_grid.is_empty() {
            // five standard deviations either side of the sample mean
            let m = moments(&u);
            let sd = m.var.sqrt();
            (0..=100).map(|k| m.mean + sd * (-5.0 + 0.1 * k as f64)).collect()
        } else {
            cfg.task.y_grid.clone()
        };
        let curve = DensityCurve::from_samples(eps, &u, &y_grid, cfg.task.bandwidth)?;
        for i in 0..y_grid.len() {
            w.write_record(&[
                eps.to_string(),
                y_grid[i].to_string(),
                curve.p_hat[i].to_string(),
                curve.se[i].to_string(),
                curve.log_p[i].to_string(),
                curve.log_se[i].to_string(),
            ])?;
        }
        summary.push(serde_json::json!({
            "eps": eps, "bandwidth": curve.bandwidth, "n": curve.n, "captured_mass": curve.captured_mass()
        }));
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.put("density.csv", &bytes)?;
    out.put("density.json", serde_json::to_string_pretty(&summary)?.as_bytes())
}

fn run_rate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let ys = targets(cfg)?;
    let rs = RateSolver::new(&cfg.model_spec()?, &cfg.grid_spec()?, &cfg.observation()?, rate_options(cfg))?;
    let results = if ys.len() == 1 { vec![rs.rate(ys[0])?] } else { rs.profile(&ys)? };
    out.put_with("rate.csv", |b| write_profile_csv(&results, b))?;
    // h_star is always written in binary: `varadhan` reads it back for tilting
    for (i, r) in results.iter().enumerate() {
        out.put_with(&format!("h_star_{i}.bin"), |b| r.h_star.write_binary(b))?;
        if cfg.output.formats.iter().any(|f| f == "csv") && ys.len() == 1 {
            out.put_with(&format!("h_star_{i}.csv"), |b| r.h_star.write_csv(b))?;
        }
    }
    Ok(())
}

/// Reads `I(y)` and the minimizing control from a previous `rate` run in `dir`.
pub fn load_rate_artifact(dir: &Path, y: f64) -> Result<Option<(f64, ControlH)>> {
    let csv_path = dir.join("rate.csv");
    if !csv_path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::Reader::from_path(&csv_path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Missing(format!("rate.csv lacks column {name}")))
    };
    let (cy, ci) = (col("y")?, col("I")?);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse =
            |k: usize| rec[k].parse::<f64>().map_err(|e| Error::Missing(format!("rate.csv row {}: {e}", i + 1)));
        let ry = parse(cy)?;
        if (ry - y).abs() <= 1e-12 * y.abs().max(1.0) {
            let h_path = dir.join(format!("h_star_{i}.bin"));
            let h = ControlH::read_binary(std::fs::File::open(&h_path).map_err(|e| {
                Error::Missing(format!("rate profile required: {} unreadable ({e})", h_path.display()))
            })?)?;
            return Ok(Some((parse(ci)?, h)));
        }
    }
    Ok(None)
}

fn run_varadhan(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let y = cfg.task.y.ok_or_else(|| Error::Config("task.y is required for varadhan".into()))?;
    let rate_dir = cfg.task.rate_dir.as_ref().map(PathBuf::from).unwrap_or_else(|| out.dir.clone());
    let (rate, tilt) = match (load_rate_artifact(&rate_dir, y)?, cfg.task.rate) {
        (Some((_, h)), Some(r)) => (r, Some(h)),
        (Some((r, h)), None) => (r, Some(h)),
        (None, Some(r)) => (r, None),
        (None, None) => {
            return Err(Error::Missing(format!(
                "rate profile required: set task.rate or run `rate` with task.y = {y} into {}",
                rate_dir.display()
            )))
        }
    };
    let table = varadhan_sweep(
        &cfg.model_spec()?,
        &cfg.grid_spec()?,
        &cfg.observation()?,
        &cfg.model.eps_list,
        y,
        rate,
        cfg.task.replicas,
        tilt.as_ref(),
    )?;
    out.put_with("varadhan.csv", |b| table.write_csv(b))?;
    let summary = serde_json::json!({
        "y": table.y,
        "rate": table.rate,
        "tilted": tilt.is_some(),
        "extrapolated": table.extrapolated,
        "raw": table.raw,
        "relative_deviation": table.relative_deviation,
    });
    out.put("varadhan.json", serde_json::to_string_pretty(&summary)?.as_bytes())
}

fn run_support(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid_spec()?;
    let obs = cfg.observation()?;
    let rs = RateSolver::new(&model, &grid, &obs, rate_options(cfg))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["budget", "lower", "upper", "width"])?;
    for &b in &cfg.task.budgets {
        let (lo, hi) = rs.support_probe(cfg.task.n_controls, b, cfg.grid.seed)?;
        w.write_record(&[b.to_string(), lo.to_string(), hi.to_string(), (hi - lo).to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.put("support_probe.csv", &bytes)?;
    let h = rs.skeleton().zero_control();
    let rows = support_convergence(&model, &grid, &obs, &h, &cfg.task.levels, cfg.task.replicas, cfg.task.theta)?;
    out.put_with("support_convergence.csv", |b| write_support_csv(&rows, b))
}

fn run_validate(full: bool, out: &mut Outputs) -> Result<bool> {
    let checks = validation::run_all(full)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for c in &checks {
        writeln!(lock, "{}", c.line())?;
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    writeln!(lock, "{passed}/{} checks passed", checks.len())?;
    out.put("validate.json", serde_json::to_string_pretty(&checks)?.as_bytes())?;
    Ok(passed == checks.len())
}

fn dispatch(cfg: &ExperimentConfig, command: &Command, out: &mut Outputs) -> Result<bool> {
    match command {
        Command::Simulate => run_simulate(cfg, out).map(|_| true),
        Command::Density => run_density(cfg, out).map(|_| true),
        Command::Rate => run_rate(cfg, out).map(|_| true),
        Command::Varadhan => run_varadhan(cfg, out).map(|_| true),
        Command::Support => run_support(cfg, out).map(|_| true),
        Command::Validate { full } => run_validate(*full, out),
    }
}

/// Runs one parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if cli.dry_run {
        let (bytes, flops) = estimate(&cfg, &cli.command);
        println!("{}", cfg.canonical());
        println!("# subcommand: {}", cli.command.name());
        println!("# config hash: {}", cfg.hash());
        println!("# estimated memory: {:.1} MiB", bytes as f64 / (1u64 << 20) as f64);
        println!("# estimated work: {flops:.2e} flop (~{:.0} s on one core)", flops / 1e9);
        return 0;
    }
    let mut out = match Outputs::new(PathBuf::from(&cfg.output.directory)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: cannot create output directory {}: {e}", cfg.output.directory);
            return 1;
        }
    };
    let result = out.put("config.toml", cfg.portable().as_bytes()).and_then(|_| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.jobs {
            builder = builder.num_threads(j.max(1));
        }
        let pool = builder.build().map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&cfg, &cli.command, &mut out))
    });
    let (status, error, code) = match &result {
        Ok(true) => ("complete", None, 0),
        Ok(false) => ("complete", Some("validation checks failed".to_string()), 1),
        Err(e) => ("failed", Some(e.to_string()), 1),
    };
    let manifest = Manifest {
        timestamp: chrono::Utc::now().to_rfc3339(),
        subcommand: cli.command.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.grid.seed,
        jobs: cli.jobs,
        version: env!("CARGO_PKG_VERSION").into(),
        status: status.into(),
        error: error.clone(),
        artifacts: out.entries.clone(),
    };
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(Error::from)
        .and_then(|s| std::fs::write(out.dir.join("manifest.json"), s).map_err(Error::from));
    if let Err(e) = written {
        eprintln!("error: cannot write manifest: {e}");
        return 1;
    }
    if let Some(e) = error {
        eprintln!("error: {e}");
    }
    code
}

/// Entry point of the binary.
pub fn main() -> i32 {
    run(Cli::parse())
}
