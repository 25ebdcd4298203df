mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use curveclust_core::bayes::{cluster_bands, gcv_fit_band, residual_variance, CurveBand, CurveQuery};
use curveclust_core::dataspec::load_csv;
use curveclust_core::gcv::minimize_gcv;
use curveclust_core::mixture::{assignments_csv, param_count, select_k, ClusteringResult};
use curveclust_core::simbench::{generate, run_benchmark};
use curveclust_core::{Error, ErrorClass, FunctionalDataset};

use config::{Overrides, RunConfig, SeedTarget};
use output::{BicRow, ClusterSummary, FitReport, Manifest, OutputDir};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Config(String),
    Io(PathBuf, std::io::Error),
    Locked(PathBuf),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Convergence => 4,
            },
            CliError::Config(_) | CliError::Io(..) | CliError::Locked(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Locked(p) => write!(f, "{} is in use by another run (remove the lock file if stale)", p.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser)]
#[command(name = "curveclust", version, about = "Cluster functional data with mixtures of smoothing-spline mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-cluster GCV fit: fit.json and curves.csv.
    Fit(Overrides),
    /// Mixture fit over K or a K range: assignments, per-cluster curves, BIC table.
    Cluster(Overrides),
    /// Write a simulated dataset and its true labels.
    Simulate(Overrides),
    /// Repeated simulation and clustering with ARI summaries.
    Benchmark(Overrides),
    /// Only the curve files: curves.csv for K = 1, curves_k.csv otherwise.
    Curves(Overrides),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("CURVECLUST_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: CURVECLUST_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let started = Instant::now();
    match command {
        Command::Fit(ov) => {
            let cfg = RunConfig::resolve(&ov, SeedTarget::Em)?;
            let out = OutputDir::open(&cfg.out)?;
            let mut manifest = Manifest::new("fit", &cfg);
            cmd_fit(&cfg, &out, &mut manifest, true)?;
            manifest.finish(&out, started)
        }
        Command::Cluster(ov) => {
            let cfg = RunConfig::resolve(&ov, SeedTarget::Em)?;
            let out = OutputDir::open(&cfg.out)?;
            let mut manifest = Manifest::new("cluster", &cfg);
            cmd_cluster(&cfg, &out, &mut manifest, true)?;
            manifest.finish(&out, started)
        }
        Command::Curves(ov) => {
            let cfg = RunConfig::resolve(&ov, SeedTarget::Em)?;
            let out = OutputDir::open(&cfg.out)?;
            let mut manifest = Manifest::new("curves", &cfg);
            if cfg.k_values() == [1] {
                cmd_fit(&cfg, &out, &mut manifest, false)?;
            } else {
                cmd_cluster(&cfg, &out, &mut manifest, false)?;
            }
            manifest.finish(&out, started)
        }
        Command::Simulate(ov) => {
            let cfg = RunConfig::resolve(&ov, SeedTarget::Scenario)?;
            let out = OutputDir::open(&cfg.out)?;
            let mut manifest = Manifest::new("simulate", &cfg);
            let sim = generate(&cfg.scenario)?;
            out.write_dataset("data.csv", &sim.dataset)?;
            let rows = sim.dataset.subjects.iter().zip(&sim.labels).map(|(s, &l)| vec![s.id.clone(), (l + 1).to_string()]);
            out.write_csv("truth.csv", &["subject", "label"], rows)?;
            manifest.outputs = vec!["data.csv".into(), "truth.csv".into()];
            manifest.finish(&out, started)
        }
        Command::Benchmark(ov) => {
            let cfg = RunConfig::resolve(&ov, SeedTarget::Benchmark)?;
            let out = OutputDir::open(&cfg.out)?;
            let mut manifest = Manifest::new("benchmark", &cfg);
            let report = run_benchmark(cfg.replicates, cfg.base_seed, &cfg.em)?;
            out.write_json("report.json", &report)?;
            manifest.outputs = vec!["report.json".into()];
            manifest.finish(&out, started)
        }
    }
}

fn load(cfg: &RunConfig) -> Result<FunctionalDataset, CliError> {
    let path = cfg.input()?;
    if !path.exists() {
        return Err(CliError::Io(path.to_path_buf(), std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(load_csv(path, &cfg.data)?)
}

fn query(cfg: &RunConfig, ds: &FunctionalDataset) -> CurveQuery {
    CurveQuery::regular(ds.domain.factor_levels, cfg.grid_points, cfg.alpha)
}

fn cmd_fit(cfg: &RunConfig, out: &OutputDir, manifest: &mut Manifest, full: bool) -> Result<(), CliError> {
    let ds = load(cfg)?;
    let (knots, capped) = ds.knots_capped(cfg.em.knot_cap);
    let res = minimize_gcv(&ds, cfg.em.random_effect, cfg.em.knot_cap, &cfg.em.gcv)?;
    let band = gcv_fit_band(ds.domain, &knots, &res, &query(cfg, &ds))?;
    out.write_bands("curves.csv", &ds, &[band])?;
    manifest.outputs.push("curves.csv".into());
    manifest.clusters = vec![ClusterSummary::new(1, 1.0, &res.point, res.solution.weighted_trace)];
    if full {
        let sigma2 = residual_variance(&res.solution)?;
        out.write_json("fit.json", &FitReport::new(&ds, &knots, capped, &res, sigma2))?;
        manifest.outputs.insert(0, "fit.json".into());
    }
    Ok(())
}

fn cmd_cluster(cfg: &RunConfig, out: &OutputDir, manifest: &mut Manifest, full: bool) -> Result<(), CliError> {
    let ds = load(cfg)?;
    let (knots, _) = ds.knots_capped(cfg.em.knot_cap);
    let ks = cfg.k_values();
    let (best_k, table) = select_k(&ds, &ks, &cfg.em)?;
    let mut rows = Vec::new();
    let mut best: Option<&ClusteringResult> = None;
    for (k, r) in &table {
        match r {
            Ok(r) => {
                let trace_sum: f64 = r.state.clusters.iter().map(|c| c.trace()).sum();
                rows.push(BicRow {
                    k: *k,
                    loglik: Some(r.state.loglik),
                    trace_sum: Some(trace_sum),
                    n_params: Some(param_count(&r.state)),
                    bic: Some(r.bic),
                    best: *k == best_k,
                    status: "ok".into(),
                });
                if *k == best_k {
                    best = Some(r);
                }
            }
            Err(e) => rows.push(BicRow::failed(*k, e)),
        }
    }
    let best = best.ok_or(CliError::Core(Error::AllChainsFailed))?;
    let bands: Vec<CurveBand> = cluster_bands(best, ds.domain, &knots, &query(cfg, &ds))?;
    out.write_bands("curves_k.csv", &ds, &bands)?;
    manifest.outputs.push("curves_k.csv".into());
    manifest.clusters = best
        .state
        .clusters
        .iter()
        .enumerate()
        .map(|(k, c)| ClusterSummary::new(k + 1, best.state.p[k], &c.point, c.trace()))
        .collect();
    manifest.chains = best.chains.clone();
    manifest.selected_k = Some(best_k);
    manifest.sigma2 = Some(best.state.sigma2);
    if full {
        out.write_text("assignments.csv", &assignments_csv(&ds, &best.state.w)?)?;
        out.write_bic("bic.csv", &rows)?;
        manifest.outputs.splice(0..0, ["assignments.csv".to_string(), "bic.csv".to_string()]);
    }
    manifest.bic = rows;
    Ok(())
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Core(Error::MissingColumn("y".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::SingularSystem).exit_code(), 3);
        assert_eq!(CliError::Core(Error::AllChainsFailed).exit_code(), 4);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    }
}
