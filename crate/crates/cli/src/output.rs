use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use curveclust_core::bayes::CurveBand;
use curveclust_core::dataspec::save_csv;
use curveclust_core::gcv::{GcvResult, TuningPoint};
use curveclust_core::mixture::ChainSummary;
use curveclust_core::{Error, FunctionalDataset, Point};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{io_err, CliError};

const LOCK: &str = ".curveclust.lock";

/// Output directory held through a lock file for the lifetime of the value.
pub struct OutputDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { root: root.to_path_buf(), lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(lock)),
            Err(e) => Err(CliError::Io(lock, e)),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(io_err(&p))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv<I, R>(&self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let p = self.path(name);
        let file = File::create(&p).map_err(io_err(&p))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header).map_err(|e| CliError::Core(Error::Csv(e)))?;
        for row in rows {
            w.write_record(row).map_err(|e| CliError::Core(Error::Csv(e)))?;
        }
        w.flush().map_err(io_err(&p))
    }

    pub fn write_dataset(&self, name: &str, ds: &FunctionalDataset) -> Result<(), CliError> {
        Ok(save_csv(ds, self.path(name))?)
    }

    /// One file for all bands; a `cluster` column is added when there are
    /// several.
    pub fn write_bands(&self, name: &str, ds: &FunctionalDataset, bands: &[CurveBand]) -> Result<(), CliError> {
        let scale = ds.time_scale();
        let many = bands.len() > 1 || name != "curves.csv";
        let mut header = vec!["factor", "time", "mean", "variance", "lower", "upper"];
        if many {
            header.insert(0, "cluster");
        }
        let mut rows = Vec::new();
        for (k, band) in bands.iter().enumerate() {
            for (j, x) in band.grid.iter().enumerate() {
                let mut row = vec![
                    x.tau.to_string(),
                    format!("{:?}", x.t * scale),
                    format!("{:?}", band.mean[j]),
                    format!("{:?}", band.variance[j]),
                    format!("{:?}", band.lower[j]),
                    format!("{:?}", band.upper[j]),
                ];
                if many {
                    row.insert(0, (k + 1).to_string());
                }
                rows.push(row);
            }
        }
        self.write_csv(name, &header, rows)
    }

    pub fn write_bic(&self, name: &str, rows: &[BicRow]) -> Result<(), CliError> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        let lines = rows.iter().map(|r| {
            vec![
                r.k.to_string(),
                opt(r.loglik),
                opt(r.trace_sum),
                r.n_params.map_or(String::new(), |v| v.to_string()),
                opt(r.bic),
                r.best.to_string(),
                r.status.clone(),
            ]
        });
        self.write_csv(name, &["k", "loglik", "trace_sum", "n_params", "bic", "best", "status"], lines)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BicRow {
    pub k: usize,
    pub loglik: Option<f64>,
    pub trace_sum: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    pub best: bool,
    pub status: String,
}

impl BicRow {
    pub fn failed(k: usize, e: &Error) -> Self {
        Self { k, loglik: None, trace_sum: None, n_params: None, bic: None, best: false, status: e.to_string() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub mixing: f64,
    pub lambda: f64,
    pub log_lambda: f64,
    pub theta_ratio: Option<f64>,
    pub log_corr: Vec<f64>,
    pub trace: f64,
}

impl ClusterSummary {
    pub fn new(cluster: usize, mixing: f64, point: &TuningPoint, trace: f64) -> Self {
        Self {
            cluster,
            mixing,
            lambda: point.lambda(),
            log_lambda: point.log_lambda,
            theta_ratio: point.log_theta_ratio.map(|_| point.theta_ratio()),
            log_corr: point.log_corr.clone(),
            trace,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub created_unix: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    pub selected_k: Option<usize>,
    pub sigma2: Option<f64>,
    pub clusters: Vec<ClusterSummary>,
    pub bic: Vec<BicRow>,
    pub chains: Vec<ChainSummary>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_seconds: 0.0,
            outputs: Vec::new(),
            selected_k: None,
            sigma2: None,
            clusters: Vec::new(),
            bic: Vec::new(),
            chains: Vec::new(),
        }
    }

    /// Writes `manifest.json` and the resolved `config.json`.
    pub fn finish(mut self, out: &OutputDir, started: Instant) -> Result<(), CliError> {
        self.wall_seconds = started.elapsed().as_secs_f64();
        out.write_json("config.json", &self.config)?;
        out.write_json("manifest.json", &self)
    }
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub lambda: f64,
    pub log_lambda: f64,
    pub theta_ratio: Option<f64>,
    pub log_corr: Vec<f64>,
    /// Rows of the `Omega` block.
    pub omega: Vec<Vec<f64>>,
    pub trace: f64,
    pub gcv: f64,
    pub sigma2: f64,
    pub clipped: bool,
    pub evaluations: usize,
    pub knots_capped: bool,
    /// Knots as `(time, factor)` on the original time scale.
    pub knots: Vec<(f64, usize)>,
    pub d: Vec<f64>,
    pub c: Vec<f64>,
    pub random_effects: Vec<SubjectEffect>,
}

#[derive(Debug, Serialize)]
pub struct SubjectEffect {
    pub subject: String,
    pub b: Vec<f64>,
}

impl FitReport {
    pub fn new(ds: &FunctionalDataset, knots: &[Point], capped: bool, res: &GcvResult, sigma2: f64) -> Self {
        let om = res.point.omega();
        let sol = &res.solution;
        Self {
            lambda: res.point.lambda(),
            log_lambda: res.point.log_lambda,
            theta_ratio: res.point.log_theta_ratio.map(|_| res.point.theta_ratio()),
            log_corr: res.point.log_corr.clone(),
            omega: (0..om.nrows()).map(|i| om.row(i).iter().cloned().collect()).collect(),
            trace: sol.trace,
            gcv: res.score,
            sigma2,
            clipped: res.clipped,
            evaluations: res.evaluations,
            knots_capped: capped,
            knots: knots.iter().map(|k| (k.t * ds.time_scale(), k.tau)).collect(),
            d: sol.d.iter().cloned().collect(),
            c: sol.c.iter().cloned().collect(),
            random_effects: ds
                .subjects
                .iter()
                .zip(&sol.b)
                .map(|(s, b)| SubjectEffect { subject: s.id.clone(), b: b.iter().cloned().collect() })
                .collect(),
        }
    }
}
