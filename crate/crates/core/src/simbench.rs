//! Simulation study: four clusters of curves over two factor levels, scored
//! with the adjusted Rand index.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataspec::{DomainSpec, FunctionalDataset, Record, Structure};
use crate::error::{Error, Result};
use crate::mixture::{run_em, MixtureConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub cluster_sizes: Vec<usize>,
    /// Times are `j / n_times` for `j = 1..=n_times`.
    pub n_times: usize,
    /// Per-cluster `(variance, within-subject covariance)`.
    pub noise: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            cluster_sizes: vec![30, 40, 50, 30],
            n_times: 15,
            noise: vec![(1.0, 0.2), (1.2, 0.4), (1.0, 0.2), (1.2, 0.4)],
            seed: 1,
        }
    }
}

impl SimScenario {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// True mean of cluster `k` (0-based) at time `t` and factor level `tau`
/// (1 or 2; level 2 is the shifted channel).
pub fn true_mean(k: usize, t: f64, tau: usize) -> f64 {
    let shift = if tau == 2 { 2.0 } else { 0.0 };
    match k {
        0 => 3.0 * (6.0 * PI * t).sin() * (1.0 - t) + shift - 1.0,
        1 => 3.0 * (6.0 * PI * t).sin() * (1.0 - t),
        2 => 1980.0 * t.powi(7) * (1.0 - t).powi(3) + 858.0 * t.powi(2) * (1.0 - t).powi(10) - 2.0,
        3 => 3.0 * (2.0 * PI * t).sin() + shift - 1.0,
        _ => panic!("no mean function for cluster {k}"),
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: FunctionalDataset,
    /// 0-based true cluster of each subject.
    pub labels: Vec<usize>,
    /// True random intercept of each subject.
    pub intercepts: Vec<f64>,
}

impl Simulation {
    /// True `mu(x) + b_i` at every observation.
    pub fn signal(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.dataset.total_obs);
        for (i, s) in self.dataset.subjects.iter().enumerate() {
            for o in &s.obs {
                out.push(true_mean(self.labels[i], o.t, o.tau) + self.intercepts[i]);
            }
        }
        DVector::from_vec(out)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            dataset: self.dataset.subset(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            intercepts: indices.iter().map(|&i| self.intercepts[i]).collect(),
        })
    }

    /// Subjects whose true cluster is `k`.
    pub fn cluster(&self, k: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == k).collect();
        self.subset(&idx)
    }
}

pub fn generate(scenario: &SimScenario) -> Result<Simulation> {
    if scenario.cluster_sizes.is_empty() || scenario.cluster_sizes.len() > 4 {
        return Err(Error::InvalidConfig("between 1 and 4 clusters are supported".into()));
    }
    if scenario.noise.len() != scenario.cluster_sizes.len() {
        return Err(Error::InvalidConfig("one noise pair per cluster required".into()));
    }
    if scenario.n_times == 0 {
        return Err(Error::InvalidConfig("n_times must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut records = Vec::new();
    let mut labels = Vec::new();
    let mut intercepts = Vec::new();
    let mut id = 0;
    for (k, &size) in scenario.cluster_sizes.iter().enumerate() {
        let (var, cov) = scenario.noise[k];
        if !(cov >= 0.0 && var > cov) {
            return Err(Error::InvalidConfig(format!("cluster {k}: need 0 <= cov < var")));
        }
        let b_dist = Normal::new(0.0, cov.sqrt()).unwrap();
        let e_dist = Normal::new(0.0, (var - cov).sqrt()).unwrap();
        for _ in 0..size {
            let b = b_dist.sample(&mut rng);
            let subject = format!("s{id:04}");
            for tau in 1..=2 {
                for j in 1..=scenario.n_times {
                    let t = j as f64 / scenario.n_times as f64;
                    let y = true_mean(k, t, tau) + b + e_dist.sample(&mut rng);
                    records.push(Record { subject: subject.clone(), time: t, tau, y });
                }
            }
            labels.push(k);
            intercepts.push(b);
            id += 1;
        }
    }
    let domain = DomainSpec::new(1.0, 2, Structure::Additive)?;
    let dataset = FunctionalDataset::from_records(&records, domain, true)?;
    Ok(Simulation { dataset, labels, intercepts })
}

/// Quadratic loss `N^-1 sum_i ||fitted_i - mu(x_i) - Z_i b_i||^2` against the
/// generator's truth.
pub fn oracle_loss(fitted: &DVector<f64>, sim: &Simulation) -> Result<f64> {
    let signal = sim.signal();
    if fitted.len() != signal.len() {
        return Err(Error::LengthMismatch(fitted.len(), signal.len()));
    }
    Ok((fitted - &signal).norm_squared() / signal.len() as f64)
}

fn choose2(n: i128) -> i128 {
    n * (n - 1) / 2
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

/// Adjusted Rand index as an exact reduced fraction `(numerator, denominator)`.
pub fn adjusted_rand_exact(u: &[usize], v: &[usize]) -> Result<(i128, i128)> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    if u.len() < 2 {
        return Err(Error::InvalidConfig("at least two items required".into()));
    }
    let mut table = std::collections::BTreeMap::<(usize, usize), i128>::new();
    let mut rows = std::collections::BTreeMap::<usize, i128>::new();
    let mut cols = std::collections::BTreeMap::<usize, i128>::new();
    for (&a, &b) in u.iter().zip(v) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: i128 = table.values().map(|&n| choose2(n)).sum();
    let a: i128 = rows.values().map(|&n| choose2(n)).sum();
    let b: i128 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(u.len() as i128);
    let num = 2 * (total * index - a * b);
    let den = total * (a + b) - 2 * a * b;
    if den == 0 {
        // both partitions trivial in the same way
        return Ok((1, 1));
    }
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    Ok(if den < 0 { (-num, -den) } else { (num, den) })
}

pub fn adjusted_rand(u: &[usize], v: &[usize]) -> Result<f64> {
    let (n, d) = adjusted_rand_exact(u, v)?;
    Ok(n as f64 / d as f64)
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub seed: u64,
    pub ari: f64,
    pub sigma2: f64,
    pub loglik: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub replicates: usize,
    pub base_seed: u64,
    pub ari_values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub iqr: f64,
    pub runtimes: Vec<f64>,
    pub rows: Vec<ReplicateRow>,
}

/// Seed of replicate `r` under `base_seed`.
pub fn replicate_seed(base_seed: u64, r: usize) -> u64 {
    base_seed.wrapping_add(r as u64)
}

/// Generates `replicates` datasets, clusters each with `config` (its `k` is
/// used as given) and summarizes the ARI against the truth.
pub fn run_benchmark(replicates: usize, base_seed: u64, config: &MixtureConfig) -> Result<BenchmarkReport> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be at least 1".into()));
    }
    let rows: Vec<Result<ReplicateRow>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let seed = replicate_seed(base_seed, r);
            let started = Instant::now();
            let sim = generate(&SimScenario::with_seed(seed))?;
            let res = run_em(&sim.dataset, config)?;
            Ok(ReplicateRow {
                seed,
                ari: adjusted_rand(&res.hard_labels, &sim.labels)?,
                sigma2: res.state.sigma2,
                loglik: res.state.loglik,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let ari_values: Vec<f64> = rows.iter().map(|r| r.ari).collect();
    let mut sorted = ari_values.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = ari_values.iter().sum::<f64>() / replicates as f64;
    Ok(BenchmarkReport {
        replicates,
        base_seed,
        mean,
        median: quantile(&sorted, 0.5),
        iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        runtimes: rows.iter().map(|r| r.seconds).collect(),
        ari_values,
        rows,
    })
}
