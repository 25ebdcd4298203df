//! Rejection-controlled EM for a mixture of smoothing-spline mixed models.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataspec::{FunctionalDataset, RandomEffectKind};
use crate::error::{Error, Result};
use crate::gcv::{minimize_weighted, GcvOptions, TuningPoint};
use crate::linalg::spd_inverse_logdet;
use crate::pls::{Design, PlsSolution, SmoothingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adaptive,
    Fixed,
}

/// Threshold `c` used up to and including iteration `until` (1-based); the
/// last stage applies to every later iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcStage {
    pub until: Option<usize>,
    pub c: f64,
}

pub fn default_rc_schedule() -> Vec<RcStage> {
    vec![
        RcStage { until: Some(5), c: 0.5 },
        RcStage { until: Some(15), c: 0.1 },
        RcStage { until: None, c: 0.05 },
    ]
}

pub fn rc_threshold(schedule: &[RcStage], iteration: usize) -> f64 {
    schedule
        .iter()
        .find(|s| s.until.is_none_or(|u| iteration <= u))
        .or(schedule.last())
        .map_or(0.0, |s| s.c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureConfig {
    pub k: usize,
    pub chains: usize,
    pub rc_schedule: Vec<RcStage>,
    pub stop_patience: usize,
    /// Iteration cap of each phase.
    pub max_iter: usize,
    pub seed: u64,
    pub random_effect: Option<RandomEffectKind>,
    pub knot_cap: usize,
    /// Clusters with less total weight than this are treated as empty.
    pub min_cluster_weight: f64,
    /// Run the fixed-smoothing phase after the adaptive one.
    pub fixed_phase: bool,
    /// k-means restarts behind each chain's starting partition.
    pub kmeans_restarts: usize,
    pub gcv: GcvOptions,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            k: 4,
            chains: 3,
            rc_schedule: default_rc_schedule(),
            stop_patience: 5,
            max_iter: 100,
            seed: 1,
            random_effect: Some(RandomEffectKind::Intercept),
            knot_cap: 200,
            min_cluster_weight: 2.0,
            fixed_phase: true,
            kmeans_restarts: 10,
            gcv: GcvOptions::default(),
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.chains == 0 {
            return Err(Error::InvalidConfig("k and chains must be at least 1".into()));
        }
        if self.stop_patience == 0 || self.max_iter == 0 {
            return Err(Error::InvalidConfig("stop_patience and max_iter must be at least 1".into()));
        }
        if self.rc_schedule.iter().any(|s| !(0.0..=1.0).contains(&s.c)) {
            return Err(Error::InvalidConfig("rejection thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fitted component `k`.
#[derive(Debug, Clone)]
pub struct ClusterFit {
    pub point: TuningPoint,
    /// Absolute random-effect covariance `B_k`.
    pub b_cov: DMatrix<f64>,
    pub solution: PlsSolution,
}

impl ClusterFit {
    pub fn lambda(&self) -> f64 {
        self.point.lambda()
    }

    pub fn theta_ratio(&self) -> f64 {
        self.point.theta_ratio()
    }

    /// Effective degrees of freedom used by BIC (`tr(W_k A_k)`).
    pub fn trace(&self) -> f64 {
        self.solution.weighted_trace
    }
}

#[derive(Debug, Clone)]
pub struct MixtureState {
    pub p: Vec<f64>,
    pub sigma2: f64,
    pub clusters: Vec<ClusterFit>,
    /// `n x K` posterior weights from the E-step at these parameters.
    pub w: DMatrix<f64>,
    pub loglik: f64,
    pub iteration: usize,
    pub phase: Phase,
}

impl MixtureState {
    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        hard_labels(&self.w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub history: Vec<f64>,
    pub best_loglik: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ClusteringResult {
    pub state: MixtureState,
    pub hard_labels: Vec<usize>,
    pub bic: f64,
    pub chain_id: usize,
    /// Log-likelihood trace of the winning chain.
    pub history: Vec<f64>,
    pub chains: Vec<ChainSummary>,
}

/// Argmax per row, ties to the lowest index.
pub fn hard_labels(w: &DMatrix<f64>) -> Vec<usize> {
    (0..w.nrows())
        .map(|i| {
            let mut best = 0;
            for k in 1..w.ncols() {
                if w[(i, k)] > w[(i, best)] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-subject `Z_i'Z_i` and `Z_i'y_i`-style quantities reused by every E-step.
struct SubjectTerms {
    ztz: Vec<DMatrix<f64>>,
}

impl SubjectTerms {
    fn new(design: &Design) -> Self {
        let ztz = (0..design.n_subjects()).map(|i| design.z(i).transpose() * design.z(i)).collect();
        Self { ztz }
    }
}

/// `log phi(y_i; mean_i, Z_i B Z_i' + sigma2 I)` through the Woodbury identity.
fn log_density(
    design: &Design,
    terms: &SubjectTerms,
    i: usize,
    mean: &DVector<f64>,
    omega_inv: Option<&(DMatrix<f64>, f64)>,
    sigma2: f64,
) -> Result<f64> {
    let rows = design.subject_rows(i);
    let n = rows.len() as f64;
    let y = design.responses();
    let r = y.rows(rows.start, rows.len()) - mean.rows(rows.start, rows.len());
    let mut quad = r.norm_squared();
    let mut logdet = n * sigma2.ln();
    if let Some((omega, logdet_omega)) = omega_inv {
        // Sigma = sigma2 (I + Z Omega^-1 Z')
        let z = design.z(i);
        let zr = z.transpose() * &r;
        let inner = &terms.ztz[i] + omega;
        let (inner_inv, logdet_inner) = spd_inverse_logdet(&inner).ok_or(Error::SingularSystem)?;
        quad -= zr.dot(&(&inner_inv * &zr));
        logdet += logdet_inner - logdet_omega;
    }
    Ok(-0.5 * (n * (2.0 * PI).ln() + logdet + quad / sigma2))
}

fn omega_terms(b_cov: &DMatrix<f64>, sigma2: f64) -> Result<Option<(DMatrix<f64>, f64)>> {
    if b_cov.nrows() == 0 {
        return Ok(None);
    }
    let (b_inv, _) = spd_inverse_logdet(b_cov).ok_or(Error::SingularSystem)?;
    let omega = b_inv * sigma2;
    let (_, logdet) = spd_inverse_logdet(&omega).ok_or(Error::SingularSystem)?;
    Ok(Some((omega, logdet)))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-subject, per-cluster `log p_k + log phi_ik`.
fn joint_log_densities(
    design: &Design,
    terms: &SubjectTerms,
    p: &[f64],
    sigma2: f64,
    means: &[&DVector<f64>],
    b_covs: &[&DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    if !(sigma2 >= 1e-12) {
        return Err(Error::DegenerateCovariance(sigma2));
    }
    let k = p.len();
    let omegas = b_covs.iter().map(|b| omega_terms(b, sigma2)).collect::<Result<Vec<_>>>()?;
    let n = design.n_subjects();
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..k)
                .map(|c| {
                    if p[c] <= 0.0 {
                        return Ok(f64::NEG_INFINITY);
                    }
                    Ok(p[c].ln() + log_density(design, terms, i, means[c], omegas[c].as_ref(), sigma2)?)
                })
                .collect()
        })
        .collect();
    let mut out = DMatrix::zeros(n, k);
    for (i, row) in rows.into_iter().enumerate() {
        for (c, v) in row?.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

/// Parameters needed to evaluate the mixture density.
pub struct MixtureParams<'a> {
    pub p: &'a [f64],
    pub sigma2: f64,
    pub means: Vec<&'a DVector<f64>>,
    pub b_covs: Vec<&'a DMatrix<f64>>,
}

impl<'a> MixtureParams<'a> {
    pub fn of(state: &'a MixtureState) -> Self {
        Self {
            p: &state.p,
            sigma2: state.sigma2,
            means: state.clusters.iter().map(|c| &c.solution.mean).collect(),
            b_covs: state.clusters.iter().map(|c| &c.b_cov).collect(),
        }
    }
}

/// Posterior weights and observed log-likelihood.
pub fn estep(design: &Design, params: &MixtureParams<'_>) -> Result<(DMatrix<f64>, f64)> {
    let terms = SubjectTerms::new(design);
    estep_with(design, &terms, params)
}

fn estep_with(design: &Design, terms: &SubjectTerms, params: &MixtureParams<'_>) -> Result<(DMatrix<f64>, f64)> {
    let lj = joint_log_densities(design, terms, params.p, params.sigma2, &params.means, &params.b_covs)?;
    Ok(normalize_rows(&lj))
}

fn normalize_rows(lj: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (n, k) = lj.shape();
    let mut w = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    for i in 0..n {
        let row: Vec<f64> = lj.row(i).iter().cloned().collect();
        let lse = log_sum_exp(&row);
        ll += lse;
        let mut total = 0.0;
        for c in 0..k {
            let v = (row[c] - lse).exp();
            w[(i, c)] = v;
            total += v;
        }
        for c in 0..k {
            w[(i, c)] /= total;
        }
    }
    (w, ll)
}

/// `sum_i log sum_k p_k phi(y_i; mu_k, Sigma_k)`.
pub fn observed_loglik(design: &Design, params: &MixtureParams<'_>) -> Result<f64> {
    Ok(estep(design, params)?.1)
}

/// Stochastic thresholding of small weights followed by row normalization.
pub fn rejection_control<R: Rng + ?Sized>(w: &DMatrix<f64>, c: f64, rng: &mut R) -> DMatrix<f64> {
    if c <= 0.0 {
        return w.clone();
    }
    let (n, k) = w.shape();
    let mut out = rejection_draw(w, c, rng);
    for i in 0..n {
        let mut total: f64 = out.row(i).sum();
        if total <= 0.0 {
            let best = hard_labels(&w.rows(i, 1).into_owned())[0];
            out[(i, best)] = c;
            total = c;
        }
        for j in 0..k {
            out[(i, j)] /= total;
        }
    }
    out
}

/// The unnormalized draw `w*`.
pub fn rejection_draw<R: Rng + ?Sized>(w: &DMatrix<f64>, c: f64, rng: &mut R) -> DMatrix<f64> {
    let mut out = w.clone();
    for v in out.iter_mut() {
        if *v <= c {
            let u: f64 = rng.random();
            *v = if u < *v / c { c } else { 0.0 };
        }
    }
    out
}

/// Column means of the weight matrix.
pub fn update_mixing(w: &DMatrix<f64>) -> Vec<f64> {
    let n = w.nrows() as f64;
    (0..w.ncols()).map(|k| w.column(k).sum() / n).collect()
}

/// BIC `-2 loglik + (sum_k trace_k + P) log N`.
pub fn bic_value(loglik: f64, trace_sum: f64, n_params: usize, n_obs: usize) -> f64 {
    -2.0 * loglik + (trace_sum + n_params as f64) * (n_obs as f64).ln()
}

/// Free parameters besides the traces: mixing weights, tuning coordinates
/// and `sigma^2`.
pub fn param_count(state: &MixtureState) -> usize {
    state.k() - 1 + state.clusters.iter().map(|c| c.point.dim()).sum::<usize>() + 1
}

pub fn bic(n_obs: usize, state: &MixtureState) -> f64 {
    let traces: f64 = state.clusters.iter().map(ClusterFit::trace).sum();
    bic_value(state.loglik, traces, param_count(state), n_obs)
}

/// Smoothing parameters held fixed across an M-step.
#[derive(Debug, Clone)]
pub struct FrozenSmoothing {
    pub point: TuningPoint,
    pub b_cov: DMatrix<f64>,
}

/// One M-step: weighted fits of every cluster and the shared variance
/// update. `frozen` selects the fixed-smoothing phase.
pub fn mstep(
    design: &Design,
    w: &DMatrix<f64>,
    sigma2: f64,
    frozen: Option<&[FrozenSmoothing]>,
    warm: Option<&[TuningPoint]>,
    config: &MixtureConfig,
) -> Result<(Vec<ClusterFit>, f64)> {
    let k = w.ncols();
    for c in 0..k {
        if w.column(c).sum() < config.min_cluster_weight.min(design.n_subjects() as f64) {
            return Err(Error::EmptyCluster(c));
        }
    }
    let fits: Vec<Result<(TuningPoint, PlsSolution)>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let weights: Vec<f64> = w.column(c).iter().cloned().collect();
            let wd = design.weighted(&weights)?;
            match frozen {
                Some(fz) => {
                    let f = &fz[c];
                    let omega = match f.b_cov.nrows() {
                        0 => DMatrix::zeros(0, 0),
                        _ => f.b_cov.clone().try_inverse().ok_or(Error::SingularSystem)? * sigma2,
                    };
                    let params = SmoothingParams { lambda: f.point.lambda(), theta_ratio: f.point.theta_ratio(), omega };
                    Ok((f.point.clone(), wd.fit(&params)?))
                }
                None => {
                    let mut opts = config.gcv.clone();
                    opts.warm_start = warm.map(|ws| ws[c].clone());
                    let res = minimize_weighted(&wd, &opts)?;
                    Ok((res.point, res.solution))
                }
            }
        })
        .collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let n_obs = design.n_obs() as f64;
    let new_sigma2 = fits.iter().map(|(_, s)| s.rss).sum::<f64>() / n_obs;
    let clusters = fits
        .into_iter()
        .enumerate()
        .map(|(c, (point, solution))| {
            let b_cov = match frozen {
                Some(fz) => fz[c].b_cov.clone(),
                None => match point.omega().nrows() {
                    0 => DMatrix::zeros(0, 0),
                    _ => point.omega().try_inverse().ok_or(Error::SingularSystem)? * new_sigma2,
                },
            };
            Ok(ClusterFit { point, b_cov, solution })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clusters, new_sigma2))
}

/// Per-subject features: responses interpolated onto a 10-point grid per
/// factor level.
pub fn subject_features(dataset: &FunctionalDataset) -> Vec<Vec<f64>> {
    const GRID: usize = 10;
    let a = dataset.domain.factor_levels;
    dataset
        .subjects
        .iter()
        .map(|s| {
            let overall = s.obs.iter().map(|o| o.y).sum::<f64>() / s.len() as f64;
            let mut feat = Vec::with_capacity(GRID * a);
            for tau in 1..=a {
                let pts: Vec<(f64, f64)> = s.obs.iter().filter(|o| o.tau == tau).map(|o| (o.t, o.y)).collect();
                for g in 0..GRID {
                    let t = g as f64 / (GRID - 1) as f64;
                    feat.push(interpolate(&pts, t).unwrap_or(overall));
                }
            }
            feat
        })
        .collect()
}

/// Linear interpolation on points sorted by time, constant beyond the ends.
fn interpolate(pts: &[(f64, f64)], t: f64) -> Option<f64> {
    let first = pts.first()?;
    let last = pts.last()?;
    if t <= first.0 {
        return Some(first.1);
    }
    if t >= last.0 {
        return Some(last.1);
    }
    let j = pts.iter().position(|p| p.0 >= t)?;
    let (t0, y0) = pts[j - 1];
    let (t1, y1) = pts[j];
    if t1 == t0 {
        return Some(y1);
    }
    Some(y0 + (y1 - y0) * (t - t0) / (t1 - t0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Best of `restarts` k-means runs by within-cluster sum of squares.
pub fn kmeans<R: Rng + ?Sized>(features: &[Vec<f64>], k: usize, restarts: usize, rng: &mut R) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let labels = kmeans_once(features, k, rng);
        let wss = within_ss(features, &labels, k);
        if best.as_ref().is_none_or(|(b, _)| wss < *b) {
            best = Some((wss, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

fn within_ss(features: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(f) {
            *s += v;
        }
    }
    features
        .iter()
        .zip(labels)
        .map(|(f, &l)| {
            let n = counts[l] as f64;
            f.iter().zip(&sums[l]).map(|(v, s)| (v - s / n).powi(2)).sum::<f64>()
        })
        .sum()
}

/// One k-means run with k-means++ seeding; returns labels.
fn kmeans_once<R: Rng + ?Sized>(features: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = features.len();
    let mut centers: Vec<Vec<f64>> = vec![features[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = features
            .iter()
            .map(|f| centers.iter().map(|c| sq_dist(f, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(features[next].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(f, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = features.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(f, _)| f).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Softened indicator weights: 0.9 on the assigned cluster plus 0.1/K
/// everywhere.
pub fn initial_weights(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut w = DMatrix::from_element(labels.len(), k, 0.1 / k as f64);
    for (i, &l) in labels.iter().enumerate() {
        w[(i, l)] += 0.9;
    }
    w
}

struct ChainContext<'a> {
    design: &'a Design,
    terms: SubjectTerms,
    features: Vec<Vec<f64>>,
    config: &'a MixtureConfig,
}

struct ChainOutcome {
    best: MixtureState,
    history: Vec<f64>,
}

impl ChainContext<'_> {
    /// Reassigns the worst-fitting subject and its nearest neighbours to
    /// cluster `dead`.
    fn reseed(&self, w: &mut DMatrix<f64>, dead: usize, fit_score: &[f64]) {
        let n = w.nrows();
        let k = w.ncols();
        let worst = (0..n).min_by(|&a, &b| fit_score[a].total_cmp(&fit_score[b])).unwrap_or(0);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            sq_dist(&self.features[a], &self.features[worst]).total_cmp(&sq_dist(&self.features[b], &self.features[worst]))
        });
        let take = ((n / k) / 2).max(self.config.min_cluster_weight.ceil() as usize + 1).min(n);
        for &i in order.iter().take(take) {
            for c in 0..k {
                w[(i, c)] = if c == dead { 1.0 } else { 0.0 };
            }
        }
    }

    fn run_phase(
        &self,
        rng: &mut ChaCha8Rng,
        mut w: DMatrix<f64>,
        mut sigma2: f64,
        frozen: Option<&[FrozenSmoothing]>,
        start_iter: usize,
        reseeded: &mut bool,
        fit_score: &mut Vec<f64>,
        history: &mut Vec<f64>,
    ) -> Result<MixtureState> {
        let cfg = self.config;
        let mut best: Option<MixtureState> = None;
        let mut stale = 0;
        let mut warm: Option<Vec<TuningPoint>> = None;
        let phase = if frozen.is_some() { Phase::Fixed } else { Phase::Adaptive };
        for it in 1..=cfg.max_iter {
            let global_it = start_iter + it;
            let c = rc_threshold(&cfg.rc_schedule, global_it);
            let mut w_rc = rejection_control(&w, c, rng);
            let (clusters, new_sigma2) = loop {
                match mstep(self.design, &w_rc, sigma2, frozen, warm.as_deref(), cfg) {
                    Err(Error::EmptyCluster(dead)) if !*reseeded => {
                        *reseeded = true;
                        self.reseed(&mut w_rc, dead, fit_score);
                    }
                    other => break other?,
                }
            };
            let p = update_mixing(&w_rc);
            sigma2 = new_sigma2;
            let means: Vec<&DVector<f64>> = clusters.iter().map(|c| &c.solution.mean).collect();
            let b_covs: Vec<&DMatrix<f64>> = clusters.iter().map(|c| &c.b_cov).collect();
            let params = MixtureParams { p: &p, sigma2, means, b_covs };
            let lj = joint_log_densities(self.design, &self.terms, &p, sigma2, &params.means, &params.b_covs)?;
            let (w_new, ll) = normalize_rows(&lj);
            *fit_score = (0..lj.nrows()).map(|i| lj.row(i).max()).collect();
            history.push(ll);
            warm = Some(clusters.iter().map(|c| c.point.clone()).collect());
            let improved = best.as_ref().is_none_or(|b| ll > b.loglik + 1e-9 * b.loglik.abs().max(1.0));
            let state = MixtureState { p, sigma2, clusters, w: w_new.clone(), loglik: ll, iteration: global_it, phase };
            let keep = best.as_ref().is_none_or(|b| ll > b.loglik);
            if keep {
                best = Some(state);
            }
            if improved {
                stale = 0;
            } else {
                stale += 1;
            }
            w = w_new;
            if stale >= cfg.stop_patience || cfg.k == 1 {
                break;
            }
        }
        best.ok_or(Error::AllChainsFailed)
    }

    fn run_chain(&self, chain: usize) -> Result<ChainOutcome> {
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(chain as u64);
        let labels = kmeans(&self.features, cfg.k, cfg.kmeans_restarts, &mut rng);
        let w0 = initial_weights(&labels, cfg.k);
        let mut fit_score: Vec<f64> = vec![0.0; w0.nrows()];
        let mut history = Vec::new();
        let mut reseeded = false;
        let adaptive = self.run_phase(&mut rng, w0, 1.0, None, 0, &mut reseeded, &mut fit_score, &mut history)?;
        if !cfg.fixed_phase || cfg.k == 1 {
            return Ok(ChainOutcome { best: adaptive, history });
        }
        let frozen: Vec<FrozenSmoothing> = adaptive
            .clusters
            .iter()
            .map(|c| FrozenSmoothing { point: c.point.clone(), b_cov: c.b_cov.clone() })
            .collect();
        let start = history.len();
        let fixed = self.run_phase(
            &mut rng,
            adaptive.w.clone(),
            adaptive.sigma2,
            Some(&frozen),
            start,
            &mut reseeded,
            &mut fit_score,
            &mut history,
        )?;
        let best = if fixed.loglik > adaptive.loglik { fixed } else { adaptive };
        Ok(ChainOutcome { best, history })
    }
}

/// Runs every chain and returns the one with the lowest BIC.
pub fn run_em(dataset: &FunctionalDataset, config: &MixtureConfig) -> Result<ClusteringResult> {
    config.validate()?;
    if config.k > dataset.n_subjects() {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds the number of subjects ({})",
            config.k,
            dataset.n_subjects()
        )));
    }
    let (knots, _) = dataset.knots_capped(config.knot_cap);
    let design = Design::from_dataset(dataset, &knots, config.random_effect)?;
    run_em_on(&design, dataset, config)
}

/// As [`run_em`] on a prepared design.
pub fn run_em_on(design: &Design, dataset: &FunctionalDataset, config: &MixtureConfig) -> Result<ClusteringResult> {
    config.validate()?;
    let ctx = ChainContext { design, terms: SubjectTerms::new(design), features: subject_features(dataset), config };
    let outcomes: Vec<Result<ChainOutcome>> = (0..config.chains).into_par_iter().map(|c| ctx.run_chain(c)).collect();
    let n_obs = design.n_obs();
    let mut summaries = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, f64, ChainOutcome)> = None;
    for (chain, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                let b = bic(n_obs, &o.best);
                summaries.push(ChainSummary {
                    chain,
                    history: o.history.clone(),
                    best_loglik: Some(o.best.loglik),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, bb, _)| b < *bb) {
                    best = Some((chain, b, o));
                }
            }
            Err(e) => summaries.push(ChainSummary { chain, history: vec![], best_loglik: None, error: Some(e.to_string()) }),
        }
    }
    let (chain_id, bic_val, outcome) = best.ok_or(Error::AllChainsFailed)?;
    Ok(ClusteringResult {
        hard_labels: outcome.best.hard_labels(),
        state: outcome.best,
        bic: bic_val,
        chain_id,
        history: outcome.history,
        chains: summaries,
    })
}

/// `subject,label,w_1..w_K` rows with 1-based labels; weights use the
/// shortest representation that round-trips.
pub fn assignments_csv(dataset: &FunctionalDataset, w: &DMatrix<f64>) -> Result<String> {
    let labels = hard_labels(w);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject".to_string(), "label".to_string()];
    header.extend((1..=w.ncols()).map(|k| format!("w_{k}")));
    wtr.write_record(&header)?;
    for (i, s) in dataset.subjects.iter().enumerate() {
        let mut row = vec![s.id.clone(), (labels[i] + 1).to_string()];
        row.extend((0..w.ncols()).map(|k| format!("{:?}", w[(i, k)])));
        wtr.write_record(&row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs the EM for every K in `k_range` and returns the BIC minimizer (ties
/// to the smaller K) with the full table.
pub fn select_k(
    dataset: &FunctionalDataset,
    k_range: &[usize],
    config: &MixtureConfig,
) -> Result<(usize, Vec<(usize, Result<ClusteringResult>)>)> {
    if k_range.is_empty() {
        return Err(Error::InvalidConfig("empty K range".into()));
    }
    let (knots, _) = dataset.knots_capped(config.knot_cap);
    let design = Design::from_dataset(dataset, &knots, config.random_effect)?;
    let mut table = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let cfg = MixtureConfig { k, ..config.clone() };
        let res = if k > dataset.n_subjects() {
            Err(Error::InvalidConfig(format!("k = {k} exceeds the number of subjects")))
        } else {
            run_em_on(&design, dataset, &cfg)
        };
        table.push((k, res));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, res) in &table {
        if let Ok(r) = res {
            if best.is_none_or(|(bk, bb)| r.bic < bb || (r.bic == bb && *k < bk)) {
                best = Some((*k, r.bic));
            }
        }
    }
    let (k, _) = best.ok_or(Error::AllChainsFailed)?;
    Ok((k, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspec::{design_z, DomainSpec, Record, Structure};
    use crate::gcv::minimize_gcv;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn two_groups(seed: u64, per: usize) -> FunctionalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for i in 0..2 * per {
            let g = i / per;
            let shift: f64 = rng.random_range(-0.3..0.3);
            for j in 0..10 {
                let t = j as f64 / 9.0;
                let base = if g == 0 { (2.0 * PI * t).sin() * 2.0 } else { 3.0 * t - 1.5 };
                recs.push(Record {
                    subject: format!("s{i:03}"),
                    time: t,
                    tau: 1,
                    y: base + shift + rng.random_range(-0.4..0.4),
                });
            }
        }
        FunctionalDataset::from_records(&recs, DomainSpec::new(1.0, 1, Structure::Additive).unwrap(), true).unwrap()
    }

    fn dense_log_density(y: &DVector<f64>, mean: &DVector<f64>, z: &DMatrix<f64>, b: &DMatrix<f64>, sigma2: f64) -> f64 {
        let n = y.len();
        let sigma = z * b * z.transpose() + DMatrix::identity(n, n) * sigma2;
        let chol = sigma.clone().cholesky().unwrap();
        let r = y - mean;
        let sol = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (n as f64 * (2.0 * PI).ln() + logdet + r.dot(&sol))
    }

    fn toy_params(ds: &FunctionalDataset, p: usize) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let y = ds.responses();
        let means = vec![y.map(|v| 0.8 * v), y.map(|v| v - 0.3), y.map(|v| 0.1 * v + 0.2)];
        let b = match p {
            1 => DMatrix::from_element(1, 1, 0.4),
            _ => DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        };
        (means, vec![b.clone(), b.clone() * 2.0, b * 0.5])
    }

    #[test]
    fn estep_matches_dense_density() {
        for (p, kind) in [(1, RandomEffectKind::Intercept), (2, RandomEffectKind::InterceptSlope)] {
            let ds = two_groups(1, 2);
            let design = Design::from_dataset(&ds, &ds.knots, Some(kind)).unwrap();
            let (means, bs) = toy_params(&ds, p);
            let probs = [0.2, 0.5, 0.3];
            let params = MixtureParams { p: &probs, sigma2: 0.7, means: means.iter().collect(), b_covs: bs.iter().collect() };
            let (w, ll) = estep(&design, &params).unwrap();
            let y = ds.responses();
            let mut ll_dense = 0.0;
            for i in 0..ds.n_subjects() {
                let rows = ds.rows(i);
                let yi = y.rows(rows.start, rows.len()).into_owned();
                let z = design_z(&ds.subjects[i], kind);
                let lj: Vec<f64> = (0..3)
                    .map(|c| probs[c].ln() + dense_log_density(&yi, &means[c].rows(rows.start, rows.len()).into_owned(), &z, &bs[c], 0.7))
                    .collect();
                let lse = log_sum_exp(&lj);
                ll_dense += lse;
                for c in 0..3 {
                    assert!((w[(i, c)] - (lj[c] - lse).exp()).abs() < 1e-10);
                }
                assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
            }
            assert!((ll - ll_dense).abs() < 1e-10 * ll.abs().max(1.0));
        }
    }

    #[test]
    fn estep_worked_cases() {
        let ds = two_groups(2, 2);
        let design = Design::from_dataset(&ds, &ds.knots, None).unwrap();
        let y = ds.responses();
        let zero = DMatrix::zeros(0, 0);
        let params = MixtureParams { p: &[1.0], sigma2: 1.0, means: vec![&y], b_covs: vec![&zero] };
        let (w, _) = estep(&design, &params).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        // density ratio 2 for every subject: shift one mean so that the
        // residual norms differ by 2 sigma2 ln 2 per subject
        let mut m2 = y.clone();
        let mut start = 0;
        for s in &ds.subjects {
            let n = s.len() as f64;
            let delta = (2.0 * 2f64.ln() / n).sqrt();
            for r in start..start + s.len() {
                m2[r] += delta;
            }
            start += s.len();
        }
        let params = MixtureParams { p: &[0.5, 0.5], sigma2: 1.0, means: vec![&y, &m2], b_covs: vec![&zero, &zero] };
        let (w, _) = estep(&design, &params).unwrap();
        for i in 0..w.nrows() {
            assert!((w[(i, 0)] - 2.0 / 3.0).abs() < 1e-12);
        }
        let params = MixtureParams { p: &[1.0], sigma2: 0.0, means: vec![&y], b_covs: vec![&zero] };
        assert!(matches!(estep(&design, &params), Err(Error::DegenerateCovariance(_))));
    }

    #[test]
    fn loglik_is_additive_over_subjects() {
        let ds = two_groups(3, 2);
        let idx: Vec<usize> = vec![0, 1, 2, 3, 0];
        let dup = ds.subset(&idx).unwrap();
        let single = ds.subset(&[0]).unwrap();
        let fit = |d: &FunctionalDataset| {
            let design = Design::from_dataset(d, &ds.knots, Some(RandomEffectKind::Intercept)).unwrap();
            let mean = d.responses().map(|v| 0.9 * v);
            let b = DMatrix::from_element(1, 1, 0.3);
            observed_loglik(&design, &MixtureParams { p: &[1.0], sigma2: 0.5, means: vec![&mean], b_covs: vec![&b] }).unwrap()
        };
        assert!((fit(&dup) - fit(&ds) - fit(&single)).abs() < 1e-10);
    }

    #[test]
    fn rejection_control_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DMatrix::from_row_slice(2, 3, &[0.7, 0.28, 0.02, 0.3, 0.3, 0.4]);
        assert_eq!(rejection_control(&w, 0.0, &mut rng), w);
        let out = rejection_control(&w, 0.05, &mut rng);
        assert_eq!(out[(1, 2)], 0.4);
        for i in 0..2 {
            assert!((out.row(i).sum() - 1.0).abs() < 1e-12);
        }
        // all-zero rows get their argmax back
        let w = DMatrix::from_row_slice(1, 3, &[0.3, 0.35, 0.35]);
        for s in 0..50 {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let o = rejection_control(&w, 1.0, &mut r);
            assert!((o.row(0).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejection_draw_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = DMatrix::from_element(1, 1, 0.02);
        let draws = 100_000;
        let vals: Vec<f64> = (0..draws).map(|_| rejection_draw(&w, 0.05, &mut rng)[(0, 0)]).collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((mean - 0.02).abs() <= 3.0 * se, "{mean} +- {se}");
        assert!(vals.iter().all(|&v| v == 0.0 || v == 0.05));
    }

    #[test]
    fn mixing_update() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(update_mixing(&w), vec![0.5, 0.5]);
        let w = DMatrix::from_element(3, 4, 0.25);
        assert_eq!(update_mixing(&w), vec![0.25; 4]);
    }

    #[test]
    fn bic_arithmetic() {
        let v = bic_value(-100.0, 10.0, 5, 100);
        assert!((v - (200.0 + 15.0 * 100f64.ln())).abs() < 1e-12);
        assert!((v - 269.0776).abs() < 1e-3);
    }

    #[test]
    fn rc_schedule_lookup() {
        let s = default_rc_schedule();
        assert_eq!(rc_threshold(&s, 1), 0.5);
        assert_eq!(rc_threshold(&s, 5), 0.5);
        assert_eq!(rc_threshold(&s, 6), 0.1);
        assert_eq!(rc_threshold(&s, 15), 0.1);
        assert_eq!(rc_threshold(&s, 16), 0.05);
        assert_eq!(rc_threshold(&s, 1000), 0.05);
    }

    #[test]
    fn single_cluster_reproduces_plain_fit() {
        let ds = two_groups(4, 4);
        let cfg = MixtureConfig { k: 1, chains: 1, ..MixtureConfig::default() };
        let res = run_em(&ds, &cfg).unwrap();
        let direct = minimize_gcv(&ds, Some(RandomEffectKind::Intercept), 200, &cfg.gcv).unwrap();
        assert!((&res.state.clusters[0].solution.fitted - &direct.solution.fitted).amax() < 1e-10);
        assert_eq!(res.state.clusters[0].point, direct.point);
        assert!(res.hard_labels.iter().all(|&l| l == 0));
        assert_eq!(param_count(&res.state), direct.point.dim() + 1);
    }

    #[test]
    fn oracle_weights_split_the_fit() {
        let ds = two_groups(5, 5);
        let design = Design::from_dataset(&ds, &ds.knots, Some(RandomEffectKind::Intercept)).unwrap();
        let mut w = DMatrix::zeros(10, 2);
        for i in 0..10 {
            w[(i, i / 5)] = 1.0;
        }
        let cfg = MixtureConfig { k: 2, min_cluster_weight: 2.0, ..MixtureConfig::default() };
        let (clusters, _) = mstep(&design, &w, 1.0, None, None, &cfg).unwrap();
        for g in 0..2 {
            let idx: Vec<usize> = (g * 5..g * 5 + 5).collect();
            let part = ds.subset(&idx).unwrap();
            let sol = &clusters[g].solution;
            // same N lambda in the penalty
            let mut params_part = clusters[g].point.params();
            params_part.lambda *= ds.total_obs as f64 / part.total_obs as f64;
            let pdw = Design::from_dataset(&part, &ds.knots, Some(RandomEffectKind::Intercept)).unwrap();
            let fit = pdw.weighted(&[1.0; 5]).unwrap().fit(&params_part).unwrap();
            let rows: Vec<usize> = idx.iter().flat_map(|&i| ds.rows(i)).collect();
            for (k, &r) in rows.iter().enumerate() {
                assert!((sol.fitted[r] - fit.fitted[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn empty_cluster_detected() {
        let ds = two_groups(6, 3);
        let design = Design::from_dataset(&ds, &ds.knots, None).unwrap();
        let mut w = DMatrix::zeros(6, 2);
        for i in 0..6 {
            w[(i, 0)] = if i == 0 { 0.5 } else { 1.0 };
            w[(i, 1)] = 1.0 - w[(i, 0)];
        }
        let cfg = MixtureConfig { k: 2, ..MixtureConfig::default() };
        assert!(matches!(mstep(&design, &w, 1.0, None, None, &cfg), Err(Error::EmptyCluster(1))));
    }

    #[test]
    fn two_groups_are_recovered_and_reproducible() {
        let ds = two_groups(7, 8);
        let cfg = MixtureConfig { k: 2, chains: 2, seed: 11, ..MixtureConfig::default() };
        let a = run_em(&ds, &cfg).unwrap();
        let b = run_em(&ds, &cfg).unwrap();
        assert_eq!(a.hard_labels, b.hard_labels);
        assert_eq!(a.state.loglik.to_bits(), b.state.loglik.to_bits());
        let truth: Vec<usize> = (0..16).map(|i| i / 8).collect();
        assert_eq!(crate::simbench::adjusted_rand(&a.hard_labels, &truth).unwrap(), 1.0);
        for i in 0..a.state.w.nrows() {
            assert!((a.state.w.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relabeling_clusters_keeps_likelihood_and_bic() {
        let ds = two_groups(8, 6);
        let cfg = MixtureConfig { k: 2, chains: 1, ..MixtureConfig::default() };
        let res = run_em(&ds, &cfg).unwrap();
        let mut swapped = res.state.clone();
        swapped.p.reverse();
        swapped.clusters.reverse();
        let design = Design::from_dataset(&ds, &ds.knots, cfg.random_effect).unwrap();
        let (w, ll) = estep(&design, &MixtureParams::of(&swapped)).unwrap();
        assert!((ll - res.state.loglik).abs() < 1e-9);
        for i in 0..w.nrows() {
            assert!((w[(i, 0)] - res.state.w[(i, 1)]).abs() < 1e-12);
        }
        swapped.loglik = ll;
        assert!((bic(ds.total_obs, &swapped) - res.bic).abs() < 1e-8);
    }

    #[test]
    fn flat_blob_selects_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut recs = Vec::new();
        for i in 0..40 {
            for j in 0..10 {
                recs.push(Record { subject: format!("s{i}"), time: j as f64 / 9.0, tau: 1, y: rng.random_range(-1.0..1.0) });
            }
        }
        let ds = FunctionalDataset::from_records(&recs, DomainSpec::new(1.0, 1, Structure::Additive).unwrap(), true).unwrap();
        let cfg = MixtureConfig { chains: 1, ..MixtureConfig::default() };
        let (k, table) = select_k(&ds, &[1, 2, 3], &cfg).unwrap();
        let bics: Vec<f64> = table.iter().map(|(_, r)| r.as_ref().map_or(f64::INFINITY, |r| r.bic)).collect();
        assert_eq!(k, 1, "{bics:?}");
        let (k, table) = select_k(&ds, &[3], &cfg).unwrap();
        assert_eq!((k, table.len()), (3, 1));
    }

    proptest! {
        #[test]
        fn labels_follow_monotone_transforms(vals in prop::collection::vec(0.0f64..1.0, 12)) {
            let w = DMatrix::from_row_slice(4, 3, &vals);
            let t = w.map(|v| (3.0 * v).exp() + 2.0);
            prop_assert_eq!(hard_labels(&w), hard_labels(&t));
        }

        #[test]
        fn rejection_rows_sum_to_one(vals in prop::collection::vec(0.001f64..1.0, 12), c in 0.0f64..1.0, seed in 0u64..100) {
            let mut w = DMatrix::from_row_slice(4, 3, &vals);
            for i in 0..4 {
                let s = w.row(i).sum();
                for j in 0..3 { w[(i, j)] /= s; }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = rejection_control(&w, c, &mut rng);
            for i in 0..4 {
                prop_assert!((out.row(i).sum() - 1.0).abs() < 1e-12);
                prop_assert!(out.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }
}
