//! GCV scoring and minimization over `(lambda, theta ratio, Omega)`.
//!
//! Coordinates are base-10 logarithms of lambda, the kernel ratio
//! `theta12 / theta1` and the correlation ratio `sigma^2 / sigma_b^2`. For a
//! 2-dimensional random effect the ratio matrix `Omega = sigma^2 B^-1` is
//! written `L L'` with `L = [[10^a, 0], [c, 10^b]]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataspec::{FunctionalDataset, RandomEffectKind};
use crate::error::{Error, ErrorClass, Result};
use crate::pls::{Design, PenalizedSystem, PlsSolution, SmoothingParams, WeightedDesign};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningPoint {
    pub log_lambda: f64,
    /// Absent under the additive structure.
    pub log_theta_ratio: Option<f64>,
    /// Empty without random effects, one entry for `p = 1`, three for `p = 2`.
    pub log_corr: Vec<f64>,
}

impl TuningPoint {
    pub fn default_for(has_ratio: bool, p: usize) -> Self {
        Self {
            log_lambda: -4.0,
            log_theta_ratio: has_ratio.then_some(0.0),
            log_corr: default_corr(p, 0.0),
        }
    }

    pub fn lambda(&self) -> f64 {
        10f64.powf(self.log_lambda)
    }

    pub fn theta_ratio(&self) -> f64 {
        self.log_theta_ratio.map_or(0.0, |v| 10f64.powf(v))
    }

    /// `Omega = sigma^2 B^-1` block.
    pub fn omega(&self) -> DMatrix<f64> {
        match self.log_corr.len() {
            0 => DMatrix::zeros(0, 0),
            1 => DMatrix::from_element(1, 1, 10f64.powf(self.log_corr[0])),
            _ => {
                let l = DMatrix::from_row_slice(
                    2,
                    2,
                    &[10f64.powf(self.log_corr[0]), 0.0, self.log_corr[2], 10f64.powf(self.log_corr[1])],
                );
                &l * l.transpose()
            }
        }
    }

    pub fn params(&self) -> SmoothingParams {
        SmoothingParams { lambda: self.lambda(), theta_ratio: self.theta_ratio(), omega: self.omega() }
    }

    /// Number of free tuning coordinates.
    pub fn dim(&self) -> usize {
        1 + usize::from(self.log_theta_ratio.is_some()) + self.log_corr.len()
    }

    pub fn coords(&self) -> Vec<f64> {
        let mut v = vec![self.log_lambda];
        v.extend(self.log_theta_ratio);
        v.extend(&self.log_corr);
        v
    }

    fn with_coords(&self, x: &[f64]) -> Self {
        let mut at = 1;
        let log_theta_ratio = self.log_theta_ratio.map(|_| {
            at += 1;
            x[1]
        });
        Self { log_lambda: x[0], log_theta_ratio, log_corr: x[at..].to_vec() }
    }
}

fn default_corr(p: usize, level: f64) -> Vec<f64> {
    match p {
        0 => vec![],
        1 => vec![level],
        _ => vec![level / 2.0, level / 2.0, 0.0],
    }
}

#[derive(Debug, Clone)]
pub struct GcvResult {
    pub point: TuningPoint,
    pub score: f64,
    pub trace_a: f64,
    pub evaluations: usize,
    /// Some coordinate of the minimizer sits on a search bound.
    pub clipped: bool,
    pub solution: PlsSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvOptions {
    pub log_lambda_bounds: (f64, f64),
    pub log_ratio_bounds: (f64, f64),
    pub grid_lambda: usize,
    pub grid_corr: usize,
    pub starts: usize,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    /// Extra starting point tried next to the grid.
    #[serde(default)]
    pub warm_start: Option<TuningPoint>,
}

impl Default for GcvOptions {
    fn default() -> Self {
        Self {
            log_lambda_bounds: (-8.0, 2.0),
            log_ratio_bounds: (-4.0, 4.0),
            grid_lambda: 7,
            grid_corr: 5,
            starts: 3,
            rel_tol: 1e-7,
            max_iter: 100,
            fd_step: 1e-4,
            warm_start: None,
        }
    }
}

/// GCV score of `system` at response `y`.
pub fn gcv_score(y: &DVector<f64>, system: &PenalizedSystem) -> Result<f64> {
    system.solve(y)?.gcv()
}

/// Minimizes GCV for a single-cluster fit of `dataset`.
pub fn minimize_gcv(
    dataset: &FunctionalDataset,
    re: Option<RandomEffectKind>,
    knot_cap: usize,
    opts: &GcvOptions,
) -> Result<GcvResult> {
    let (knots, _) = dataset.knots_capped(knot_cap);
    let design = Design::from_dataset(dataset, &knots, re)?;
    let weights = vec![1.0; design.n_subjects()];
    minimize_weighted(&design.weighted(&weights)?, opts)
}

struct Objective<'a, 'b> {
    wd: &'b WeightedDesign<'a>,
    template: TuningPoint,
    lower: Vec<f64>,
    upper: Vec<f64>,
    evaluations: usize,
}

impl Objective<'_, '_> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let point = self.template.with_coords(x);
        match self.wd.fit(&point.params()).and_then(|s| s.gcv()) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Ok(f64::INFINITY),
            Err(e) if e.class() == ErrorClass::Numerical => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn gradient(&mut self, x: &[f64], fx: f64, h: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let up = (x[i] + h).min(self.upper[i]);
            let lo = (x[i] - h).max(self.lower[i]);
            let mut xp = x.to_vec();
            xp[i] = up;
            let fp = if up > x[i] { self.eval(&xp)? } else { fx };
            xp[i] = lo;
            let fm = if lo < x[i] { self.eval(&xp)? } else { fx };
            let span = up - lo;
            g[i] = if span > 0.0 && fp.is_finite() && fm.is_finite() { (fp - fm) / span } else { 0.0 };
        }
        Ok(g)
    }

    /// Projected BFGS from `x0`.
    fn descend(&mut self, x0: Vec<f64>, f0: f64, opts: &GcvOptions) -> Result<(Vec<f64>, f64)> {
        let n = x0.len();
        let mut x = x0;
        let mut fx = f0;
        let mut g = self.gradient(&x, fx, opts.fd_step)?;
        let mut h = DMatrix::<f64>::identity(n, n);
        for _ in 0..opts.max_iter {
            let gv = DVector::from_column_slice(&g);
            let mut dir = -(&h * &gv);
            // freeze coordinates pinned at a bound and pushed outward
            for i in 0..n {
                let at_lo = x[i] <= self.lower[i] && dir[i] < 0.0;
                let at_hi = x[i] >= self.upper[i] && dir[i] > 0.0;
                if at_lo || at_hi {
                    dir[i] = 0.0;
                }
            }
            if dir.dot(&gv) >= 0.0 {
                h = DMatrix::identity(n, n);
                dir = -gv.clone();
                for i in 0..n {
                    if (x[i] <= self.lower[i] && dir[i] < 0.0) || (x[i] >= self.upper[i] && dir[i] > 0.0) {
                        dir[i] = 0.0;
                    }
                }
            }
            let step_max = dir.amax();
            if step_max == 0.0 {
                break;
            }
            if step_max > 2.0 {
                dir *= 2.0 / step_max;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let mut xn: Vec<f64> = (0..n).map(|i| x[i] + alpha * dir[i]).collect();
                self.clamp(&mut xn);
                let fnew = self.eval(&xn)?;
                let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
                if fnew.is_finite() && fnew <= fx + 1e-4 * decrease.min(0.0) {
                    accepted = Some((xn, fnew));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((xn, fnew)) = accepted else { break };
            let gn = self.gradient(&xn, fnew, opts.fd_step)?;
            let s = DVector::from_iterator(n, (0..n).map(|i| xn[i] - x[i]));
            let yv = DVector::from_iterator(n, (0..n).map(|i| gn[i] - g[i]));
            let sy = s.dot(&yv);
            if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
                let rho = 1.0 / sy;
                let i_n = DMatrix::<f64>::identity(n, n);
                let left = &i_n - &s * yv.transpose() * rho;
                let right = &i_n - &yv * s.transpose() * rho;
                h = &left * &h * &right + &s * s.transpose() * rho;
            }
            let rel = (fx - fnew).abs() / fx.abs().max(f64::MIN_POSITIVE);
            x = xn;
            fx = fnew;
            g = gn;
            if rel <= opts.rel_tol {
                break;
            }
        }
        Ok((x, fx))
    }
}

fn better(a: (&[f64], f64), b: (&[f64], f64)) -> bool {
    match a.1.partial_cmp(&b.1) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Equal) => a.0.partial_cmp(b.0) == Some(std::cmp::Ordering::Less),
        _ => false,
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Minimizes weighted GCV on a prepared design.
pub fn minimize_weighted(wd: &WeightedDesign<'_>, opts: &GcvOptions) -> Result<GcvResult> {
    let design = wd.design();
    let p = design.re_dim();
    let template = TuningPoint::default_for(design.has_interaction(), p);
    let dim = template.dim();
    let mut lower = vec![opts.log_ratio_bounds.0; dim];
    let mut upper = vec![opts.log_ratio_bounds.1; dim];
    lower[0] = opts.log_lambda_bounds.0;
    upper[0] = opts.log_lambda_bounds.1;
    let mut obj = Objective { wd, template: template.clone(), lower, upper, evaluations: 0 };

    let lambdas = linspace(opts.log_lambda_bounds.0, opts.log_lambda_bounds.1, opts.grid_lambda);
    let corr_levels = if p > 0 {
        linspace(opts.log_ratio_bounds.0, opts.log_ratio_bounds.1, opts.grid_corr)
    } else {
        vec![0.0]
    };
    let mut grid: Vec<(Vec<f64>, f64)> = Vec::new();
    for &ll in &lambdas {
        for &lc in &corr_levels {
            let point = TuningPoint { log_lambda: ll, log_corr: default_corr(p, lc), ..template.clone() };
            let x = point.coords();
            let v = obj.eval(&x)?;
            grid.push((x, v));
        }
    }
    if let Some(ws) = &opts.warm_start {
        if ws.dim() == dim {
            let mut x = ws.coords();
            obj.clamp(&mut x);
            let v = obj.eval(&x)?;
            grid.push((x, v));
        }
    }
    grid.retain(|(_, v)| v.is_finite());
    if grid.is_empty() {
        return Err(Error::OptimFailure);
    }
    grid.sort_by(|a, b| {
        a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut best = grid[0].clone();
    for (x0, f0) in grid.iter().take(opts.starts.max(1)).cloned() {
        let (x, f) = obj.descend(x0, f0, opts)?;
        if better((&x, f), (&best.0, best.1)) {
            best = (x, f);
        }
    }
    let point = template.with_coords(&best.0);
    let solution = wd.fit(&point.params())?;
    let score = solution.gcv()?;
    let clipped = best.0.iter().enumerate().any(|(i, &v)| v <= obj.lower[i] || v >= obj.upper[i]);
    Ok(GcvResult {
        point,
        score,
        trace_a: solution.trace,
        evaluations: obj.evaluations + 1,
        clipped,
        solution,
    })
}
