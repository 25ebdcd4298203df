//! Posterior mean, posterior variance and pointwise Bayesian bands for
//! fitted curves.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataspec::{DomainSpec, Point, Structure};
use crate::error::{Error, Result};
use crate::gcv::GcvResult;
use crate::linalg::spd_inverse_logdet;
use crate::mixture::ClusteringResult;
use crate::pls::PlsSolution;
use crate::rkhs::{KernelModel, ThetaWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveQuery {
    pub grid: Vec<Point>,
    /// Stacked per-subject random-effect selectors (`n p` entries); `None`
    /// asks for the population curve.
    pub z: Option<Vec<f64>>,
    pub alpha: f64,
}

impl CurveQuery {
    pub fn population(grid: Vec<Point>, alpha: f64) -> Self {
        Self { grid, z: None, alpha }
    }

    /// `n_t` equally spaced times on `[0, 1]` for every factor level.
    pub fn regular(levels: usize, n_t: usize, alpha: f64) -> Self {
        let mut grid = Vec::with_capacity(levels * n_t);
        for tau in 1..=levels {
            for j in 0..n_t {
                let t = if n_t == 1 { 0.0 } else { j as f64 / (n_t - 1) as f64 };
                grid.push(Point::new(t, tau));
            }
        }
        Self::population(grid, alpha)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub grid: Vec<Point>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid points whose variance was clipped to zero.
    pub clipped: usize,
}

impl CurveBand {
    pub fn half_widths(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| 0.5 * (u - l)).collect()
    }
}

/// A solved system together with what is needed to evaluate it off the data.
#[derive(Debug, Clone, Copy)]
pub struct CurveFit<'a> {
    pub kernel: KernelModel,
    pub knots: &'a [Point],
    pub solution: &'a PlsSolution,
    /// Residual variance `sigma^2`.
    pub sigma2: f64,
    /// `p x p` block of `Omega` used in the fit.
    pub omega: &'a DMatrix<f64>,
}

impl<'a> CurveFit<'a> {
    pub fn new(
        domain: DomainSpec,
        theta_ratio: f64,
        knots: &'a [Point],
        solution: &'a PlsSolution,
        sigma2: f64,
        omega: &'a DMatrix<f64>,
    ) -> Result<Self> {
        let theta = match domain.structure {
            Structure::Additive => ThetaWeights::additive(),
            Structure::Interaction => ThetaWeights::with_ratio(theta_ratio),
        };
        let kernel = KernelModel::new(domain, theta)?;
        if knots.len() != solution.c.len() {
            return Err(Error::InvalidConfig(format!(
                "{} knots for {} kernel coefficients",
                knots.len(),
                solution.c.len()
            )));
        }
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::Domain(format!("sigma^2 must be nonnegative, got {sigma2}")));
        }
        Ok(Self { kernel, knots, solution, sigma2, omega })
    }

    fn phi_xi(&self, x: Point) -> Result<(Vec<f64>, DVector<f64>)> {
        let phi = self.kernel.eval_basis(x)?;
        let mut xi = DVector::zeros(self.knots.len());
        for (j, &s) in self.knots.iter().enumerate() {
            xi[j] = self.kernel.eval_kernel(s, x)?;
        }
        Ok((phi, xi))
    }

    fn subject_selectors(&self, z: Option<&[f64]>) -> Result<Vec<(usize, DVector<f64>)>> {
        let Some(z) = z else { return Ok(Vec::new()) };
        let n = self.solution.b.len();
        let p = self.omega.nrows();
        if z.len() != n * p {
            return Err(Error::InvalidConfig(format!("z has {} entries, expected {}", z.len(), n * p)));
        }
        if p == 0 {
            return Ok(Vec::new());
        }
        Ok(z.chunks(p)
            .enumerate()
            .filter(|(_, c)| c.iter().any(|&v| v != 0.0))
            .map(|(i, c)| (i, DVector::from_column_slice(c)))
            .collect())
    }
}

/// `phi' d + xi' c + z' b` at every grid point.
pub fn posterior_mean(fit: &CurveFit<'_>, query: &CurveQuery) -> Result<Vec<f64>> {
    let sel = fit.subject_selectors(query.z.as_deref())?;
    let offset: f64 = sel.iter().map(|(i, zi)| zi.dot(&fit.solution.b[*i])).sum();
    query
        .grid
        .iter()
        .map(|&x| {
            let (phi, xi) = fit.phi_xi(x)?;
            let d: f64 = phi.iter().zip(fit.solution.d.iter()).map(|(a, b)| a * b).sum();
            Ok(d + xi.dot(&fit.solution.c) + offset)
        })
        .collect()
}

/// Posterior variance of `mu(x) + z' b`, clipped at zero.
///
/// With the random effects integrated out the posterior of `(d, c)` has
/// precision `G / sigma^2`; given `(d, c)`, `b_i` has covariance
/// `sigma^2 (Z_i'Z_i + Omega)^-1 / w_i` and mean linear in `(d, c)`.
pub fn posterior_variance(fit: &CurveFit<'_>, query: &CurveQuery) -> Result<(Vec<f64>, usize)> {
    let raw = raw_variance(fit, query)?;
    let mut clipped = 0;
    let mut out = Vec::with_capacity(raw.len());
    for v in raw {
        if v < 0.0 {
            clipped += 1;
            out.push(0.0);
        } else {
            out.push(v);
        }
    }
    Ok((out, clipped))
}

fn raw_variance(fit: &CurveFit<'_>, query: &CurveQuery) -> Result<Vec<f64>> {
    let sol = fit.solution;
    let sel = fit.subject_selectors(query.z.as_deref())?;
    let q = sol.factor.dim();
    let mut shift = DVector::zeros(q);
    let mut local = 0.0;
    for (i, zi) in &sel {
        match sol.re_block(*i) {
            Some(block) => {
                let dz = &block.d_inv * zi;
                shift += &block.xtz * &dz;
                local += zi.dot(&dz) / block.weight;
            }
            None => {
                let (inv, _) = spd_inverse_logdet(fit.omega).ok_or(Error::SingularSystem)?;
                local += zi.dot(&(inv * zi));
            }
        }
    }
    let points: Vec<Point> = query.grid.clone();
    points
        .par_iter()
        .map(|&x| {
            let (phi, xi) = fit.phi_xi(x)?;
            let u = sol.reduce(&phi, &xi) - &shift;
            Ok(fit.sigma2 * (sol.inv_quad(&u) + local))
        })
        .collect()
}

/// `Phi^-1(1 - alpha / 2)`.
pub fn normal_multiplier(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - alpha / 2.0))
}

/// Pointwise band `mean +- Phi^-1(1 - alpha/2) sqrt(variance)`.
pub fn band_from_moments(grid: Vec<Point>, mean: Vec<f64>, variance: Vec<f64>, alpha: f64, clipped: usize) -> Result<CurveBand> {
    let z = normal_multiplier(alpha)?;
    let half: Vec<f64> = variance.iter().map(|v| z * v.max(0.0).sqrt()).collect();
    let lower = mean.iter().zip(&half).map(|(m, h)| m - h).collect();
    let upper = mean.iter().zip(&half).map(|(m, h)| m + h).collect();
    Ok(CurveBand { grid, mean, variance, lower, upper, clipped })
}

pub fn confidence_band(fit: &CurveFit<'_>, query: &CurveQuery) -> Result<CurveBand> {
    query.validate()?;
    let mean = posterior_mean(fit, query)?;
    let (variance, clipped) = posterior_variance(fit, query)?;
    band_from_moments(query.grid.clone(), mean, variance, query.alpha, clipped)
}

/// Population band of every cluster from its weighted fit. `knots` must be
/// the knots the clustering was run with.
pub fn cluster_bands(
    result: &ClusteringResult,
    domain: DomainSpec,
    knots: &[Point],
    query: &CurveQuery,
) -> Result<Vec<CurveBand>> {
    let pop = CurveQuery { z: None, ..query.clone() };
    let sigma2 = result.state.sigma2;
    result
        .state
        .clusters
        .iter()
        .map(|c| {
            let omega = if c.b_cov.nrows() == 0 { DMatrix::zeros(0, 0) } else { omega_from_cov(&c.b_cov, sigma2)? };
            let fit = CurveFit::new(domain, c.theta_ratio(), knots, &c.solution, sigma2, &omega)?;
            confidence_band(&fit, &pop)
        })
        .collect()
}

fn omega_from_cov(b_cov: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    let (inv, _) = spd_inverse_logdet(b_cov).ok_or(Error::SingularSystem)?;
    Ok(inv * sigma2)
}

/// `rss / (N - tr A)` of a single fit.
pub fn residual_variance(solution: &PlsSolution) -> Result<f64> {
    let dof = solution.n_weighted - solution.weighted_trace;
    if !(dof > 0.0) {
        return Err(Error::DegenerateTrace(dof));
    }
    Ok(solution.rss / dof)
}

/// Band of a single GCV fit on `knots`, with [`residual_variance`] as
/// `sigma^2`.
pub fn gcv_fit_band(domain: DomainSpec, knots: &[Point], fit: &GcvResult, query: &CurveQuery) -> Result<CurveBand> {
    let sigma2 = residual_variance(&fit.solution)?;
    let omega = fit.point.omega();
    let cf = CurveFit::new(domain, fit.point.theta_ratio(), knots, &fit.solution, sigma2, &omega)?;
    confidence_band(&cf, query)
}
