//! Penalized Henderson normal equations.
//!
//! The block system in `(d, c, b)` is solved by eliminating the random
//! effects subject by subject (each `b_i` block is `p x p`), which leaves a
//! `(m + T)` system
//!
//! ```text
//! G = X0' W M X0 + diag(0, N lambda Q),   M_i = I - Z_i (Z_i'Z_i + Omega)^-1 Z_i'
//! ```
//!
//! factored by pivoted Cholesky. `b_i = (Z_i'Z_i + Omega)^-1 Z_i'(y_i - mu_i)`.
//! Subject weights scale whole curves; subjects with zero weight drop out
//! and get `b_i = 0`.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataspec::{design_z, FunctionalDataset, Point, RandomEffectKind};
use crate::error::{Error, Result};
use crate::linalg::{PivotedCholesky, PIVOT_TOL};
use crate::rkhs::GramParts;

pub use crate::linalg::pseudo_inverse;

/// Explicit penalized system. Rows of `s`, `r` are grouped by subject in the
/// order of `z`.
#[derive(Debug, Clone)]
pub struct PenalizedSystem {
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Per-subject random-effect designs `Z_i` (`n_i x p`, `p` may be 0).
    pub z: Vec<DMatrix<f64>>,
    /// One diagonal block of `Omega = sigma^2 diag(B^-1, ..., B^-1)`.
    pub omega: DMatrix<f64>,
    pub lambda: f64,
    /// `N` in the `N lambda` penalty factor.
    pub n_scale: f64,
    /// Per-subject weights; observation weights follow their subject.
    pub weights: Vec<f64>,
}

impl PenalizedSystem {
    /// Unweighted system with `n_scale` equal to the number of rows.
    pub fn new(
        s: DMatrix<f64>,
        r: DMatrix<f64>,
        q: DMatrix<f64>,
        z: Vec<DMatrix<f64>>,
        omega: DMatrix<f64>,
        lambda: f64,
    ) -> Self {
        let n = s.nrows() as f64;
        let weights = vec![1.0; z.len()];
        Self { s, r, q, z, omega, lambda, n_scale: n, weights }
    }

    pub fn n_obs(&self) -> usize {
        self.s.nrows()
    }

    pub fn re_dim(&self) -> usize {
        self.omega.nrows()
    }

    fn design(&self, y: &DVector<f64>) -> Result<Design> {
        let n = self.s.nrows();
        if self.r.nrows() != n || y.len() != n {
            return Err(Error::InvalidConfig("row counts of S, R and y differ".into()));
        }
        let rows_total: usize = self.z.iter().map(|z| z.nrows()).sum();
        if rows_total != n || self.weights.len() != self.z.len() {
            return Err(Error::InvalidConfig("random-effect blocks do not cover the rows".into()));
        }
        Design::assemble(
            &self.s,
            &self.r,
            None,
            &self.q,
            None,
            self.z.clone(),
            y.clone(),
            self.n_scale,
        )
    }

    fn params(&self) -> SmoothingParams {
        SmoothingParams { lambda: self.lambda, theta_ratio: 0.0, omega: self.omega.clone() }
    }

    pub fn solve(&self, y: &DVector<f64>) -> Result<PlsSolution> {
        let design = self.design(y)?;
        design.weighted(&self.weights)?.fit(&self.params())
    }

    /// Value of the (weighted) penalized Henderson objective at `(d, c, b)`.
    pub fn objective(&self, y: &DVector<f64>, d: &DVector<f64>, c: &DVector<f64>, b: &[DVector<f64>]) -> f64 {
        let mu = &self.s * d + &self.r * c;
        let mut start = 0;
        let mut total = 0.0;
        for (i, zi) in self.z.iter().enumerate() {
            let n = zi.nrows();
            let w = self.weights[i];
            if w > 0.0 {
                let mut res = y.rows(start, n) - mu.rows(start, n);
                if zi.ncols() > 0 {
                    res -= zi * &b[i];
                    total += w * b[i].dot(&(&self.omega * &b[i]));
                }
                total += w * res.norm_squared();
            }
            start += n;
        }
        total + self.n_scale * self.lambda * c.dot(&(&self.q * c))
    }
}

/// Trace of the smoothing matrix through the factorization identity
/// `tr A = sum_i tr((Z_i'Z_i + Omega)^-1 Z_i'Z_i) + tr(G^- X0' W M^2 X0)`.
pub fn smoothing_trace(system: &PenalizedSystem) -> Result<f64> {
    let y = DVector::zeros(system.n_obs());
    Ok(system.solve(&y)?.trace)
}

/// Smoothing matrix `A` built column by column from unit right-hand sides.
/// `O(N)` solves; intended for small systems.
pub fn smoothing_matrix(system: &PenalizedSystem) -> Result<DMatrix<f64>> {
    let n = system.n_obs();
    let base = system.design(&DVector::zeros(n))?;
    let weighted = base.weighted(&system.weights)?;
    let params = system.params();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let fit = weighted.with_response(&e).fit(&params)?;
        a.set_column(j, &fit.fitted);
    }
    Ok(a)
}

/// Direct route: assemble the full `(m + T + n p)` block system in the
/// weight-transformed variables and solve it with one pivoted Cholesky
/// factorization. Returns `(d, c, b)` with `b` on the original scale.
pub fn solve_full_block(system: &PenalizedSystem, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, Vec<DVector<f64>>)> {
    let n = system.n_obs();
    let m = system.s.ncols();
    let t = system.r.ncols();
    let p = system.re_dim();
    let ns = system.z.len();
    let dim = m + t + ns * p;
    let mut x = DMatrix::zeros(n, dim);
    let mut yw = DVector::zeros(n);
    let mut pen = DMatrix::zeros(dim, dim);
    let nl = system.n_scale * system.lambda;
    pen.view_mut((m, m), (t, t)).copy_from(&(&system.q * nl));
    let mut start = 0;
    for (i, zi) in system.z.iter().enumerate() {
        let ni = zi.nrows();
        let w = system.weights[i];
        let sw = w.sqrt();
        for r in 0..ni {
            for c in 0..m {
                x[(start + r, c)] = sw * system.s[(start + r, c)];
            }
            for c in 0..t {
                x[(start + r, m + c)] = sw * system.r[(start + r, c)];
            }
            yw[start + r] = sw * y[start + r];
            // Z_w = W^1/2 Z W~^-1/2 = Z on positive weights, 0 otherwise
            if w > 0.0 {
                for c in 0..p {
                    x[(start + r, m + t + i * p + c)] = zi[(r, c)];
                }
            }
        }
        let off = m + t + i * p;
        pen.view_mut((off, off), (p, p)).copy_from(&system.omega);
        start += ni;
    }
    let c_mat = x.transpose() * &x + pen;
    let rhs = x.transpose() * &yw;
    let chol = PivotedCholesky::factor(&c_mat, PIVOT_TOL)?;
    let sol = chol.solve(&rhs);
    let d = sol.rows(0, m).into_owned();
    let c = sol.rows(m, t).into_owned();
    let b = (0..ns)
        .map(|i| {
            let w = system.weights[i];
            let bw = sol.rows(m + t + i * p, p).into_owned();
            if w > 0.0 {
                bw / w.sqrt()
            } else {
                DVector::zeros(p)
            }
        })
        .collect();
    Ok((d, c, b))
}

/// Smoothing and correlation parameters for one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingParams {
    pub lambda: f64,
    /// `theta12 / theta1`; ignored when the interaction term is absent.
    pub theta_ratio: f64,
    /// `p x p` block of `Omega` (`sigma^2 B^-1`).
    pub omega: DMatrix<f64>,
}

/// Per-subject terms of the eliminated random effects.
#[derive(Debug, Clone)]
pub struct ReBlock {
    pub weight: f64,
    /// `X0_i' Z_i` (`q x p`).
    pub xtz: DMatrix<f64>,
    /// `(Z_i'Z_i + Omega)^-1`.
    pub d_inv: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub d: DVector<f64>,
    /// Combined kernel coefficients (length `T`).
    pub c: DVector<f64>,
    /// Per-subject random effects; zero for zero-weight subjects.
    pub b: Vec<DVector<f64>>,
    /// `S d + R c` at every observation.
    pub mean: DVector<f64>,
    /// `S d + R c + Z b` at every observation.
    pub fitted: DVector<f64>,
    /// `tr A` over rows with positive weight.
    pub trace: f64,
    /// `sum_l w_l A_ll`; equals `trace` for unit weights.
    pub weighted_trace: f64,
    /// `sum_i w_i ||y_i - fitted_i||^2`.
    pub rss: f64,
    /// `sum_i w_i n_i`.
    pub n_weighted: f64,
    pub n_positive: usize,
    pub rank: usize,
    pub(crate) basis: Arc<DMatrix<f64>>,
    pub(crate) factor: PivotedCholesky,
    pub(crate) blocks: Vec<Option<ReBlock>>,
}

impl PlsSolution {
    /// `(d, c)` stacked.
    pub fn coefficients(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.d.len() + self.c.len());
        v.rows_mut(0, self.d.len()).copy_from(&self.d);
        v.rows_mut(self.d.len(), self.c.len()).copy_from(&self.c);
        v
    }

    /// Generalized inverse of the reduced matrix `G` in `(d, c)`
    /// coordinates.
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        let ginv = self.factor.ginv();
        let m = self.d.len();
        let t = self.c.len();
        let mut map = DMatrix::zeros(m + t, ginv.nrows());
        for i in 0..m {
            map[(i, i)] = 1.0;
        }
        map.view_mut((m, m), (t, self.basis.ncols())).copy_from(self.basis.as_ref());
        &map * ginv * map.transpose()
    }

    /// `(phi, xi)` in `(d, c)` coordinates mapped to the internal ones.
    pub(crate) fn reduce(&self, phi: &[f64], xi: &DVector<f64>) -> DVector<f64> {
        let xr = self.basis.transpose() * xi;
        let mut v = DVector::zeros(phi.len() + xr.len());
        for (i, &f) in phi.iter().enumerate() {
            v[i] = f;
        }
        v.rows_mut(phi.len(), xr.len()).copy_from(&xr);
        v
    }

    pub(crate) fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        self.factor.inv_quad(v)
    }

    pub fn re_block(&self, subject: usize) -> Option<&ReBlock> {
        self.blocks.get(subject).and_then(|b| b.as_ref())
    }

    /// Weighted GCV score `(rss / n_w) / (1 - tr(WA) / n_w)^2`.
    pub fn gcv(&self) -> Result<f64> {
        gcv_from_parts(self.rss, self.weighted_trace, self.n_weighted)
    }
}

pub(crate) fn gcv_from_parts(rss: f64, trace: f64, n: f64) -> Result<f64> {
    let denom = n - trace;
    if !(denom > 1e-8 * n) {
        return Err(Error::DegenerateTrace(denom));
    }
    let v = (rss / n) / (denom / n).powi(2);
    Ok(v.max(0.0))
}

/// Design shared by every fit on one dataset: `X = [S | R_main | R_inter]`,
/// the penalty blocks and the random-effect layout.
#[derive(Debug, Clone)]
pub struct Design {
    x: DMatrix<f64>,
    m: usize,
    /// Reduced kernel dimension (columns of `basis`).
    t: usize,
    basis: Arc<DMatrix<f64>>,
    q_main: DMatrix<f64>,
    q_inter: Option<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    rows: Vec<Range<usize>>,
    y: DVector<f64>,
    p: usize,
    n_scale: f64,
}

impl Design {
    pub fn from_dataset(dataset: &FunctionalDataset, knots: &[Point], re: Option<RandomEffectKind>) -> Result<Self> {
        let parts = GramParts::new(&dataset.domain, &dataset.points(), knots);
        let z = dataset
            .subjects
            .iter()
            .map(|s| match re {
                Some(kind) => design_z(s, kind),
                None => DMatrix::zeros(s.len(), 0),
            })
            .collect();
        Self::assemble(
            &parts.s,
            &parts.r_main,
            parts.r_inter.as_ref(),
            &parts.q_main,
            parts.q_inter.as_ref(),
            z,
            dataset.responses(),
            dataset.total_obs as f64,
        )
    }

    /// Kernel coefficients are carried as `c = V c~` with `V = U L^-1/2` from
    /// the eigen-decomposition of `Q_main + Q_inter`, which keeps the reduced
    /// system well scaled for small lambda.
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        s: &DMatrix<f64>,
        r_main: &DMatrix<f64>,
        r_inter: Option<&DMatrix<f64>>,
        q_main: &DMatrix<f64>,
        q_inter: Option<&DMatrix<f64>>,
        z: Vec<DMatrix<f64>>,
        y: DVector<f64>,
        n_scale: f64,
    ) -> Result<Self> {
        if s.iter().chain(r_main.iter()).chain(q_main.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let m = s.ncols();
        let total = match q_inter {
            Some(qi) => q_main + qi,
            None => q_main.clone(),
        };
        let basis = Arc::new(kernel_basis(&total));
        let v = basis.as_ref();
        let x = match r_inter {
            Some(ri) => concat_columns(&[s, &(r_main * v), &(ri * v)]),
            None => concat_columns(&[s, &(r_main * v)]),
        };
        let sym = |a: &DMatrix<f64>| {
            let mut out = v.transpose() * a * v;
            symmetrize(&mut out);
            out
        };
        let q_main = sym(q_main);
        let q_inter = q_inter.map(sym);
        let t = v.ncols();
        let p = z.first().map_or(0, |zi| zi.ncols());
        let mut rows = Vec::with_capacity(z.len());
        let mut start = 0;
        for zi in &z {
            if zi.ncols() != p {
                return Err(Error::InvalidConfig("inconsistent random-effect dimension".into()));
            }
            rows.push(start..start + zi.nrows());
            start += zi.nrows();
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { x, m, t, basis, q_main, q_inter, z, rows, y, p, n_scale })
    }

    /// `V` mapping reduced kernel coefficients to knot coefficients.
    pub fn kernel_basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn null_dim(&self) -> usize {
        self.m
    }

    pub fn n_knots(&self) -> usize {
        self.basis.nrows()
    }

    pub fn re_dim(&self) -> usize {
        self.p
    }

    pub fn n_subjects(&self) -> usize {
        self.z.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn has_interaction(&self) -> bool {
        self.q_inter.is_some()
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn subject_rows(&self, i: usize) -> Range<usize> {
        self.rows[i].clone()
    }

    pub fn z(&self, i: usize) -> &DMatrix<f64> {
        &self.z[i]
    }

    fn ext_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Maps reduced coefficients `(d, c)` to the extended columns.
    fn mixing(&self, ratio: f64) -> Option<DMatrix<f64>> {
        self.q_inter.as_ref()?;
        let q = self.m + self.t;
        let mut l = DMatrix::zeros(self.ext_dim(), q);
        for i in 0..q {
            l[(i, i)] = 1.0;
        }
        for j in 0..self.t {
            l[(q + j, self.m + j)] = ratio;
        }
        Some(l)
    }

    /// Combined penalty matrix `Q = Q_main + ratio Q_inter`.
    pub fn penalty(&self, ratio: f64) -> DMatrix<f64> {
        match &self.q_inter {
            Some(qi) => &self.q_main + qi * ratio,
            None => self.q_main.clone(),
        }
    }

    /// Precomputes the weighted cross products for one weight vector.
    pub fn weighted(&self, weights: &[f64]) -> Result<WeightedDesign<'_>> {
        if weights.len() != self.z.len() {
            return Err(Error::InvalidConfig("one weight per subject required".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        let active: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::InvalidConfig("at least one positive weight required".into()));
        }
        let q_ext = self.ext_dim();
        let n_rows: usize = active.iter().map(|&i| self.rows[i].len()).sum();
        let mut xs = DMatrix::zeros(n_rows, q_ext);
        let mut xs2 = DMatrix::zeros(n_rows, q_ext);
        let mut xtwy = DVector::zeros(q_ext);
        let mut n_weighted = 0.0;
        let mut at = 0;
        let mut subjects = Vec::with_capacity(active.len());
        for &i in &active {
            let w = weights[i];
            let (sw, ww) = (w.sqrt(), w);
            let rows = self.rows[i].clone();
            let xi = self.x.rows(rows.start, rows.len());
            let yi = self.y.rows(rows.start, rows.len());
            xs.rows_mut(at, rows.len()).copy_from(&(xi * sw));
            xs2.rows_mut(at, rows.len()).copy_from(&(xi * ww));
            xtwy += xi.transpose() * yi * w;
            n_weighted += w * rows.len() as f64;
            at += rows.len();
            let zi = &self.z[i];
            subjects.push(SubjectCross {
                index: i,
                weight: w,
                ztz: zi.transpose() * zi,
                zty: zi.transpose() * yi,
                xtz: xi.transpose() * zi,
            });
        }
        let xtwx = xs.transpose() * &xs;
        let xtw2x = xs2.transpose() * &xs2;
        Ok(WeightedDesign {
            design: self,
            weights: weights.to_vec(),
            xtwx,
            xtw2x,
            xtwy,
            subjects,
            n_weighted,
            n_positive: n_rows,
            y_override: None,
        })
    }
}

#[derive(Debug, Clone)]
struct SubjectCross {
    index: usize,
    weight: f64,
    ztz: DMatrix<f64>,
    zty: DVector<f64>,
    xtz: DMatrix<f64>,
}

/// A design with cross products precomputed for one weight vector; cheap to
/// refit for many smoothing parameters.
#[derive(Debug, Clone)]
pub struct WeightedDesign<'a> {
    design: &'a Design,
    weights: Vec<f64>,
    xtwx: DMatrix<f64>,
    /// `X' W^2 X`, used for the weighted trace.
    xtw2x: DMatrix<f64>,
    xtwy: DVector<f64>,
    subjects: Vec<SubjectCross>,
    n_weighted: f64,
    n_positive: usize,
    y_override: Option<DVector<f64>>,
}

impl<'a> WeightedDesign<'a> {
    pub fn design(&self) -> &'a Design {
        self.design
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same cross products with another response vector.
    pub fn with_response(&self, y: &DVector<f64>) -> WeightedDesign<'a> {
        let d = self.design;
        let mut xtwy = DVector::zeros(d.ext_dim());
        let mut subjects = self.subjects.clone();
        for s in subjects.iter_mut() {
            let rows = d.rows[s.index].clone();
            let xi = d.x.rows(rows.start, rows.len());
            let yi = y.rows(rows.start, rows.len());
            xtwy += xi.transpose() * yi * s.weight;
            s.zty = d.z[s.index].transpose() * yi;
        }
        WeightedDesign {
            design: d,
            weights: self.weights.clone(),
            xtwx: self.xtwx.clone(),
            xtw2x: self.xtw2x.clone(),
            xtwy,
            subjects,
            n_weighted: self.n_weighted,
            n_positive: self.n_positive,
            y_override: Some(y.clone()),
        }
    }

    fn response(&self) -> &DVector<f64> {
        self.y_override.as_ref().unwrap_or(&self.design.y)
    }

    pub fn fit(&self, params: &SmoothingParams) -> Result<PlsSolution> {
        let d = self.design;
        let (m, t, p) = (d.m, d.t, d.p);
        let q = m + t;
        if !(params.lambda.is_finite() && params.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", params.lambda)));
        }
        if params.omega.nrows() != p || params.omega.ncols() != p {
            return Err(Error::InvalidConfig("omega block has the wrong size".into()));
        }
        if params.omega.iter().any(|v| !v.is_finite()) || !params.theta_ratio.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let mix = d.mixing(params.theta_ratio);
        let reduce_mat = |a: &DMatrix<f64>| match &mix {
            Some(l) => l.transpose() * a * l,
            None => a.clone(),
        };
        let reduce_vec = |v: &DVector<f64>| match &mix {
            Some(l) => l.transpose() * v,
            None => v.clone(),
        };
        let a0 = reduce_mat(&self.xtwx);
        let a2 = reduce_mat(&self.xtw2x);
        let mut rhs = reduce_vec(&self.xtwy);

        let ns = self.subjects.len();
        let mut ug = DMatrix::zeros(q, ns * p);
        let mut uh = DMatrix::zeros(q, ns * p);
        let mut uh2 = DMatrix::zeros(q, ns * p);
        let mut re_trace = 0.0;
        let mut re_wtrace = 0.0;
        let mut blocks: Vec<Option<ReBlock>> = vec![None; d.z.len()];
        for (k, s) in self.subjects.iter().enumerate() {
            if p == 0 {
                break;
            }
            let u = match &mix {
                Some(l) => l.transpose() * &s.xtz,
                None => s.xtz.clone(),
            };
            let dmat = (&s.ztz + &params.omega)
                .try_inverse()
                .ok_or(Error::SingularSystem)?;
            let dmat = (&dmat + dmat.transpose()) * 0.5;
            let tr = (&dmat * &s.ztz).trace();
            re_trace += tr;
            re_wtrace += s.weight * tr;
            rhs -= &u * (&dmat * &s.zty) * s.weight;
            // G -= w u D u'; H = A - u (2D - D Z'Z D) u'
            let hmat = &dmat * 2.0 - &dmat * &s.ztz * &dmat;
            let lg = small_sqrt(&dmat)?;
            let lh = small_sqrt(&hmat)?;
            let w = s.weight;
            ug.columns_mut(k * p, p).copy_from(&(&u * &lg * w.sqrt()));
            uh.columns_mut(k * p, p).copy_from(&(&u * &lh * w.sqrt()));
            uh2.columns_mut(k * p, p).copy_from(&(&u * &lh * w));
            blocks[s.index] = Some(ReBlock { weight: w, xtz: u, d_inv: dmat });
        }
        let mut g = &a0 - &ug * ug.transpose();
        let h1 = &a0 - &uh * uh.transpose();
        let h2 = &a2 - &uh2 * uh2.transpose();
        let nl = d.n_scale * params.lambda;
        let pen = d.penalty(params.theta_ratio);
        {
            let mut block = g.view_mut((m, m), (t, t));
            block += &pen * nl;
        }
        symmetrize(&mut g);

        // the null-space block must be of full rank on its own
        let gdd = g.view((0, 0), (m, m)).into_owned();
        if m > 0 && PivotedCholesky::factor(&gdd, PIVOT_TOL)?.rank() < m {
            return Err(Error::SingularSystem);
        }
        let factor = PivotedCholesky::factor(&g, PIVOT_TOL)?;
        let beta = factor.solve(&rhs);
        let trace = re_trace + factor.trace_inv_times(&h1);
        let weighted_trace = re_wtrace + factor.trace_inv_times(&h2);

        let beta_ext = match &mix {
            Some(l) => l * &beta,
            None => beta.clone(),
        };
        let y = self.response();
        let mean = &d.x * &beta_ext;
        let mut fitted = mean.clone();
        let mut b = vec![DVector::zeros(p); d.z.len()];
        let mut rss = 0.0;
        for s in &self.subjects {
            let rows = d.rows[s.index].clone();
            if let Some(block) = &blocks[s.index] {
                let bi = &block.d_inv * (&s.zty - block.xtz.transpose() * &beta);
                let zb = &d.z[s.index] * &bi;
                for (k, r) in rows.clone().enumerate() {
                    fitted[r] += zb[k];
                }
                b[s.index] = bi;
            }
            let res: f64 = rows.map(|r| (y[r] - fitted[r]).powi(2)).sum();
            rss += s.weight * res;
        }
        Ok(PlsSolution {
            d: beta.rows(0, m).into_owned(),
            c: d.basis.as_ref() * beta.rows(m, t),
            basis: Arc::clone(&d.basis),
            b,
            mean,
            fitted,
            trace,
            weighted_trace,
            rss,
            n_weighted: self.n_weighted,
            n_positive: self.n_positive,
            rank: factor.rank(),
            factor,
            blocks,
        })
    }
}

/// Lower-triangular square root of a small symmetric PSD matrix.
fn small_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    match n {
        0 => Ok(DMatrix::zeros(0, 0)),
        1 => Ok(DMatrix::from_element(1, 1, a[(0, 0)].max(0.0).sqrt())),
        _ => match a.clone().cholesky() {
            Some(c) => Ok(c.l()),
            None => {
                let eig = nalgebra::SymmetricEigen::new(a.clone());
                let mut out = eig.eigenvectors.clone();
                for (j, lam) in eig.eigenvalues.iter().enumerate() {
                    let s = lam.max(0.0).sqrt();
                    for i in 0..n {
                        out[(i, j)] *= s;
                    }
                }
                Ok(out)
            }
        },
    }
}

/// `U L^-1/2` over the eigenvalues above `1e-12` of the largest.
fn kernel_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = nalgebra::SymmetricEigen::new((q + q.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut order: Vec<usize> = (0..n).filter(|&j| eig.eigenvalues[j] > 1e-12 * max).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut v = DMatrix::zeros(n, order.len());
    for (k, &j) in order.iter().enumerate() {
        let scale = eig.eigenvalues[j].sqrt().recip();
        v.set_column(k, &(eig.eigenvectors.column(j) * scale));
    }
    v
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub(crate) fn concat_columns(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = parts[0].nrows();
    let total: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(*p);
        at += p.ncols();
    }
    out
}
