//! Null-space basis and reproducing kernel for the time x factor domain.
//!
//! Time lives on `[0, 1]`. The smooth time component uses the cubic-spline
//! kernel `k(t1, t2) = int_0^1 (t1 - u)_+ (t2 - u)_+ du`, the factor enters
//! through the centred indicators `I{j}(tau) - 1/a`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataspec::{DomainSpec, FunctionalDataset, Point, Structure};
use crate::error::{Error, Result};

/// `int_0^1 (t1 - u)_+ (t2 - u)_+ du` for `t1, t2` in `[0, 1]`.
pub fn cubic_cross(t1: f64, t2: f64) -> Result<f64> {
    check_time(t1)?;
    check_time(t2)?;
    Ok(cubic_cross_unchecked(t1, t2))
}

#[inline]
pub(crate) fn cubic_cross_unchecked(t1: f64, t2: f64) -> f64 {
    let (s, g) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    s * s * (3.0 * g - s) / 6.0
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaWeights {
    /// Weight of the smooth time main effect.
    pub theta1: f64,
    /// Weight of the smooth time x factor interaction.
    pub theta12: f64,
}

impl ThetaWeights {
    pub fn additive() -> Self {
        Self { theta1: 1.0, theta12: 0.0 }
    }

    /// `theta1 = 1`, `theta12 = ratio`.
    pub fn with_ratio(ratio: f64) -> Self {
        Self { theta1: 1.0, theta12: ratio }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub domain: DomainSpec,
    pub theta: ThetaWeights,
}

impl KernelModel {
    pub fn new(domain: DomainSpec, theta: ThetaWeights) -> Result<Self> {
        if !(theta.theta1.is_finite() && theta.theta1 > 0.0) {
            return Err(Error::Domain(format!("theta1 must be positive, got {}", theta.theta1)));
        }
        if !(theta.theta12.is_finite() && theta.theta12 >= 0.0) {
            return Err(Error::Domain(format!("theta12 must be nonnegative, got {}", theta.theta12)));
        }
        if domain.structure == Structure::Additive && theta.theta12 != 0.0 {
            return Err(Error::Domain("additive structure requires theta12 = 0".into()));
        }
        Ok(Self { domain, theta })
    }

    pub fn levels(&self) -> usize {
        self.domain.factor_levels
    }

    /// Dimension `m` of the null space.
    pub fn null_dim(&self) -> usize {
        null_dim(&self.domain)
    }

    fn check(&self, x: Point) -> Result<()> {
        check_time(x.t)?;
        if x.tau < 1 || x.tau > self.levels() {
            return Err(Error::Domain(format!("factor level {} outside 1..={}", x.tau, self.levels())));
        }
        Ok(())
    }

    pub fn eval_kernel(&self, x1: Point, x2: Point) -> Result<f64> {
        self.check(x1)?;
        self.check(x2)?;
        let (main, inter) = kernel_parts(self.levels(), x1, x2);
        Ok(self.theta.theta1 * main + self.theta.theta12 * inter)
    }

    /// Basis functions in the order `1, t, c_1..c_{a-1}, c_1 t..c_{a-1} t`
    /// with `c_j = I{j}(tau) - 1/a`; the additive model drops the `c_j t`.
    pub fn eval_basis(&self, x: Point) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut out = Vec::with_capacity(self.null_dim());
        basis_into(&self.domain, x, &mut out);
        Ok(out)
    }
}

pub fn null_dim(domain: &DomainSpec) -> usize {
    let a = domain.factor_levels;
    match domain.structure {
        Structure::Interaction => 2 * a,
        Structure::Additive => a + 1,
    }
}

pub(crate) fn basis_into(domain: &DomainSpec, x: Point, out: &mut Vec<f64>) {
    let a = domain.factor_levels;
    let inv_a = 1.0 / a as f64;
    out.push(1.0);
    out.push(x.t);
    for j in 1..a {
        out.push(indicator(j, x.tau) - inv_a);
    }
    if domain.structure == Structure::Interaction {
        for j in 1..a {
            out.push((indicator(j, x.tau) - inv_a) * x.t);
        }
    }
}

#[inline]
fn indicator(j: usize, tau: usize) -> f64 {
    if j == tau {
        1.0
    } else {
        0.0
    }
}

/// Unweighted (main, interaction) kernel components.
#[inline]
pub(crate) fn kernel_parts(levels: usize, x1: Point, x2: Point) -> (f64, f64) {
    let k = cubic_cross_unchecked(x1.t, x2.t);
    let contrast = indicator(x1.tau, x2.tau) - 1.0 / levels as f64;
    (k, contrast * k)
}

/// `S` (N x m), `R` (N x T) and `Q` (T x T) for the dataset's observations
/// against the given knots.
#[derive(Debug, Clone)]
pub struct GramMatrices {
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// Gram blocks with the two kernel components kept apart so the theta ratio
/// can be changed without re-evaluating the kernel.
#[derive(Debug, Clone)]
pub struct GramParts {
    pub s: DMatrix<f64>,
    pub r_main: DMatrix<f64>,
    pub q_main: DMatrix<f64>,
    /// Present only when the interaction term exists (Interaction with a >= 2).
    pub r_inter: Option<DMatrix<f64>>,
    pub q_inter: Option<DMatrix<f64>>,
}

impl GramParts {
    pub fn new(domain: &DomainSpec, points: &[Point], knots: &[Point]) -> Self {
        let a = domain.factor_levels;
        let m = null_dim(domain);
        let n = points.len();
        let nk = knots.len();
        let has_inter = domain.structure == Structure::Interaction && a > 1;
        let mut s = DMatrix::zeros(n, m);
        let mut buf = Vec::with_capacity(m);
        for (i, &x) in points.iter().enumerate() {
            buf.clear();
            basis_into(domain, x, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                s[(i, j)] = *v;
            }
        }
        let mut r_main = DMatrix::zeros(n, nk);
        let mut r_inter = if has_inter { Some(DMatrix::zeros(n, nk)) } else { None };
        for j in 0..nk {
            for (i, &x) in points.iter().enumerate() {
                let (k, c) = kernel_parts(a, x, knots[j]);
                r_main[(i, j)] = k;
                if let Some(ri) = r_inter.as_mut() {
                    ri[(i, j)] = c;
                }
            }
        }
        let mut q_main = DMatrix::zeros(nk, nk);
        let mut q_inter = if has_inter { Some(DMatrix::zeros(nk, nk)) } else { None };
        for j in 0..nk {
            for i in 0..nk {
                let (k, c) = kernel_parts(a, knots[i], knots[j]);
                q_main[(i, j)] = k;
                if let Some(qi) = q_inter.as_mut() {
                    qi[(i, j)] = c;
                }
            }
        }
        Self { s, r_main, q_main, r_inter, q_inter }
    }

    pub fn combine(&self, theta: ThetaWeights) -> GramMatrices {
        let mut r = &self.r_main * theta.theta1;
        let mut q = &self.q_main * theta.theta1;
        if theta.theta12 != 0.0 {
            if let (Some(ri), Some(qi)) = (&self.r_inter, &self.q_inter) {
                r += ri * theta.theta12;
                q += qi * theta.theta12;
            }
        }
        GramMatrices { s: self.s.clone(), r, q }
    }
}

pub fn gram_matrices(model: &KernelModel, dataset: &FunctionalDataset, knots: &[Point]) -> GramMatrices {
    GramParts::new(&model.domain, &dataset.points(), knots).combine(model.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn dom(a: usize, s: Structure) -> DomainSpec {
        DomainSpec::new(1.0, a, s).unwrap()
    }

    /// Composite Simpson quadrature of the defining integral.
    fn cubic_cross_quadrature(t1: f64, t2: f64) -> f64 {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f = |u: f64| (t1 - u).max(0.0) * (t2 - u).max(0.0);
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            let u = i as f64 * h;
            acc += if i % 2 == 1 { 4.0 * f(u) } else { 2.0 * f(u) };
        }
        acc * h / 3.0
    }

    #[test]
    fn cubic_cross_values() {
        assert_eq!(cubic_cross(0.0, 0.7).unwrap(), 0.0);
        assert!((cubic_cross(1.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let quad = cubic_cross_quadrature(0.5, 1.0);
        assert!((quad - 5.0 / 48.0).abs() < 1e-9);
        assert!((cubic_cross(0.5, 1.0).unwrap() - quad).abs() < 1e-9);
        assert!(cubic_cross(-0.1, 0.5).is_err());
        assert!(cubic_cross(0.5, 1.2).is_err());
    }

    #[test]
    fn kernel_hand_values() {
        let m = KernelModel::new(dom(2, Structure::Interaction), ThetaWeights { theta1: 1.0, theta12: 1.0 }).unwrap();
        let v = m.eval_kernel(Point::new(1.0, 1), Point::new(1.0, 1)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let v = m.eval_kernel(Point::new(1.0, 1), Point::new(1.0, 2)).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
        assert!(m.eval_kernel(Point::new(0.5, 3), Point::new(0.5, 1)).is_err());
    }

    #[test]
    fn additive_kernel_ignores_factor() {
        let m = KernelModel::new(dom(3, Structure::Additive), ThetaWeights::additive()).unwrap();
        let a = m.eval_kernel(Point::new(0.3, 1), Point::new(0.8, 1)).unwrap();
        let b = m.eval_kernel(Point::new(0.3, 2), Point::new(0.8, 3)).unwrap();
        assert_eq!(a, b);
        assert!(KernelModel::new(dom(3, Structure::Additive), ThetaWeights::with_ratio(1.0)).is_err());
    }

    #[test]
    fn basis_values() {
        let m = KernelModel::new(dom(2, Structure::Interaction), ThetaWeights::with_ratio(1.0)).unwrap();
        assert_eq!(m.eval_basis(Point::new(0.5, 1)).unwrap(), vec![1.0, 0.5, 0.5, 0.25]);
        assert_eq!(m.null_dim(), 4);
        let m = KernelModel::new(dom(2, Structure::Additive), ThetaWeights::additive()).unwrap();
        assert_eq!(m.eval_basis(Point::new(0.5, 2)).unwrap(), vec![1.0, 0.5, -0.5]);
        assert_eq!(m.null_dim(), 3);
        let m = KernelModel::new(dom(1, Structure::Additive), ThetaWeights::additive()).unwrap();
        assert_eq!(m.eval_basis(Point::new(0.25, 1)).unwrap(), vec![1.0, 0.25]);
        let m = KernelModel::new(dom(1, Structure::Interaction), ThetaWeights::with_ratio(1.0)).unwrap();
        assert_eq!(m.eval_basis(Point::new(0.25, 1)).unwrap(), vec![1.0, 0.25]);
    }

    #[test]
    fn side_conditions() {
        for a in 1..6 {
            let inv = 1.0 / a as f64;
            for j in 1..a {
                let total: f64 = (1..=a).map(|tau| indicator(j, tau) - inv).sum();
                assert!(total.abs() < 1e-14);
            }
        }
        assert_eq!(cubic_cross_unchecked(0.0, 0.4), 0.0);
    }

    #[test]
    fn three_knot_q_is_cubic_cross_matrix() {
        let knots = [Point::new(0.1, 1), Point::new(0.5, 1), Point::new(0.9, 1)];
        let m = KernelModel::new(dom(1, Structure::Additive), ThetaWeights::additive()).unwrap();
        let parts = GramParts::new(&m.domain, &knots, &knots).combine(m.theta);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(parts.q[(i, j)], cubic_cross(knots[i].t, knots[j].t).unwrap());
            }
        }
        // observations at knots: R rows are Q rows
        assert_eq!(parts.r, parts.q);
    }

    fn arb_points(a: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((0.0f64..=1.0, 1..=a), 2..12)
            .prop_map(|v| v.into_iter().map(|(t, tau)| Point::new(t, tau)).collect())
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(points in arb_points(3), ratio in 0.0f64..5.0) {
            let m = KernelModel::new(dom(3, Structure::Interaction), ThetaWeights::with_ratio(ratio)).unwrap();
            let g = GramParts::new(&m.domain, &points, &points).combine(m.theta).q;
            prop_assert!((&g - g.transpose()).amax() == 0.0);
            let eig = SymmetricEigen::new(g).eigenvalues;
            let max = eig.iter().cloned().fold(0.0f64, f64::max);
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-10 * max.max(1e-300));
        }

        #[test]
        fn zero_interaction_weight_matches_additive(x1 in (0.0f64..=1.0, 1usize..=3), x2 in (0.0f64..=1.0, 1usize..=3)) {
            let inter = KernelModel::new(dom(3, Structure::Interaction), ThetaWeights::with_ratio(0.0)).unwrap();
            let add = KernelModel::new(dom(3, Structure::Additive), ThetaWeights::additive()).unwrap();
            let p1 = Point::new(x1.0, x1.1);
            let p2 = Point::new(x2.0, x2.1);
            prop_assert_eq!(inter.eval_kernel(p1, p2).unwrap(), add.eval_kernel(p1, p2).unwrap());
            let bi = inter.eval_basis(p1).unwrap();
            let ba = add.eval_basis(p1).unwrap();
            prop_assert_eq!(&bi[..ba.len()], &ba[..]);
        }

        #[test]
        fn kernel_symmetric_and_linear_in_theta(x1 in (0.0f64..=1.0, 1usize..=4), x2 in (0.0f64..=1.0, 1usize..=4),
                                                th1 in 0.1f64..3.0, th12 in 0.0f64..3.0) {
            let d = dom(4, Structure::Interaction);
            let p1 = Point::new(x1.0, x1.1);
            let p2 = Point::new(x2.0, x2.1);
            let m = KernelModel::new(d, ThetaWeights { theta1: th1, theta12: th12 }).unwrap();
            prop_assert_eq!(m.eval_kernel(p1, p2).unwrap(), m.eval_kernel(p2, p1).unwrap());
            let m2 = KernelModel::new(d, ThetaWeights { theta1: 2.0 * th1, theta12: 2.0 * th12 }).unwrap();
            let lhs = m2.eval_kernel(p1, p2).unwrap();
            let rhs = 2.0 * m.eval_kernel(p1, p2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-14 * rhs.abs().max(1.0));
        }
    }
}
