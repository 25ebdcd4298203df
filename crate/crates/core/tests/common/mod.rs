#![allow(dead_code)]

use curveclust_core::bayes::{posterior_mean, posterior_variance, CurveFit, CurveQuery};
use curveclust_core::dataspec::design_z;
use curveclust_core::pls::{Design, SmoothingParams};
use curveclust_core::rkhs::{GramParts, ThetaWeights};
use curveclust_core::{DomainSpec, FunctionalDataset, Point, RandomEffectKind, Record, Structure};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

type Dd = TwoFloat;

fn dd(x: f64) -> Dd {
    TwoFloat::from(x)
}

/// Solves `a x = b` column by column with partial pivoting in double-double.
fn dd_solve(mut a: Vec<Vec<Dd>>, mut b: Vec<Vec<Dd>>) -> Vec<Vec<Dd>> {
    let n = a.len();
    let k = b[0].len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == dd(0.0) {
                continue;
            }
            for j in col..n {
                let v = a[col][j];
                a[row][j] -= f * v;
            }
            for j in 0..k {
                let v = b[col][j];
                b[row][j] -= f * v;
            }
        }
    }
    let mut x = vec![vec![dd(0.0); k]; n];
    for row in (0..n).rev() {
        for j in 0..k {
            let mut acc = b[row][j];
            for c in row + 1..n {
                acc -= a[row][c] * x[c][j];
            }
            x[row][j] = acc / a[row][row];
        }
    }
    x
}

fn to_dd(m: &DMatrix<f64>) -> Vec<Vec<Dd>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| dd(m[(i, j)])).collect()).collect()
}

fn dd_mul(a: &[Vec<Dd>], b: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
    let n = a.len();
    let k = b[0].len();
    let inner = b.len();
    let mut out = vec![vec![dd(0.0); k]; n];
    for i in 0..n {
        for l in 0..inner {
            if a[i][l] == dd(0.0) {
                continue;
            }
            for j in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

fn dd_t(a: &[Vec<Dd>]) -> Vec<Vec<Dd>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub struct Instance {
    pub dataset: FunctionalDataset,
    pub knots: Vec<Point>,
    pub kind: RandomEffectKind,
    pub lambda: f64,
    pub ratio: f64,
    pub omega: DMatrix<f64>,
    pub sigma2: f64,
}

pub fn instance(seed: u64, kind: RandomEffectKind) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = DomainSpec::new(1.0, 2, Structure::Interaction).unwrap();
    let mut recs = Vec::new();
    for i in 0..5 {
        let n_i = rng.random_range(3..=6);
        for _ in 0..n_i {
            recs.push(Record {
                subject: format!("s{i}"),
                time: rng.random_range(0.0..1.0),
                tau: rng.random_range(1..=2),
                y: rng.random_range(-2.0..2.0),
            });
        }
    }
    let dataset = FunctionalDataset::from_records(&recs, domain, true).unwrap();
    let knots: Vec<Point> = [(0.1, 1), (0.5, 1), (0.9, 1), (0.3, 2), (0.7, 2)].iter().map(|&(t, tau)| Point::new(t, tau)).collect();
    let p = kind.dim();
    let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let omega = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
    Instance {
        dataset,
        knots,
        kind,
        lambda: 10f64.powf(rng.random_range(-4.0..-1.0)),
        ratio: rng.random_range(0.2..2.0),
        omega,
        sigma2: rng.random_range(0.2..2.0),
    }
}

/// Joint-Gaussian posterior of `f0(x) + f1(x) + z'b` given `y` with
/// `f0 ~ N(0, tau2 phi phi')`, evaluated in double-double.
pub fn diffuse_oracle(inst: &Instance, phi: &[f64], xi: &DVector<f64>, z: &DVector<f64>, tau2: f64) -> (f64, f64) {
    let ds = &inst.dataset;
    let gp = GramParts::new(&ds.domain, &ds.points(), &inst.knots).combine(ThetaWeights::with_ratio(inst.ratio));
    let n = ds.total_obs;
    let p = inst.kind.dim();
    let np = ds.n_subjects() * p;
    let mut zmat = DMatrix::zeros(n, np);
    for i in 0..ds.n_subjects() {
        let zi = design_z(&ds.subjects[i], inst.kind);
        zmat.view_mut((ds.rows(i).start, i * p), (zi.nrows(), p)).copy_from(&zi);
    }
    let n_lambda = n as f64 * inst.lambda;
    let b = inst.sigma2 / n_lambda;
    let t = inst.knots.len();
    let qinv = dd_solve(to_dd(&gp.q), to_dd(&DMatrix::identity(t, t)));
    let om_inv = dd_solve(to_dd(&inst.omega), to_dd(&DMatrix::identity(p, p)));
    // Prior covariance of `b` is `b * N lambda * Omega^-1 = sigma^2 Omega^-1`.
    let r = to_dd(&gp.r);
    let s = to_dd(&gp.s);
    let zd = to_dd(&zmat);
    let rq = dd_mul(&r, &qinv);
    let rqr = dd_mul(&rq, &dd_t(&r));
    let mut zoz = vec![vec![dd(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = dd(0.0);
            for blk in 0..ds.n_subjects() {
                for u in 0..p {
                    for v in 0..p {
                        acc += zd[i][blk * p + u] * om_inv[u][v] * zd[j][blk * p + v];
                    }
                }
            }
            zoz[i][j] = acc;
        }
    }
    let ss = dd_mul(&s, &dd_t(&s));
    let mut cov = vec![vec![dd(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            cov[i][j] = rqr[i][j] * b + zoz[i][j] * inst.sigma2 + ss[i][j] * tau2;
        }
        cov[i][i] += dd(inst.sigma2);
    }
    let xi_d: Vec<Vec<Dd>> = xi.iter().map(|&v| vec![dd(v)]).collect();
    let rq_xi = dd_mul(&rq, &xi_d);
    let mut cross = vec![vec![dd(0.0); 1]; n];
    for i in 0..n {
        let mut sphi = dd(0.0);
        for (j, &f) in phi.iter().enumerate() {
            sphi += s[i][j] * f;
        }
        let mut zo = dd(0.0);
        for blk in 0..ds.n_subjects() {
            for u in 0..p {
                for v in 0..p {
                    zo += zd[i][blk * p + u] * om_inv[u][v] * z[blk * p + v];
                }
            }
        }
        cross[i][0] = rq_xi[i][0] * b + zo * inst.sigma2 + sphi * tau2;
    }
    let mut prior = dd(0.0);
    let xqx = dd_mul(&dd_t(&xi_d), &dd_mul(&qinv, &xi_d))[0][0];
    prior += xqx * b;
    for blk in 0..ds.n_subjects() {
        for u in 0..p {
            for v in 0..p {
                prior += om_inv[u][v] * z[blk * p + u] * z[blk * p + v] * inst.sigma2;
            }
        }
    }
    for &f in phi {
        prior += dd(f) * f * tau2;
    }
    let y: Vec<Vec<Dd>> = ds.responses().iter().map(|&v| vec![dd(v)]).collect();
    let mut rhs = cross.clone();
    for (i, row) in rhs.iter_mut().enumerate() {
        row.push(y[i][0]);
    }
    let sol = dd_solve(cov, rhs);
    let mut mean = dd(0.0);
    let mut reduction = dd(0.0);
    for i in 0..n {
        mean += cross[i][0] * sol[i][1];
        reduction += cross[i][0] * sol[i][0];
    }
    (mean.hi(), (prior - reduction).hi())
}

pub fn fitted(inst: &Instance) -> curveclust_core::PlsSolution {
    let design = Design::from_dataset(&inst.dataset, &inst.knots, Some(inst.kind)).unwrap();
    let wd = design.weighted(&vec![1.0; inst.dataset.n_subjects()]).unwrap();
    wd.fit(&SmoothingParams { lambda: inst.lambda, theta_ratio: inst.ratio, omega: inst.omega.clone() }).unwrap()
}

/// Largest relative deviations `(mean, variance)` from the diffuse-prior
/// oracle over the given instances, one query with and one without `z` each.
pub fn oracle_errors(kind: RandomEffectKind, seeds: std::ops::Range<u64>) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for seed in seeds {
        let inst = instance(seed, kind);
        let sol = fitted(&inst);
        let fit = CurveFit::new(inst.dataset.domain, inst.ratio, &inst.knots, &sol, inst.sigma2, &inst.omega).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let np = inst.dataset.n_subjects() * kind.dim();
        for with_z in [false, true] {
            let x = Point::new(rng.random_range(0.0..1.0), rng.random_range(1..=2));
            let z = if with_z {
                DVector::from_fn(np, |_, _| rng.random_range(-1.0..1.0))
            } else {
                DVector::zeros(np)
            };
            let query = CurveQuery { grid: vec![x], z: with_z.then(|| z.as_slice().to_vec()), alpha: 0.05 };
            let mean = posterior_mean(&fit, &query).unwrap()[0];
            let (var, _) = posterior_variance(&fit, &query).unwrap();
            let model = fit.kernel;
            let phi = model.eval_basis(x).unwrap();
            let xi = DVector::from_iterator(inst.knots.len(), inst.knots.iter().map(|&s| model.eval_kernel(s, x).unwrap()));
            let scale = inst.dataset.responses().amax().max(1.0);
            let (om, ov) = diffuse_oracle(&inst, &phi, &xi, &z, 1e8 * scale);
            worst.0 = worst.0.max((mean - om).abs() / om.abs().max(1e-3));
            worst.1 = worst.1.max((var[0] - ov).abs() / ov.abs());
        }
    }
    worst
}

/// The variance display with `W = R Q+ R' + N lambda Z Omega+ Z' + N lambda I`,
/// evaluated literally through a Cholesky factor of `W`.
pub fn literal_variance(inst: &Instance, phi: &[f64], xi: &DVector<f64>, z: &DVector<f64>) -> f64 {
    let ds = &inst.dataset;
    let gp = GramParts::new(&ds.domain, &ds.points(), &inst.knots).combine(ThetaWeights::with_ratio(inst.ratio));
    let n = ds.total_obs;
    let p = inst.kind.dim();
    let mut zmat = DMatrix::zeros(n, ds.n_subjects() * p);
    let mut om_plus = DMatrix::zeros(ds.n_subjects() * p, ds.n_subjects() * p);
    let oinv = inst.omega.clone().try_inverse().unwrap();
    for i in 0..ds.n_subjects() {
        let zi = design_z(&ds.subjects[i], inst.kind);
        zmat.view_mut((ds.rows(i).start, i * p), (zi.nrows(), p)).copy_from(&zi);
        om_plus.view_mut((i * p, i * p), (p, p)).copy_from(&oinv);
    }
    let nl = n as f64 * inst.lambda;
    let qp = gp.q.clone().pseudo_inverse(1e-14).unwrap();
    let (s, r) = (&gp.s, &gp.r);
    let w = r * &qp * r.transpose() + &zmat * &om_plus * zmat.transpose() * nl + DMatrix::identity(n, n) * nl;
    let chol = w.cholesky().unwrap();
    let winv = chol.inverse();
    let phi = DVector::from_column_slice(phi);
    let swi = s.transpose() * &winv;
    let m_inv = (&swi * s).try_inverse().unwrap();
    let proj = &winv - swi.transpose() * &m_inv * &swi;
    let g = r * &qp * xi + &zmat * &om_plus * z * nl;
    let val = xi.dot(&(&qp * xi)) + nl * z.dot(&(&om_plus * z)) + phi.dot(&(&m_inv * &phi))
        - 2.0 * phi.dot(&(&m_inv * &swi * r * &qp * xi))
        - 2.0 * nl * phi.dot(&(&m_inv * &swi * &zmat * &om_plus * z))
        - g.dot(&(&proj * &g));
    val * inst.sigma2 / nl
}

