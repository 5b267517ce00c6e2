//! Site-level linear algebra for the model with the random effects integrated
//! out.
//!
//! With `W = diag(omega_nn)` (per-site sums of the Pólya-Gamma weights) two
//! systems appear in every sweep:
//!
//! * the marginal covariance `S = W^{-1} + lambda R` of the site summaries,
//!   whose solves and log-determinant give the collapsed likelihood of
//!   `(lambda, rho)`;
//! * the conditional covariance `V = (W + lambda^{-1} R^{-1})^{-1}` of the
//!   site effects, used for the collapsed `beta` update and the `u` draw.
//!
//! Both have a dense path and a knot-based path that only factors q×q
//! matrices. The `V` algebra is written through `G = (lambda W D + I)^{-1}`
//! so that sites with zero residual variance (a knot on a site) need no
//! special casing; with knots at every site both paths perform the same
//! operations on the same random numbers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{chol_with_jitter, corr_matrix, low_rank_factor, CorrelationModel, Factor, LowRankFactor, Point};
use crate::numerics::LN_2PI;

#[derive(Debug, Clone)]
pub enum SpatialCovariance {
    Dense(DMatrix<f64>),
    LowRank(LowRankFactor),
}

impl SpatialCovariance {
    pub fn build(model: &CorrelationModel, sites: &[Point], knots: Option<&[Point]>) -> Result<Self> {
        match knots {
            None => Ok(SpatialCovariance::Dense(corr_matrix(model, sites))),
            Some(k) => Ok(SpatialCovariance::LowRank(low_rank_factor(model, sites, k)?)),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            SpatialCovariance::Dense(r) => r.nrows(),
            SpatialCovariance::LowRank(f) => f.n(),
        }
    }

    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SpatialCovariance::Dense(r) => r * x,
            SpatialCovariance::LowRank(f) => f.mul(x),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SpatialCovariance::Dense(r) => r.clone(),
            SpatialCovariance::LowRank(f) => f.dense(),
        }
    }
}

fn check_weights(w: &DVector<f64>, lambda: f64, n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::invalid(format!("weight vector has length {}, expected {n}", w.len())));
    }
    if !w.iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(Error::invalid("site weights must be positive and finite"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive and finite, got {lambda}")));
    }
    Ok(())
}

enum MarginalKind<'a> {
    Dense(Factor),
    LowRank { f: &'a LowRankFactor, delta3: DVector<f64>, k: Factor },
}

/// Factorization of `S = W^{-1} + lambda R`.
pub struct MarginalSystem<'a> {
    kind: MarginalKind<'a>,
    log_det: f64,
    n: usize,
}

impl<'a> MarginalSystem<'a> {
    pub fn new(w: &DVector<f64>, lambda: f64, cov: &'a SpatialCovariance) -> Result<Self> {
        let n = cov.n();
        check_weights(w, lambda, n)?;
        match cov {
            SpatialCovariance::Dense(r) => {
                let mut s = r * lambda;
                for i in 0..n {
                    s[(i, i)] += 1.0 / w[i];
                }
                let f = chol_with_jitter(&s)?;
                let log_det = f.log_det();
                Ok(MarginalSystem { kind: MarginalKind::Dense(f), log_det, n })
            }
            SpatialCovariance::LowRank(f) => {
                let delta3_inv = DVector::from_fn(n, |i, _| 1.0 / w[i] + lambda * f.d_nn[i]);
                let delta3 = delta3_inv.map(|v| 1.0 / v);
                let mut scaled = f.r_nq.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= delta3[i];
                }
                let mut k = f.r_nq.transpose() * scaled;
                k += f.r_qq_chol.chol.l_dirty().lower_triangle() * f.r_qq_chol.chol.l_dirty().lower_triangle().transpose() / lambda;
                let kf = chol_with_jitter(&k)?;
                let q = f.q() as f64;
                let log_det = delta3_inv.iter().map(|v| v.ln()).sum::<f64>() + q * lambda.ln() - f.r_qq_chol.log_det() + kf.log_det();
                Ok(MarginalSystem { kind: MarginalKind::LowRank { f, delta3, k: kf }, log_det, n })
            }
        }
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            MarginalKind::Dense(f) => f.solve(x),
            MarginalKind::LowRank { f, delta3, k } => {
                let t = delta3.component_mul(x);
                let inner = k.solve(&(f.r_nq.transpose() * &t));
                t - delta3.component_mul(&(&f.r_nq * inner))
            }
        }
    }

    pub fn log_pdf(&self, m: &DVector<f64>) -> f64 {
        let quad = m.dot(&self.solve(m));
        -0.5 * (self.n as f64 * LN_2PI + self.log_det + quad)
    }
}

/// `(W^{-1} + lambda R)^{-1} x`.
pub fn collapsed_solve(omega_nn: &DVector<f64>, lambda: f64, cov: &SpatialCovariance, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(MarginalSystem::new(omega_nn, lambda, cov)?.solve(x))
}

/// `log N(m; 0, W^{-1} + lambda R)`.
pub fn collapsed_gauss_logpdf(m: &DVector<f64>, omega_nn: &DVector<f64>, lambda: f64, cov: &SpatialCovariance) -> Result<f64> {
    Ok(MarginalSystem::new(omega_nn, lambda, cov)?.log_pdf(m))
}

enum ConditionalKind<'a> {
    Dense { r: &'a DMatrix<f64> },
    LowRank { f: &'a LowRankFactor, g: DVector<f64> },
}

/// Factorization giving products with and draws from
/// `V = (W + lambda^{-1} R^{-1})^{-1}`.
///
/// Dense: `V = lambda R M^{-1} R` with `M = R + lambda R W R`.
/// Low rank: `V = lambda D G + lambda G R_nq M^{-1} R_qn G` with
/// `M = R_qq + lambda R_qn W G R_nq`.
pub struct ConditionalSystem<'a> {
    kind: ConditionalKind<'a>,
    m: Factor,
    lambda: f64,
}

impl<'a> ConditionalSystem<'a> {
    pub fn new(w: &DVector<f64>, lambda: f64, cov: &'a SpatialCovariance) -> Result<Self> {
        let n = cov.n();
        check_weights(w, lambda, n)?;
        match cov {
            SpatialCovariance::Dense(r) => {
                let mut wr = r.clone();
                for (i, mut row) in wr.row_iter_mut().enumerate() {
                    row *= w[i];
                }
                let mut m = r.clone();
                m.gemm(lambda, r, &wr, 1.0);
                let m = chol_with_jitter(&m)?;
                Ok(ConditionalSystem { kind: ConditionalKind::Dense { r }, m, lambda })
            }
            SpatialCovariance::LowRank(f) => {
                let g = DVector::from_fn(n, |i, _| 1.0 / (lambda * w[i] * f.d_nn[i] + 1.0));
                let mut scaled = f.r_nq.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= lambda * w[i] * g[i];
                }
                let l = f.r_qq_chol.chol.l_dirty().lower_triangle();
                let mut m = &l * l.transpose();
                m.gemm_tr(1.0, &f.r_nq, &scaled, 1.0);
                let m = chol_with_jitter(&m)?;
                Ok(ConditionalSystem { kind: ConditionalKind::LowRank { f, g }, m, lambda })
            }
        }
    }

    /// `V X` for a block of columns.
    pub fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let lam = self.lambda;
        match &self.kind {
            ConditionalKind::Dense { r } => {
                let rx = *r * x;
                let t = self.m.solve_mat(&rx);
                (*r * t) * lam
            }
            ConditionalKind::LowRank { f, g } => {
                let mut gx = x.clone();
                for (i, mut row) in gx.row_iter_mut().enumerate() {
                    row *= g[i];
                }
                let t = self.m.solve_mat(&(f.r_nq.transpose() * &gx));
                let mut out = &f.r_nq * t;
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= lam * g[i];
                }
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    let extra = lam * f.d_nn[i];
                    if extra != 0.0 {
                        row += gx.row(i) * extra;
                    }
                }
                out
            }
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.apply_mat(&m).as_slice())
    }

    /// Exact draw from `N(V b, V)`.
    pub fn draw<R: Rng + ?Sized>(&self, b: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mean = self.apply(b);
        let q = self.m.chol.l_dirty().nrows();
        let z = DVector::from_iterator(q, (0..q).map(|_| StandardNormal.sample(rng)));
        let y = self.m.back_substitute(&z);
        let sl = self.lambda.sqrt();
        match &self.kind {
            ConditionalKind::Dense { r } => mean + (*r * y) * sl,
            ConditionalKind::LowRank { f, g } => {
                let mut out = mean + (&f.r_nq * y).component_mul(g) * sl;
                for i in 0..out.len() {
                    let d = f.d_nn[i];
                    if d > 0.0 {
                        let e: f64 = StandardNormal.sample(rng);
                        out[i] += (self.lambda * d * g[i]).sqrt() * e;
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{grid_knots, KernelFamily};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, seed: u64) -> (Vec<Point>, DVector<f64>, CorrelationModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<Point> = (0..n).map(|_| Point::new(rng.random(), rng.random())).collect();
        let w = DVector::from_fn(n, |_, _| 0.5 + 2.0 * rng.random::<f64>());
        (sites, w, CorrelationModel::new(KernelFamily::Matern32, 0.25).unwrap())
    }

    fn brute_v(w: &DVector<f64>, lambda: f64, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = r.clone().try_inverse().unwrap() / lambda;
        for i in 0..w.len() {
            p[(i, i)] += w[i];
        }
        p.try_inverse().unwrap()
    }

    #[test]
    fn scalar_identity_case() {
        let cov = SpatialCovariance::Dense(DMatrix::identity(4, 4));
        let w = DVector::from_element(4, 1.0);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let s = collapsed_solve(&w, 0.6, &cov, &x).unwrap();
        assert!((s - &x / 1.6).abs().max() < 1e-14);
    }

    #[test]
    fn vanishing_lambda_limit() {
        let (sites, w, model) = setup(10, 1);
        let cov = SpatialCovariance::build(&model, &sites, None).unwrap();
        let x = DVector::from_fn(10, |i, _| i as f64 - 4.0);
        let s = collapsed_solve(&w, 1e-12, &cov, &x).unwrap();
        assert!((s - w.component_mul(&x)).abs().max() < 1e-9);
    }

    #[test]
    fn single_site_is_scalar_normal() {
        let cov = SpatialCovariance::Dense(DMatrix::identity(1, 1));
        let w = DVector::from_element(1, 2.0);
        let lp = collapsed_gauss_logpdf(&DVector::from_element(1, 0.7), &w, 1.5, &cov).unwrap();
        let var: f64 = 0.5 + 1.5;
        let exact = -0.5 * (LN_2PI + var.ln() + 0.49 / var);
        assert!((lp - exact).abs() < 1e-14);
    }

    #[test]
    fn low_rank_matches_dense_inverse() {
        let (sites, w, model) = setup(60, 3);
        let knots = grid_knots(5, 3, Point::new(0.0, 0.0), Point::new(1.0, 1.0)).unwrap();
        let lr = SpatialCovariance::build(&model, &sites, Some(&knots)).unwrap();
        let rt = lr.to_dense();
        let lambda = 2.3;
        let mut s = &rt * lambda;
        for i in 0..60 {
            s[(i, i)] += 1.0 / w[i];
        }
        let x = DVector::from_fn(60, |i, _| (0.3 * i as f64).cos());
        let brute = s.clone().try_inverse().unwrap() * &x;
        let fast = collapsed_solve(&w, lambda, &lr, &x).unwrap();
        assert!((fast - &brute).abs().max() < 1e-8);
        let chol = s.clone().cholesky().unwrap();
        let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let exact = -0.5 * (60.0 * LN_2PI + ld + x.dot(&brute));
        let lp = collapsed_gauss_logpdf(&x, &w, lambda, &lr).unwrap();
        assert!((lp - exact).abs() < 1e-8);
    }

    #[test]
    fn conditional_matches_brute_force() {
        let (sites, w, model) = setup(20, 5);
        let cov = SpatialCovariance::build(&model, &sites, None).unwrap();
        let r = cov.to_dense();
        let lambda = 1.7;
        let v = brute_v(&w, lambda, &r);
        let b = DVector::from_fn(20, |i, _| (i as f64).sin());
        let cs = ConditionalSystem::new(&w, lambda, &cov).unwrap();
        assert!((cs.apply(&b) - &v * &b).abs().max() < 1e-9);

        let knots = grid_knots(4, 4, Point::new(0.0, 0.0), Point::new(1.0, 1.0)).unwrap();
        let lr = SpatialCovariance::build(&model, &sites, Some(&knots)).unwrap();
        let vl = brute_v(&w, lambda, &lr.to_dense());
        let cl = ConditionalSystem::new(&w, lambda, &lr).unwrap();
        assert!((cl.apply(&b) - &vl * &b).abs().max() < 1e-8);
    }

    #[test]
    fn conditional_draw_covariance() {
        let (sites, w, model) = setup(3, 8);
        let knots = vec![Point::new(0.2, 0.2), Point::new(0.8, 0.7)];
        let lr = SpatialCovariance::build(&model, &sites, Some(&knots)).unwrap();
        let v = brute_v(&w, 1.3, &lr.to_dense());
        let cs = ConditionalSystem::new(&w, 1.3, &lr).unwrap();
        let b = DVector::from_vec(vec![0.4, -0.2, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut mean = DVector::zeros(3);
        let mut second = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let d = cs.draw(&b, &mut rng);
            mean += &d;
            second += &d * d.transpose();
        }
        mean /= n as f64;
        let cov = second / n as f64 - &mean * mean.transpose();
        assert!((mean - &v * &b).abs().max() < 0.01);
        assert!((cov - v).abs().max() < 0.01);
    }

    #[test]
    fn knots_at_sites_reproduce_dense_path() {
        let (sites, w, model) = setup(25, 13);
        let dense = SpatialCovariance::build(&model, &sites, None).unwrap();
        let lr = SpatialCovariance::build(&model, &sites, Some(&sites)).unwrap();
        let lambda = 0.9;
        let x = DVector::from_fn(25, |i, _| 1.0 / (1.0 + i as f64));
        let a = collapsed_solve(&w, lambda, &dense, &x).unwrap();
        let b = collapsed_solve(&w, lambda, &lr, &x).unwrap();
        assert!((a - b).abs().max() < 1e-8);
        let cd = ConditionalSystem::new(&w, lambda, &dense).unwrap();
        let cl = ConditionalSystem::new(&w, lambda, &lr).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let d1 = cd.draw(&x, &mut r1);
        let d2 = cl.draw(&x, &mut r2);
        assert!((d1 - d2).abs().max() < 1e-8);
    }

    #[test]
    fn rejects_bad_weights() {
        let cov = SpatialCovariance::Dense(DMatrix::identity(2, 2));
        let w = DVector::from_vec(vec![1.0, 0.0]);
        assert!(MarginalSystem::new(&w, 1.0, &cov).is_err());
        assert!(MarginalSystem::new(&DVector::from_element(2, 1.0), -1.0, &cov).is_err());
    }
}
