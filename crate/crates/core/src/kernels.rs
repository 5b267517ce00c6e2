//! Correlation kernels, correlation-matrix assembly and the unit-diagonal
//! knot-based low-rank structure.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, o: &Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Exponential,
    #[serde(alias = "matern32")]
    Matern32,
    #[serde(alias = "matern52")]
    Matern52,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "exponential" | "exp" => Ok(KernelFamily::Exponential),
            "matern_3_2" | "matern32" => Ok(KernelFamily::Matern32),
            "matern_5_2" | "matern52" => Ok(KernelFamily::Matern52),
            other => Err(Error::invalid(format!("unknown kernel family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub family: KernelFamily,
    pub rho: f64,
}

impl CorrelationModel {
    pub fn new(family: KernelFamily, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("range must be positive and finite, got {rho}")));
        }
        Ok(CorrelationModel { family, rho })
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        CorrelationModel::new(self.family, rho)
    }

    /// Correlation as a function of distance.
    pub fn at_distance(&self, d: f64) -> f64 {
        let r = d / self.rho;
        match self.family {
            KernelFamily::Exponential => (-r).exp(),
            KernelFamily::Matern32 => (1.0 + r) * (-r).exp(),
            KernelFamily::Matern52 => (1.0 + r + r * r / 3.0) * (-r).exp(),
        }
    }
}

pub fn kernel_eval(model: &CorrelationModel, s: &Point, t: &Point) -> f64 {
    model.at_distance(s.dist(t))
}

pub fn corr_matrix(model: &CorrelationModel, sites: &[Point]) -> DMatrix<f64> {
    let n = sites.len();
    let mut r = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = kernel_eval(model, &sites[i], &sites[j]);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

pub fn cross_corr(model: &CorrelationModel, rows: &[Point], cols: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| kernel_eval(model, &rows[i], &cols[j]))
}

/// A Cholesky factor together with the diagonal jitter it needed.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-T} z`.
    pub fn back_substitute(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().tr_solve_lower_triangular(z).expect("non-singular triangular factor")
    }

    /// `L^{-1} b`.
    pub fn forward_substitute(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().solve_lower_triangular(b).expect("non-singular triangular factor")
    }
}

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-6;

/// Cholesky factorization, retrying with diagonal jitter 1e-10, 1e-9, ...,
/// 1e-6 before giving up.
pub fn chol_with_jitter(m: &DMatrix<f64>) -> Result<Factor> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("Cholesky needs a square matrix"));
    }
    if let Some(chol) = m.clone().cholesky() {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = a.cholesky() {
            log::warn!("matrix of order {} needed diagonal jitter {jitter:e} to factor", m.nrows());
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    log::error!("matrix of order {} is not positive definite even with jitter {JITTER_MAX:e}", m.nrows());
    Err(Error::numerical(format!(
        "matrix of order {} not positive definite within the jitter budget",
        m.nrows()
    )))
}

/// Knot-based low-rank correlation with a diagonal correction restoring unit
/// variance: `R~ = R_nq R_qq^{-1} R_qn + D`.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub knots: Vec<Point>,
    pub r_qq_chol: Factor,
    pub r_nq: DMatrix<f64>,
    pub d_nn: DVector<f64>,
}

impl LowRankFactor {
    pub fn n(&self) -> usize {
        self.r_nq.nrows()
    }

    pub fn q(&self) -> usize {
        self.r_nq.ncols()
    }

    /// The implied n×n correlation matrix with the diagonal set to one.
    pub fn dense(&self) -> DMatrix<f64> {
        let a = self.r_qq_chol.chol.l_dirty().solve_lower_triangular(&self.r_nq.transpose()).expect("triangular solve");
        let mut r = a.transpose() * &a;
        for i in 0..r.nrows() {
            r[(i, i)] = 1.0;
        }
        r
    }

    /// `R~ x` without forming the n×n matrix.
    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.r_qq_chol.solve(&(self.r_nq.transpose() * x));
        &self.r_nq * t + self.d_nn.component_mul(x)
    }
}

pub fn low_rank_factor(model: &CorrelationModel, sites: &[Point], knots: &[Point]) -> Result<LowRankFactor> {
    if knots.is_empty() {
        return Err(Error::invalid("low-rank factor needs at least one knot"));
    }
    let r_qq = corr_matrix(model, knots);
    let r_qq_chol = r_qq
        .cholesky()
        .map(|chol| Factor { chol, jitter: 0.0 })
        .ok_or_else(|| Error::numerical("knot correlation matrix is singular"))?;
    let r_nq = cross_corr(model, sites, knots);
    let a = r_qq_chol.chol.l_dirty().solve_lower_triangular(&r_nq.transpose()).expect("triangular solve");
    let mut d_nn = DVector::zeros(sites.len());
    for (i, s) in sites.iter().enumerate() {
        if knots.iter().any(|k| k.dist(s) == 0.0) {
            continue;
        }
        let explained = a.column(i).norm_squared();
        d_nn[i] = (1.0 - explained).clamp(0.0, 1.0);
    }
    Ok(LowRankFactor { knots: knots.to_vec(), r_qq_chol, r_nq, d_nn })
}

/// Regular grid of knots inset by 5% of each side from a bounding box; on
/// [0, 2]^2 a 7×7 grid gives {0.1, 0.4, ..., 1.9}^2.
pub fn grid_knots(nx: usize, ny: usize, lo: Point, hi: Point) -> Result<Vec<Point>> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("knot grid dimensions must be positive"));
    }
    if !(hi.x > lo.x && hi.y > lo.y) {
        return Err(Error::invalid("knot bounding box is degenerate"));
    }
    let axis = |n: usize, a: f64, b: f64| -> Vec<f64> {
        let inset = 0.05 * (b - a);
        if n == 1 {
            return vec![0.5 * (a + b)];
        }
        let step = (b - a - 2.0 * inset) / (n - 1) as f64;
        (0..n).map(|i| a + inset + step * i as f64).collect()
    };
    let xs = axis(nx, lo.x, hi.x);
    let ys = axis(ny, lo.y, hi.y);
    let mut out = Vec::with_capacity(nx * ny);
    for &y in &ys {
        for &x in &xs {
            out.push(Point::new(x, y));
        }
    }
    Ok(out)
}

pub fn bounding_box(sites: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in sites {
        lo.x = lo.x.min(s.x);
        lo.y = lo.y.min(s.y);
        hi.x = hi.x.max(s.x);
        hi.y = hi.y.max(s.y);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_sites(n: usize, side: f64, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Point::new(side * rng.random::<f64>(), side * rng.random::<f64>())).collect()
    }

    #[test]
    fn kernel_values() {
        let a = Point::new(0.0, 0.0);
        for fam in [KernelFamily::Exponential, KernelFamily::Matern32, KernelFamily::Matern52] {
            let m = CorrelationModel::new(fam, 0.3).unwrap();
            assert_eq!(kernel_eval(&m, &a, &a), 1.0);
            let mut prev = 1.0;
            for i in 1..200 {
                let v = m.at_distance(i as f64 * 0.01);
                assert!(v < prev && v > 0.0);
                prev = v;
            }
        }
        let m = CorrelationModel::new(KernelFamily::Matern32, 0.2).unwrap();
        assert!((m.at_distance(0.2) - 2.0 / std::f64::consts::E).abs() < 1e-15);
        let e = CorrelationModel::new(KernelFamily::Exponential, 2.0).unwrap();
        assert!((e.at_distance(1.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(CorrelationModel::new(KernelFamily::Exponential, 0.0).is_err());
    }

    #[test]
    fn corr_matrix_basics() {
        let m = CorrelationModel::new(KernelFamily::Matern32, 0.05).unwrap();
        assert_eq!(corr_matrix(&m, &[Point::new(1.0, 1.0)]), DMatrix::identity(1, 1));
        let far = corr_matrix(&m, &[Point::new(0.0, 0.0), Point::new(100.0, 0.0)]);
        assert!(far[(0, 1)] < 1e-8);
        let sites = uniform_sites(200, 1.0, 7);
        let r = corr_matrix(&m, &sites);
        let f = chol_with_jitter(&r).unwrap();
        let l = f.l();
        let rec = &l * l.transpose();
        let err = (&rec - &r).abs().max();
        assert!(err < 1e-10 + f.jitter, "reconstruction error {err}");
        assert!((&r - r.transpose()).abs().max() < 1e-14);
    }

    #[test]
    fn jitter_ladder() {
        let i = DMatrix::<f64>::identity(3, 3);
        let f = chol_with_jitter(&i).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_eq!(f.l(), i);
        let ones = DMatrix::from_element(3, 3, 1.0);
        let f = chol_with_jitter(&ones).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= JITTER_MAX);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(chol_with_jitter(&bad).is_err());
    }

    #[test]
    fn low_rank_with_knots_at_sites_is_exact() {
        let m = CorrelationModel::new(KernelFamily::Matern32, 0.3).unwrap();
        let sites = uniform_sites(30, 1.0, 2);
        let f = low_rank_factor(&m, &sites, &sites).unwrap();
        assert!(f.d_nn.iter().all(|&d| d == 0.0));
        let diff = (f.dense() - corr_matrix(&m, &sites)).abs().max();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn low_rank_unit_diagonal_and_residuals() {
        let m = CorrelationModel::new(KernelFamily::Matern32, 0.2).unwrap();
        let sites = uniform_sites(120, 2.0, 9);
        let knots = grid_knots(7, 7, Point::new(0.0, 0.0), Point::new(2.0, 2.0)).unwrap();
        assert!((knots[0].x - 0.1).abs() < 1e-12 && (knots[1].x - 0.4).abs() < 1e-12 && (knots[48].y - 1.9).abs() < 1e-12);
        let f = low_rank_factor(&m, &sites, &knots).unwrap();
        assert!(f.d_nn.iter().all(|&d| (0.0..1.0).contains(&d)));
        let r = f.dense();
        assert!((0..r.nrows()).all(|i| r[(i, i)] == 1.0));
        let x = DVector::from_fn(120, |i, _| (i as f64).sin());
        assert!((f.mul(&x) - &r * &x).abs().max() < 1e-10);
    }

    #[test]
    fn low_rank_error_shrinks_with_more_knots() {
        let m = CorrelationModel::new(KernelFamily::Matern32, 0.3).unwrap();
        let sites = uniform_sites(150, 1.0, 4);
        let dense = corr_matrix(&m, &sites);
        let (lo, hi) = (Point::new(0.0, 0.0), Point::new(1.0, 1.0));
        let mut prev = f64::INFINITY;
        for g in [5, 7, 10] {
            let f = low_rank_factor(&m, &sites, &grid_knots(g, g, lo, hi).unwrap()).unwrap();
            let err = (f.dense() - &dense).abs().max();
            assert!(err < prev, "q={} err={err}", g * g);
            prev = err;
        }
    }

    #[test]
    fn kernel_family_parsing() {
        assert_eq!("matern_3_2".parse::<KernelFamily>().unwrap(), KernelFamily::Matern32);
        assert_eq!("exponential".parse::<KernelFamily>().unwrap(), KernelFamily::Exponential);
        assert!("gaussian".parse::<KernelFamily>().is_err());
    }
}
