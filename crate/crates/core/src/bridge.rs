//! Bridge distribution with logit link.
//!
//! The bridge law is the random-intercept distribution under which a logistic
//! mixed model marginalizes to another logistic model with slopes scaled by
//! `phi`. It is a normal variance mixture; the mixing law is an infinite
//! weighted sum of exponential-times-Bernoulli terms.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, KahanSum, QuadTol};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeParams {
    phi: f64,
}

impl BridgeParams {
    pub fn new(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi < 1.0) {
            return Err(Error::invalid(format!("phi must lie in (0, 1), got {phi}")));
        }
        Ok(BridgeParams { phi })
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Variance of the bridge law, `pi^2/3 (phi^-2 - 1)`; also the mean of
    /// the mixing variable.
    pub fn variance(&self) -> f64 {
        PI * PI / 3.0 * (self.phi.powi(-2) - 1.0)
    }

    /// The `phi` giving a unit-variance bridge law.
    pub fn unit_variance_phi() -> f64 {
        (1.0 + 3.0 / (PI * PI)).powf(-0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixingSeriesConfig {
    /// Number of geometric waiting times in the default sampler.
    pub k2_terms: usize,
    pub series_rel_tol: f64,
    /// Truncation of the naive sampler and the term budget of the series.
    pub k1_terms: usize,
    /// Add the conditional expectation of the neglected tail to each
    /// geometric-method draw.
    pub tail_correction: bool,
}

impl Default for MixingSeriesConfig {
    fn default() -> Self {
        MixingSeriesConfig { k2_terms: 100, series_rel_tol: 1e-12, k1_terms: 200, tail_correction: true }
    }
}

impl MixingSeriesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k2_terms == 0 || self.k1_terms == 0 {
            return Err(Error::invalid("series term counts must be positive"));
        }
        if !(self.series_rel_tol > 0.0 && self.series_rel_tol < 1.0) {
            return Err(Error::invalid("series_rel_tol must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingDraw {
    pub lambda: f64,
}

pub fn bridge_log_density(u: f64, params: &BridgeParams) -> f64 {
    let phi = params.phi;
    let x = (phi * u).abs();
    let c = (phi * PI).cos();
    // cosh(x) + c = e^x/2 * (1 + e^{-2x} + 2c e^{-x})
    let log_denom = x - std::f64::consts::LN_2 + ((-2.0 * x).exp() + 2.0 * c * (-x).exp()).ln_1p();
    (phi * PI).sin().ln() - (2.0 * PI).ln() - log_denom
}

pub fn bridge_density(u: f64, params: &BridgeParams) -> f64 {
    bridge_log_density(u, params).exp()
}

/// `C_k(phi) = k - 1/2 + (-1)^k (phi - 1/2)`.
pub fn series_coefficient(k: usize, phi: f64) -> f64 {
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    k as f64 - 0.5 + sign * (phi - 0.5)
}

/// Draw the mixing variable by geometric waiting times between the non-zero
/// Bernoulli terms; never returns zero.
pub fn mixing_sample<R: Rng + ?Sized>(params: &BridgeParams, cfg: &MixingSeriesConfig, rng: &mut R) -> MixingDraw {
    let phi2 = params.phi * params.phi;
    let geo = Geometric::new(1.0 - phi2).expect("success probability in (0, 1)");
    let scale = 2.0 / phi2;
    let mut d: u64 = 0;
    let mut total = 0.0;
    for _ in 0..cfg.k2_terms {
        d += geo.sample(rng) + 1;
        let e: f64 = Exp1.sample(rng);
        let df = d as f64;
        total += e * scale / (df * df);
    }
    if cfg.tail_correction {
        total += (1.0 - phi2) * scale * numerics::trigamma(d as f64 + 1.0);
    }
    MixingDraw { lambda: total }
}

/// Draw from the first `k1_terms` terms of the exponential-Bernoulli series.
pub fn mixing_sample_naive<R: Rng + ?Sized>(params: &BridgeParams, cfg: &MixingSeriesConfig, rng: &mut R) -> MixingDraw {
    let phi2 = params.phi * params.phi;
    let q = 1.0 - phi2;
    let mut total = 0.0;
    for k in 1..=cfg.k1_terms {
        let a: f64 = Exp1.sample(rng);
        let b = rng.random::<f64>() < q;
        if b {
            total += a / (k * k) as f64;
        }
    }
    MixingDraw { lambda: 2.0 * total / phi2 }
}

pub fn mixing_mean(params: &BridgeParams) -> f64 {
    params.variance()
}

pub fn mixing_variance(params: &BridgeParams) -> f64 {
    let phi4 = params.phi.powi(4);
    4.0 * (1.0 - phi4) / phi4 * PI.powi(4) / 90.0
}

/// Signed terms held as (log magnitude, sign); summed largest first with
/// compensation.
fn signed_log_sum(terms: &mut [(f64, f64)]) -> Option<(f64, f64)> {
    terms.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = terms.first()?.0;
    if !top.is_finite() {
        return None;
    }
    let mut acc = KahanSum::default();
    for &(lm, s) in terms.iter() {
        acc.add(s * (lm - top).exp());
    }
    Some((top, acc.value()))
}

fn small_lambda_regime(lambda: f64, phi: f64) -> bool {
    lambda <= PI / (phi * phi)
}

/// Log density of the mixing variable.
///
/// For small `lambda` the theta-type alternating series in `C_k` is used; for
/// large `lambda` the equivalent exponential series obtained from the poles
/// of the Laplace transform converges much faster. Both are evaluated in log
/// space relative to their largest term.
pub fn mixing_log_density(lambda: f64, params: &BridgeParams, cfg: &MixingSeriesConfig) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("mixing density needs a finite positive argument, got {lambda}")));
    }
    let phi = params.phi;
    let log_tol = cfg.series_rel_tol.ln();
    let mut terms: Vec<(f64, f64)> = Vec::with_capacity(16);
    if small_lambda_regime(lambda, phi) {
        let mut prev = f64::NEG_INFINITY;
        let mut best = f64::NEG_INFINITY;
        let mut k = 1;
        loop {
            if k > cfg.k1_terms {
                return Err(Error::numerical(format!(
                    "mixing density series did not converge within {} terms at lambda={lambda}",
                    cfg.k1_terms
                )));
            }
            let c = series_coefficient(k, phi);
            let lm = c.ln() - PI * PI * c * c / (2.0 * phi * phi * lambda);
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            terms.push((lm, sign));
            best = best.max(lm);
            if k > 1 && lm < prev && lm - best < log_tol {
                break;
            }
            prev = lm;
            k += 1;
        }
        let (top, s) = signed_log_sum(&mut terms).ok_or_else(|| Error::numerical("empty series"))?;
        if !(s > 0.0) {
            return Err(Error::numerical(format!("mixing density series lost positivity at lambda={lambda}")));
        }
        Ok(0.5 * (PI / 2.0).ln() - 2.0 * phi.ln() - 1.5 * lambda.ln() + top + s.ln())
    } else {
        let mut best = f64::NEG_INFINITY;
        let mut m = 1;
        loop {
            if m > cfg.k1_terms {
                return Err(Error::numerical(format!(
                    "mixing density series did not converge within {} terms at lambda={lambda}",
                    cfg.k1_terms
                )));
            }
            let mf = m as f64;
            let envelope = mf.ln() - mf * mf * phi * phi * lambda / 2.0;
            let sn = (mf * PI * phi).sin();
            let sign = if m % 2 == 1 { 1.0 } else { -1.0 } * sn.signum();
            if sn != 0.0 {
                terms.push((envelope + sn.abs().ln(), sign));
            }
            best = best.max(envelope);
            if m > 1 && envelope - best < log_tol {
                break;
            }
            m += 1;
        }
        let (top, s) = signed_log_sum(&mut terms).ok_or_else(|| Error::numerical("empty series"))?;
        if !(s > 0.0) {
            return Err(Error::numerical(format!("mixing density series lost positivity at lambda={lambda}")));
        }
        Ok((phi / PI).ln() + top + s.ln())
    }
}

/// CDF of the mixing variable, from term-by-term integration of the two
/// series representations.
pub fn mixing_cdf(lambda: f64, params: &BridgeParams) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda.is_infinite() {
        return 1.0;
    }
    let phi = params.phi;
    let mut acc = KahanSum::default();
    if small_lambda_regime(lambda, phi) {
        for k in 1..400 {
            let c = series_coefficient(k, phi);
            let t = libm::erfc(PI * c / (phi * (2.0 * lambda).sqrt()));
            acc.add(if k % 2 == 1 { t } else { -t });
            if t < 1e-17 {
                break;
            }
        }
        (acc.value() / phi).clamp(0.0, 1.0)
    } else {
        for m in 1..400 {
            let mf = m as f64;
            let env = (-mf * mf * phi * phi * lambda / 2.0).exp() / mf;
            let t = (mf * PI * phi).sin() * env;
            acc.add(if m % 2 == 1 { t } else { -t });
            if env < 1e-17 {
                break;
            }
        }
        (1.0 - 2.0 / (PI * phi) * acc.value()).clamp(0.0, 1.0)
    }
}

pub fn bridge_sample<R: Rng + ?Sized>(params: &BridgeParams, cfg: &MixingSeriesConfig, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let lam = mixing_sample(params, cfg, rng).lambda;
            let z: f64 = StandardNormal.sample(rng);
            lam.sqrt() * z
        })
        .collect()
}

/// One realization of a multivariate bridge vector with correlation factor
/// `corr_chol` (lower triangular). All coordinates share one mixing draw.
pub fn mvbridge_sample<R: Rng + ?Sized>(
    params: &BridgeParams,
    cfg: &MixingSeriesConfig,
    corr_chol: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = corr_chol.nrows();
    let lam = mixing_sample(params, cfg, rng).lambda;
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    corr_chol * z * lam.sqrt()
}

/// Log density of the d-dimensional (d >= 2) multivariate bridge law.
///
/// Consecutive terms are paired (`C_{2j-1} = 2j-1-phi`, `C_{2j} = 2j-1+phi`)
/// and the remainder after the last pair is replaced by its midpoint-rule
/// integral, since the pair differences decay only polynomially.
pub fn mvbridge_log_density(u: &DVector<f64>, params: &BridgeParams, corr: &DMatrix<f64>, cfg: &MixingSeriesConfig) -> Result<f64> {
    let d = u.len();
    if d < 2 {
        return Err(Error::invalid("multivariate bridge density needs dimension >= 2"));
    }
    if corr.nrows() != d || corr.ncols() != d {
        return Err(Error::invalid("correlation matrix does not match the vector dimension"));
    }
    let chol = corr
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("correlation matrix is not positive definite"))?;
    let w = chol.l().solve_lower_triangular(u).expect("triangular solve");
    let quad = w.norm_squared();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let phi = params.phi;
    let df = d as f64;
    let expo = (df + 1.0) / 2.0;
    let g = |c: f64| c * (PI * PI * c * c / (phi * phi) + quad).powf(-expo);
    let anti = |c: f64| -(phi * phi / (PI * PI)) / (df - 1.0) * (PI * PI * c * c / (phi * phi) + quad).powf(-(df - 1.0) / 2.0);
    let max_pairs = 50 * cfg.k1_terms.max(40);
    let mut acc = KahanSum::default();
    let mut j = 1;
    loop {
        let centre = (2 * j - 1) as f64;
        let pair = g(centre - phi) - g(centre + phi);
        acc.add(pair);
        if pair.abs() < cfg.series_rel_tol * acc.value().abs() || j >= max_pairs {
            break;
        }
        j += 1;
    }
    let edge = (2 * j) as f64;
    acc.add(0.5 * (anti(edge + phi) - anti(edge - phi)));
    let s = acc.value();
    if !(s > 0.0) {
        return Err(Error::numerical("multivariate bridge series lost positivity"));
    }
    Ok(libm::lgamma(expo) - 2.0 * phi.ln() - (df - 1.0) / 2.0 * PI.ln() - 0.5 * logdet + s.ln())
}

fn cdf_cutoff(phi: f64) -> f64 {
    40.0 / phi
}

/// Lower tail mass beyond the quadrature cutoff, where the density is
/// exponential to within `e^{-40}` relative error.
fn far_tail(u: f64, phi: f64) -> f64 {
    (phi * PI).sin() / (PI * phi) * (phi * u).exp()
}

fn lower_cdf(u: f64, params: &BridgeParams) -> Result<f64> {
    let phi = params.phi;
    let cut = cdf_cutoff(phi);
    if u <= -cut {
        return Ok(far_tail(u, phi));
    }
    let tol = QuadTol { abs: 0.0, rel: 1e-13, max_panels: 4000 };
    let body = numerics::integrate(|x| bridge_density(x, params), -cut, u, tol)?;
    Ok(far_tail(-cut, phi) + body)
}

/// CDF by adaptive quadrature of the density.
pub fn bridge_cdf(u: f64, params: &BridgeParams) -> Result<f64> {
    if u.is_nan() {
        return Err(Error::invalid("bridge_cdf of NaN"));
    }
    if u == 0.0 {
        return Ok(0.5);
    }
    if u < 0.0 {
        lower_cdf(u, params)
    } else {
        Ok(1.0 - lower_cdf(-u, params)?)
    }
}

/// Quantile by Brent root finding on the quadrature CDF.
pub fn bridge_quantile(p: f64, params: &BridgeParams) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p > 0.5 {
        return Ok(-bridge_quantile(1.0 - p, params)?);
    }
    let phi = params.phi;
    let cut = cdf_cutoff(phi);
    if p <= far_tail(-cut, phi) {
        return Ok((p * PI * phi / (phi * PI).sin()).ln() / phi);
    }
    // exponential-tail guess, pushed outward until it brackets
    let guess = ((p * PI * phi / (phi * PI).sin()).ln() / phi).min(0.0);
    let mut lo = (guess - 1.0 / phi).max(-cut);
    while lower_cdf(lo, params)? > p && lo > -cut {
        lo = (2.0 * lo - 1.0).max(-cut);
    }
    numerics::brent_root(|x| lower_cdf(x, params).map(|c| c - p).unwrap_or(f64::NAN), lo, 0.0, 1e-12)
}

/// Log density of the `phi` prior induced by a standard half-Cauchy prior on
/// the bridge standard deviation.
pub fn induced_phi_log_prior(phi: f64) -> f64 {
    if !(phi > 0.0 && phi < 1.0) {
        return f64::NEG_INFINITY;
    }
    0.5 * 12f64.ln() - (PI * PI - (PI * PI - 3.0) * phi * phi).ln() - 0.5 * (1.0 - phi * phi).ln()
}

pub fn sample_induced_phi<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let c: f64 = rand_distr::Cauchy::new(0.0, 1.0).expect("valid").sample(rng);
    (1.0 + 3.0 * c * c / (PI * PI)).powf(-0.5)
}

/// Logistic density with scale `s`, as a log.
pub fn logistic_log_density(x: f64, s: f64) -> f64 {
    -(x / s).abs() - 2.0 * (-(x / s).abs()).exp().ln_1p() - s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(phi: f64) -> BridgeParams {
        BridgeParams::new(phi).unwrap()
    }

    #[test]
    fn rejects_out_of_range_phi() {
        assert!(BridgeParams::new(0.0).is_err());
        assert!(BridgeParams::new(1.0).is_err());
        assert!(BridgeParams::new(f64::NAN).is_err());
        assert!(BridgeParams::new(0.3).is_ok());
    }

    #[test]
    fn density_at_origin_half() {
        let v = bridge_density(0.0, &p(0.5));
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn density_stays_finite_far_out() {
        let v = bridge_log_density(5000.0, &p(0.7));
        assert!(v.is_finite());
        let direct = (0.7f64 * PI).sin().ln() - (2.0 * PI).ln() - (0.7 * 5000.0 - std::f64::consts::LN_2);
        assert!((v - direct).abs() < 1e-9);
    }

    #[test]
    fn coefficients() {
        assert!((series_coefficient(1, 0.7) - 0.3).abs() < 1e-15);
        assert!((series_coefficient(2, 0.7) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn unit_variance_phi() {
        let b = p(BridgeParams::unit_variance_phi());
        assert!((b.variance() - 1.0).abs() < 1e-12);
        assert!((BridgeParams::unit_variance_phi() - 0.876).abs() < 1e-3);
    }

    #[test]
    fn naive_sampler_single_term_has_zero_atom() {
        let cfg = MixingSeriesConfig { k1_terms: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let zeros = (0..n).filter(|_| mixing_sample_naive(&p(0.9), &cfg, &mut rng).lambda == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.81).abs() < 4.0 * (0.81f64 * 0.19 / n as f64).sqrt());
    }

    #[test]
    fn geometric_sampler_is_positive_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MixingSeriesConfig::default();
        for _ in 0..10_000 {
            assert!(mixing_sample(&p(0.995), &cfg, &mut rng).lambda > 0.0);
        }
    }

    #[test]
    fn mixing_series_regimes_agree_at_the_switch() {
        let cfg = MixingSeriesConfig::default();
        for &phi in &[0.2, 0.5, 0.7, 0.95] {
            let b = p(phi);
            let s = PI / (phi * phi);
            let lo = mixing_log_density(s * (1.0 - 1e-12), &b, &cfg).unwrap();
            let hi = mixing_log_density(s * (1.0 + 1e-12), &b, &cfg).unwrap();
            assert!((lo - hi).abs() < 1e-9, "phi={phi}: {lo} vs {hi}");
        }
    }

    #[test]
    fn mixing_density_tiny_lambda_is_finite() {
        let v = mixing_log_density(1e-8, &p(0.7), &MixingSeriesConfig::default()).unwrap();
        assert!(v.is_finite() && v < -1e6);
        assert!(mixing_log_density(0.0, &p(0.7), &MixingSeriesConfig::default()).is_err());
    }

    #[test]
    fn mixing_cdf_matches_density_integral() {
        let cfg = MixingSeriesConfig::default();
        for &phi in &[0.3, 0.7, 0.9] {
            let b = p(phi);
            for &x in &[0.2, 1.0, 3.0, 10.0, 40.0] {
                let q = numerics::integrate(
                    |l| if l <= 0.0 { 0.0 } else { mixing_log_density(l, &b, &cfg).unwrap().exp() },
                    0.0,
                    x,
                    QuadTol::default(),
                )
                .unwrap();
                assert!((q - mixing_cdf(x, &b)).abs() < 1e-9, "phi={phi} x={x}");
            }
        }
    }

    #[test]
    fn cdf_quantile_round_trip() {
        let b = p(0.7);
        for &u in &[-60.0, -12.0, -3.0, -0.4, 0.0, 0.7, 5.0, 12.0] {
            let c = bridge_cdf(u, &b).unwrap();
            let back = bridge_quantile(c, &b).unwrap();
            assert!((back - u).abs() < 1e-8, "u={u} back={back}");
        }
        assert!(bridge_quantile(0.0, &b).is_err());
        assert!(bridge_quantile(1.0, &b).is_err());
    }

    #[test]
    fn cdf_matches_closed_form_arctan() {
        // independent closed form, used only as an oracle
        for &phi in &[0.3, 0.7, 0.95] {
            let b = p(phi);
            for &u in &[-7.0, -1.0, 0.3, 2.5] {
                let exact = 0.5 + ((PI * phi / 2.0).tan() * (phi * u / 2.0).tanh()).atan() / (PI * phi);
                assert!((bridge_cdf(u, &b).unwrap() - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mv_density_is_even_and_elliptical() {
        let b = p(0.6);
        let cfg = MixingSeriesConfig::default();
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let u = DVector::from_vec(vec![0.4, -1.1]);
        let a = mvbridge_log_density(&u, &b, &r, &cfg).unwrap();
        let c = mvbridge_log_density(&(-u.clone()), &b, &r, &cfg).unwrap();
        assert!((a - c).abs() < 1e-14);
        assert!(mvbridge_log_density(&DVector::from_vec(vec![1.0]), &b, &DMatrix::identity(1, 1), &cfg).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(mvbridge_log_density(&u, &b, &bad, &cfg).is_err());
    }

    #[test]
    fn induced_prior_normalizes() {
        let z = numerics::integrate(|x| induced_phi_log_prior(x).exp(), 0.0, 1.0, QuadTol { abs: 1e-12, rel: 1e-10, max_panels: 4000 })
            .unwrap();
        assert!((z - 1.0).abs() < 1e-6);
    }

    #[test]
    fn logistic_density_normalizes() {
        let z = numerics::integrate(|x| logistic_log_density(x, 1.7).exp(), f64::NEG_INFINITY, f64::INFINITY, QuadTol::default())
            .unwrap();
        assert!((z - 1.0).abs() < 1e-9);
    }
}
