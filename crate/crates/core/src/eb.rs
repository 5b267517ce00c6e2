//! First stage of the empirical Bayes fit: the marginal logistic MLE and the
//! pairwise composite-likelihood estimate of the attenuation factor φ.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::numerics::{brent_minimize, log_cosh, log_sigmoid, sigmoid, KahanSum};

pub const PHI_LO: f64 = 1e-4;
pub const PHI_HI: f64 = 1.0 - 1e-4;
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EBEstimate {
    pub beta_marginal: Vec<f64>,
    pub phi_hat: f64,
    pub cl_value: f64,
    pub n_pairs: usize,
}

/// Maximum likelihood fit of the logistic model that ignores clustering.
pub fn logistic_mle(ds: &SpatialDataset) -> Result<DVector<f64>> {
    let x = &ds.covariates;
    let y = DVector::from_vec(ds.response_f64());
    let p = x.ncols();
    if x.nrows() < p || x.clone().svd(false, false).rank(1e-10 * x.norm().max(1.0)) < p {
        return Err(Error::data("design matrix is rank deficient"));
    }
    let loglik = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        eta.iter().zip(y.iter()).map(|(&e, &yy)| if yy > 0.5 { log_sigmoid(e) } else { log_sigmoid(-e) }).sum()
    };
    let mut beta = DVector::zeros(p);
    let mut ll = loglik(&beta);
    for _ in 0..100 {
        let eta = x * &beta;
        let mu = eta.map(sigmoid);
        let grad = x.transpose() * (&y - &mu);
        if grad.norm() < 1e-8 {
            if mu.iter().zip(y.iter()).all(|(m, yy)| (m - yy).abs() < 1e-6) {
                return Err(Error::data("marginal logistic fit reproduces every response exactly; responses are separated"));
            }
            return Ok(beta);
        }
        let w = mu.map(|m| m * (1.0 - m));
        let mut h = DMatrix::zeros(p, p);
        for i in 0..x.nrows() {
            let row = x.row(i);
            h += w[i] * row.transpose() * row;
        }
        let step = h
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| Error::data("logistic information matrix is singular; responses may be separated"))?;
        let mut t = 1.0;
        loop {
            let cand = &beta + t * &step;
            let cll = loglik(&cand);
            if cll >= ll - 1e-12 * ll.abs() || t < 1e-8 {
                beta = cand;
                ll = cll;
                break;
            }
            t *= 0.5;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            return Err(Error::data(format!(
                "marginal logistic fit diverges (|coefficient| > {SEPARATION_BOUND}); responses appear separated"
            )));
        }
    }
    Err(Error::numerical("marginal logistic fit did not converge in 100 iterations"))
}

fn log_abs_sinh(x: f64) -> f64 {
    let a = x.abs();
    a + (-(-2.0 * a).exp_m1()).ln() - std::f64::consts::LN_2
}

fn log_abs_expm1(x: f64) -> f64 {
    if x > 0.0 {
        x + (-(-x).exp_m1()).ln()
    } else {
        (-x.exp_m1()).ln()
    }
}

/// log E[σ(a+u) σ(b+u)] for u following the bridge law with parameter φ.
fn log_both_one(a: f64, b: f64, phi: f64) -> f64 {
    let c = a - b;
    if c.abs() < 1e-6 {
        let m = 0.5 * (a + b);
        return log_sigmoid(phi * m) + (-phi * sigmoid(-phi * m)).ln_1p();
    }
    let t = c - (log_sigmoid(phi * a) - log_sigmoid(phi * b));
    log_sigmoid(phi * a) + log_abs_expm1(t) - log_abs_expm1(c)
}

/// log E[σ(a+u) (1 − σ(b+u))] for u following the bridge law.
fn log_one_zero(a: f64, b: f64, phi: f64) -> f64 {
    let c = a - b;
    let ratio = if c == 0.0 { phi.ln() } else { log_abs_sinh(0.5 * phi * c) - log_abs_sinh(0.5 * c) };
    ratio + 0.5 * c - 4f64.ln() - log_cosh(0.5 * phi * a) - log_cosh(0.5 * phi * b)
}

/// Log probability of the response pair `(ya, yb)` at two observations of
/// one site with conditional linear predictors `a + u`, `b + u`, integrating
/// the shared bridge effect `u` in closed form.
pub fn pair_log_prob(a: f64, b: f64, ya: u8, yb: u8, phi: f64) -> f64 {
    match (ya, yb) {
        (1, 1) => log_both_one(a, b, phi),
        (0, 0) => log_both_one(-a, -b, phi),
        (1, 0) => log_one_zero(a, b, phi),
        _ => log_one_zero(b, a, phi),
    }
}

pub fn n_pairs(ds: &SpatialDataset) -> usize {
    ds.cluster_sizes().iter().map(|&m| m * m.saturating_sub(1) / 2).sum()
}

/// Pairwise log composite likelihood of φ given the marginal coefficients.
/// Sites with a single observation contribute nothing.
pub fn pairwise_cl_loglik(phi: f64, beta_marginal: &DVector<f64>, ds: &SpatialDataset) -> Result<f64> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::invalid(format!("phi must lie in (0, 1), got {phi}")));
    }
    if beta_marginal.len() != ds.p() {
        return Err(Error::invalid("coefficient length does not match the design"));
    }
    let eta = (&ds.covariates * beta_marginal) / phi;
    let mut total = KahanSum::default();
    for obs in ds.site_observations() {
        for (k, &j) in obs.iter().enumerate() {
            for &l in &obs[k + 1..] {
                total.add(pair_log_prob(eta[j], eta[l], ds.responses[j], ds.responses[l], phi));
            }
        }
    }
    let v = total.value();
    if !v.is_finite() {
        return Err(Error::numerical(format!("composite likelihood is not finite at phi = {phi}")));
    }
    Ok(v)
}

/// Maximize the pairwise composite likelihood over φ ∈ [1e-4, 1 − 1e-4].
pub fn estimate_phi(beta_marginal: &DVector<f64>, ds: &SpatialDataset) -> Result<EBEstimate> {
    let sizes = ds.cluster_sizes();
    let singletons = sizes.iter().filter(|&&m| m < 2).count();
    if singletons == sizes.len() {
        return Err(Error::data(
            "every site has a single observation so phi is not identified by pairs; use the fully Bayesian mode",
        ));
    }
    if singletons > 0 {
        log::warn!("{singletons} site(s) with one observation skipped by the composite likelihood");
    }
    let objective = |phi: f64| -> f64 {
        match pairwise_cl_loglik(phi, beta_marginal, ds) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let grid: Vec<f64> = (0..=40).map(|k| PHI_LO + (PHI_HI - PHI_LO) * k as f64 / 40.0).collect();
    let vals: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
    let best = (0..grid.len()).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap_or(0);
    if !vals[best].is_finite() {
        return Err(Error::numerical("composite likelihood is not finite anywhere on the phi grid"));
    }
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (mut phi, mut f) = brent_minimize(objective, lo, hi, 1e-5);
    for &edge in &[lo, hi] {
        let fe = objective(edge);
        if fe < f {
            phi = edge;
            f = fe;
        }
    }
    Ok(EBEstimate { beta_marginal: beta_marginal.iter().copied().collect(), phi_hat: phi, cl_value: -f, n_pairs: n_pairs(ds) })
}

/// Both stages of the point estimate in sequence.
pub fn empirical_bayes(ds: &SpatialDataset) -> Result<EBEstimate> {
    let beta = logistic_mle(ds)?;
    estimate_phi(&beta, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{bridge_density, BridgeParams};
    use crate::kernels::Point;
    use crate::numerics::{integrate, QuadTol};
    use crate::data::INTERCEPT;

    fn intercept_only(groups: &[Vec<u8>]) -> SpatialDataset {
        let mut cluster_index = Vec::new();
        let mut responses = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            for &y in g {
                cluster_index.push(i);
                responses.push(y);
            }
        }
        let n = groups.len();
        let nobs = responses.len();
        SpatialDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| Point::new(i as f64, 0.0)).collect(),
            cluster_index,
            DMatrix::from_element(nobs, 1, 1.0),
            responses,
            vec![INTERCEPT.into()],
        )
        .unwrap()
    }

    #[test]
    fn mle_intercept_closed_forms() {
        let ds = intercept_only(&[vec![1, 0], vec![0, 1]]);
        assert!(logistic_mle(&ds).unwrap()[0].abs() < 1e-10);
        let ds = intercept_only(&[vec![1, 1], vec![1, 0]]);
        assert!((logistic_mle(&ds).unwrap()[0] - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mle_detects_separation_and_rank() {
        let ds = intercept_only(&[vec![1, 1], vec![1, 1]]);
        assert!(logistic_mle(&ds).is_err());
        let mut ds = intercept_only(&[vec![1, 0], vec![0, 1]]);
        ds.covariates = DMatrix::from_fn(4, 2, |_, _| 1.0);
        ds.column_names.push("dup".into());
        assert!(logistic_mle(&ds).unwrap_err().to_string().contains("rank"));
    }

    #[test]
    fn pair_probability_at_zero_predictor() {
        let phi: f64 = 0.7;
        assert!((pair_log_prob(0.0, 0.0, 1, 0, phi).exp() - 0.175).abs() < 1e-14);
        assert!((pair_log_prob(0.0, 0.0, 1, 1, phi).exp() - (0.5 - phi / 4.0)).abs() < 1e-14);
    }

    #[test]
    fn pair_probabilities_sum_to_one_and_match_quadrature() {
        for &phi in &[0.05, 0.5, 0.9, 0.999] {
            let bp = BridgeParams::new(phi).unwrap();
            for &(a, b) in &[(0.0, 0.0), (3.0, -2.0), (-8.0, 5.0), (1.0, 1.0 + 1e-8), (-4.0, -4.3)] {
                let mut tot = 0.0;
                for &(ya, yb) in &[(1u8, 1u8), (1, 0), (0, 1), (0, 0)] {
                    let lp = pair_log_prob(a, b, ya, yb, phi);
                    tot += lp.exp();
                    let f = |u: f64| {
                        let pa = if ya == 1 { sigmoid(a + u) } else { sigmoid(-a - u) };
                        let pb = if yb == 1 { sigmoid(b + u) } else { sigmoid(-b - u) };
                        pa * pb * bridge_density(u, &bp)
                    };
                    let r = integrate(f, f64::NEG_INFINITY, f64::INFINITY, QuadTol::default()).unwrap();
                    assert!((lp - r.ln()).abs() < 1e-8, "phi={phi} a={a} b={b} y=({ya},{yb})");
                }
                assert!((tot - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_limit_near_one_factorizes() {
        let phi = 1.0 - 1e-9;
        let lp = pair_log_prob(0.4, -1.2, 1, 0, phi);
        assert!((lp - (log_sigmoid(0.4) + log_sigmoid(1.2))).abs() < 1e-7);
    }

    #[test]
    fn cl_skips_singletons_and_counts_pairs() {
        let ds = intercept_only(&[vec![1, 0, 1], vec![1], vec![0, 0]]);
        assert_eq!(n_pairs(&ds), 4);
        let b = DVector::from_vec(vec![0.2]);
        let v = pairwise_cl_loglik(0.6, &b, &ds).unwrap();
        assert_eq!(v, pairwise_cl_loglik(0.6, &b, &ds).unwrap());
        let single = intercept_only(&[vec![1], vec![0]]);
        assert!(estimate_phi(&DVector::from_vec(vec![0.0]), &single).is_err());
        assert!(pairwise_cl_loglik(1.0, &b, &ds).is_err());
    }
}
