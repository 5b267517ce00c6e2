//! Exact Pólya-Gamma PG(1, z) sampling by Devroye's alternating-series
//! method: a two-piece proposal (truncated inverse Gaussian below the
//! truncation point, exponential above) accepted against the Jacobi-theta
//! series.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::numerics::norm_log_cdf;

const TRUNC: f64 = 0.64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PGDraw {
    pub omega: f64,
}

/// `E[PG(1, z)] = tanh(z/2) / (2z)`, with limit 1/4 at zero.
pub fn pg1_mean(z: f64) -> f64 {
    let z = z.abs();
    if z < 1e-6 {
        0.25 - z * z / 48.0
    } else {
        (0.5 * z).tanh() / (2.0 * z)
    }
}

/// Coefficient `a_n(x)` of the alternating series for J*(1).
fn series_coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Probability of choosing the exponential (right) piece of the proposal.
fn right_mass(z: f64) -> f64 {
    let t = TRUNC;
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + norm_log_cdf(b);
    let xa = x0 + z + norm_log_cdf(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse Gaussian with mean 1/z and shape 1, truncated to (0, TRUNC).
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    if z < 1.0 / t {
        // mean above the truncation point: draw from the z = 0 law, then tilt
        loop {
            let (mut e1, mut e2): (f64, f64) = (Exp1.sample(rng), Exp1.sample(rng));
            while e1 * e1 > 2.0 * e2 / t {
                e1 = Exp1.sample(rng);
                e2 = Exp1.sample(rng);
            }
            let x = t / ((1.0 + e1 * t) * (1.0 + e1 * t));
            let alpha = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= alpha {
                return x;
            }
        }
    }
    let mu = 1.0 / z;
    loop {
        let y: f64 = StandardNormal.sample(rng);
        let y = y * y;
        let mu_y = mu * y;
        let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
        if rng.random::<f64>() > mu / (mu + x) {
            x = mu * mu / x;
        }
        if x < t {
            return x;
        }
    }
}

/// One exact draw from PG(1, z).
pub fn pg1_sample<R: Rng + ?Sized>(z: f64, rng: &mut R) -> PGDraw {
    let z = 0.5 * z.abs();
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let p_right = right_mass(z);
    loop {
        let x = if rng.random::<f64>() < p_right {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return PGDraw { omega: 0.25 * x };
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}
