//! Scalar helpers, quadrature and 1-D root finding / minimization shared by
//! the distribution, estimation and diagnostics code.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use statrs::function::erf;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Logistic function, evaluated without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log cosh(x)` for any finite x.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal log-CDF, accurate far into the lower tail.
pub fn norm_log_cdf(x: f64) -> f64 {
    if x > -5.0 {
        norm_cdf(x).ln()
    } else {
        // Laplace continued fraction for the Mills ratio
        let t = -x;
        let mut cf = t;
        for k in (1..=60).rev() {
            cf = t + k as f64 / cf;
        }
        -0.5 * x * x - 0.5 * LN_2PI - cf.ln()
    }
}

pub fn norm_quantile(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf::erf_inv(2.0 * p - 1.0)
}

/// Trigamma via recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut resk = fc * WGK[7];
    let mut resg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        resk += WGK[j] * s;
        if j % 2 == 1 {
            resg += WG[j / 2] * s;
        }
    }
    (resk * h, ((resk - resg) * h).abs())
}

struct Panel {
    a: f64,
    b: f64,
    val: f64,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, o: &Self) -> bool {
        self.err == o.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Panel {
    fn cmp(&self, o: &Self) -> Ordering {
        self.err.total_cmp(&o.err)
    }
}

/// Tolerances for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct QuadTol {
    pub abs: f64,
    pub rel: f64,
    pub max_panels: usize,
}

impl Default for QuadTol {
    fn default() -> Self {
        QuadTol { abs: 1e-13, rel: 1e-11, max_panels: 4000 }
    }
}

fn integrate_finite<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: QuadTol) -> Result<f64> {
    let (v, e) = gk15(f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, val: v, err: e });
    let mut total = v;
    let mut total_err = e;
    while total_err > tol.abs.max(tol.rel * total.abs()) {
        if heap.len() >= tol.max_panels {
            return Err(Error::numerical(format!(
                "adaptive quadrature did not converge on [{a}, {b}] (error estimate {total_err:e})"
            )));
        }
        let p = heap.pop().expect("heap is never empty");
        let m = 0.5 * (p.a + p.b);
        let (v1, e1) = gk15(f, p.a, m);
        let (v2, e2) = gk15(f, m, p.b);
        total += v1 + v2 - p.val;
        total_err += e1 + e2 - p.err;
        heap.push(Panel { a: p.a, b: m, val: v1, err: e1 });
        heap.push(Panel { a: m, b: p.b, val: v2, err: e2 });
    }
    let mut s = KahanSum::default();
    for p in heap.iter() {
        s.add(p.val);
    }
    if !s.value().is_finite() {
        return Err(Error::numerical("non-finite integrand in adaptive quadrature"));
    }
    Ok(s.value())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature. Infinite endpoints are mapped to
/// a finite interval.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: QuadTol) -> Result<f64> {
    integrate_dyn(&f, a, b, tol)
}

fn integrate_dyn(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: QuadTol) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return integrate_dyn(f, b, a, tol).map(|v| -v);
    }
    match (a.is_finite(), b.is_finite()) {
        (true, true) => integrate_finite(&f, a, b, tol),
        (true, false) => {
            let g = |t: f64| {
                if t >= 1.0 {
                    return 0.0;
                }
                let x = a + t / (1.0 - t);
                let v = f(x) / ((1.0 - t) * (1.0 - t));
                if v.is_finite() { v } else { 0.0 }
            };
            integrate_finite(&g, 0.0, 1.0, tol)
        }
        (false, true) => {
            let g = |t: f64| {
                if t >= 1.0 {
                    return 0.0;
                }
                let x = b - t / (1.0 - t);
                let v = f(x) / ((1.0 - t) * (1.0 - t));
                if v.is_finite() { v } else { 0.0 }
            };
            integrate_finite(&g, 0.0, 1.0, tol)
        }
        (false, false) => {
            let lo = integrate_dyn(f, f64::NEG_INFINITY, 0.0, tol)?;
            let hi = integrate_dyn(f, 0.0, f64::INFINITY, tol)?;
            Ok(lo + hi)
        }
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
#[cfg(test)]
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Brent's root finder on a sign-changing bracket.
pub fn brent_root<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, xtol: f64) -> Result<f64> {
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::numerical(format!("root not bracketed in [{a}, {b}]")));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..300 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    Err(Error::numerical("root finder exceeded iteration budget"))
}

/// Brent's golden-section/parabolic minimizer on [a, b]. Returns (argmin, min).
pub fn brent_minimize<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, xtol: f64) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..500 {
        let xm = 0.5 * (a + b);
        let tol1 = 1e-12 * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample mean and standard deviation (divisor n - 1).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk_integrates_smooth_functions() {
        let v = integrate(|x| x.exp(), 0.0, 1.0, QuadTol::default()).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-13);
        let g = integrate(|x| (-x * x / 2.0).exp(), f64::NEG_INFINITY, f64::INFINITY, QuadTol::default())
            .unwrap();
        assert!((g - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
        let t = integrate(|x| (-x).exp(), 2.0, f64::INFINITY, QuadTol::default()).unwrap();
        assert!((t - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn legendre_rule_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(61);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-13);
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(120)).sum();
        assert!((m - 2.0 / 121.0).abs() < 1e-13);
        let (x5, _) = gauss_legendre(5);
        assert!((x5[4] - 0.906_179_845_938_664).abs() < 1e-14);
    }

    #[test]
    fn brent_finds_root_and_minimum() {
        let r = brent_root(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        let (xm, _) = brent_minimize(|x| (x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-8);
        assert!((xm - 0.3).abs() < 1e-7);
    }

    #[test]
    fn trigamma_matches_known_values() {
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_helpers_are_stable() {
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!((norm_log_cdf(-40.0) - (-804.608_442_013_754_8)).abs() < 1e-8);
        assert!((norm_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-13);
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
    }

    #[test]
    fn quantiles_and_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 2.5);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        let (m, sd) = mean_sd(&xs);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
