//! Synthetic clustered binary data with bridge-distributed site effects.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::{bridge_quantile, bridge_sample, mixing_sample, BridgeParams, MixingSeriesConfig};
use crate::data::{SpatialDataset, INTERCEPT};
use crate::error::{Error, Result};
use crate::kernels::{chol_with_jitter, corr_matrix, CorrelationModel, KernelFamily, Point};
use crate::numerics::{norm_cdf, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Multivariate normal site effects with one shared bridge mixing scale.
    BridgeProcess,
    /// Gaussian process pushed through the bridge quantile function.
    GaussianCopula,
    /// Bridge-process effects with responses from thresholding a latent
    /// logistic variable.
    LatentThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub domain_lo: Point,
    pub domain_hi: Point,
    pub n_train: usize,
    pub n_test: usize,
    pub cluster_size: usize,
    /// Coefficients including the intercept; the other covariates are
    /// standard normal.
    pub beta: Vec<f64>,
    pub phi: f64,
    pub kernel: KernelFamily,
    /// Kernel range; zero gives independent site effects, each with its own
    /// mixing draw.
    pub rho: f64,
    pub generator: Generator,
    pub seed: u64,
    /// Draw covariates once per site instead of once per observation.
    pub constant_covariates: bool,
    pub series: MixingSeriesConfig,
}

impl Default for SimDesign {
    fn default() -> Self {
        SimDesign::unit_square(0.7, 0.05)
    }
}

impl SimDesign {
    /// 200 training and 50 test sites on the unit square, 10 observations
    /// per site, `β = (0, 1)`, Matérn 3/2 kernel.
    pub fn unit_square(phi: f64, rho: f64) -> Self {
        SimDesign {
            domain_lo: Point::new(0.0, 0.0),
            domain_hi: Point::new(1.0, 1.0),
            n_train: 200,
            n_test: 50,
            cluster_size: 10,
            beta: vec![0.0, 1.0],
            phi,
            kernel: KernelFamily::Matern32,
            rho,
            generator: Generator::BridgeProcess,
            seed: 1,
            constant_covariates: false,
            series: MixingSeriesConfig::default(),
        }
    }

    /// The same layout on `[0, 2]^2` with a chosen number of sites.
    pub fn large_square(n_train: usize, n_test: usize, rho: f64) -> Self {
        SimDesign {
            domain_hi: Point::new(2.0, 2.0),
            n_train,
            n_test,
            ..SimDesign::unit_square(0.7, rho)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.cluster_size == 0 {
            return Err(Error::invalid("site and cluster counts must be positive"));
        }
        if self.beta.is_empty() {
            return Err(Error::invalid("at least an intercept coefficient is needed"));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::invalid("phi must lie in (0, 1)"));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("range must be non-negative"));
        }
        if !(self.domain_hi.x > self.domain_lo.x && self.domain_hi.y > self.domain_lo.y) {
            return Err(Error::invalid("domain rectangle is degenerate"));
        }
        self.series.validate()
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub beta: Vec<f64>,
    pub beta_marginal: Vec<f64>,
    pub phi: f64,
    pub rho: f64,
    pub kernel: KernelFamily,
    pub generator: Generator,
    /// Shared mixing draw (absent for the copula and independent designs).
    pub lambda: Option<f64>,
    pub train_u: Vec<f64>,
    pub test_u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub train: SpatialDataset,
    pub test: Option<SpatialDataset>,
    pub truth: SimTruth,
}

fn uniform_sites<R: Rng + ?Sized>(d: &SimDesign, n: usize, rng: &mut R) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let x = d.domain_lo.x + (d.domain_hi.x - d.domain_lo.x) * rng.random::<f64>();
            let y = d.domain_lo.y + (d.domain_hi.y - d.domain_lo.y) * rng.random::<f64>();
            Point::new(x, y)
        })
        .collect()
}

/// Site effects and the shared mixing draw, if any.
fn site_effects<R: Rng + ?Sized>(d: &SimDesign, sites: &[Point], rng: &mut R) -> Result<(Vec<f64>, Option<f64>)> {
    let params = BridgeParams::new(d.phi)?;
    let n = sites.len();
    if d.rho == 0.0 {
        return match d.generator {
            Generator::GaussianCopula => {
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                Ok((z.iter().map(|&v| copula_transform(v, &params)).collect::<Result<_>>()?, None))
            }
            _ => Ok((bridge_sample(&params, &d.series, n, rng), None)),
        };
    }
    let model = CorrelationModel::new(d.kernel, d.rho)?;
    let l = chol_with_jitter(&corr_matrix(&model, sites))?.l();
    match d.generator {
        Generator::GaussianCopula => {
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
            let zeta = l * z;
            Ok((zeta.iter().map(|&v| copula_transform(v, &params)).collect::<Result<_>>()?, None))
        }
        _ => {
            let lam = mixing_sample(&params, &d.series, rng).lambda;
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
            let u = l * z * lam.sqrt();
            Ok((u.iter().copied().collect(), Some(lam)))
        }
    }
}

/// `F_B^{-1}(Φ(ζ))`, evaluated on the lower half for accuracy.
pub fn copula_transform(zeta: f64, params: &BridgeParams) -> Result<f64> {
    if zeta == 0.0 {
        return Ok(0.0);
    }
    let p = norm_cdf(-zeta.abs());
    if p <= 0.0 {
        return Err(Error::numerical(format!("latent value {zeta} beyond the quantile range")));
    }
    let q = bridge_quantile(p, params)?;
    Ok(if zeta > 0.0 { -q } else { q })
}

fn standard_logistic<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let v: f64 = rng.random();
    let v = v.max(f64::MIN_POSITIVE);
    (v / (1.0 - v)).ln()
}

/// Design matrix and responses for the given sites and effects.
fn observations<R: Rng + ?Sized>(d: &SimDesign, u: &[f64], rng: &mut R) -> (DMatrix<f64>, Vec<u8>, Vec<usize>) {
    let p = d.p();
    let n = u.len();
    let nobs = n * d.cluster_size;
    let mut x = DMatrix::zeros(nobs, p);
    let mut y = Vec::with_capacity(nobs);
    let mut cluster = Vec::with_capacity(nobs);
    let mut site_x = vec![0.0; p];
    for i in 0..n {
        if d.constant_covariates {
            for v in site_x.iter_mut().skip(1) {
                *v = StandardNormal.sample(rng);
            }
        }
        for k in 0..d.cluster_size {
            let j = i * d.cluster_size + k;
            x[(j, 0)] = 1.0;
            for c in 1..p {
                x[(j, c)] = if d.constant_covariates { site_x[c] } else { StandardNormal.sample(rng) };
            }
            let eta: f64 = (0..p).map(|c| x[(j, c)] * d.beta[c]).sum::<f64>() + u[i];
            let yy = match d.generator {
                Generator::LatentThreshold => eta + standard_logistic(rng) > 0.0,
                _ => rng.random::<f64>() < sigmoid(eta),
            };
            y.push(u8::from(yy));
            cluster.push(i);
        }
    }
    (x, y, cluster)
}

fn dataset(d: &SimDesign, sites: Vec<Point>, offset: usize, x: DMatrix<f64>, y: Vec<u8>, cluster: Vec<usize>) -> Result<SpatialDataset> {
    let mut names = vec![INTERCEPT.to_string()];
    names.extend((1..d.p()).map(|c| format!("x{c}")));
    let ids = (0..sites.len()).map(|i| format!("s{}", offset + i + 1)).collect();
    SpatialDataset::new(ids, sites, cluster, x, y, names)
}

/// Simulate with the design's own seed.
pub fn simulate(design: &SimDesign) -> Result<SimOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    simulate_with(design, &mut rng)
}

/// Draw train and test sites jointly, so test effects are correlated with
/// training effects, then split them by position.
pub fn simulate_with<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<SimOutput> {
    design.validate()?;
    let n = design.n_train + design.n_test;
    let sites = uniform_sites(design, n, rng);
    let (u, lambda) = site_effects(design, &sites, rng)?;
    let (x, y, cluster) = observations(design, &u, rng);
    let cut = design.n_train * design.cluster_size;
    let train = dataset(
        design,
        sites[..design.n_train].to_vec(),
        0,
        x.rows(0, cut).into_owned(),
        y[..cut].to_vec(),
        cluster[..cut].to_vec(),
    )?;
    let test = if design.n_test > 0 {
        Some(dataset(
            design,
            sites[design.n_train..].to_vec(),
            design.n_train,
            x.rows(cut, x.nrows() - cut).into_owned(),
            y[cut..].to_vec(),
            cluster[cut..].iter().map(|c| c - design.n_train).collect(),
        )?)
    } else {
        None
    };
    let truth = SimTruth {
        beta: design.beta.clone(),
        beta_marginal: design.beta.iter().map(|b| design.phi * b).collect(),
        phi: design.phi,
        rho: design.rho,
        kernel: design.kernel,
        generator: design.generator,
        lambda,
        train_u: u[..design.n_train].to_vec(),
        test_u: u[design.n_train..].to_vec(),
    };
    Ok(SimOutput { train, test, truth })
}

pub fn gen_bridge_data<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<SimOutput> {
    simulate_with(&SimDesign { generator: Generator::BridgeProcess, ..design.clone() }, rng)
}

pub fn gen_copula_data<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<SimOutput> {
    simulate_with(&SimDesign { generator: Generator::GaussianCopula, ..design.clone() }, rng)
}

pub fn gen_latent_threshold<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<SimOutput> {
    simulate_with(&SimDesign { generator: Generator::LatentThreshold, ..design.clone() }, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::bridge_cdf;

    #[test]
    fn layout_and_determinism() {
        let d = SimDesign { n_train: 30, n_test: 10, ..SimDesign::unit_square(0.7, 0.1) };
        let a = simulate(&d).unwrap();
        let b = simulate(&d).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.n_sites(), 30);
        assert_eq!(a.train.n_obs(), 300);
        let t = a.test.unwrap();
        assert_eq!((t.n_sites(), t.n_obs()), (10, 100));
        assert!(t.site_ids.iter().all(|s| !a.train.site_ids.contains(s)));
        assert!(a.train.sites.iter().all(|s| (0.0..=1.0).contains(&s.x) && (0.0..=1.0).contains(&s.y)));
        assert_eq!(a.truth.beta_marginal, vec![0.0, 0.7]);
        assert!(a.truth.lambda.unwrap() > 0.0);
    }

    #[test]
    fn constant_covariates_are_shared_within_site() {
        let d = SimDesign { n_train: 5, n_test: 0, constant_covariates: true, ..SimDesign::default() };
        let out = simulate(&d).unwrap();
        for obs in out.train.site_observations() {
            let v = out.train.covariates[(obs[0], 1)];
            assert!(obs.iter().all(|&j| out.train.covariates[(j, 1)] == v));
        }
    }

    #[test]
    fn copula_marginal_is_bridge() {
        let params = BridgeParams::new(0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 4000;
        let mut u: Vec<f64> = (0..m).map(|_| copula_transform(StandardNormal.sample(&mut rng), &params).unwrap()).collect();
        u.sort_by(f64::total_cmp);
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = bridge_cdf(v, &params).unwrap();
                (f - i as f64 / m as f64).abs().max(((i + 1) as f64 / m as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (m as f64).sqrt(), "{ks}");
    }

    #[test]
    fn marginal_event_rate_at_zero_predictor() {
        let d = SimDesign { n_train: 20_000, n_test: 0, cluster_size: 1, beta: vec![0.0], rho: 0.0, ..SimDesign::default() };
        let out = simulate(&d).unwrap();
        let rate = out.train.responses.iter().map(|&y| y as f64).sum::<f64>() / 20_000.0;
        assert!((rate - 0.5).abs() < 3.0 * 0.5 / (20_000f64).sqrt());
    }

    #[test]
    fn invalid_designs_are_rejected() {
        assert!(simulate(&SimDesign { phi: 1.0, ..SimDesign::default() }).is_err());
        assert!(simulate(&SimDesign { n_train: 0, ..SimDesign::default() }).is_err());
        assert!(simulate(&SimDesign { rho: -1.0, ..SimDesign::default() }).is_err());
    }
}
