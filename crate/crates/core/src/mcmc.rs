//! Partially collapsed Gibbs samplers for the spatial bridge model.
//!
//! Empirical Bayes cycle, with φ fixed at its composite-likelihood estimate:
//! `[β | ω, λ, ρ]` with the site effects integrated out, `[ρ | β, ω, λ]` and
//! `[λ | β, ω, ρ]` likewise collapsed, then `[u | β, ω, λ, ρ]`, `[ω | β, u]`
//! and the Cauchy scale-mixture variances. The fully Bayesian cycle replaces
//! the ρ and λ moves by a particle marginal Metropolis–Hastings move on
//! `(φ, ρ, λ)`.
//!
//! Chain `c` of a fit seeded with `s` draws from `ChaCha8Rng::seed_from_u64(s)`
//! switched to stream `c`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{induced_phi_log_prior, mixing_mean, mixing_sample, BridgeParams};
use crate::collapsed::{ConditionalSystem, MarginalSystem, SpatialCovariance};
use crate::data::{CoefPrior, FitConfig, FitMode, PhiPrior, PriorConfig, SpatialDataset};
use crate::eb::{empirical_bayes, EBEstimate};
use crate::error::{Error, Result};
use crate::kernels::{bounding_box, chol_with_jitter, grid_knots, CorrelationModel, KernelFamily, Point};
use crate::numerics::{log_sum_exp, sigmoid};
use crate::pg::{pg1_mean, pg1_sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Beta,
    Rho,
    Lambda,
    Pmmh,
    U,
    Omega,
    PriorScales,
}

/// Update order of one empirical Bayes sweep. The collapsed steps are only
/// valid in this order.
pub const EB_CYCLE: [Step; 6] = [Step::Beta, Step::Rho, Step::Lambda, Step::U, Step::Omega, Step::PriorScales];
/// Update order of one fully Bayesian sweep.
pub const FB_CYCLE: [Step; 5] = [Step::Beta, Step::Pmmh, Step::U, Step::Omega, Step::PriorScales];

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta: DVector<f64>,
    pub u: DVector<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub phi: f64,
    pub omega: DVector<f64>,
    /// Prior variances of the coefficients; the Cauchy entries are resampled.
    pub prior_scales: Option<DVector<f64>>,
}

/// Random-walk proposal on an unconstrained scale with Haario adaptation.
#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    count: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    initial_step: f64,
    adapt_start: usize,
}

impl AdaptiveProposal {
    pub const EPSILON: f64 = 1e-6;

    pub fn new(dim: usize, initial_step: f64, adapt_start: usize) -> Self {
        AdaptiveProposal {
            dim,
            count: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            initial_step,
            adapt_start,
        }
    }

    pub fn update(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    pub fn is_adapting(&self) -> bool {
        self.count >= self.adapt_start && self.count > self.dim
    }

    /// Proposal covariance currently in use.
    pub fn covariance(&self) -> DMatrix<f64> {
        if !self.is_adapting() {
            return DMatrix::identity(self.dim, self.dim) * (self.initial_step * self.initial_step);
        }
        let emp = &self.m2 / (self.count - 1) as f64;
        (emp + DMatrix::identity(self.dim, self.dim) * Self::EPSILON) * (2.38 * 2.38 / self.dim as f64)
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let l = chol_with_jitter(&self.covariance())?.l();
        let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| StandardNormal.sample(rng)));
        Ok(x + l * z)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Map between a bounded interval and the real line.
#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    fn to_real(&self, v: f64) -> f64 {
        logit((v - self.lo) / (self.hi - self.lo))
    }

    fn from_real(&self, z: f64) -> f64 {
        self.lo + (self.hi - self.lo) * sigmoid(z)
    }

    /// Log Jacobian of `from_real`, up to a constant.
    fn log_jacobian(&self, v: f64) -> f64 {
        (v - self.lo).ln() + (self.hi - v).ln()
    }

    fn contains(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }
}

const PHI_RANGE: Interval = Interval { lo: 0.0, hi: 1.0 };

/// Pólya-Gamma summaries at site level: `W = Z'ΩZ`, `k~ = Z'κ`,
/// `X~ = Z'ΩX`, plus `X'ΩX` and `X'κ`.
#[derive(Debug, Clone)]
struct Summaries {
    w: DVector<f64>,
    k_site: DVector<f64>,
    x_site: DMatrix<f64>,
    xox: DMatrix<f64>,
    xk: DVector<f64>,
}

/// One retained draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub chain: usize,
    pub iter: usize,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub phi: f64,
    pub u: Vec<f64>,
}

impl DrawRecord {
    /// Population-averaged coefficients `φ β`.
    pub fn beta_marginal(&self) -> Vec<f64> {
        self.beta.iter().map(|b| self.phi * b).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub accepted: u64,
    pub proposed: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub draws: Vec<DrawRecord>,
    pub moves: BTreeMap<Step, MoveStats>,
    pub step_seconds: BTreeMap<Step, f64>,
    pub iterations: usize,
    pub seconds: f64,
}

impl ChainDraws {
    pub fn seconds_per_iteration(&self) -> f64 {
        self.seconds / self.iterations.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub mode: FitMode,
    pub kernel: KernelFamily,
    pub coord_scale: f64,
    /// Knot locations in scaled coordinates when the low-rank kernel is used.
    pub knots: Option<Vec<Point>>,
    pub column_names: Vec<String>,
    /// Training sites in scaled coordinates.
    pub sites: Vec<Point>,
    pub site_ids: Vec<String>,
    pub eb: Option<EBEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub meta: FitMeta,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn iter(&self) -> impl Iterator<Item = &DrawRecord> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p(&self) -> usize {
        self.meta.column_names.len()
    }

    pub fn n_sites(&self) -> usize {
        self.meta.sites.len()
    }

    /// Names of the scalar columns, in file order.
    pub fn column_names(&self) -> Vec<String> {
        draw_columns(self.p(), self.n_sites())
    }

    /// Values of one named scalar over all chains, or per chain when
    /// `chain` is given.
    pub fn column(&self, name: &str, chain: Option<usize>) -> Option<Vec<f64>> {
        let p = self.p();
        let extract: Box<dyn Fn(&DrawRecord) -> f64> = if let Some(k) = name.strip_prefix("betaM_") {
            let k: usize = k.parse().ok().filter(|&k| k < p)?;
            Box::new(move |d| d.phi * d.beta[k])
        } else if let Some(k) = name.strip_prefix("beta_") {
            let k: usize = k.parse().ok().filter(|&k| k < p)?;
            Box::new(move |d| d.beta[k])
        } else if let Some(i) = name.strip_prefix("u_") {
            let i: usize = i.parse().ok().filter(|&i| i >= 1 && i <= self.n_sites())?;
            Box::new(move |d| d.u[i - 1])
        } else {
            match name {
                "lambda" => Box::new(|d| d.lambda),
                "log_lambda" => Box::new(|d| d.lambda.ln()),
                "rho" => Box::new(|d| d.rho),
                "phi" => Box::new(|d| d.phi),
                _ => return None,
            }
        };
        let out = match chain {
            Some(c) => self.chains.get(c)?.draws.iter().map(|d| extract(d)).collect(),
            None => self.iter().map(|d| extract(d)).collect(),
        };
        Some(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_draws_csv(self.iter(), self.p(), self.n_sites(), path)
    }
}

pub fn draw_columns(p: usize, n: usize) -> Vec<String> {
    let mut cols = vec!["chain".to_string(), "iter".to_string()];
    cols.extend((0..p).map(|k| format!("beta_{k}")));
    cols.extend((0..p).map(|k| format!("betaM_{k}")));
    cols.extend(["lambda", "rho", "phi"].iter().map(|s| s.to_string()));
    cols.extend((1..=n).map(|i| format!("u_{i}")));
    cols
}

pub fn write_draws_csv<'a>(draws: impl Iterator<Item = &'a DrawRecord>, p: usize, n: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(draw_columns(p, n))?;
    for d in draws {
        let mut rec = vec![d.chain.to_string(), d.iter.to_string()];
        rec.extend(d.beta.iter().map(|v| format!("{v:?}")));
        rec.extend(d.beta_marginal().iter().map(|v| format!("{v:?}")));
        rec.extend([d.lambda, d.rho, d.phi].iter().map(|v| format!("{v:?}")));
        rec.extend(d.u.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read draws written by [`write_draws_csv`]; returns `(draws, p, n)`.
pub fn read_draws_csv(path: &Path) -> Result<(Vec<DrawRecord>, usize, usize)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let p = header.iter().filter(|h| h.starts_with("beta_")).count();
    let n = header.iter().filter(|h| h.starts_with("u_")).count();
    let expected = draw_columns(p, n);
    if header.iter().ne(expected.iter().map(|s| s.as_str())) {
        return Err(Error::data(format!("{} does not have the draws column layout", path.display())));
    }
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::data(format!("draws row {}: column {} is not numeric", k + 2, expected[i])))
        };
        let beta = (0..p).map(|j| num(2 + j)).collect::<Result<Vec<_>>>()?;
        let base = 2 + 2 * p;
        out.push(DrawRecord {
            chain: num(0)? as usize,
            iter: num(1)? as usize,
            beta,
            lambda: num(base)?,
            rho: num(base + 1)?,
            phi: num(base + 2)?,
            u: (0..n).map(|i| num(base + 3 + i)).collect::<Result<Vec<_>>>()?,
        });
    }
    Ok((out, p, n))
}

/// Training sites after coordinate scaling.
pub fn scaled_sites(ds: &SpatialDataset, cfg: &FitConfig) -> Vec<Point> {
    ds.sites.iter().map(|s| Point::new(s.x * cfg.coord_scale, s.y * cfg.coord_scale)).collect()
}

/// Knot grid over the bounding box of the scaled sites, when configured.
pub fn resolve_knots(sites: &[Point], cfg: &FitConfig) -> Result<Option<Vec<Point>>> {
    match cfg.low_rank {
        None => Ok(None),
        Some(g) => {
            let (lo, hi) = bounding_box(sites);
            grid_knots(g.nx, g.ny, lo, hi).map(Some)
        }
    }
}

/// RNG of chain `chain` under master seed `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// One chain of the partially collapsed sampler with its working state.
pub struct Sampler {
    x: DMatrix<f64>,
    cluster: Vec<usize>,
    y: Vec<u8>,
    sites: Vec<Point>,
    knots: Option<Vec<Point>>,
    family: KernelFamily,
    priors: PriorConfig,
    cfg: FitConfig,
    rho_range: Interval,
    state: ChainState,
    cov: SpatialCovariance,
    suff: Summaries,
    particles: Vec<f64>,
    proposal: AdaptiveProposal,
    moves: BTreeMap<Step, MoveStats>,
    step_seconds: BTreeMap<Step, f64>,
}

impl Sampler {
    /// `sites` and `knots` are in the coordinates the kernel sees.
    pub fn new(
        ds: &SpatialDataset,
        sites: Vec<Point>,
        knots: Option<Vec<Point>>,
        cfg: &FitConfig,
        priors: &PriorConfig,
        init: ChainState,
    ) -> Result<Self> {
        cfg.validate()?;
        priors.validate(ds.p())?;
        if sites.len() != ds.n_sites() || init.u.len() != ds.n_sites() || init.beta.len() != ds.p() || init.omega.len() != ds.n_obs() {
            return Err(Error::invalid("initial state does not match the dataset dimensions"));
        }
        let rho_range = Interval { lo: priors.rho.lo, hi: priors.rho.hi };
        if !rho_range.contains(init.rho) || !(init.phi > 0.0 && init.phi < 1.0) || !(init.lambda > 0.0) {
            return Err(Error::invalid("initial state outside the parameter space"));
        }
        let model = CorrelationModel::new(cfg.kernel, init.rho)?;
        let cov = SpatialCovariance::build(&model, &sites, knots.as_deref())?;
        let dim = match (cfg.mode, priors.phi) {
            (FitMode::FullyBayesian, PhiPrior::InducedHalfCauchy) => 2,
            _ => 1,
        };
        let proposal = AdaptiveProposal::new(dim, cfg.initial_step, cfg.adapt_start);
        let mut s = Sampler {
            x: ds.covariates.clone(),
            cluster: ds.cluster_index.clone(),
            y: ds.responses.clone(),
            sites,
            knots,
            family: cfg.kernel,
            priors: priors.clone(),
            cfg: cfg.clone(),
            rho_range,
            state: init,
            cov,
            suff: Summaries {
                w: DVector::zeros(0),
                k_site: DVector::zeros(0),
                x_site: DMatrix::zeros(0, 0),
                xox: DMatrix::zeros(0, 0),
                xk: DVector::zeros(0),
            },
            particles: Vec::new(),
            proposal,
            moves: BTreeMap::new(),
            step_seconds: BTreeMap::new(),
        };
        s.refresh_summaries();
        Ok(s)
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn moves(&self) -> &BTreeMap<Step, MoveStats> {
        &self.moves
    }

    /// Replace the responses (used when simulating data along the chain).
    pub fn set_responses(&mut self, y: Vec<u8>) -> Result<()> {
        if y.len() != self.y.len() || y.iter().any(|&v| v > 1) {
            return Err(Error::invalid("replacement responses must be binary with the original length"));
        }
        self.y = y;
        self.refresh_summaries();
        Ok(())
    }

    pub fn linear_predictor(&self) -> DVector<f64> {
        let mut eta = &self.x * &self.state.beta;
        for (j, e) in eta.iter_mut().enumerate() {
            *e += self.state.u[self.cluster[j]];
        }
        eta
    }

    fn refresh_summaries(&mut self) {
        let n = self.sites.len();
        let p = self.x.ncols();
        let omega = &self.state.omega;
        let mut w = DVector::zeros(n);
        let mut k_site = DVector::zeros(n);
        let mut x_site = DMatrix::zeros(n, p);
        let mut xox = DMatrix::zeros(p, p);
        let mut xk = DVector::zeros(p);
        for j in 0..self.y.len() {
            let i = self.cluster[j];
            let kappa = self.y[j] as f64 - 0.5;
            let om = omega[j];
            w[i] += om;
            k_site[i] += kappa;
            for a in 0..p {
                let xa = self.x[(j, a)];
                x_site[(i, a)] += om * xa;
                xk[a] += kappa * xa;
                for b in 0..=a {
                    xox[(a, b)] += om * xa * self.x[(j, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xox[(b, a)] = xox[(a, b)];
            }
        }
        self.suff = Summaries { w, k_site, x_site, xox, xk };
    }

    fn coef_variances(&self) -> DVector<f64> {
        match &self.state.prior_scales {
            Some(g) => g.clone(),
            None => DVector::from_iterator(self.priors.beta.len(), self.priors.beta.iter().map(|b| b.scale() * b.scale())),
        }
    }

    /// `b2 = k~ - X~ β`, the linear term of the site effects' conditional.
    fn site_linear_term(&self) -> DVector<f64> {
        &self.suff.k_site - &self.suff.x_site * &self.state.beta
    }

    /// Collapsed log likelihood `log N(W^{-1} b2; 0, W^{-1} + λR)`, which is
    /// the `(λ, ρ)`-dependent part of the model with `u` integrated out.
    fn collapsed_loglik(&self, lambda: f64, cov: &SpatialCovariance, b2: &DVector<f64>) -> Result<f64> {
        if !self.cfg.use_likelihood {
            return Ok(0.0);
        }
        let m = b2.component_div(&self.suff.w);
        Ok(MarginalSystem::new(&self.suff.w, lambda, cov)?.log_pdf(&m))
    }

    fn build_cov(&self, rho: f64) -> Result<SpatialCovariance> {
        let model = CorrelationModel::new(self.family, rho)?;
        SpatialCovariance::build(&model, &self.sites, self.knots.as_deref())
    }

    pub fn step_beta<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let var = self.coef_variances();
        let p = var.len();
        let mean0 = DVector::from_iterator(p, self.priors.beta.iter().map(|b| b.location()));
        let z = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(rng)));
        if !self.cfg.use_likelihood {
            self.state.beta = mean0 + var.map(f64::sqrt).component_mul(&z);
            return Ok(());
        }
        let cs = ConditionalSystem::new(&self.suff.w, self.state.lambda, &self.cov)?;
        let vx = cs.apply_mat(&self.suff.x_site);
        let vk = cs.apply(&self.suff.k_site);
        let mut q = &self.suff.xox - self.suff.x_site.transpose() * vx;
        let mut b = &self.suff.xk - self.suff.x_site.transpose() * vk;
        for k in 0..p {
            q[(k, k)] += 1.0 / var[k];
            b[k] += mean0[k] / var[k];
        }
        let q = (&q + q.transpose()) * 0.5;
        let f = chol_with_jitter(&q).map_err(|e| Error::numerical(format!("coefficient update: {e}")))?;
        self.state.beta = f.solve(&b) + f.back_substitute(&z);
        Ok(())
    }

    pub fn step_rho<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let b2 = self.site_linear_term();
        let cur = self.collapsed_loglik(self.state.lambda, &self.cov, &b2)?;
        let z = DVector::from_element(1, self.rho_range.to_real(self.state.rho));
        let zs = self.proposal.propose(&z, rng)?;
        let rho_star = self.rho_range.from_real(zs[0]);
        let stats = self.moves.entry(Step::Rho).or_default();
        stats.proposed += 1;
        let mut current = cur;
        if self.rho_range.contains(rho_star) {
            let cov_star = self.build_cov(rho_star)?;
            let prop = self.collapsed_loglik(self.state.lambda, &cov_star, &b2)?;
            let log_alpha = prop - cur + self.rho_range.log_jacobian(rho_star) - self.rho_range.log_jacobian(self.state.rho);
            if rng.random::<f64>().ln() < log_alpha {
                self.state.rho = rho_star;
                self.cov = cov_star;
                current = prop;
                self.moves.entry(Step::Rho).or_default().accepted += 1;
            }
        }
        self.proposal.update(&DVector::from_element(1, self.rho_range.to_real(self.state.rho)));
        Ok(current)
    }

    /// Independence move with a prior proposal: the mixing density cancels
    /// and only the collapsed likelihood ratio remains.
    pub fn step_lambda<R: Rng + ?Sized>(&mut self, current_loglik: f64, rng: &mut R) -> Result<()> {
        let params = BridgeParams::new(self.state.phi)?;
        let lambda_star = mixing_sample(&params, &self.cfg.series, rng).lambda;
        let stats = self.moves.entry(Step::Lambda).or_default();
        stats.proposed += 1;
        if !(lambda_star > 0.0 && lambda_star.is_finite()) {
            return Ok(());
        }
        let b2 = self.site_linear_term();
        let prop = self.collapsed_loglik(lambda_star, &self.cov, &b2)?;
        if rng.random::<f64>().ln() < prop - current_loglik {
            self.state.lambda = lambda_star;
            self.moves.entry(Step::Lambda).or_default().accepted += 1;
        }
        Ok(())
    }

    fn particle_logliks(&self, particles: &[f64], cov: &SpatialCovariance, b2: &DVector<f64>) -> Result<Vec<f64>> {
        particles.iter().map(|&l| self.collapsed_loglik(l, cov, b2)).collect()
    }

    fn draw_particles<R: Rng + ?Sized>(&self, phi: f64, rng: &mut R) -> Result<Vec<f64>> {
        let params = BridgeParams::new(phi)?;
        Ok((0..self.cfg.particles).map(|_| mixing_sample(&params, &self.cfg.series, rng).lambda).collect())
    }

    fn phi_free(&self) -> bool {
        matches!(self.priors.phi, PhiPrior::InducedHalfCauchy)
    }

    fn transformed(&self, phi: f64, rho: f64) -> DVector<f64> {
        if self.phi_free() {
            DVector::from_vec(vec![PHI_RANGE.to_real(phi), self.rho_range.to_real(rho)])
        } else {
            DVector::from_element(1, self.rho_range.to_real(rho))
        }
    }

    /// Log prior of `(φ, ρ)` on the unconstrained scale, up to a constant.
    fn transformed_log_prior(&self, phi: f64, rho: f64) -> f64 {
        let mut lp = self.rho_range.log_jacobian(rho);
        if self.phi_free() {
            lp += induced_phi_log_prior(phi) + PHI_RANGE.log_jacobian(phi);
        }
        lp
    }

    /// Particle marginal Metropolis–Hastings move on `(φ, ρ, λ)`.
    pub fn pmmh_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.particles.is_empty() {
            let mut parts = self.draw_particles(self.state.phi, rng)?;
            parts[0] = self.state.lambda;
            self.particles = parts;
        }
        let b2 = self.site_linear_term();
        let cur_ll = self.particle_logliks(&self.particles, &self.cov, &b2)?;
        let z = self.transformed(self.state.phi, self.state.rho);
        let zs = self.proposal.propose(&z, rng)?;
        let (phi_star, rho_star) = if self.phi_free() {
            (PHI_RANGE.from_real(zs[0]), self.rho_range.from_real(zs[1]))
        } else {
            (self.state.phi, self.rho_range.from_real(zs[0]))
        };
        self.moves.entry(Step::Pmmh).or_default().proposed += 1;
        let mut chosen_ll = cur_ll.clone();
        if self.rho_range.contains(rho_star) && PHI_RANGE.contains(phi_star) {
            let cov_star = self.build_cov(rho_star)?;
            let parts_star = self.draw_particles(phi_star, rng)?;
            let star_ll = self.particle_logliks(&parts_star, &cov_star, &b2)?;
            let log_alpha = log_sum_exp(&star_ll) - log_sum_exp(&cur_ll) + self.transformed_log_prior(phi_star, rho_star)
                - self.transformed_log_prior(self.state.phi, self.state.rho);
            if rng.random::<f64>().ln() < log_alpha {
                self.state.phi = phi_star;
                self.state.rho = rho_star;
                self.cov = cov_star;
                self.particles = parts_star;
                chosen_ll = star_ll;
                self.moves.entry(Step::Pmmh).or_default().accepted += 1;
            }
        }
        let top = log_sum_exp(&chosen_ll);
        let mut target = rng.random::<f64>();
        let mut pick = chosen_ll.len() - 1;
        for (l, &v) in chosen_ll.iter().enumerate() {
            target -= (v - top).exp();
            if target < 0.0 {
                pick = l;
                break;
            }
        }
        self.state.lambda = self.particles[pick];
        self.proposal.update(&self.transformed(self.state.phi, self.state.rho));
        Ok(())
    }

    pub fn step_u<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if !self.cfg.use_likelihood {
            self.state.u = self.prior_draw_u(rng)?;
            return Ok(());
        }
        let cs = ConditionalSystem::new(&self.suff.w, self.state.lambda, &self.cov)
            .map_err(|e| Error::numerical(format!("site-effect update: {e}")))?;
        self.state.u = cs.draw(&self.site_linear_term(), rng);
        Ok(())
    }

    fn prior_draw_u<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let n = self.sites.len();
        let sl = self.state.lambda.sqrt();
        match &self.cov {
            SpatialCovariance::Dense(r) => {
                let f = chol_with_jitter(r)?;
                let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
                Ok(f.l() * z * sl)
            }
            SpatialCovariance::LowRank(f) => {
                let q = f.q();
                let zq = DVector::from_iterator(q, (0..q).map(|_| StandardNormal.sample(rng)));
                let t = f.r_qq_chol.back_substitute(&zq);
                let mut u = &f.r_nq * t;
                for i in 0..n {
                    let e: f64 = StandardNormal.sample(rng);
                    u[i] += f.d_nn[i].sqrt() * e;
                }
                Ok(u * sl)
            }
        }
    }

    pub fn step_omega<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let eta = self.linear_predictor();
        self.state.omega = eta.map(|e| pg1_sample(e, rng).omega);
        self.refresh_summaries();
    }

    /// Conjugate update of the Cauchy prior variances:
    /// `1/γ_k ~ Ga(1, s_k²/2 + (β_k − m_k)²/2)`.
    pub fn step_prior_scales<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let Some(g) = self.state.prior_scales.as_mut() else {
            return Ok(());
        };
        for (k, prior) in self.priors.beta.iter().enumerate() {
            if let CoefPrior::Cauchy { location, scale } = *prior {
                let d = self.state.beta[k] - location;
                let rate = 0.5 * scale * scale + 0.5 * d * d;
                let prec: f64 = Gamma::new(1.0, 1.0 / rate)
                    .map_err(|e| Error::numerical(format!("prior scale update: {e}")))?
                    .sample(rng);
                g[k] = 1.0 / prec;
            }
        }
        Ok(())
    }

    fn timed<T>(&mut self, step: Step, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self);
        *self.step_seconds.entry(step).or_insert(0.0) += t0.elapsed().as_secs_f64();
        out
    }

    /// One full sweep in the documented order for the configured mode.
    pub fn iterate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        match self.cfg.mode {
            FitMode::EmpiricalBayes => {
                let mut loglik = 0.0;
                for step in EB_CYCLE {
                    match step {
                        Step::Beta => self.timed(step, |s| s.step_beta(rng))?,
                        Step::Rho => loglik = self.timed(step, |s| s.step_rho(rng))?,
                        Step::Lambda => self.timed(step, |s| s.step_lambda(loglik, rng))?,
                        Step::U => self.timed(step, |s| s.step_u(rng))?,
                        Step::Omega => self.timed(step, |s| {
                            s.step_omega(rng);
                            Ok(())
                        })?,
                        Step::PriorScales => self.timed(step, |s| s.step_prior_scales(rng))?,
                        Step::Pmmh => unreachable!("not part of the empirical Bayes cycle"),
                    }
                }
            }
            FitMode::FullyBayesian => {
                for step in FB_CYCLE {
                    match step {
                        Step::Beta => self.timed(step, |s| s.step_beta(rng))?,
                        Step::Pmmh => self.timed(step, |s| s.pmmh_step(rng))?,
                        Step::U => self.timed(step, |s| s.step_u(rng))?,
                        Step::Omega => self.timed(step, |s| {
                            s.step_omega(rng);
                            Ok(())
                        })?,
                        Step::PriorScales => self.timed(step, |s| s.step_prior_scales(rng))?,
                        Step::Rho | Step::Lambda => unreachable!("not part of the fully Bayesian cycle"),
                    }
                }
            }
        }
        Ok(())
    }

    /// Run the configured number of sweeps and keep the thinned draws.
    pub fn run<R: Rng + ?Sized>(&mut self, chain: usize, rng: &mut R) -> Result<ChainDraws> {
        let start = Instant::now();
        let mut draws = Vec::with_capacity(self.cfg.retained());
        for it in 0..self.cfg.iterations {
            self.iterate(rng)?;
            if it >= self.cfg.burn_in && (it + 1 - self.cfg.burn_in) % self.cfg.thin == 0 {
                draws.push(DrawRecord {
                    chain,
                    iter: it + 1,
                    beta: self.state.beta.iter().copied().collect(),
                    lambda: self.state.lambda,
                    rho: self.state.rho,
                    phi: self.state.phi,
                    u: self.state.u.iter().copied().collect(),
                });
            }
        }
        for (step, stats) in &self.moves {
            log::debug!("chain {chain}: {step:?} acceptance {:.3}", stats.rate());
        }
        Ok(ChainDraws {
            draws,
            moves: self.moves.clone(),
            step_seconds: self.step_seconds.clone(),
            iterations: self.cfg.iterations,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn initial_scales(priors: &PriorConfig) -> Option<DVector<f64>> {
    priors
        .beta
        .iter()
        .any(|b| b.is_heavy_tailed())
        .then(|| DVector::from_iterator(priors.beta.len(), priors.beta.iter().map(|b| b.scale() * b.scale())))
}

/// Starting point `β = β^M / φ`, `u = 0`, λ at its prior mean, ρ at the
/// centre of its prior and ω at its conditional mean.
pub fn initial_state(ds: &SpatialDataset, beta_marginal: &[f64], phi: f64, priors: &PriorConfig) -> Result<ChainState> {
    let beta = DVector::from_iterator(beta_marginal.len(), beta_marginal.iter().map(|b| b / phi));
    let eta = &ds.covariates * &beta;
    Ok(ChainState {
        omega: eta.map(pg1_mean),
        beta,
        u: DVector::zeros(ds.n_sites()),
        lambda: mixing_mean(&BridgeParams::new(phi)?),
        rho: priors.rho.midpoint(),
        phi,
        prior_scales: initial_scales(priors),
    })
}

fn eb_phi(eb: &EBEstimate, priors: &PriorConfig) -> f64 {
    match priors.phi {
        PhiPrior::Fixed(v) => v,
        PhiPrior::InducedHalfCauchy => eb.phi_hat,
    }
}

/// One empirical Bayes chain with φ fixed at the estimate (or at the value
/// of a fixed φ prior).
pub fn run_chain_eb(ds: &SpatialDataset, eb: &EBEstimate, cfg: &FitConfig, priors: &PriorConfig, chain: usize) -> Result<ChainDraws> {
    let phi = eb_phi(eb, priors);
    let init = initial_state(ds, &eb.beta_marginal, phi, priors)?;
    let sites = scaled_sites(ds, cfg);
    let knots = resolve_knots(&sites, cfg)?;
    let mut cfg = cfg.clone();
    cfg.mode = FitMode::EmpiricalBayes;
    let mut sampler = Sampler::new(ds, sites, knots, &cfg, priors, init)?;
    sampler.run(chain, &mut chain_rng(cfg.seed, chain))
}

/// One fully Bayesian chain, started from the empirical Bayes point
/// estimate when it exists and from φ = 0.75 otherwise.
pub fn run_chain_fb(ds: &SpatialDataset, eb: Option<&EBEstimate>, cfg: &FitConfig, priors: &PriorConfig, chain: usize) -> Result<ChainDraws> {
    let (beta_m, phi) = match (eb, priors.phi) {
        (_, PhiPrior::Fixed(v)) => (eb.map(|e| e.beta_marginal.clone()).unwrap_or_else(|| vec![0.0; ds.p()]), v),
        (Some(e), _) => (e.beta_marginal.clone(), e.phi_hat.clamp(0.05, 0.95)),
        (None, _) => (vec![0.0; ds.p()], 0.75),
    };
    let init = initial_state(ds, &beta_m, phi, priors)?;
    let sites = scaled_sites(ds, cfg);
    let knots = resolve_knots(&sites, cfg)?;
    let mut cfg = cfg.clone();
    cfg.mode = FitMode::FullyBayesian;
    let mut sampler = Sampler::new(ds, sites, knots, &cfg, priors, init)?;
    sampler.run(chain, &mut chain_rng(cfg.seed, chain))
}

/// Complete fit: the point-estimation stage (always attempted, required in
/// empirical Bayes mode) followed by `cfg.chains` chains run in parallel.
pub fn fit(ds: &SpatialDataset, cfg: &FitConfig, priors: &PriorConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    priors.validate(ds.p())?;
    let eb = match cfg.mode {
        FitMode::EmpiricalBayes => Some(empirical_bayes(ds)?),
        FitMode::FullyBayesian => empirical_bayes(ds)
            .map_err(|e| log::warn!("point estimate unavailable for initialization: {e}"))
            .ok(),
    };
    if let Some(e) = &eb {
        log::info!("composite-likelihood estimate phi = {:.4} from {} pairs", e.phi_hat, e.n_pairs);
    }
    let chains: Vec<ChainDraws> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| match cfg.mode {
            FitMode::EmpiricalBayes => run_chain_eb(ds, eb.as_ref().expect("estimate present"), cfg, priors, c),
            FitMode::FullyBayesian => run_chain_fb(ds, eb.as_ref(), cfg, priors, c),
        })
        .collect::<Result<_>>()?;
    let sites = scaled_sites(ds, cfg);
    let knots = resolve_knots(&sites, cfg)?;
    Ok(PosteriorDraws {
        meta: FitMeta {
            mode: cfg.mode,
            kernel: cfg.kernel,
            coord_scale: cfg.coord_scale,
            knots,
            column_names: ds.column_names.clone(),
            sites,
            site_ids: ds.site_ids.clone(),
            eb,
        },
        chains,
    })
}
