//! Chain and model diagnostics: effective sample sizes, WAIC, held-out
//! scores, site-level residuals, variograms and Moran's I, plus the
//! goodness-of-fit helpers used by the tests.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::kernels::Point;
use crate::mcmc::PosteriorDraws;
use crate::numerics::{log_sigmoid, log_sum_exp, mean_sd, quantile_sorted, sigmoid};

pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssEstimate {
    pub value: f64,
    /// The chain has (numerically) zero variance.
    pub degenerate: bool,
}

/// Univariate effective sample size with Geyer's initial monotone sequence
/// truncation of the autocorrelations.
pub fn ess(x: &[f64]) -> Result<EssEstimate> {
    let m = x.len();
    if m < MIN_DRAWS {
        return Err(Error::invalid(format!("ESS needs at least {MIN_DRAWS} draws, got {m}")));
    }
    let mean = x.iter().sum::<f64>() / m as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var0 = c.iter().map(|v| v * v).sum::<f64>() / m as f64;
    if !(var0 > 1e-300) || var0 <= 1e-24 * mean * mean {
        return Ok(EssEstimate { value: f64::NAN, degenerate: true });
    }
    let acov = |lag: usize| -> f64 { c[..m - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / m as f64 };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while 2 * t + 1 < m {
        let g = acov(2 * t) + acov(2 * t + 1);
        if g <= 0.0 {
            break;
        }
        let g = g.min(prev);
        sum += g;
        prev = g;
        t += 1;
    }
    let tau = (2.0 * sum / var0 - 1.0).max(1.0 / m as f64);
    Ok(EssEstimate { value: m as f64 / tau, degenerate: false })
}

/// Multivariate ESS `m (|Λ| / |Σ_bm|)^{1/d}` with the batch-means estimate
/// of the asymptotic covariance (batch size `⌊√m⌋`). Rows are draws.
pub fn multivariate_ess(samples: &DMatrix<f64>) -> Result<f64> {
    let (m, d) = samples.shape();
    if m < MIN_DRAWS {
        return Err(Error::invalid(format!("multivariate ESS needs at least {MIN_DRAWS} draws, got {m}")));
    }
    if d == 0 {
        return Err(Error::invalid("multivariate ESS needs at least one parameter"));
    }
    let b = (m as f64).sqrt().floor() as usize;
    let a = m / b;
    let used = a * b;
    let mean = DVector::from_fn(d, |j, _| samples.column(j).rows(0, used).mean());
    let mut lambda = DMatrix::zeros(d, d);
    for i in 0..m {
        let r = samples.row(i).transpose() - DVector::from_fn(d, |j, _| samples.column(j).mean());
        lambda += &r * r.transpose();
    }
    lambda /= (m - 1) as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for k in 0..a {
        let bm = DVector::from_fn(d, |j, _| samples.column(j).rows(k * b, b).mean()) - &mean;
        sigma += &bm * bm.transpose();
    }
    sigma *= b as f64 / (a - 1) as f64;
    let (dl, ds) = (lambda.determinant(), sigma.determinant());
    if !(dl > 0.0 && ds > 0.0) {
        return Err(Error::numerical("degenerate covariance in multivariate ESS"));
    }
    Ok(m as f64 * (dl / ds).powf(1.0 / d as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
    /// Sum of per-chain ESS; absent for short or constant chains.
    pub ess: Option<f64>,
}

pub fn summarize_column(name: &str, values: &[f64], per_chain: &[Vec<f64>]) -> ParamSummary {
    let (mean, sd) = mean_sd(values);
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let ess_total: Option<f64> = per_chain
        .iter()
        .map(|c| ess(c).ok().filter(|e| !e.degenerate).map(|e| e.value))
        .sum();
    ParamSummary {
        name: name.to_string(),
        mean,
        sd,
        q025: quantile_sorted(&s, 0.025),
        q25: quantile_sorted(&s, 0.25),
        q50: quantile_sorted(&s, 0.5),
        q75: quantile_sorted(&s, 0.75),
        q975: quantile_sorted(&s, 0.975),
        ess: ess_total,
    }
}

/// Summaries of the coefficients, marginal coefficients, λ, ρ, φ and,
/// when `with_effects`, every site effect.
pub fn summarize(draws: &PosteriorDraws, with_effects: bool) -> Vec<ParamSummary> {
    let names: Vec<String> = draws
        .column_names()
        .into_iter()
        .skip(2)
        .filter(|n| with_effects || !n.starts_with("u_"))
        .collect();
    names
        .iter()
        .filter_map(|n| {
            let all = draws.column(n, None)?;
            let per: Vec<Vec<f64>> = (0..draws.chains.len()).filter_map(|c| draws.column(n, Some(c))).collect();
            Some(summarize_column(n, &all, &per))
        })
        .collect()
}

/// Pointwise log-likelihood `log p(y_j | β, u)`: one row per draw.
pub fn pointwise_loglik(draws: &PosteriorDraws, ds: &SpatialDataset) -> Result<DMatrix<f64>> {
    if ds.p() != draws.p() || ds.n_sites() != draws.n_sites() {
        return Err(Error::data("dataset does not match the fitted draws"));
    }
    let recs: Vec<_> = draws.iter().collect();
    let mut out = DMatrix::zeros(recs.len(), ds.n_obs());
    for (s, d) in recs.iter().enumerate() {
        let eta = &ds.covariates * DVector::from_column_slice(&d.beta);
        for j in 0..ds.n_obs() {
            let e = eta[j] + d.u[ds.cluster_index[j]];
            out[(s, j)] = if ds.responses[j] == 1 { log_sigmoid(e) } else { log_sigmoid(-e) };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    pub se: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

/// WAIC from a draws × observations log-likelihood matrix, with the
/// variance form of the effective number of parameters.
pub fn waic_from_loglik(ll: &DMatrix<f64>) -> Result<WaicResult> {
    let (s, n) = ll.shape();
    if s == 0 || n == 0 {
        return Err(Error::invalid("WAIC needs at least one draw and one observation"));
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut point = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = ll.column(j).iter().copied().collect();
        let l = log_sum_exp(&col) - (s as f64).ln();
        let v = if s > 1 { mean_sd(&col).1.powi(2) } else { 0.0 };
        lppd += l;
        p_waic += v;
        point.push(-2.0 * (l - v));
    }
    let (_, sd) = mean_sd(&point);
    let se = if n > 1 { (n as f64).sqrt() * sd } else { f64::NAN };
    Ok(WaicResult { waic: -2.0 * (lppd - p_waic), se, lppd, p_waic })
}

/// WAIC conditional on the site effects.
pub fn waic(draws: &PosteriorDraws, ds: &SpatialDataset) -> Result<WaicResult> {
    waic_from_loglik(&pointwise_loglik(draws, ds)?)
}

/// Area under the ROC curve by the rank-sum statistic with mid-ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data("AUC is undefined when the labels contain a single class"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_pos: f64 = (0..labels.len()).filter(|&k| labels[k] == 1).map(|k| ranks[k]).sum();
    Ok((rank_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestScore {
    pub mean_loglik: f64,
    pub auc: f64,
}

/// Held-out scores from per-draw predictive probabilities (rows are draws,
/// columns observations): the mean over observations of the log posterior
/// predictive probability, and the AUC of the posterior predictive means.
pub fn score_test(prob: &DMatrix<f64>, labels: &[u8]) -> Result<TestScore> {
    if prob.ncols() != labels.len() || prob.nrows() == 0 {
        return Err(Error::invalid("probability matrix does not match the labels"));
    }
    let n = labels.len();
    let mut means = Vec::with_capacity(n);
    let mut ll = 0.0;
    for j in 0..n {
        let pm = prob.column(j).mean();
        means.push(pm);
        let py = if labels[j] == 1 { pm } else { 1.0 - pm };
        ll += py.max(1e-300).ln();
    }
    Ok(TestScore { mean_loglik: ll / n as f64, auc: auc(&means, labels)? })
}

/// In-sample posterior mean of `σ(x'β + u_i)` per observation.
pub fn fitted_probabilities(draws: &PosteriorDraws, ds: &SpatialDataset) -> Result<Vec<f64>> {
    let ll = pointwise_loglik(draws, ds)?;
    Ok((0..ds.n_obs())
        .map(|j| {
            let m = ll.column(j).map(|l| l.exp()).mean();
            if ds.responses[j] == 1 {
                m
            } else {
                1.0 - m
            }
        })
        .collect())
}

/// Probabilities of the marginal logistic fit that ignores the sites.
pub fn marginal_probabilities(beta_marginal: &[f64], ds: &SpatialDataset) -> Vec<f64> {
    let eta = &ds.covariates * DVector::from_column_slice(beta_marginal);
    eta.iter().map(|&e| sigmoid(e)).collect()
}

/// Site-level Pearson residuals
/// `r_i = N_i^{-1/2} Σ_j (y_ij − p_ij) / sqrt(p_ij (1 − p_ij))`.
pub fn pearson_residuals(p_hat: &[f64], ds: &SpatialDataset) -> Result<Vec<f64>> {
    if p_hat.len() != ds.n_obs() {
        return Err(Error::invalid("one fitted probability per observation is needed"));
    }
    let mut sums = vec![0.0; ds.n_sites()];
    for j in 0..ds.n_obs() {
        let p = p_hat[j].clamp(1e-10, 1.0 - 1e-10);
        sums[ds.cluster_index[j]] += (ds.responses[j] as f64 - p) / (p * (1.0 - p)).sqrt();
    }
    Ok(sums.iter().zip(ds.cluster_sizes()).map(|(s, m)| s / (m as f64).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    pub mid: f64,
    pub semivariance: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variogram {
    pub bins: Vec<VariogramBin>,
    /// Pairs farther apart than the last bin edge.
    pub overflow_count: usize,
}

impl Variogram {
    pub fn total_pairs(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum::<usize>() + self.overflow_count
    }
}

/// Classical Matheron estimator over `n_bins` equal-width distance bins on
/// `[0, max_dist]`. Empty bins report a count of zero and a NaN value.
pub fn empirical_variogram(resid: &[f64], sites: &[Point], n_bins: usize, max_dist: f64) -> Result<Variogram> {
    if resid.len() != sites.len() {
        return Err(Error::invalid("one residual per site is needed"));
    }
    if n_bins == 0 || !(max_dist > 0.0) {
        return Err(Error::invalid("variogram needs at least one bin and a positive maximum distance"));
    }
    let width = max_dist / n_bins as f64;
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    let mut overflow = 0;
    for i in 0..sites.len() {
        for j in i + 1..sites.len() {
            let d = sites[i].dist(&sites[j]);
            if d > max_dist {
                overflow += 1;
                continue;
            }
            let b = ((d / width) as usize).min(n_bins - 1);
            sum[b] += (resid[i] - resid[j]).powi(2);
            count[b] += 1;
        }
    }
    let bins = (0..n_bins)
        .map(|b| VariogramBin {
            mid: (b as f64 + 0.5) * width,
            semivariance: if count[b] > 0 { 0.5 * sum[b] / count[b] as f64 } else { f64::NAN },
            count: count[b],
        })
        .collect();
    Ok(Variogram { bins, overflow_count: overflow })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTrend {
    pub slope: f64,
    pub t: f64,
    /// Two-sided p-value of zero slope.
    pub p_value: f64,
}

/// Least-squares slope of `y` on `x` with its t-test.
pub fn linear_trend(x: &[f64], y: &[f64]) -> Result<LinearTrend> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::invalid("trend test needs at least three paired values"));
    }
    let (mx, my) = (x.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    let se = (rss / (n - 2) as f64 / sxx).sqrt();
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 2) as f64).map_err(|e| Error::numerical(e.to_string()))?;
    Ok(LinearTrend { slope, t, p_value: 2.0 * (1.0 - dist.cdf(t.abs())) })
}

/// Row-standardized k-nearest-neighbour lists; ties broken by site index.
pub fn knn(sites: &[Point], k: usize) -> Vec<Vec<usize>> {
    (0..sites.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> =
                (0..sites.len()).filter(|&j| j != i).map(|j| (sites[i].dist(&sites[j]), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn moran_statistic(z: &[f64], nbrs: &[Vec<usize>]) -> f64 {
    let denom: f64 = z.iter().map(|v| v * v).sum();
    let num: f64 = nbrs
        .iter()
        .enumerate()
        .map(|(i, nb)| z[i] * nb.iter().map(|&j| z[j]).sum::<f64>() / nb.len() as f64)
        .sum();
    num / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub statistic: f64,
    pub expectation: f64,
    /// One-sided permutation p-value for positive autocorrelation.
    pub p_value: f64,
    pub permutation_mean: f64,
    pub n_permutations: usize,
}

/// Moran's I with row-standardized k-NN weights and a permutation test.
pub fn morans_i<R: Rng + ?Sized>(resid: &[f64], sites: &[Point], k: usize, n_permutations: usize, rng: &mut R) -> Result<MoranResult> {
    let n = resid.len();
    if n != sites.len() {
        return Err(Error::invalid("one residual per site is needed"));
    }
    if n < 5 || k == 0 || k >= n {
        return Err(Error::invalid("Moran's I needs at least five sites and 0 < k < n"));
    }
    let mean = resid.iter().sum::<f64>() / n as f64;
    let mut z: Vec<f64> = resid.iter().map(|r| r - mean).collect();
    if z.iter().all(|v| *v == 0.0) {
        return Err(Error::data("residuals are constant"));
    }
    let nbrs = knn(sites, k);
    let stat = moran_statistic(&z, &nbrs);
    let mut exceed = 0usize;
    let mut acc = 0.0;
    for _ in 0..n_permutations {
        z.shuffle(rng);
        let s = moran_statistic(&z, &nbrs);
        acc += s;
        if s >= stat {
            exceed += 1;
        }
    }
    Ok(MoranResult {
        statistic: stat,
        expectation: -1.0 / (n as f64 - 1.0),
        p_value: (exceed + 1) as f64 / (n_permutations + 1) as f64,
        permutation_mean: acc / n_permutations.max(1) as f64,
        n_permutations,
    })
}

/// One-sample Kolmogorov–Smirnov distance against a CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value of a distance `d` at sample size `n`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let x = (sn + 0.12 + 0.11 / sn) * d;
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Pearson χ² test of homogeneity between two count vectors over the same
/// categories; categories empty in both are dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<ChiSquareTest> {
    if a.len() != b.len() {
        return Err(Error::invalid("count vectors differ in length"));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let total = na + nb;
    let mut stat = 0.0;
    let mut cats = 0;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cats += 1;
        let ea = na * col / total;
        let eb = nb * col / total;
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if cats < 2 {
        return Err(Error::invalid("χ² test needs at least two non-empty categories"));
    }
    let df = (cats - 1) as f64;
    let dist = ChiSquared::new(df).map_err(|e| Error::numerical(e.to_string()))?;
    Ok(ChiSquareTest { statistic: stat, df, p_value: 1.0 - dist.cdf(stat) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::INTERCEPT;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ess_of_iid_and_ar1_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let iid: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = ess(&iid).unwrap().value;
        assert!((8500.0..=11500.0).contains(&e), "{e}");
        let mut ar = Vec::with_capacity(20_000);
        let mut v = 0.0;
        for _ in 0..20_000 {
            let z: f64 = StandardNormal.sample(&mut rng);
            v = 0.9 * v + z;
            ar.push(v);
        }
        let e = ess(&ar).unwrap().value;
        let expect = 20_000.0 * 0.1 / 1.9;
        assert!((e / expect - 1.0).abs() < 0.2, "{e} vs {expect}");
        assert!(ess(&vec![3.0; 500]).unwrap().degenerate);
        assert!(ess(&iid[..50]).is_err());
    }

    #[test]
    fn mess_of_iid_draws_is_near_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DMatrix::from_fn(10_000, 3, |_, _| StandardNormal.sample(&mut rng));
        let e = multivariate_ess(&m).unwrap();
        assert!((e / 10_000.0 - 1.0).abs() < 0.25, "{e}");
    }

    #[test]
    fn waic_identities() {
        let ll = DMatrix::from_row_slice(1, 3, &[-0.1, -0.7, -2.0]);
        let w = waic_from_loglik(&ll).unwrap();
        assert_eq!(w.p_waic, 0.0);
        assert!((w.waic - 5.6).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ll = DMatrix::from_fn(50, 20, |_, _| -rng.random::<f64>());
        let w = waic_from_loglik(&ll).unwrap();
        assert!((w.waic + 2.0 * (w.lppd - w.p_waic)).abs() < 1e-12);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        let s = [0.3, 0.1, 0.7, 0.4, 0.9];
        let y = [0, 1, 1, 0, 1];
        let a = auc(&s, &y).unwrap();
        let t: Vec<f64> = s.iter().map(|v: &f64| (3.0 * v).exp()).collect();
        assert_eq!(a, auc(&t, &y).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let y: Vec<u8> = (0..10_000).map(|_| u8::from(rng.random::<bool>())).collect();
        assert!((auc(&s, &y).unwrap() - 0.5).abs() < 0.02);
    }

    fn ds_with(groups: &[Vec<u8>]) -> SpatialDataset {
        let mut ci = Vec::new();
        let mut y = Vec::new();
        for (i, g) in groups.iter().enumerate() {
            for &v in g {
                ci.push(i);
                y.push(v);
            }
        }
        let n = groups.len();
        let nobs = y.len();
        SpatialDataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            (0..n).map(|i| Point::new(i as f64, 0.0)).collect(),
            ci,
            DMatrix::from_element(nobs, 1, 1.0),
            y,
            vec![INTERCEPT.into()],
        )
        .unwrap()
    }

    #[test]
    fn pearson_residual_cases() {
        let ds = ds_with(&[vec![1, 0, 1, 0], vec![1, 1]]);
        let half = vec![0.5; 6];
        let r = pearson_residuals(&half, &ds).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        let exact: Vec<f64> = ds.responses.iter().map(|&y| y as f64).collect();
        assert!(pearson_residuals(&exact, &ds).unwrap().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn variogram_bins_and_counts() {
        let sites = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
        let v = empirical_variogram(&[1.0, 3.0], &sites, 4, 2.0).unwrap();
        assert_eq!(v.bins[2].count, 1);
        assert_eq!(v.bins[2].semivariance, 2.0);
        assert_eq!(v.total_pairs(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sites: Vec<Point> = (0..60).map(|_| Point::new(rng.random(), rng.random())).collect();
        let r: Vec<f64> = (0..60).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = empirical_variogram(&r, &sites, 8, 0.8).unwrap();
        assert_eq!(v.total_pairs(), 60 * 59 / 2);
    }

    #[test]
    fn moran_null_and_positive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sites: Vec<Point> = (0..80).map(|_| Point::new(rng.random(), rng.random())).collect();
        let r: Vec<f64> = (0..80).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = morans_i(&r, &sites, 4, 999, &mut rng).unwrap();
        assert!(m.p_value >= 1.0 / 1000.0 && m.p_value <= 1.0);
        assert!((m.permutation_mean - m.expectation).abs() < 0.01);
        let smooth: Vec<f64> = sites.iter().map(|s| (4.0 * s.x).sin() + s.y).collect();
        let m = morans_i(&smooth, &sites, 4, 999, &mut rng).unwrap();
        assert!(m.p_value < 0.01 && m.statistic > 0.5);
        assert!(morans_i(&r[..4], &sites[..4], 2, 9, &mut rng).is_err());
    }

    #[test]
    fn knn_ties_break_by_index() {
        let sites = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(-1.0, 0.0), Point::new(0.0, 1.0)];
        assert_eq!(knn(&sites, 2)[0], vec![1, 2]);
    }

    #[test]
    fn ks_and_chi_square_helpers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
        let d = ks_statistic(&u, |x| x.clamp(0.0, 1.0));
        assert!(ks_pvalue(d, 5000) > 0.01);
        assert!(ks_pvalue(0.1, 5000) < 1e-10);
        let t = chi_square_homogeneity(&[100, 200, 300], &[100, 200, 300]).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.df, 2.0);
        let t = chi_square_homogeneity(&[100, 200, 300], &[300, 200, 100]).unwrap();
        assert!(t.p_value < 1e-10);
        let tr = linear_trend(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.1, 5.9, 8.0]).unwrap();
        assert!((tr.slope - 1.98).abs() < 1e-12 && tr.p_value < 0.01);
    }
}
