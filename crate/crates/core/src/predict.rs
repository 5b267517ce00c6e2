//! Posterior prediction at new sites and population-averaged effect
//! summaries.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collapsed::SpatialCovariance;
use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::kernels::{chol_with_jitter, cross_corr, CorrelationModel, Point};
use crate::mcmc::{chain_rng, DrawRecord, PosteriorDraws};
use crate::numerics::{mean_sd, quantile_sorted, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Site-effect samples per retained draw (1, or 10 to reduce noise).
    pub samples_per_draw: usize,
    pub seed: u64,
    pub keep_effects: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { samples_per_draw: 1, seed: 7, keep_effects: false }
    }
}

/// Sampled site effects at new sites: one row per (draw, sample).
#[derive(Debug, Clone)]
pub struct EffectDraws {
    pub u: DMatrix<f64>,
    /// Row `r` belongs to retained draw `draw_of_row[r]`.
    pub draw_of_row: Vec<usize>,
    /// Conditional variances that came out negative and were set to zero.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub sites: Vec<Point>,
    pub p_mean: Vec<f64>,
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
    pub effects: Option<DMatrix<f64>>,
    pub clamped: usize,
}

/// Kriging weights `R^{-1} r*` and variances `1 - r*' R^{-1} r*` for one
/// range value, plus the training site coinciding with each new site.
struct Kriging {
    weights: DMatrix<f64>,
    var: Vec<f64>,
    coincident: Vec<Option<usize>>,
}

fn kriging(draws: &PosteriorDraws, rho: f64, new_sites: &[Point]) -> Result<Kriging> {
    let meta = &draws.meta;
    let model = CorrelationModel::new(meta.kernel, rho)?;
    let coincident: Vec<Option<usize>> =
        new_sites.iter().map(|s| meta.sites.iter().position(|t| t.dist(s) == 0.0)).collect();
    let cov = SpatialCovariance::build(&model, &meta.sites, meta.knots.as_deref())?;
    let r = cov.to_dense();
    let cross = match &cov {
        SpatialCovariance::Dense(_) => cross_corr(&model, &meta.sites, new_sites),
        SpatialCovariance::LowRank(f) => {
            let r_sq = cross_corr(&model, new_sites, &f.knots);
            &f.r_nq * f.r_qq_chol.solve_mat(&r_sq.transpose())
        }
    };
    let f = chol_with_jitter(&r)?;
    let weights = f.solve_mat(&cross);
    let var = (0..new_sites.len()).map(|k| 1.0 - cross.column(k).dot(&weights.column(k))).collect();
    Ok(Kriging { weights, var, coincident })
}

fn scale_points(pts: &[Point], s: f64) -> Vec<Point> {
    pts.iter().map(|p| Point::new(p.x * s, p.y * s)).collect()
}

/// Draw `u*` at the new sites (given in unscaled coordinates) for every
/// retained draw, independently per site from
/// `N(r*' R^{-1} u, λ (1 - r*' R^{-1} r*))`.
pub fn predict_effects(draws: &PosteriorDraws, new_sites: &[Point], opts: &PredictOptions) -> Result<EffectDraws> {
    if opts.samples_per_draw == 0 {
        return Err(Error::invalid("samples per draw must be at least 1"));
    }
    let scaled = scale_points(new_sites, draws.meta.coord_scale);
    let records: Vec<&DrawRecord> = draws.iter().collect();
    let m = scaled.len();
    let s = opts.samples_per_draw;
    let per_draw: Vec<(Vec<f64>, usize)> = records
        .par_iter()
        .enumerate()
        .map(|(idx, d)| -> Result<(Vec<f64>, usize)> {
            let mut rng = chain_rng(opts.seed, idx);
            let k = kriging(draws, d.rho, &scaled)?;
            let u = DVector::from_column_slice(&d.u);
            let mean = k.weights.transpose() * &u;
            let mut clamped = 0;
            let mut out = Vec::with_capacity(m * s);
            for _ in 0..s {
                for j in 0..m {
                    if let Some(i) = k.coincident[j] {
                        out.push(d.u[i]);
                        continue;
                    }
                    let mut v = k.var[j];
                    if v < 0.0 {
                        if v < -1e-10 {
                            log::warn!("conditional variance {v:e} at new site {j} set to zero");
                        }
                        v = 0.0;
                        clamped += 1;
                    }
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out.push(mean[j] + (d.lambda * v).sqrt() * z);
                }
            }
            Ok((out, clamped))
        })
        .collect::<Result<_>>()?;
    let rows = records.len() * s;
    let mut u = DMatrix::zeros(rows, m);
    let mut draw_of_row = Vec::with_capacity(rows);
    let mut clamped = 0;
    for (idx, (vals, c)) in per_draw.into_iter().enumerate() {
        clamped += c;
        for r in 0..s {
            let row = idx * s + r;
            for j in 0..m {
                u[(row, j)] = vals[r * m + j];
            }
            draw_of_row.push(idx);
        }
    }
    Ok(EffectDraws { u, draw_of_row, clamped })
}

/// Predictive success probabilities at new sites, one covariate row per
/// site; reports the mean and the equal-tailed 95% interval over draws.
pub fn predict_sites(draws: &PosteriorDraws, new_sites: &[Point], new_covariates: &DMatrix<f64>, opts: &PredictOptions) -> Result<PredictionResult> {
    if new_covariates.nrows() != new_sites.len() || new_covariates.ncols() != draws.p() {
        return Err(Error::data(format!(
            "new covariates must be {} x {}, got {} x {}",
            new_sites.len(),
            draws.p(),
            new_covariates.nrows(),
            new_covariates.ncols()
        )));
    }
    let records: Vec<&DrawRecord> = draws.iter().collect();
    if records.is_empty() && !new_sites.is_empty() {
        return Err(Error::data("no posterior draws to predict from"));
    }
    let eff = predict_effects(draws, new_sites, opts)?;
    let m = new_sites.len();
    let (mut p_mean, mut p_lo, mut p_hi) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for j in 0..m {
        let xj = new_covariates.row(j);
        let mut ps: Vec<f64> = (0..eff.u.nrows())
            .map(|r| {
                let d = records[eff.draw_of_row[r]];
                let eta: f64 = xj.iter().zip(&d.beta).map(|(x, b)| x * b).sum::<f64>() + eff.u[(r, j)];
                sigmoid(eta)
            })
            .collect();
        p_mean.push(ps.iter().sum::<f64>() / ps.len() as f64);
        ps.sort_by(f64::total_cmp);
        p_lo.push(quantile_sorted(&ps, 0.025));
        p_hi.push(quantile_sorted(&ps, 0.975));
    }
    Ok(PredictionResult {
        sites: new_sites.to_vec(),
        p_mean,
        p_lo,
        p_hi,
        clamped: eff.clamped,
        effects: opts.keep_effects.then_some(eff.u),
    })
}

/// Per-observation predictive probabilities for a held-out dataset: one
/// row per (draw, sample), one column per observation.
pub fn predict_observations(draws: &PosteriorDraws, test: &SpatialDataset, opts: &PredictOptions) -> Result<DMatrix<f64>> {
    if test.p() != draws.p() {
        return Err(Error::data("held-out covariates do not match the fitted design"));
    }
    let records: Vec<&DrawRecord> = draws.iter().collect();
    if records.is_empty() {
        return Err(Error::data("no posterior draws to predict from"));
    }
    let eff = predict_effects(draws, &test.sites, opts)?;
    let mut out = DMatrix::zeros(eff.u.nrows(), test.n_obs());
    for r in 0..eff.u.nrows() {
        let beta = DVector::from_column_slice(&records[eff.draw_of_row[r]].beta);
        let eta = &test.covariates * beta;
        for j in 0..test.n_obs() {
            out[(r, j)] = sigmoid(eta[j] + eff.u[(r, test.cluster_index[j])]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
    pub odds_ratio_mean: f64,
    pub odds_ratio_q025: f64,
    pub odds_ratio_q975: f64,
}

/// Summaries of `β^M = φ β` per coefficient, with the odds-ratio scale.
pub fn marginal_effects(draws: &PosteriorDraws) -> Vec<EffectSummary> {
    (0..draws.p())
        .map(|k| {
            let mut v: Vec<f64> = draws.iter().map(|d| d.phi * d.beta[k]).collect();
            let (mean, sd) = mean_sd(&v);
            let or_mean = v.iter().map(|b| b.exp()).sum::<f64>() / v.len() as f64;
            v.sort_by(f64::total_cmp);
            let (q025, q500, q975) = (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.975));
            EffectSummary {
                name: draws.meta.column_names[k].clone(),
                mean,
                sd,
                q025,
                q500,
                q975,
                odds_ratio_mean: or_mean,
                odds_ratio_q025: q025.exp(),
                odds_ratio_q975: q975.exp(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FitMode;
    use crate::kernels::{corr_matrix, KernelFamily};
    use crate::mcmc::{ChainDraws, FitMeta};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_draws(sites: Vec<Point>, knots: Option<Vec<Point>>, k: usize, seed: u64) -> PosteriorDraws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sites.len();
        let draws = (0..k)
            .map(|it| DrawRecord {
                chain: 0,
                iter: it + 1,
                beta: vec![0.2, -0.5],
                lambda: 0.5 + rng.random::<f64>(),
                rho: 0.1 + 0.2 * rng.random::<f64>(),
                phi: 0.8,
                u: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
            })
            .collect();
        PosteriorDraws {
            meta: FitMeta {
                mode: FitMode::EmpiricalBayes,
                kernel: KernelFamily::Matern32,
                coord_scale: 1.0,
                knots,
                column_names: vec!["(Intercept)".into(), "x".into()],
                site_ids: (0..n).map(|i| format!("s{i}")).collect(),
                sites,
                eb: None,
            },
            chains: vec![ChainDraws { draws, ..ChainDraws::default() }],
        }
    }

    fn grid(n: usize) -> Vec<Point> {
        (0..n).map(|i| Point::new((i % 4) as f64 * 0.3, (i / 4) as f64 * 0.3)).collect()
    }

    #[test]
    fn coincident_site_reuses_training_effect() {
        let d = fake_draws(grid(12), None, 30, 1);
        let new = vec![d.meta.sites[5], Point::new(0.45, 0.45)];
        let eff = predict_effects(&d, &new, &PredictOptions::default()).unwrap();
        for (r, rec) in d.iter().enumerate() {
            assert_eq!(eff.u[(r, 0)], rec.u[5]);
        }
    }

    #[test]
    fn far_site_reverts_to_prior() {
        let d = fake_draws(grid(12), None, 4000, 2);
        let eff = predict_effects(&d, &[Point::new(1e4, 1e4)], &PredictOptions::default()).unwrap();
        let col: Vec<f64> = eff.u.column(0).iter().copied().collect();
        let (m, sd) = mean_sd(&col);
        assert!(m.abs() < 4.0 * sd / (col.len() as f64).sqrt());
        // mixture of N(0, λ) with λ ~ U(0.5, 1.5): variance 1
        assert!((sd * sd - 1.0).abs() < 0.1);
    }

    #[test]
    fn conditional_moments_match_dense_kriging() {
        let sites = grid(12);
        let d = fake_draws(sites.clone(), None, 1, 3);
        let rec = d.iter().next().unwrap().clone();
        let new = [Point::new(0.2, 0.1)];
        let opts = PredictOptions { samples_per_draw: 10, ..PredictOptions::default() };
        let model = CorrelationModel::new(KernelFamily::Matern32, rec.rho).unwrap();
        let r = corr_matrix(&model, &sites);
        let rs = cross_corr(&model, &sites, &new);
        let w = r.clone().try_inverse().unwrap() * &rs;
        let mean = w.column(0).dot(&DVector::from_column_slice(&rec.u));
        let var = rec.lambda * (1.0 - rs.column(0).dot(&w.column(0)));
        let mut all = Vec::new();
        for seed in 0..2000 {
            let e = predict_effects(&d, &new, &PredictOptions { seed, ..opts }).unwrap();
            all.extend(e.u.column(0).iter().copied());
        }
        let (m, sd) = mean_sd(&all);
        assert!((m - mean).abs() < 4.0 * var.sqrt() / (all.len() as f64).sqrt());
        assert!((sd * sd / var - 1.0).abs() < 0.05);
    }

    #[test]
    fn low_rank_with_knots_at_sites_matches_dense() {
        let sites = grid(12);
        let dense = fake_draws(sites.clone(), None, 20, 4);
        let mut low = dense.clone();
        low.meta.knots = Some(sites);
        let new = [Point::new(0.2, 0.1), Point::new(0.7, 0.5)];
        let a = predict_effects(&dense, &new, &PredictOptions::default()).unwrap();
        let b = predict_effects(&low, &new, &PredictOptions::default()).unwrap();
        assert!((&a.u - &b.u).amax() < 1e-6);
    }

    #[test]
    fn site_predictions_are_ordered_and_order_invariant() {
        let d = fake_draws(grid(12), None, 200, 5);
        let new = vec![Point::new(0.1, 0.1), Point::new(0.5, 0.8), Point::new(2.0, 2.0)];
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, -1.0]);
        let res = predict_sites(&d, &new, &x, &PredictOptions { samples_per_draw: 10, ..Default::default() }).unwrap();
        for j in 0..3 {
            assert!(res.p_lo[j] <= res.p_mean[j] && res.p_mean[j] <= res.p_hi[j]);
            assert!(res.p_mean[j] > 0.0 && res.p_mean[j] < 1.0);
        }
        let rev: Vec<Point> = new.iter().rev().copied().collect();
        let xr = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 1.0, 1.0, 1.0, 0.0]);
        let res2 = predict_sites(&d, &rev, &xr, &PredictOptions { samples_per_draw: 10, ..Default::default() }).unwrap();
        // per-site draws are independent, so only Monte Carlo agreement is expected
        for j in 0..3 {
            assert!((res.p_mean[j] - res2.p_mean[2 - j]).abs() < 0.03);
        }
        let empty = predict_sites(&d, &[], &DMatrix::zeros(0, 2), &PredictOptions::default()).unwrap();
        assert!(empty.p_mean.is_empty());
    }

    #[test]
    fn marginal_effects_scale_by_phi() {
        let d = fake_draws(grid(4), None, 10, 6);
        let s = marginal_effects(&d);
        assert!((s[1].mean - 0.8 * -0.5).abs() < 1e-12);
        assert!((s[1].odds_ratio_q025 - (-0.4f64).exp()).abs() < 1e-12);
    }
}
