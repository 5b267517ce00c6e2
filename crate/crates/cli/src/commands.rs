use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bridge_spatial::data::{load_dataset, write_dataset, ColumnSchema, FitConfig, SpatialDataset, INTERCEPT};
use bridge_spatial::diagnostics::{
    empirical_variogram, fitted_probabilities, linear_trend, marginal_probabilities, morans_i, multivariate_ess,
    pearson_residuals, score_test, summarize, waic, MoranResult, ParamSummary, TestScore, Variogram, WaicResult,
};
use bridge_spatial::eb::logistic_mle;
use bridge_spatial::kernels::Point;
use bridge_spatial::mcmc::{fit, PosteriorDraws};
use bridge_spatial::predict::{predict_observations, predict_sites, PredictOptions};
use bridge_spatial::simulate::{simulate, SimDesign, SimTruth};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Context};
use crate::fitdir::{load_fit, write_fit};
use crate::manifest::RunManifest;

pub const TRAIN: &str = "train.csv";
pub const TEST: &str = "test.csv";
pub const TRUTH: &str = "truth.json";
pub const FIT_SUBDIR: &str = "fit";
pub const DIAGNOSTICS_SUBDIR: &str = "diagnostics";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";
pub const DIAGNOSTICS_TXT: &str = "diagnostics.txt";
pub const PREDICTIONS: &str = "predictions.csv";

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).context(&format!("creating {}", dir.display()))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).context("serializing")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).context("serializing")?).context(&format!("writing {}", path.display()))
}

/// Name of replicate directory `r` (1-based).
pub fn replicate_dir(root: &Path, r: usize) -> PathBuf {
    root.join(format!("rep_{r:03}"))
}

/// Replicate directories under an experiment root, in name order.
pub fn replicate_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .context(&format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("rep_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::validation("experiment", format!("no rep_* directories under {}", root.display())));
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub replicate: usize,
    pub seed: u64,
    pub design: SimDesign,
    pub truth: SimTruth,
}

/// Write `replicates` datasets; replicate `r` uses seed `design.seed + r - 1`.
pub fn cmd_simulate(design: &SimDesign, replicates: usize, out: &Path) -> CliResult<()> {
    design.validate().context("design")?;
    if replicates == 0 {
        return Err(CliError::validation("simulate", "at least one replicate is needed"));
    }
    create_dir(out)?;
    let mut top = RunManifest::new("simulate", Some(design.seed), to_json(design)?);
    let mut outputs = Vec::new();
    for r in 1..=replicates {
        let t0 = Instant::now();
        let seed = design.seed.wrapping_add(r as u64 - 1);
        let d = SimDesign { seed, ..design.clone() };
        let sim = simulate(&d).context(&format!("simulating replicate {r}"))?;
        let dir = replicate_dir(out, r);
        create_dir(&dir)?;
        let mut files = vec![dir.join(TRAIN)];
        write_dataset(&sim.train, &files[0]).context("writing training data")?;
        if let Some(test) = &sim.test {
            files.push(dir.join(TEST));
            write_dataset(test, &dir.join(TEST)).context("writing test data")?;
        }
        files.push(dir.join(TRUTH));
        write_json(&dir.join(TRUTH), &TruthSidecar { replicate: r, seed, design: d.clone(), truth: sim.truth })?;
        let mut m = RunManifest::new("simulate", Some(seed), to_json(&d)?);
        m.time("simulate", t0.elapsed().as_secs_f64());
        top.time("simulate", t0.elapsed().as_secs_f64());
        m.finish(&dir, &files)?;
        outputs.push(dir.join(crate::manifest::MANIFEST));
    }
    log::info!("wrote {replicates} replicate(s) to {}", out.display());
    top.finish(out, &outputs)
}

pub fn load_with(cfg: &RunConfig, path: &Path) -> CliResult<(SpatialDataset, ColumnSchema)> {
    let schema = cfg.data.schema_for(path)?;
    let ds = load_dataset(path, &schema).context(&format!("loading {}", path.display()))?;
    Ok((ds, schema))
}

/// Fit one dataset and write a fit directory.
pub fn cmd_fit(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<PosteriorDraws> {
    let t0 = Instant::now();
    let (ds, schema) = load_with(cfg, data)?;
    let priors = cfg.priors.resolve(ds.p());
    let load_time = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let draws = fit(&ds, &cfg.fit, &priors).context("fit")?;
    let fit_time = t1.elapsed().as_secs_f64();
    create_dir(out)?;
    let files = write_fit(out, &draws, &cfg.fit, &priors, &schema)?;
    let mut m = RunManifest::new(
        "fit",
        Some(cfg.fit.seed),
        serde_json::json!({ "config": to_json(cfg)?, "priors": to_json(&priors)? }),
    );
    m.input(data)?;
    m.time("load", load_time);
    m.time("sample", fit_time);
    m.finish(out, &files)?;
    if let Some(eb) = &draws.meta.eb {
        log::info!("phi_hat = {:.4}", eb.phi_hat);
    }
    Ok(draws)
}

fn read_new_sites(path: &Path, schema: &ColumnSchema, names: &[String]) -> CliResult<(Vec<Point>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(schema.delimiter).from_path(path).context(&format!("reading {}", path.display()))?;
    let header: Vec<String> = rdr.headers().context("reading header")?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| -> CliResult<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::validation("new sites", format!("missing column '{name}'")))
    };
    let ix = col(&schema.x)?;
    let iy = col(&schema.y)?;
    let icov: Vec<Option<usize>> = names
        .iter()
        .map(|n| if n == INTERCEPT { Ok(None) } else { col(n).map(Some) })
        .collect::<CliResult<_>>()?;
    let (mut sites, mut values) = (Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.context("reading new sites")?;
        let num = |i: usize| -> CliResult<f64> {
            let raw = rec.get(i).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::validation("new sites", format!("row {}: '{raw}' is not a finite number", k + 2)))
        };
        sites.push(Point::new(num(ix)?, num(iy)?));
        for c in &icov {
            values.push(match c {
                None => 1.0,
                Some(i) => num(*i)?,
            });
        }
    }
    let x = DMatrix::from_row_slice(sites.len(), names.len(), &values);
    Ok((sites, x))
}

/// Predictive probabilities at the sites of a new-sites file.
pub fn cmd_predict(fit_dir: &Path, sites_path: &Path, out: &Path, opts: &PredictOptions) -> CliResult<()> {
    let t0 = Instant::now();
    let (draws, record) = load_fit(fit_dir)?;
    let (sites, x) = read_new_sites(sites_path, &record.schema, &draws.meta.column_names)?;
    let res = if sites.is_empty() {
        None
    } else {
        Some(predict_sites(&draws, &sites, &x, opts).context("prediction")?)
    };
    create_dir(out)?;
    let path = out.join(PREDICTIONS);
    let mut w = csv::Writer::from_path(&path).context("writing predictions")?;
    w.write_record(["site_x", "site_y", "p_mean", "p_lo", "p_hi"]).context("writing predictions")?;
    if let Some(r) = &res {
        for j in 0..sites.len() {
            w.write_record([
                format!("{:?}", sites[j].x),
                format!("{:?}", sites[j].y),
                format!("{:?}", r.p_mean[j]),
                format!("{:?}", r.p_lo[j]),
                format!("{:?}", r.p_hi[j]),
            ])
            .context("writing predictions")?;
        }
        if r.clamped > 0 {
            log::warn!("{} negative kriging variances set to zero", r.clamped);
        }
    }
    w.flush().context("writing predictions")?;
    let mut m = RunManifest::new("predict", Some(opts.seed), to_json(opts)?);
    m.input(&fit_dir.join(crate::fitdir::DRAWS))?;
    m.input(sites_path)?;
    m.time("predict", t0.elapsed().as_secs_f64());
    m.finish(out, &[path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub moran: MoranResult,
    pub variogram: Variogram,
    /// Trend of the semivariance over the non-empty bins.
    pub variogram_slope: Option<f64>,
    pub variogram_slope_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub ess: Vec<ParamSummary>,
    pub multivariate_ess: Option<f64>,
    pub waic: WaicResult,
    pub test: Option<TestScore>,
    pub spatial_residuals: ResidualBlock,
    pub non_spatial_residuals: Option<ResidualBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub seed: u64,
    pub permutations: usize,
    pub neighbours: usize,
    pub bins: usize,
    pub samples_per_draw: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions { seed: 11, permutations: 9999, neighbours: 4, bins: 10, samples_per_draw: 1 }
    }
}

fn residual_block(resid: &[f64], sites: &[Point], opts: &DiagnoseOptions, rng: &mut ChaCha8Rng) -> CliResult<ResidualBlock> {
    let maxd = sites.iter().flat_map(|a| sites.iter().map(move |b| a.dist(b))).fold(0.0, f64::max);
    let variogram = empirical_variogram(resid, sites, opts.bins, 0.5 * maxd).context("variogram")?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = variogram.bins.iter().filter(|b| b.count > 0).map(|b| (b.mid, b.semivariance)).unzip();
    let trend = linear_trend(&xs, &ys).ok();
    Ok(ResidualBlock {
        moran: morans_i(resid, sites, opts.neighbours, opts.permutations, rng).context("Moran's I")?,
        variogram,
        variogram_slope: trend.map(|t| t.slope),
        variogram_slope_p: trend.map(|t| t.p_value),
    })
}

/// Mixing over the coefficients, log λ, ρ and (when sampled) φ.
fn mess(draws: &PosteriorDraws) -> Option<f64> {
    let mut names: Vec<String> = (0..draws.p()).map(|k| format!("beta_{k}")).collect();
    names.extend(["log_lambda".to_string(), "rho".to_string()]);
    if draws.column("phi", None).is_some_and(|v| v.iter().any(|&p| p != v[0])) {
        names.push("phi".into());
    }
    let mut total = 0.0;
    for c in 0..draws.chains.len() {
        let cols: Vec<Vec<f64>> = names.iter().filter_map(|n| draws.column(n, Some(c))).collect();
        let m = cols.first()?.len();
        let mat = DMatrix::from_fn(m, cols.len(), |i, j| cols[j][i]);
        total += multivariate_ess(&mat).ok()?;
    }
    Some(total)
}

pub fn diagnose(draws: &PosteriorDraws, train: &SpatialDataset, test: Option<&SpatialDataset>, opts: &DiagnoseOptions) -> CliResult<DiagnosticsReport> {
    if train.site_ids != draws.meta.site_ids {
        return Err(CliError::validation("diagnose", "dataset sites differ from the fitted sites"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ess: Vec<ParamSummary> = summarize(draws, false);
    let w = waic(draws, train).context("WAIC")?;
    let test_score = match test {
        Some(t) => {
            let po = PredictOptions { samples_per_draw: opts.samples_per_draw, seed: opts.seed, keep_effects: false };
            let prob = predict_observations(draws, t, &po).context("held-out prediction")?;
            Some(score_test(&prob, &t.responses).context("held-out scores")?)
        }
        None => None,
    };
    let sites = &draws.meta.sites;
    let fitted = fitted_probabilities(draws, train).context("fitted probabilities")?;
    let spatial = residual_block(&pearson_residuals(&fitted, train).context("residuals")?, sites, opts, &mut rng)?;
    let non_spatial = match logistic_mle(train) {
        Ok(b) => {
            let p = marginal_probabilities(b.as_slice(), train);
            Some(residual_block(&pearson_residuals(&p, train).context("residuals")?, sites, opts, &mut rng)?)
        }
        Err(e) => {
            log::warn!("non-spatial baseline unavailable: {e}");
            None
        }
    };
    Ok(DiagnosticsReport {
        ess,
        multivariate_ess: mess(draws),
        waic: w,
        test: test_score,
        spatial_residuals: spatial,
        non_spatial_residuals: non_spatial,
    })
}

fn render_residuals(out: &mut String, title: &str, b: &ResidualBlock) {
    let _ = writeln!(out, "\n{title}");
    let _ = writeln!(
        out,
        "  Moran's I = {:.4} (expectation {:.4}), permutation p = {:.4} ({} permutations)",
        b.moran.statistic, b.moran.expectation, b.moran.p_value, b.moran.n_permutations
    );
    let _ = writeln!(out, "  {:>10} {:>12} {:>8}", "distance", "semivariance", "pairs");
    for bin in &b.variogram.bins {
        let _ = writeln!(out, "  {:>10.4} {:>12.4} {:>8}", bin.mid, bin.semivariance, bin.count);
    }
    let _ = writeln!(out, "  pairs beyond last bin: {}", b.variogram.overflow_count);
    if let (Some(s), Some(p)) = (b.variogram_slope, b.variogram_slope_p) {
        let _ = writeln!(out, "  semivariance trend: slope {s:.4}, p = {p:.4}");
    }
}

pub fn render_diagnostics(r: &DiagnosticsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "effective sample size");
    for p in &r.ess {
        let e = p.ess.map_or_else(|| "NA".to_string(), |e| format!("{e:.0}"));
        let _ = writeln!(out, "  {:<14} {:>8}", p.name, e);
    }
    if let Some(m) = r.multivariate_ess {
        let _ = writeln!(out, "  multivariate   {m:>8.0}");
    }
    let _ = writeln!(out, "\nWAIC");
    let _ = writeln!(out, "  WAIC = {:.2} (se {:.2})  lppd = {:.2}  p_waic = {:.2}", r.waic.waic, r.waic.se, r.waic.lppd, r.waic.p_waic);
    if let Some(t) = &r.test {
        let _ = writeln!(out, "\nheld-out data");
        let _ = writeln!(out, "  mean log-likelihood = {:.4}  AUC = {:.4}", t.mean_loglik, t.auc);
    }
    render_residuals(&mut out, "spatial model residuals", &r.spatial_residuals);
    if let Some(b) = &r.non_spatial_residuals {
        render_residuals(&mut out, "non-spatial logistic residuals", b);
    }
    out
}

/// Diagnostics for a fit directory; `data` and `test` are read with the
/// column schema recorded at fit time.
pub fn cmd_diagnose(fit_dir: &Path, data: &Path, test: Option<&Path>, out: &Path, opts: &DiagnoseOptions) -> CliResult<DiagnosticsReport> {
    let t0 = Instant::now();
    let (draws, record) = load_fit(fit_dir)?;
    let train = load_dataset(data, &record.schema).context(&format!("loading {}", data.display()))?;
    let test_ds = test
        .map(|p| load_dataset(p, &record.schema).context(&format!("loading {}", p.display())))
        .transpose()?;
    let report = diagnose(&draws, &train, test_ds.as_ref(), opts)?;
    create_dir(out)?;
    let files = vec![out.join(DIAGNOSTICS_JSON), out.join(DIAGNOSTICS_TXT)];
    write_json(&files[0], &report)?;
    std::fs::write(&files[1], render_diagnostics(&report)).context("writing diagnostics")?;
    let mut m = RunManifest::new("diagnose", Some(opts.seed), to_json(opts)?);
    m.input(&fit_dir.join(crate::fitdir::DRAWS))?;
    m.input(data)?;
    if let Some(t) = test {
        m.input(t)?;
    }
    m.time("diagnose", t0.elapsed().as_secs_f64());
    m.finish(out, &files)?;
    Ok(report)
}

/// Fit every replicate of an experiment and diagnose it against its test
/// set when one exists. Replicates run in parallel.
pub fn cmd_fit_experiment(cfg: &RunConfig, root: &Path, diag: &DiagnoseOptions) -> CliResult<()> {
    use rayon::prelude::*;
    let dirs = replicate_dirs(root)?;
    dirs.par_iter()
        .map(|dir| -> CliResult<()> {
            let fit_dir = dir.join(FIT_SUBDIR);
            cmd_fit(cfg, &dir.join(TRAIN), &fit_dir)?;
            let test = dir.join(TEST);
            let test = test.exists().then_some(test);
            cmd_diagnose(&fit_dir, &dir.join(TRAIN), test.as_deref(), &fit_dir.join(DIAGNOSTICS_SUBDIR), diag)?;
            log::info!("finished {}", dir.display());
            Ok(())
        })
        .collect::<CliResult<Vec<()>>>()?;
    Ok(())
}

/// Apply command-line overrides to a fit configuration.
#[derive(Debug, Clone, Default)]
pub struct FitOverrides {
    pub mode: Option<bridge_spatial::data::FitMode>,
    pub kernel: Option<bridge_spatial::kernels::KernelFamily>,
    pub knots_grid: Option<bridge_spatial::data::KnotGrid>,
    pub chains: Option<usize>,
    pub iters: Option<usize>,
    pub burn: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub coord_scale: Option<f64>,
}

impl FitOverrides {
    pub fn apply(&self, f: &mut FitConfig) {
        if let Some(v) = self.mode {
            f.mode = v;
        }
        if let Some(v) = self.kernel {
            f.kernel = v;
        }
        if let Some(v) = self.knots_grid {
            f.low_rank = Some(v);
        }
        if let Some(v) = self.chains {
            f.chains = v;
        }
        if let Some(v) = self.iters {
            f.iterations = v;
        }
        if let Some(v) = self.burn {
            f.burn_in = v;
        }
        if let Some(v) = self.thin {
            f.thin = v;
        }
        if let Some(v) = self.seed {
            f.seed = v;
        }
        if let Some(v) = self.coord_scale {
            f.coord_scale = v;
        }
    }
}
