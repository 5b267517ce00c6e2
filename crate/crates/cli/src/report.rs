//! Aggregation of replicate fits into bias / RMSE / interval tables.

use std::fmt::Write as _;
use std::path::Path;

use bridge_spatial::diagnostics::TestScore;
use serde::{Deserialize, Serialize};

use crate::commands::{replicate_dirs, DiagnosticsReport, TruthSidecar, DIAGNOSTICS_JSON, DIAGNOSTICS_SUBDIR, FIT_SUBDIR, TRUTH};
use crate::error::{CliError, CliResult, Context};
use crate::fitdir::{read_json, FitSummary, SUMMARY_JSON};
use crate::manifest::RunManifest;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub name: String,
    pub truth: TruthSidecar,
    pub summary: FitSummary,
    pub test: Option<TestScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub name: String,
    pub n: usize,
    pub bias: f64,
    pub rmse: f64,
    /// Standard deviation of the estimates; absent with a single replicate.
    pub sd: Option<f64>,
    pub mean_ci_length: f64,
    pub covered: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub replicates: Vec<String>,
    pub phi_hat: Option<MeanSd>,
    pub phi_posterior_mean: MeanSd,
    pub marginal: Vec<CoefRow>,
    pub conditional: Vec<CoefRow>,
    pub test_loglik: Option<MeanSd>,
    pub test_auc: Option<MeanSd>,
}

fn mean_sd(v: &[f64]) -> MeanSd {
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    MeanSd { n, mean, sd }
}

/// Bias, RMSE, interval length and coverage of one coefficient; each item
/// is (posterior mean, 2.5% quantile, 97.5% quantile, truth).
pub fn coef_row(name: &str, items: &[(f64, f64, f64, f64)]) -> CoefRow {
    let n = items.len();
    let err: Vec<f64> = items.iter().map(|(m, _, _, t)| m - t).collect();
    let est: Vec<f64> = items.iter().map(|(m, ..)| *m).collect();
    let covered = items.iter().filter(|(_, lo, hi, t)| lo <= t && t <= hi).count();
    CoefRow {
        name: name.into(),
        n,
        bias: err.iter().sum::<f64>() / n as f64,
        rmse: (err.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt(),
        sd: mean_sd(&est).sd,
        mean_ci_length: items.iter().map(|(_, lo, hi, _)| hi - lo).sum::<f64>() / n as f64,
        covered,
        coverage: covered as f64 / n as f64,
    }
}

pub fn load_replicates(root: &Path) -> CliResult<Vec<Replicate>> {
    let mut out = Vec::new();
    for dir in replicate_dirs(root)? {
        let fit = dir.join(FIT_SUBDIR);
        let diag = fit.join(DIAGNOSTICS_SUBDIR).join(DIAGNOSTICS_JSON);
        let test = if diag.exists() { read_json::<DiagnosticsReport>(&diag)?.test } else { None };
        out.push(Replicate {
            name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            truth: read_json(&dir.join(TRUTH))?,
            summary: read_json(&fit.join(SUMMARY_JSON))?,
            test,
        });
    }
    Ok(out)
}

pub fn aggregate(reps: &[Replicate]) -> CliResult<Report> {
    let first = reps.first().ok_or_else(|| CliError::validation("report", "no replicates"))?;
    let p = first.truth.truth.beta.len();
    let names: Vec<String> = first.summary.marginal_effects.iter().map(|e| e.name.clone()).collect();
    for r in reps {
        let rn: Vec<&String> = r.summary.marginal_effects.iter().map(|e| &e.name).collect();
        if r.truth.truth.beta.len() != p || rn.len() != p || rn.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(CliError::validation("report", format!("replicate {} has an inconsistent schema", r.name)));
        }
    }
    let row = |prefix: &str, truth: &dyn Fn(&TruthSidecar, usize) -> f64, k: usize| -> CliResult<CoefRow> {
        let items = reps
            .iter()
            .map(|r| {
                let s = r.summary.parameter(&format!("{prefix}_{k}")).ok_or_else(|| {
                    CliError::validation("report", format!("replicate {} lacks {prefix}_{k}", r.name))
                })?;
                Ok((s.mean, s.q025, s.q975, truth(&r.truth, k)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(coef_row(&names[k], &items))
    };
    let marginal = (0..p).map(|k| row("betaM", &|t, k| t.truth.beta_marginal[k], k)).collect::<CliResult<_>>()?;
    let conditional = (0..p).map(|k| row("beta", &|t, k| t.truth.beta[k], k)).collect::<CliResult<_>>()?;
    let phi_hats: Vec<f64> = reps.iter().filter_map(|r| r.summary.eb.as_ref().map(|e| e.phi_hat)).collect();
    let phi_post: Vec<f64> = reps.iter().filter_map(|r| r.summary.parameter("phi").map(|s| s.mean)).collect();
    let tests: Vec<TestScore> = reps.iter().filter_map(|r| r.test).collect();
    Ok(Report {
        replicates: reps.iter().map(|r| r.name.clone()).collect(),
        phi_hat: (!phi_hats.is_empty()).then(|| mean_sd(&phi_hats)),
        phi_posterior_mean: mean_sd(&phi_post),
        marginal,
        conditional,
        test_loglik: (!tests.is_empty()).then(|| mean_sd(&tests.iter().map(|t| t.mean_loglik).collect::<Vec<_>>())),
        test_auc: (!tests.is_empty()).then(|| mean_sd(&tests.iter().map(|t| t.auc).collect::<Vec<_>>())),
    })
}

fn sd_text(sd: Option<f64>) -> String {
    sd.map_or_else(|| "NA (single replicate)".into(), |s| format!("{s:.4}"))
}

fn table(out: &mut String, title: &str, rows: &[CoefRow]) {
    let _ = writeln!(out, "\n{title}");
    let _ = writeln!(out, "  {:<14} {:>9} {:>9} {:>9} {:>9} {:>12}", "coefficient", "bias", "RMSE", "sd", "CI length", "coverage");
    for r in rows {
        let sd = r.sd.map_or_else(|| "NA".into(), |s| format!("{s:.4}"));
        let _ = writeln!(
            out,
            "  {:<14} {:>9.4} {:>9.4} {:>9} {:>9.4} {:>5}/{:<3} {:.3}",
            r.name, r.bias, r.rmse, sd, r.mean_ci_length, r.covered, r.n, r.coverage
        );
    }
}

pub fn render_report(r: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "replicates: {}", r.replicates.len());
    if let Some(p) = &r.phi_hat {
        let _ = writeln!(out, "phi_hat: mean {:.4}, sd {}", p.mean, sd_text(p.sd));
    }
    let _ = writeln!(out, "phi posterior mean: mean {:.4}, sd {}", r.phi_posterior_mean.mean, sd_text(r.phi_posterior_mean.sd));
    table(&mut out, "population-averaged coefficients", &r.marginal);
    table(&mut out, "site-specific coefficients", &r.conditional);
    if let (Some(l), Some(a)) = (&r.test_loglik, &r.test_auc) {
        let _ = writeln!(out, "\nheld-out data ({} replicates)", l.n);
        let _ = writeln!(out, "  mean log-likelihood: {:.4} (sd {})", l.mean, sd_text(l.sd));
        let _ = writeln!(out, "  AUC: {:.4} (sd {})", a.mean, sd_text(a.sd));
    }
    out
}

pub fn cmd_report(root: &Path, out: &Path) -> CliResult<Report> {
    let t0 = std::time::Instant::now();
    let reps = load_replicates(root)?;
    let report = aggregate(&reps)?;
    crate::commands::create_dir(out)?;
    let files = vec![out.join(REPORT_JSON), out.join(REPORT_TXT)];
    std::fs::write(&files[0], serde_json::to_string_pretty(&report).context("serializing")?).context("writing report")?;
    std::fs::write(&files[1], render_report(&report)).context("writing report")?;
    let mut m = RunManifest::new("report", None, serde_json::json!({ "experiment": root.display().to_string() }));
    for r in &report.replicates {
        m.input(&root.join(r).join(FIT_SUBDIR).join(SUMMARY_JSON))?;
    }
    m.time("report", t0.elapsed().as_secs_f64());
    m.finish(out, &files)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coef_row_statistics() {
        let r = coef_row("b", &[(1.1, 0.5, 1.5, 1.0), (0.7, 0.6, 0.8, 1.0)]);
        assert!((r.bias + 0.1).abs() < 1e-12);
        assert!((r.rmse - (0.05f64).sqrt()).abs() < 1e-12);
        assert_eq!(r.covered, 1);
        assert!((r.mean_ci_length - 0.6).abs() < 1e-12);
        let single = coef_row("b", &[(1.0, 0.0, 2.0, 1.0)]);
        assert!(single.sd.is_none());
        assert!(single.covered <= single.n);
    }
}
