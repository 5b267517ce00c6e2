//! Layout of a fit directory: `draws.csv`, `fit.json` (metadata needed to
//! reload the draws), `summary.json` and `summary.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bridge_spatial::data::{ColumnSchema, FitConfig, PriorConfig};
use bridge_spatial::diagnostics::{summarize, ParamSummary};
use bridge_spatial::eb::EBEstimate;
use bridge_spatial::mcmc::{read_draws_csv, ChainDraws, FitMeta, MoveStats, PosteriorDraws, Step};
use bridge_spatial::predict::{marginal_effects, EffectSummary};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

pub const DRAWS: &str = "draws.csv";
pub const FIT: &str = "fit.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub chain: usize,
    pub iterations: usize,
    pub retained: usize,
    pub moves: BTreeMap<Step, MoveStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub meta: FitMeta,
    pub config: FitConfig,
    pub priors: PriorConfig,
    pub schema: ColumnSchema,
    pub chains: Vec<ChainStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub mode: String,
    pub draws: usize,
    pub eb: Option<EBEstimate>,
    pub parameters: Vec<ParamSummary>,
    pub marginal_effects: Vec<EffectSummary>,
    pub acceptance: BTreeMap<String, f64>,
}

impl FitSummary {
    pub fn parameter(&self, name: &str) -> Option<&ParamSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

fn acceptance(draws: &PosteriorDraws) -> BTreeMap<String, f64> {
    let mut total: BTreeMap<Step, MoveStats> = BTreeMap::new();
    for c in &draws.chains {
        for (s, m) in &c.moves {
            let t = total.entry(*s).or_default();
            t.accepted += m.accepted;
            t.proposed += m.proposed;
        }
    }
    total.into_iter().filter(|(_, m)| m.proposed > 0).map(|(s, m)| (format!("{s:?}"), m.rate())).collect()
}

pub fn summary_of(draws: &PosteriorDraws) -> FitSummary {
    FitSummary {
        mode: format!("{:?}", draws.meta.mode),
        draws: draws.len(),
        eb: draws.meta.eb.clone(),
        parameters: summarize(draws, true),
        marginal_effects: marginal_effects(draws),
        acceptance: acceptance(draws),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |e| format!("{e:.0}"))
}

pub fn render_summary(s: &FitSummary, names: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode: {}  retained draws: {}", s.mode, s.draws);
    if let Some(eb) = &s.eb {
        let _ = writeln!(out, "\ncomposite likelihood stage");
        let _ = writeln!(out, "  phi_hat = {:.4}  ({} within-site pairs)", eb.phi_hat, eb.n_pairs);
        for (n, b) in names.iter().zip(&eb.beta_marginal) {
            let _ = writeln!(out, "  marginal MLE {n:<14} {b:>9.4}");
        }
    }
    let _ = writeln!(out, "\nposterior summary");
    let _ = writeln!(
        out,
        "  {:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "parameter", "mean", "sd", "2.5%", "50%", "97.5%", "ESS"
    );
    for p in s.parameters.iter().filter(|p| !p.name.starts_with("u_")) {
        let _ = writeln!(
            out,
            "  {:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            p.name,
            p.mean,
            p.sd,
            p.q025,
            p.q50,
            p.q975,
            fmt_opt(p.ess)
        );
    }
    let _ = writeln!(out, "\npopulation-averaged effects (odds ratio scale)");
    for e in &s.marginal_effects {
        let _ = writeln!(
            out,
            "  {:<14} {:>9.4} [{:.4}, {:.4}]",
            e.name, e.odds_ratio_mean, e.odds_ratio_q025, e.odds_ratio_q975
        );
    }
    let _ = writeln!(out, "\nacceptance rates");
    for (k, v) in &s.acceptance {
        let _ = writeln!(out, "  {k:<14} {v:.3}");
    }
    out
}

/// Write the draws, metadata and summaries; returns the files written.
pub fn write_fit(dir: &Path, draws: &PosteriorDraws, cfg: &FitConfig, priors: &PriorConfig, schema: &ColumnSchema) -> CliResult<Vec<PathBuf>> {
    let record = FitRecord {
        meta: draws.meta.clone(),
        config: cfg.clone(),
        priors: priors.clone(),
        schema: schema.clone(),
        chains: draws
            .chains
            .iter()
            .enumerate()
            .map(|(c, ch)| ChainStats { chain: c, iterations: ch.iterations, retained: ch.draws.len(), moves: ch.moves.clone() })
            .collect(),
    };
    let paths: Vec<PathBuf> = [DRAWS, FIT, SUMMARY_JSON, SUMMARY_TXT].iter().map(|f| dir.join(f)).collect();
    draws.write_csv(&paths[0]).context("writing draws")?;
    std::fs::write(&paths[1], serde_json::to_string_pretty(&record).context("fit metadata")?).context("writing fit metadata")?;
    let summary = summary_of(draws);
    std::fs::write(&paths[2], serde_json::to_string_pretty(&summary).context("summary")?).context("writing summary")?;
    std::fs::write(&paths[3], render_summary(&summary, &draws.meta.column_names)).context("writing summary")?;
    Ok(paths)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).context(&format!("reading {}", path.display()))?;
    serde_json::from_str(&text).context(&format!("parsing {}", path.display()))
}

/// Reload a fit directory into posterior draws.
pub fn load_fit(dir: &Path) -> CliResult<(PosteriorDraws, FitRecord)> {
    let record: FitRecord = read_json(&dir.join(FIT))?;
    let (records, p, n) = read_draws_csv(&dir.join(DRAWS)).context("reading draws")?;
    if p != record.meta.column_names.len() || n != record.meta.sites.len() {
        return Err(CliError::validation(
            "loading fit",
            format!("draws have p={p}, n={n} but the metadata describes p={}, n={}", record.meta.column_names.len(), record.meta.sites.len()),
        ));
    }
    let mut chains: Vec<ChainDraws> = record
        .chains
        .iter()
        .map(|c| ChainDraws { moves: c.moves.clone(), iterations: c.iterations, ..Default::default() })
        .collect();
    for d in records {
        let c = chains
            .get_mut(d.chain)
            .ok_or_else(|| CliError::validation("loading fit", format!("draw from unknown chain {}", d.chain)))?;
        c.draws.push(d);
    }
    Ok((PosteriorDraws { meta: record.meta.clone(), chains }, record))
}
