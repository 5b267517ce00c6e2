//! TOML run configuration. Every section and field is optional.
//!
//! ```toml
//! [data]
//! site_id = "site_id"
//! x = "x"
//! y = "y"
//! response = "response"
//! covariates = ["x1"]
//! delimiter = ","
//!
//! [fit]
//! mode = "eb"
//! iterations = 11000
//! burn_in = 1000
//! thin = 10
//! chains = 1
//! seed = 1
//! kernel = "matern_3_2"
//! low_rank = { nx = 7, ny = 7 }
//! coord_scale = 1.0
//!
//! [priors]
//! rho = { lo = 0.001, hi = 0.3 }
//! phi = "induced_half_cauchy"
//! beta = [{ type = "cauchy", location = 0.0, scale = 10.0 }, { type = "cauchy", location = 0.0, scale = 1.25 }]
//! ```

use std::path::Path;

use bridge_spatial::data::{CoefPrior, ColumnSchema, FitConfig, PhiPrior, PriorConfig, UniformPrior};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

pub const DEFAULT_RHO: UniformPrior = UniformPrior { lo: 0.001, hi: 0.3 };

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub fit: FitConfig,
    pub priors: PriorSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Defaults to `site_id` when the file has such a column; otherwise
    /// sites are identified by their coordinates.
    pub site_id: Option<String>,
    pub x: String,
    pub y: String,
    pub response: String,
    /// Defaults to every column not mapped to another role.
    pub covariates: Option<Vec<String>>,
    pub intercept: Option<String>,
    pub delimiter: char,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            site_id: None,
            x: "x".into(),
            y: "y".into(),
            response: "response".into(),
            covariates: None,
            intercept: None,
            delimiter: ',',
        }
    }
}

impl DataSection {
    /// Column schema for `path`, filling defaults from its header row.
    pub fn schema_for(&self, path: &Path) -> CliResult<ColumnSchema> {
        if !self.delimiter.is_ascii() {
            return Err(CliError::validation("config", "delimiter must be an ASCII character"));
        }
        let delimiter = self.delimiter as u8;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .from_path(path)
            .context(&format!("reading {}", path.display()))?;
        let header: Vec<String> = rdr.headers().context("reading header")?.iter().map(|h| h.trim().to_string()).collect();
        let site_id = self.site_id.clone().or_else(|| header.iter().find(|h| *h == "site_id").cloned());
        let covariates = match &self.covariates {
            Some(c) => c.clone(),
            None => {
                let taken = [Some(&self.x), Some(&self.y), Some(&self.response), site_id.as_ref(), self.intercept.as_ref()];
                header.iter().filter(|h| !taken.contains(&Some(*h))).cloned().collect()
            }
        };
        Ok(ColumnSchema {
            site_id,
            x: self.x.clone(),
            y: self.y.clone(),
            response: self.response.clone(),
            covariates,
            intercept: self.intercept.clone(),
            delimiter,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// One prior per coefficient, intercept first.
    pub beta: Option<Vec<CoefPrior>>,
    pub rho: Option<UniformPrior>,
    pub phi: Option<PhiPrior>,
}

impl PriorSection {
    pub fn resolve(&self, p: usize) -> PriorConfig {
        let rho = self.rho.unwrap_or(DEFAULT_RHO);
        let mut pc = PriorConfig::weakly_informative(p, rho.lo, rho.hi);
        if let Some(b) = &self.beta {
            pc.beta = b.clone();
        }
        if let Some(phi) = self.phi {
            pc.phi = phi;
        }
        pc
    }
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).context(&format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| CliError::validation("config", format!("{}: {e}", path.display())))
}
