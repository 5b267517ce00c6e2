//! Datasets of clustered binary responses at spatial sites, plus the prior
//! and fitting configuration records.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::MixingSeriesConfig;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, Point};

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    pub site_ids: Vec<String>,
    pub sites: Vec<Point>,
    /// Site index of each observation.
    pub cluster_index: Vec<usize>,
    /// N×p design matrix, intercept column included.
    pub covariates: DMatrix<f64>,
    pub responses: Vec<u8>,
    pub column_names: Vec<String>,
}

impl SpatialDataset {
    pub fn new(
        site_ids: Vec<String>,
        sites: Vec<Point>,
        cluster_index: Vec<usize>,
        covariates: DMatrix<f64>,
        responses: Vec<u8>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let ds = SpatialDataset { site_ids, sites, cluster_index, covariates, responses, column_names };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sites.len();
        let nobs = self.responses.len();
        if self.site_ids.len() != n {
            return Err(Error::data("site id list and site list differ in length"));
        }
        if self.cluster_index.len() != nobs || self.covariates.nrows() != nobs {
            return Err(Error::data("observation arrays differ in length"));
        }
        if self.column_names.len() != self.covariates.ncols() {
            return Err(Error::data("column names do not match the design matrix"));
        }
        if let Some((row, _)) = self.responses.iter().enumerate().find(|(_, &y)| y > 1) {
            return Err(Error::data(format!("observation {row}: response is not binary")));
        }
        if let Some(idx) = self.covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("observation {}: non-finite covariate", idx % nobs.max(1))));
        }
        if self.sites.iter().any(|s| !s.x.is_finite() || !s.y.is_finite()) {
            return Err(Error::data("non-finite site coordinate"));
        }
        let mut sizes = vec![0usize; n];
        for &c in &self.cluster_index {
            if c >= n {
                return Err(Error::data(format!("cluster index {c} out of range for {n} sites")));
            }
            sizes[c] += 1;
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::data(format!("site '{}' has no observations", self.site_ids[i])));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_obs(&self) -> usize {
        self.responses.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_sites()];
        for &c in &self.cluster_index {
            sizes[c] += 1;
        }
        sizes
    }

    /// Observation indices grouped by site.
    pub fn site_observations(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_sites()];
        for (j, &c) in self.cluster_index.iter().enumerate() {
            groups[c].push(j);
        }
        groups
    }

    pub fn response_f64(&self) -> Vec<f64> {
        self.responses.iter().map(|&y| y as f64).collect()
    }

    /// Dataset restricted to the given sites, in the given order.
    pub fn subset_sites(&self, keep: &[usize]) -> SpatialDataset {
        let mut remap = vec![usize::MAX; self.n_sites()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let groups = self.site_observations();
        let rows: Vec<usize> = keep.iter().flat_map(|&s| groups[s].iter().copied()).collect();
        let covariates = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.covariates[(rows[i], j)]);
        SpatialDataset {
            site_ids: keep.iter().map(|&s| self.site_ids[s].clone()).collect(),
            sites: keep.iter().map(|&s| self.sites[s]).collect(),
            cluster_index: rows.iter().map(|&r| remap[self.cluster_index[r]]).collect(),
            covariates,
            responses: rows.iter().map(|&r| self.responses[r]).collect(),
            column_names: self.column_names.clone(),
        }
    }

    /// Multiply all coordinates by `factor`.
    pub fn scale_coordinates(&mut self, factor: f64) {
        for s in &mut self.sites {
            s.x *= factor;
            s.y *= factor;
        }
    }

    pub fn has_auto_intercept(&self) -> bool {
        self.column_names.first().map(|c| c == INTERCEPT).unwrap_or(false)
    }
}

/// Mapping from file columns to dataset fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub site_id: Option<String>,
    pub x: String,
    pub y: String,
    pub response: String,
    pub covariates: Vec<String>,
    /// Name of a column already holding the intercept; when absent a column
    /// of ones is prepended.
    pub intercept: Option<String>,
    pub delimiter: u8,
}

impl ColumnSchema {
    pub fn new(x: &str, y: &str, response: &str, covariates: &[&str]) -> Self {
        ColumnSchema {
            site_id: None,
            x: x.into(),
            y: y.into(),
            response: response.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            intercept: None,
            delimiter: b',',
        }
    }

    /// Schema matching the layout written by [`write_dataset`].
    pub fn for_written(ds: &SpatialDataset) -> Self {
        let (intercept, covariates) = if ds.has_auto_intercept() {
            (None, ds.column_names[1..].to_vec())
        } else {
            (None, ds.column_names.clone())
        };
        ColumnSchema {
            site_id: Some("site_id".into()),
            x: "x".into(),
            y: "y".into(),
            response: "response".into(),
            covariates,
            intercept,
            delimiter: b',',
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::data(format!("missing column '{name}'")))
}

fn parse_num(rec: &csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("").trim();
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::data(format!("row {row}: column '{name}' value '{raw}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data(format!("row {row}: column '{name}' is not finite")));
    }
    Ok(v)
}

/// Read a delimited file with a header row, grouping rows into sites by the
/// site id column (or by coordinates when no id column is mapped).
pub fn load_dataset(path: &Path, schema: &ColumnSchema) -> Result<SpatialDataset> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(schema.delimiter).has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let ix = column(&headers, &schema.x)?;
    let iy = column(&headers, &schema.y)?;
    let iresp = column(&headers, &schema.response)?;
    let iid = schema.site_id.as_deref().map(|s| column(&headers, s)).transpose()?;
    let iint = schema.intercept.as_deref().map(|s| column(&headers, s)).transpose()?;
    let icov: Vec<usize> = schema.covariates.iter().map(|c| column(&headers, c)).collect::<Result<_>>()?;

    let mut column_names = Vec::new();
    match &schema.intercept {
        Some(name) => column_names.push(name.clone()),
        None => column_names.push(INTERCEPT.to_string()),
    }
    column_names.extend(schema.covariates.iter().cloned());
    let p = column_names.len();

    let mut site_lookup: HashMap<String, usize> = HashMap::new();
    let mut site_ids = Vec::new();
    let mut sites: Vec<Point> = Vec::new();
    let mut cluster_index = Vec::new();
    let mut values = Vec::new();
    let mut responses = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 2;
        let x = parse_num(&rec, ix, row, &schema.x)?;
        let y = parse_num(&rec, iy, row, &schema.y)?;
        let key = match iid {
            Some(i) => rec.get(i).unwrap_or("").trim().to_string(),
            None => format!("{x:?}|{y:?}"),
        };
        let site = match site_lookup.get(&key) {
            Some(&s) => {
                if sites[s] != Point::new(x, y) {
                    return Err(Error::data(format!("row {row}: site '{key}' has conflicting coordinates")));
                }
                s
            }
            None => {
                let s = sites.len();
                site_lookup.insert(key.clone(), s);
                site_ids.push(if iid.is_some() { key } else { format!("s{}", s + 1) });
                sites.push(Point::new(x, y));
                s
            }
        };
        let resp = parse_num(&rec, iresp, row, &schema.response)?;
        if resp != 0.0 && resp != 1.0 {
            return Err(Error::data(format!("row {row}: response value {resp} is not 0 or 1")));
        }
        values.push(match iint {
            Some(i) => parse_num(&rec, i, row, schema.intercept.as_deref().unwrap_or(""))?,
            None => 1.0,
        });
        for (c, &i) in icov.iter().enumerate() {
            values.push(parse_num(&rec, i, row, &schema.covariates[c])?);
        }
        cluster_index.push(site);
        responses.push(resp as u8);
    }
    let nobs = responses.len();
    let covariates = DMatrix::from_row_slice(nobs, p, &values);
    let ds = SpatialDataset::new(site_ids, sites, cluster_index, covariates, responses, column_names)?;
    log::info!("loaded {}: n={} sites, N={} observations, p={}", path.display(), ds.n_sites(), ds.n_obs(), ds.p());
    Ok(ds)
}

/// Write one row per observation: site id, coordinates, response and every
/// covariate except an automatically added intercept.
pub fn write_dataset(ds: &SpatialDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let skip = usize::from(ds.has_auto_intercept());
    let mut header = vec!["site_id".to_string(), "x".into(), "y".into(), "response".into()];
    header.extend(ds.column_names[skip..].iter().cloned());
    w.write_record(&header)?;
    for j in 0..ds.n_obs() {
        let s = ds.cluster_index[j];
        let mut rec = vec![
            ds.site_ids[s].clone(),
            format!("{:?}", ds.sites[s].x),
            format!("{:?}", ds.sites[s].y),
            ds.responses[j].to_string(),
        ];
        for c in skip..ds.p() {
            rec.push(format!("{:?}", ds.covariates[(j, c)]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Split by site: a `test_site_fraction` share of sites (rounded) goes to
/// the test set with all of its observations.
pub fn train_test_split<R: Rng + ?Sized>(ds: &SpatialDataset, test_site_fraction: f64, rng: &mut R) -> Result<(SpatialDataset, SpatialDataset)> {
    if !(test_site_fraction > 0.0 && test_site_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction must lie in (0, 1), got {test_site_fraction}")));
    }
    let n = ds.n_sites();
    let n_test = (test_site_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset_sites(&train), ds.subset_sites(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoefPrior {
    Normal { mean: f64, scale: f64 },
    Cauchy { location: f64, scale: f64 },
}

impl CoefPrior {
    pub fn location(&self) -> f64 {
        match *self {
            CoefPrior::Normal { mean, .. } => mean,
            CoefPrior::Cauchy { location, .. } => location,
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            CoefPrior::Normal { scale, .. } | CoefPrior::Cauchy { scale, .. } => scale,
        }
    }

    pub fn is_heavy_tailed(&self) -> bool {
        matches!(self, CoefPrior::Cauchy { .. })
    }

    pub fn log_density(&self, b: f64) -> f64 {
        match *self {
            CoefPrior::Normal { mean, scale } => {
                let z = (b - mean) / scale;
                -0.5 * z * z - scale.ln() - 0.5 * crate::numerics::LN_2PI
            }
            CoefPrior::Cauchy { location, scale } => {
                let z = (b - location) / scale;
                -(std::f64::consts::PI * scale).ln() - (z * z).ln_1p()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformPrior {
    pub lo: f64,
    pub hi: f64,
}

impl UniformPrior {
    pub fn contains(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiPrior {
    InducedHalfCauchy,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub beta: Vec<CoefPrior>,
    pub rho: UniformPrior,
    pub phi: PhiPrior,
}

impl PriorConfig {
    /// Cauchy(0, 10) on the intercept, Cauchy(0, 1.25) on the other
    /// coefficients, `rho ~ U(lo, hi)`.
    pub fn weakly_informative(p: usize, rho_lo: f64, rho_hi: f64) -> Self {
        let mut beta = vec![CoefPrior::Cauchy { location: 0.0, scale: 10.0 }];
        beta.extend((1..p).map(|_| CoefPrior::Cauchy { location: 0.0, scale: 1.25 }));
        beta.truncate(p);
        PriorConfig { beta, rho: UniformPrior { lo: rho_lo, hi: rho_hi }, phi: PhiPrior::InducedHalfCauchy }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.beta.len() != p {
            return Err(Error::invalid(format!("{} coefficient priors given for {p} coefficients", self.beta.len())));
        }
        for b in &self.beta {
            if !(b.scale() > 0.0 && b.scale().is_finite() && b.location().is_finite()) {
                return Err(Error::invalid("coefficient prior scales must be positive"));
            }
        }
        if !(self.rho.lo >= 0.0 && self.rho.lo < self.rho.hi && self.rho.hi.is_finite()) {
            return Err(Error::invalid("range prior needs 0 <= lo < hi < inf"));
        }
        if let PhiPrior::Fixed(v) = self.phi {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid("fixed phi must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    #[serde(alias = "eb")]
    EmpiricalBayes,
    #[serde(alias = "fb")]
    FullyBayesian,
}

impl std::str::FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eb" | "empirical_bayes" => Ok(FitMode::EmpiricalBayes),
            "fb" | "fully_bayesian" => Ok(FitMode::FullyBayesian),
            other => Err(Error::invalid(format!("unknown fit mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub nx: usize,
    pub ny: usize,
}

impl std::str::FromStr for KnotGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X', '×']).collect();
        if parts.len() != 2 {
            return Err(Error::invalid(format!("knot grid '{s}' is not of the form QXxQY")));
        }
        let nx = parts[0].trim().parse().map_err(|_| Error::invalid(format!("bad knot grid '{s}'")))?;
        let ny = parts[1].trim().parse().map_err(|_| Error::invalid(format!("bad knot grid '{s}'")))?;
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("knot grid dimensions must be positive"));
        }
        Ok(KnotGrid { nx, ny })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub mode: FitMode,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub particles: usize,
    pub kernel: KernelFamily,
    pub low_rank: Option<KnotGrid>,
    pub coord_scale: f64,
    pub series: MixingSeriesConfig,
    /// Iteration at which proposal adaptation starts.
    pub adapt_start: usize,
    /// Random-walk step on the logit scale before adaptation.
    pub initial_step: f64,
    /// When false the collapsed likelihood is replaced by a constant, so the
    /// chain targets the prior (used to validate the samplers).
    pub use_likelihood: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mode: FitMode::EmpiricalBayes,
            iterations: 11_000,
            burn_in: 1_000,
            thin: 10,
            chains: 1,
            seed: 1,
            particles: 20,
            kernel: KernelFamily::Matern32,
            low_rank: None,
            coord_scale: 1.0,
            series: MixingSeriesConfig::default(),
            adapt_start: 200,
            initial_step: 0.5,
            use_likelihood: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::invalid("iterations must exceed burn_in"));
        }
        if self.thin == 0 || self.chains == 0 || self.particles == 0 {
            return Err(Error::invalid("thin, chains and particles must be at least 1"));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err(Error::invalid("coordinate scale must be positive"));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::invalid("initial proposal step must be positive"));
        }
        self.series.validate()
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn temp_file(name: &str, body: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("bsp-data-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.csv");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const SMALL: &str = "village,x,y,infected,age\nA,0,0,1,2.0\nA,0,0,0,3.5\nB,1,2,1,1.0\nA,0,0,1,0.5\nB,1,2,0,4.0\nB,1,2,0,2.5\n";

    #[test]
    fn loads_and_groups_by_site() {
        let p = temp_file("small", SMALL);
        let mut schema = ColumnSchema::new("x", "y", "infected", &["age"]);
        schema.site_id = Some("village".into());
        let ds = load_dataset(&p, &schema).unwrap();
        assert_eq!((ds.n_sites(), ds.n_obs(), ds.p()), (2, 6, 2));
        assert_eq!(ds.cluster_sizes(), vec![3, 3]);
        assert_eq!(ds.column_names, vec![INTERCEPT.to_string(), "age".into()]);
        assert!(ds.covariates.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_non_binary_response_with_row() {
        let p = temp_file("bad", "x,y,r\n0,0,1\n0,0,2\n");
        let err = load_dataset(&p, &ColumnSchema::new("x", "y", "r", &[])).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn rejects_conflicting_coordinates_and_missing_columns() {
        let p = temp_file("conf", "id,x,y,r\na,0,0,1\na,0,1,0\n");
        let mut s = ColumnSchema::new("x", "y", "r", &[]);
        s.site_id = Some("id".into());
        assert!(load_dataset(&p, &s).is_err());
        let s2 = ColumnSchema::new("x", "y", "r", &["zzz"]);
        assert!(load_dataset(&p, &s2).unwrap_err().to_string().contains("zzz"));
        let p = temp_file("nan", "x,y,r,c\n0,0,1,NaN\n");
        assert!(load_dataset(&p, &ColumnSchema::new("x", "y", "r", &["c"])).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let p = temp_file("rt", SMALL);
        let mut schema = ColumnSchema::new("x", "y", "infected", &["age"]);
        schema.site_id = Some("village".into());
        let ds = load_dataset(&p, &schema).unwrap();
        let out = p.with_file_name("out.csv");
        write_dataset(&ds, &out).unwrap();
        let back = load_dataset(&out, &ColumnSchema::for_written(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn split_is_by_site() {
        let n = 250;
        let sites: Vec<Point> = (0..n).map(|i| Point::new(i as f64, 0.0)).collect();
        let cluster_index: Vec<usize> = (0..n * 2).map(|j| j / 2).collect();
        let ds = SpatialDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            sites,
            cluster_index,
            DMatrix::from_element(2 * n, 1, 1.0),
            (0..2 * n).map(|j| (j % 2) as u8).collect(),
            vec![INTERCEPT.into()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (tr, te) = train_test_split(&ds, 0.2, &mut rng).unwrap();
        assert_eq!((tr.n_sites(), te.n_sites()), (200, 50));
        assert_eq!(tr.n_obs() + te.n_obs(), ds.n_obs());
        assert!(tr.site_ids.iter().all(|s| !te.site_ids.contains(s)));
        let (tr, te) = train_test_split(&ds, 1e-6, &mut rng).unwrap();
        assert_eq!((tr.n_sites(), te.n_sites()), (250, 0));
        assert!(train_test_split(&ds, 0.0, &mut rng).is_err());
        assert!(train_test_split(&ds, 1.0, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = FitConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.retained(), 1000);
        c.burn_in = c.iterations;
        assert!(c.validate().is_err());
        assert_eq!("7x7".parse::<KnotGrid>().unwrap(), KnotGrid { nx: 7, ny: 7 });
        assert!("7".parse::<KnotGrid>().is_err());
        let pr = PriorConfig::weakly_informative(2, 0.001, 0.3);
        assert!(pr.validate(2).is_ok());
        assert!(pr.validate(3).is_err());
    }
}
