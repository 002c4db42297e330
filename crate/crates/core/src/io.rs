//! Dataset and matrix files, run configuration and result serialization.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};
use crate::model::{validate_sigma, Dataset};
use crate::mvn::{MomentMethod, SampleMethod};
use crate::pfm::SweepOrder;
use crate::sun::{DrawDiagnostics, PosteriorSummary, Provenance};

pub const ARTIFACT_VERSION: &str = concat!("mnp-bayes/", env!("CARGO_PKG_VERSION"));

/// Largest tolerated `|Σᵢⱼ - Σⱼᵢ|` in a loaded matrix.
pub const SIGMA_SYMMETRY_TOL: f64 = 1e-8;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> MnpError {
    MnpError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MnpError::io(path, e))
}

/// Rows of a headerless or headed numeric CSV, with 1-based line numbers.
fn csv_rows(text: &str, path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_num(field: &str, path: &Path, line: u64, col: &str) -> Result<f64> {
    if field.is_empty() {
        return Err(parse_err(path, line, format!("missing value in column `{col}`")));
    }
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("`{field}` in column `{col}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value in column `{col}`")));
    }
    Ok(v)
}

fn check_header(header: &[String], prefix: &str, first: Option<&str>, path: &Path, line: u64) -> Result<usize> {
    let offset = usize::from(first.is_some());
    let ok = first.is_none_or(|f| header.first().map(String::as_str) == Some(f))
        && header.len() > offset
        && header[offset..]
            .iter()
            .enumerate()
            .all(|(j, h)| *h == format!("{prefix}{}", j + 1));
    if !ok {
        let want = match first {
            Some(f) => format!("{f},{prefix}1,...,{prefix}k"),
            None => format!("{prefix}1,...,{prefix}k"),
        };
        return Err(parse_err(path, line, format!("expected header `{want}`, found `{}`", header.join(","))));
    }
    Ok(header.len() - offset)
}

/// Parses `y,x1,...,xp` CSV text. `n_classes` overrides the inferred
/// `max(y)`.
pub fn parse_dataset(text: &str, path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let rows = csv_rows(text, path)?;
    let Some(((hline, header), body)) = rows.split_first() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    let p = check_header(header, "x", Some("y"), path, *hline)?;
    if body.is_empty() {
        return Err(parse_err(path, *hline, "no data rows"));
    }
    let mut y = Vec::with_capacity(body.len());
    let mut x = Vec::with_capacity(body.len() * p);
    for (line, rec) in body {
        if rec.len() != p + 1 {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", p + 1, rec.len()),
            ));
        }
        let label: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(path, *line, format!("label `{}` is not an integer", rec[0])))?;
        if label < 1 {
            return Err(MnpError::Validation(format!(
                "{}:{line}: label {label} outside 1..L",
                path.display()
            )));
        }
        y.push(label as usize);
        for (j, f) in rec[1..].iter().enumerate() {
            x.push(parse_num(f, path, *line, &format!("x{}", j + 1))?);
        }
    }
    let max_y = *y.iter().max().unwrap();
    let l = match n_classes {
        Some(l) => {
            if max_y > l {
                return Err(MnpError::Validation(format!(
                    "{}: label {max_y} outside 1..{l}",
                    path.display()
                )));
            }
            l
        }
        None => max_y,
    };
    Dataset::new(y, DMatrix::from_row_slice(body.len(), p, &x), l)
}

pub fn read_dataset(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    parse_dataset(&read_text(path)?, path, n_classes)
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut out = String::from("y");
    for j in 1..=data.p() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for (i, y) in data.labels_one_based().iter().enumerate() {
        out.push_str(&y.to_string());
        for v in data.x().row(i).iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| MnpError::io(parent, e))?;
    }
    fs::write(path, dataset_to_csv(data)).map_err(|e| MnpError::io(path, e))
}

/// Covariate rows for prediction: header `x1,...,xp`, or a dataset file whose
/// `y` column is ignored.
pub fn read_covariates(path: &Path) -> Result<DMatrix<f64>> {
    let rows = csv_rows(&read_text(path)?, path)?;
    let Some(((hline, header), body)) = rows.split_first() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    let skip = usize::from(header.first().map(String::as_str) == Some("y"));
    let p = check_header(header, "x", if skip == 1 { Some("y") } else { None }, path, *hline)?;
    if body.is_empty() {
        return Err(parse_err(path, *hline, "no data rows"));
    }
    let mut x = Vec::with_capacity(body.len() * p);
    for (line, rec) in body {
        if rec.len() != p + skip {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", p + skip, rec.len()),
            ));
        }
        for (j, f) in rec[skip..].iter().enumerate() {
            x.push(parse_num(f, path, *line, &format!("x{}", j + 1))?);
        }
    }
    Ok(DMatrix::from_row_slice(body.len(), p, &x))
}

/// `identity` or a path to a headerless `L × L` CSV.
pub fn read_sigma(source: &str, n_classes: usize) -> Result<DMatrix<f64>> {
    if source.trim() == "identity" {
        return Ok(DMatrix::identity(n_classes, n_classes));
    }
    let path = Path::new(source);
    parse_sigma(&read_text(path)?, path, n_classes)
}

pub fn parse_sigma(text: &str, path: &Path, n_classes: usize) -> Result<DMatrix<f64>> {
    let rows = csv_rows(text, path)?;
    let cfg = |msg: String| MnpError::Config(format!("{}: {msg}", path.display()));
    let ncols = rows.first().map_or(0, |r| r.1.len());
    if rows.len() != n_classes || rows.iter().any(|r| r.1.len() != ncols) || ncols != n_classes {
        return Err(cfg(format!(
            "Sigma must be {n_classes}x{n_classes}, found {}x{ncols}",
            rows.len()
        )));
    }
    let mut vals = Vec::with_capacity(n_classes * n_classes);
    for (line, rec) in &rows {
        for (j, f) in rec.iter().enumerate() {
            vals.push(parse_num(f, path, *line, &format!("{}", j + 1))?);
        }
    }
    let sigma = DMatrix::from_row_slice(n_classes, n_classes, &vals);
    let asym = (&sigma - sigma.transpose()).amax();
    if asym > SIGMA_SYMMETRY_TOL {
        return Err(cfg(format!("Sigma is not symmetric (max asymmetry {asym:e})")));
    }
    validate_sigma(&sigma, n_classes).map_err(|e| cfg(e.to_string()))?;
    Ok(sigma)
}

pub fn sigma_to_csv(sigma: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in sigma.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Draws as CSV with header `b_1,...,b_q`, one draw per row.
pub fn draws_to_csv(draws: &DMatrix<f64>) -> String {
    let header: Vec<String> = (1..=draws.ncols()).map(|k| format!("b_{k}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for row in draws.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_draws(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let rows = csv_rows(text, path)?;
    let Some(((hline, header), body)) = rows.split_first() else {
        return Err(parse_err(path, 1, "empty draws file"));
    };
    let q = check_header(header, "b_", None, path, *hline)?;
    if body.is_empty() {
        return Err(parse_err(path, *hline, "no draws"));
    }
    let mut vals = Vec::with_capacity(body.len() * q);
    for (line, rec) in body {
        if rec.len() != q {
            return Err(parse_err(path, *line, format!("expected {q} fields, found {}", rec.len())));
        }
        for (j, f) in rec.iter().enumerate() {
            vals.push(parse_num(f, path, *line, &format!("b_{}", j + 1))?);
        }
    }
    Ok(DMatrix::from_row_slice(body.len(), q, &vals))
}

pub fn read_draws(path: &Path) -> Result<DMatrix<f64>> {
    parse_draws(&read_text(path)?, path)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Exact,
    Vb,
    #[default]
    Both,
}

impl FitMethod {
    pub fn exact(self) -> bool {
        matches!(self, FitMethod::Exact | FitMethod::Both)
    }

    pub fn vb(self) -> bool {
        matches!(self, FitMethod::Vb | FitMethod::Both)
    }
}

impl std::str::FromStr for FitMethod {
    type Err = MnpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(FitMethod::Exact),
            "vb" => Ok(FitMethod::Vb),
            "both" => Ok(FitMethod::Both),
            _ => Err(MnpError::Config(format!("unknown method `{s}` (exact|vb|both)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentChoice {
    Analytic,
    Mc,
}

impl std::str::FromStr for MomentChoice {
    type Err = MnpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(MomentChoice::Analytic),
            "mc" => Ok(MomentChoice::Mc),
            _ => Err(MnpError::Config(format!("unknown moment method `{s}` (analytic|mc)"))),
        }
    }
}

/// Run configuration, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: FitMethod,
    /// Prior variance of every coefficient.
    pub nu2: Option<f64>,
    /// `identity` or a path to an `L × L` CSV.
    pub sigma: String,
    pub data: Option<PathBuf>,
    pub n_classes: Option<usize>,
    /// Posterior draws per method.
    pub n_samples: usize,
    pub eps: f64,
    pub max_sweeps: usize,
    /// Unset picks analytic moments when `L - 1 <= 8`.
    pub moment_method: Option<MomentChoice>,
    pub mc_moment_draws: usize,
    pub sweep_order: SweepOrder,
    pub trunc_method: SampleMethod,
    pub gibbs_burn_in: usize,
    pub gibbs_thin: usize,
    /// Absolute error target of the multivariate normal CDF.
    pub cdf_tol: f64,
    pub seed: Option<u64>,
    pub quantiles: Vec<f64>,
    pub output_dir: PathBuf,
    pub save_draws: bool,
    pub shards: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: FitMethod::Both,
            nu2: None,
            sigma: "identity".into(),
            data: None,
            n_classes: None,
            n_samples: 10_000,
            eps: 1e-8,
            max_sweeps: 1000,
            moment_method: None,
            mc_moment_draws: 20_000,
            sweep_order: SweepOrder::Forward,
            trunc_method: SampleMethod::Auto,
            gibbs_burn_in: 500,
            gibbs_thin: 5,
            cdf_tol: 1e-7,
            seed: None,
            quantiles: vec![0.025, 0.5, 0.975],
            output_dir: PathBuf::from("results"),
            save_draws: true,
            shards: 4,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MnpError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::parse(&text).map_err(|e| match e {
            MnpError::Config(m) => MnpError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn nu2(&self) -> Result<f64> {
        self.nu2
            .ok_or_else(|| MnpError::Config("`nu2` (prior variance) is required".into()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| MnpError::Config("`seed` is required".into()))
    }

    pub fn moment_method(&self, seed: u64) -> Option<MomentMethod> {
        self.moment_method.map(|m| match m {
            MomentChoice::Analytic => MomentMethod::Analytic,
            MomentChoice::Mc => MomentMethod::Mc {
                draws: self.mc_moment_draws,
                seed,
            },
        })
    }

    /// Checks every field against its domain.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MnpError::Config(m));
        if let Some(nu2) = self.nu2 {
            if !(nu2 > 0.0 && nu2.is_finite()) {
                return bad(format!("nu2 must be positive, got {nu2}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.cdf_tol > 0.0) {
            return bad(format!("cdf_tol must be positive, got {}", self.cdf_tol));
        }
        if self.method.exact() && self.n_samples < 2 || self.n_samples == 0 {
            return bad(format!("n_samples must be at least 2, got {}", self.n_samples));
        }
        if self.max_sweeps == 0 || self.shards == 0 || self.gibbs_thin == 0 || self.mc_moment_draws == 0 {
            return bad("max_sweeps, shards, gibbs_thin and mc_moment_draws must be positive".into());
        }
        if let Some(l) = self.n_classes {
            if l < 2 {
                return bad(format!("n_classes must be at least 2, got {l}"));
            }
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return bad(format!("quantile {q} outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub name: String,
    pub class: usize,
    pub covariate: usize,
    pub mean: f64,
    pub sd: f64,
    pub quantiles: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub provenance: Provenance,
    pub draws: usize,
    pub quantile_levels: Vec<f64>,
    pub coefficients: Vec<CoefSummary>,
}

impl SummaryTable {
    /// Coefficient `k` belongs to class `k / p + 1` and covariate `k % p + 1`.
    pub fn from_summary(s: &PosteriorSummary, p: usize) -> Self {
        let coefficients = (0..s.mean.len())
            .map(|k| CoefSummary {
                name: format!("b_{}", k + 1),
                class: k / p + 1,
                covariate: k % p + 1,
                mean: s.mean[k],
                sd: s.sd[k],
                quantiles: s.quantiles.iter().map(|(_, q)| q[k]).collect(),
            })
            .collect();
        SummaryTable {
            provenance: s.provenance,
            draws: s.draws,
            quantile_levels: s.quantiles.iter().map(|(l, _)| *l).collect(),
            coefficients,
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.coefficients.len(), self.coefficients.iter().map(|c| c.mean))
    }

    pub fn sd(&self) -> DVector<f64> {
        DVector::from_iterator(self.coefficients.len(), self.coefficients.iter().map(|c| c.sd))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coef,class,covariate,mean,sd");
        for l in &self.quantile_levels {
            out.push_str(&format!(",q{l}"));
        }
        out.push('\n');
        for c in &self.coefficients {
            out.push_str(&format!(
                "{},{},{},{},{}",
                c.name,
                c.class,
                c.covariate,
                fmt_f64(c.mean),
                fmt_f64(c.sd)
            ));
            for q in &c.quantiles {
                out.push(',');
                out.push_str(&fmt_f64(*q));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    pub log_evidence: f64,
    /// Absolute error bound on the evidence itself.
    pub evidence_error: f64,
    pub summary: SummaryTable,
    pub diagnostics: DrawDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbResult {
    pub converged: bool,
    pub sweeps: usize,
    pub last_delta: f64,
    pub elbo: Option<f64>,
    pub elbo_trace: Vec<f64>,
    /// Mean and sd in closed form; quantiles from draws.
    pub summary: SummaryTable,
    pub diagnostics: Option<DrawDiagnostics>,
}

/// Per-coefficient standardized mean difference between the two methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_exact: f64,
    pub mean_vb: f64,
    pub sd_exact: f64,
    pub sd_vb: f64,
    /// `|mean_vb - mean_exact|` in units of the exact Monte Carlo standard error.
    pub se_units: f64,
}

pub fn compare(exact: &SummaryTable, vb: &SummaryTable) -> Vec<ComparisonRow> {
    let n = exact.draws.max(1) as f64;
    exact
        .coefficients
        .iter()
        .zip(&vb.coefficients)
        .map(|(e, v)| ComparisonRow {
            name: e.name.clone(),
            mean_exact: e.mean,
            mean_vb: v.mean,
            sd_exact: e.sd,
            sd_vb: v.sd,
            se_units: (v.mean - e.mean).abs() / (e.sd / n.sqrt()),
        })
        .collect()
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("coef,mean_exact,mean_vb,sd_exact,sd_vb,se_units\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            fmt_f64(r.mean_exact),
            fmt_f64(r.mean_vb),
            fmt_f64(r.sd_exact),
            fmt_f64(r.sd_vb),
            fmt_f64(r.se_units)
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataShape {
    pub n: usize,
    pub p: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

/// Everything a fit produces. Wall-clock timings go to their own file so the
/// numeric record stays reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: String,
    pub config: RunConfig,
    pub data: DataShape,
    /// Row-major `L × L` matrix actually used.
    pub sigma: Vec<Vec<f64>>,
    pub exact: Option<ExactResult>,
    pub vb: Option<VbResult>,
    pub comparison: Option<Vec<ComparisonRow>>,
    #[serde(skip)]
    pub timing: Vec<Timing>,
}

impl ResultRecord {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let l = self.sigma.len();
        DMatrix::from_fn(l, l, |i, j| self.sigma[i][j])
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RESULT_FILE);
        let text = read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| parse_err(&path, e.line() as u64, e.to_string()))
    }
}

pub const RESULT_FILE: &str = "result.json";
pub const TIMING_FILE: &str = "timing.json";

pub fn draws_file(provenance: Provenance) -> &'static str {
    match provenance {
        Provenance::ExactMc => "draws_exact.csv",
        Provenance::PfmB => "draws_vb.csv",
    }
}

fn write_file(path: PathBuf, content: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, content).map_err(|e| MnpError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the result directory and returns the paths written.
pub fn write_results(
    record: &ResultRecord,
    dir: &Path,
    draws: &[(Provenance, &DMatrix<f64>)],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| MnpError::io(dir, e))?;
    let mut written = Vec::new();
    if let Some(e) = &record.exact {
        write_file(dir.join("summary_exact.csv"), &e.summary.to_csv(), &mut written)?;
    }
    if let Some(v) = &record.vb {
        write_file(dir.join("summary_vb.csv"), &v.summary.to_csv(), &mut written)?;
    }
    if let Some(c) = &record.comparison {
        write_file(dir.join("comparison.csv"), &comparison_to_csv(c), &mut written)?;
    }
    let json = serde_json::to_string_pretty(record).expect("record serializes");
    write_file(dir.join(RESULT_FILE), &(json + "\n"), &mut written)?;
    let timing = serde_json::to_string_pretty(&record.timing).expect("timing serializes");
    write_file(dir.join(TIMING_FILE), &(timing + "\n"), &mut written)?;
    for (prov, d) in draws {
        write_file(dir.join(draws_file(*prov)), &draws_to_csv(d), &mut written)?;
    }
    Ok(written)
}
