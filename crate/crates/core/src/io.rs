//! Dataset ingestion, configuration parsing and result serialization.
//!
//! CSV dialect: comma separated, UTF-8, header row first, `.` decimals.
//! Output files start with a `#` comment line carrying a JSON provenance
//! record; the readers here skip it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::PosteriorSummary;
use crate::glm::{Dataset, GlmError, GlmFamily};
use crate::linalg::{Matrix, Vector};
use crate::priors::{GammaPrior, InitialPrior, PriorKind};
use crate::sampler::RNG_ALGORITHM;
use crate::simharness::MetricsRow;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IoError {
    #[error("{file}: missing column {column:?}")]
    MissingColumn { file: String, column: String },
    #[error("{file}: row {row}: missing value in column {column:?}")]
    MissingValue { file: String, row: usize, column: String },
    #[error("{file}: row {row}: column {column:?} is not a number: {value:?}")]
    InvalidNumber { file: String, row: usize, column: String, value: String },
    #[error("{file}: row {row}: response {value} is invalid for the {family} model")]
    InvalidResponse { file: String, row: usize, value: f64, family: String },
    #[error("{file}: design matrix is rank deficient")]
    RankDeficientDesign { file: String },
    #[error("{file}: no data rows")]
    EmptyFile { file: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o failure on {path}: {message}")]
    IoFailure { path: String, message: String },
}

fn io_fail(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::IoFailure { path: path.display().to_string(), message: e.to_string() }
}

/// Serde adapter storing a [`GlmFamily`] as its short string form.
pub mod family_str {
    use super::GlmFamily;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &GlmFamily, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&f.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GlmFamily, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub csv: PathBuf,
    pub response: String,
    #[serde(with = "family_str")]
    pub family: GlmFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
}

fn default_draws() -> usize {
    10_000
}

fn default_burn_in() -> usize {
    5_000
}

fn default_chains() -> usize {
    1
}

impl Default for McmcSection {
    fn default() -> Self {
        McmcSection { draws: default_draws(), burn_in: default_burn_in(), seed: 0, chains: 1 }
    }
}

/// `a₀ × ω₀` grid for the DIC table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DicGridSpec {
    pub a0: Vec<f64>,
    pub omega0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub historical: DataSource,
    pub current: DataSource,
    /// Covariate columns shared by both files; their order defines `β`.
    pub covariates: Vec<String>,
    #[serde(default)]
    pub borrow_intercept: bool,
    #[serde(default)]
    pub priors: Vec<PriorKind>,
    #[serde(default)]
    pub initial_prior: InitialPrior,
    #[serde(default)]
    pub dispersion_prior: Option<GammaPrior>,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub grid: Option<DicGridSpec>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_level() -> f64 {
    0.95
}

impl AnalysisConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, IoError> {
        let cfg: AnalysisConfig = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in [&mut cfg.historical.csv, &mut cfg.current.csv, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |m: String| Err(IoError::Config(m));
        if self.covariates.is_empty() {
            return bad("at least one covariate is required".into());
        }
        for (i, c) in self.covariates.iter().enumerate() {
            if self.covariates[..i].contains(c) {
                return bad(format!("covariate {c:?} listed twice"));
            }
        }
        for src in [&self.historical, &self.current] {
            if self.covariates.contains(&src.response) {
                return bad(format!("response {:?} is also a covariate", src.response));
            }
        }
        for k in &self.priors {
            k.validate().map_err(|e| IoError::Config(e.to_string()))?;
        }
        if self.mcmc.draws < 20 {
            return bad("mcmc.draws must be at least 20".into());
        }
        if self.mcmc.chains == 0 {
            return bad("mcmc.chains must be positive".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0, 1)", self.level));
        }
        if let Some(g) = &self.grid {
            if g.a0.is_empty() || g.omega0.is_empty() {
                return bad("grid axes must be nonempty".into());
            }
            if g.a0.iter().any(|a| !(0.0..=1.0).contains(a)) || g.omega0.iter().any(|w| !(*w >= 0.0)) {
                return bad("grid needs a0 in [0, 1] and omega0 >= 0".into());
            }
        }
        Ok(())
    }

    /// Coefficient labels: `(Intercept)` then the covariates.
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string()).chain(self.covariates.iter().cloned()).collect()
    }

    /// Borrowed coefficient indices (all, or all but the intercept).
    pub fn borrowed(&self) -> Vec<usize> {
        let p = self.covariates.len() + 1;
        if self.borrow_intercept {
            (0..p).collect()
        } else {
            (1..p).collect()
        }
    }
}

/// Loads a CSV into a [`Dataset`] with an intercept prepended and the
/// covariates in the given order.
pub fn load_dataset(path: &Path, response: &str, covariates: &[String], family: &GlmFamily) -> Result<Dataset, IoError> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path).map_err(|e| io_fail(path, e))?;
    let headers = rdr.headers().map_err(|e| io_fail(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn { file: file.clone(), column: name.to_string() })
    };
    let yi = find(response)?;
    let xi: Vec<usize> = covariates.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let mut ys = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| io_fail(path, e))?;
        let cell = |idx: usize, name: &str| -> Result<f64, IoError> {
            let raw = rec.get(idx).unwrap_or("");
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                return Err(IoError::MissingValue { file: file.clone(), row, column: name.to_string() });
            }
            raw.parse::<f64>().map_err(|_| IoError::InvalidNumber {
                file: file.clone(),
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        let y = cell(yi, response)?;
        if !family.validate_response(y) {
            return Err(IoError::InvalidResponse { file: file.clone(), row, value: y, family: family.to_string() });
        }
        ys.push(y);
        rows.push(1.0);
        for (&idx, name) in xi.iter().zip(covariates) {
            rows.push(cell(idx, name)?);
        }
    }
    if ys.is_empty() {
        return Err(IoError::EmptyFile { file });
    }
    let p = covariates.len() + 1;
    let x = Matrix::from_row_slice(ys.len(), p, &rows);
    Dataset::for_family(Vector::from_vec(ys), x, family).map_err(|e| match e {
        GlmError::RankDeficient(_) => IoError::RankDeficientDesign { file: file.clone() },
        GlmError::InvalidResponse { row, value, .. } => {
            IoError::InvalidResponse { file: file.clone(), row, value, family: family.to_string() }
        }
        other => IoError::Config(format!("{file}: {other}")),
    })
}

/// Provenance embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub rng: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Self {
        Provenance {
            tool: "strapp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            rng: RNG_ALGORITHM.into(),
            seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
        }
    }

    fn comment_line(&self) -> String {
        format!("# {}\n", serde_json::to_string(self).expect("provenance serializes"))
    }
}

/// Posterior summary of one (prior, hyperparameter) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub prior: PriorKind,
    pub label: String,
    pub hyper: String,
    pub summary: PosteriorSummary,
}

impl CellResult {
    pub fn new(prior: PriorKind, summary: PosteriorSummary) -> Self {
        let hyper = prior.hyper();
        let hyper = if hyper.is_empty() { "NA".to_string() } else { hyper };
        CellResult { label: prior.label().into(), hyper, prior, summary }
    }

    fn file_stem(&self) -> String {
        let raw = format!("{}_{}", self.label, self.hyper);
        raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
    }
}

/// JSON document written per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDocument {
    pub provenance: Provenance,
    pub cell: CellResult,
}

/// Writes one JSON per cell plus `summary.csv`, rows sorted by DIC
/// ascending (cells without a DIC last). Returns the files written.
pub fn write_results(cells: &[CellResult], dir: &Path, provenance: &Provenance) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    let mut written = Vec::new();
    for cell in cells {
        let path = dir.join(format!("{}.json", cell.file_stem()));
        let doc = CellDocument { provenance: provenance.clone(), cell: cell.clone() };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| io_fail(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| io_fail(&path, e))?;
        written.push(path);
    }
    let path = dir.join("summary.csv");
    let mut f = fs::File::create(&path).map_err(|e| io_fail(&path, e))?;
    f.write_all(provenance.comment_line().as_bytes()).map_err(|e| io_fail(&path, e))?;
    write_summary_table(cells, &mut f).map_err(|e| io_fail(&path, e))?;
    written.push(path);
    Ok(written)
}

fn write_summary_table<W: Write>(cells: &[CellResult], w: W) -> Result<(), csv::Error> {
    let mut order: Vec<&CellResult> = cells.iter().collect();
    order.sort_by(|a, b| {
        let key = |c: &CellResult| c.summary.dic.filter(|d| d.is_finite()).unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    let names: Vec<String> = cells.first().map(|c| c.summary.names.clone()).unwrap_or_default();
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["prior".to_string(), "hyper".into(), "dic".into()];
    for n in &names {
        for stat in ["mean", "sd", "hpd_lower", "hpd_upper"] {
            header.push(format!("{stat}:{n}"));
        }
    }
    wtr.write_record(&header)?;
    for c in order {
        let s = &c.summary;
        let mut row = vec![c.label.clone(), c.hyper.clone(), s.dic.map_or("NA".into(), |d| d.to_string())];
        for n in &names {
            match s.index_of(n) {
                Some(j) => {
                    for v in [s.mean[j], s.sd[j], s.hpd_lower[j], s.hpd_upper[j]] {
                        row.push(v.to_string());
                    }
                }
                None => row.extend(std::iter::repeat_n("NA".to_string(), 4)),
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a per-cell JSON document.
pub fn read_cell(path: &Path) -> Result<CellDocument, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_fail(path, e))
}

/// Fixed header of the simulation metrics CSV.
pub const METRICS_HEADER: &str = "scenario,prior,hyper,x,avg_log_var,bias,log_mse,coverage,n_fail";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W, provenance: Option<&Provenance>) -> Result<(), IoError> {
    let fail = |e: &dyn std::fmt::Display| IoError::IoFailure { path: "metrics".into(), message: e.to_string() };
    if let Some(p) = provenance {
        w.write_all(p.comment_line().as_bytes()).map_err(|e| fail(&e))?;
    }
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(METRICS_HEADER.split(',')).map_err(|e| fail(&e))?;
    for r in rows {
        wtr.serialize(r).map_err(|e| fail(&e))?;
    }
    wtr.flush().map_err(|e| fail(&e))?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>, IoError> {
    let fail = |e: csv::Error| IoError::IoFailure { path: "metrics".into(), message: e.to_string() };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(fail)?.iter().map(String::from).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(IoError::Config(format!("unexpected metrics header {header:?}")));
    }
    rdr.deserialize().map(|row| row.map_err(fail)).collect()
}

/// First-line provenance of an artifact written by this module.
pub fn read_provenance(path: &Path) -> Result<Option<Provenance>, IoError> {
    let f = fs::File::open(path).map_err(|e| io_fail(path, e))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first).map_err(|e| io_fail(path, e))?;
    match first.strip_prefix("# ") {
        Some(json) => serde_json::from_str(json.trim_end()).map(Some).map_err(|e| io_fail(path, e)),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn covs(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn three_row_binary_file() {
        let d = TempDir::new().unwrap();
        let p = write(&d, "a.csv", "y,x\n0,1.5\n1,-0.5\n1,2.0\n");
        let ds = load_dataset(&p, "y", &covs(&["x"]), &GlmFamily::BernoulliLogit).unwrap();
        assert_eq!((ds.n(), ds.p()), (3, 2));
        assert_eq!(ds.x()[(1, 0)], 1.0);
        assert_eq!(ds.x()[(1, 1)], -0.5);
    }

    #[test]
    fn blank_cell_reports_row() {
        let d = TempDir::new().unwrap();
        let p = write(&d, "a.csv", "y,x\n0,1.5\n1,\n1,2.0\n");
        match load_dataset(&p, "y", &covs(&["x"]), &GlmFamily::BernoulliLogit) {
            Err(IoError::MissingValue { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_column_and_bad_response() {
        let d = TempDir::new().unwrap();
        let p = write(&d, "a.csv", "y,x\n0,1.5\n2,1.0\n1,2.0\n");
        assert!(matches!(
            load_dataset(&p, "y", &covs(&["z"]), &GlmFamily::BernoulliLogit),
            Err(IoError::MissingColumn { .. })
        ));
        assert!(matches!(
            load_dataset(&p, "y", &covs(&["x"]), &GlmFamily::BernoulliLogit),
            Err(IoError::InvalidResponse { row: 2, .. })
        ));
    }

    #[test]
    fn constant_covariate_rank_deficient() {
        let d = TempDir::new().unwrap();
        let p = write(&d, "a.csv", "y,x,c\n0.1,1.5,3\n1.2,-0.5,3\n0.7,2.0,3\n2.2,0.1,3\n");
        // Oracle: pivoted QR of [1, x, c] has a zero trailing diagonal.
        let x = Matrix::from_row_slice(4, 3, &[1.0, 1.5, 3.0, 1.0, -0.5, 3.0, 1.0, 2.0, 3.0, 1.0, 0.1, 3.0]);
        let qr = x.col_piv_qr();
        let r = qr.r();
        assert!(r[(2, 2)].abs() < 1e-12 * r[(0, 0)].abs());
        assert!(matches!(
            load_dataset(&p, "y", &covs(&["x", "c"]), &GlmFamily::NormalUnknownVariance),
            Err(IoError::RankDeficientDesign { .. })
        ));
    }

    #[test]
    fn covariate_order_permutes_columns() {
        let d = TempDir::new().unwrap();
        let p = write(&d, "a.csv", "y,a,b\n0.1,1,5\n1.2,2,3\n0.7,3,8\n2.2,4,1\n");
        let ab = load_dataset(&p, "y", &covs(&["a", "b"]), &GlmFamily::NormalUnknownVariance).unwrap();
        let ba = load_dataset(&p, "y", &covs(&["b", "a"]), &GlmFamily::NormalUnknownVariance).unwrap();
        assert_eq!(ab.x().column(1), ba.x().column(2));
        assert_eq!(ab.x().column(2), ba.x().column(1));
    }

    fn summary(names: &[&str], dic: Option<f64>) -> PosteriorSummary {
        let k = names.len();
        PosteriorSummary {
            names: names.iter().map(|s| s.to_string()).collect(),
            mean: (0..k).map(|i| 0.1 * i as f64 + 1.0 / 3.0).collect(),
            sd: vec![0.2; k],
            level: 0.95,
            hpd_lower: vec![-1.0; k],
            hpd_upper: vec![std::f64::consts::PI; k],
            dic,
            dic_mcse: dic.map(|_| 0.123456789012345),
            acceptance_rate: 0.3,
            max_constraint_residual: None,
        }
    }

    #[test]
    fn empty_results_header_only() {
        let d = TempDir::new().unwrap();
        let prov = Provenance::new(&"cfg", 1);
        write_results(&[], d.path(), &prov).unwrap();
        let text = fs::read_to_string(d.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines, vec!["prior,hyper,dic"]);
    }

    #[test]
    fn single_cell_round_trip() {
        let d = TempDir::new().unwrap();
        let prov = Provenance::new(&serde_json::json!({"a": 1}), 42);
        let cell = CellResult::new(PriorKind::StraPp { a0: 0.5 }, summary(&["beta1[0]", "beta1[1]"], Some(2815.3412345678)));
        let files = write_results(std::slice::from_ref(&cell), d.path(), &prov).unwrap();
        let json: Vec<_> = files.iter().filter(|f| f.extension().unwrap() == "json").collect();
        assert_eq!(json.len(), 1);
        let back = read_cell(json[0]).unwrap();
        assert_eq!(back.cell, cell);
        assert_eq!(back.provenance.seed, 42);
        let text = fs::read_to_string(d.path().join("summary.csv")).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 2);
        assert_eq!(read_provenance(&d.path().join("summary.csv")).unwrap().unwrap(), prov);
    }

    #[test]
    fn summary_rows_sorted_by_dic() {
        let d = TempDir::new().unwrap();
        let cells = vec![
            CellResult::new(PriorKind::PowerPrior { a0: 0.5 }, summary(&["b"], Some(10.0))),
            CellResult::new(PriorKind::UniformImproper, summary(&["b"], None)),
            CellResult::new(PriorKind::StraPp { a0: 0.5 }, summary(&["b"], Some(3.0))),
        ];
        write_results(&cells, d.path(), &Provenance::new(&(), 0)).unwrap();
        let text = fs::read_to_string(d.path().join("summary.csv")).unwrap();
        let priors: Vec<&str> = text.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(priors, vec!["straPP", "PP", "UIP"]);
    }

    #[test]
    fn config_parses_and_validates() {
        let text = r#"
            covariates = ["age", "sex"]
            priors = [{ kind = "strapp", a0 = 0.5 }, { kind = "gen-strapp", a0 = 1.0, omega0 = 2.0 }]
            [historical]
            csv = "h.csv"
            response = "fall"
            family = "bernoulli"
            [current]
            csv = "c.csv"
            response = "score"
            family = "normal"
            [mcmc]
            draws = 2000
            seed = 9
        "#;
        let cfg = AnalysisConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.current.family, GlmFamily::NormalUnknownVariance);
        assert_eq!(cfg.mcmc.burn_in, 5000);
        assert_eq!(cfg.borrowed(), vec![1, 2]);
        assert_eq!(cfg.coefficient_names()[0], "(Intercept)");
        let dup = text.replace("[\"age\", \"sex\"]", "[\"age\", \"fall\"]");
        assert!(AnalysisConfig::from_toml_str(&dup).is_err());
    }

    #[test]
    fn full_config_with_grid() {
        let text = r#"
            covariates = ["age", "sex", "dose"]
            priors = [{ kind = "uip" }, { kind = "pp", a0 = 0.3 }, { kind = "com", b0 = 4.0 }, { kind = "gs", a0 = 1.0, omega0 = 2.0 }]
            dispersion_prior = { shape = 0.01, rate = 0.01 }
            [historical]
            csv = "h.csv"
            response = "fall"
            family = "bernoulli"
            [current]
            csv = "c.csv"
            response = "score"
            family = "normal-known:2"
            [grid]
            a0 = [0.0, 0.5, 1.0]
            omega0 = [0.0, 1.0]
        "#;
        let cfg = AnalysisConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.priors[3], PriorKind::GenStraPp { a0: 1.0, omega0: 2.0 });
        assert_eq!(cfg.current.family, GlmFamily::NormalKnownVariance { sigma: 2.0 });
        assert_eq!(cfg.dispersion_prior, Some(GammaPrior { shape: 0.01, rate: 0.01 }));
        assert_eq!(cfg.grid.unwrap().a0.len(), 3);
        let bad = text.replace("omega0 = [0.0, 1.0]", "omega0 = [-1.0]");
        assert!(AnalysisConfig::from_toml_str(&bad).is_err());
    }

    proptest! {
        #[test]
        fn metrics_csv_lossless(vals in proptest::collection::vec(-1e6f64..1e6, 6), n_fail in 0usize..10) {
            let row = MetricsRow {
                scenario: "normal-normal".into(),
                prior: "GS".into(),
                hyper: "omega0=1".into(),
                x: vals[0],
                avg_log_var: vals[1] / 3.0,
                bias: vals[2] * 1e-9,
                log_mse: vals[3].sin(),
                coverage: (vals[4].abs() / 1e6).min(1.0),
                n_fail,
            };
            let rows = vec![row.clone(), MetricsRow { bias: f64::NAN, ..row }];
            let mut buf = Vec::new();
            write_metrics_csv(&rows, &mut buf, Some(&Provenance::new(&"x", 3))).unwrap();
            let back = read_metrics_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(&back[0], &rows[0]);
            prop_assert!(back[1].bias.is_nan());
            prop_assert_eq!(back[1].x.to_bits(), rows[1].x.to_bits());
        }
    }
}
