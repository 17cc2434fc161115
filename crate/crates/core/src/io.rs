//! CSV matrices, JSON configuration and model files, and report tables.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GppcaError, Result};
use crate::fit::{FitConfig, FitReport, FittedModel};
use crate::kernels::InputGrid;
use crate::mean::{Covariates, MeanBasis, MeanDesign};
use crate::model::{HyperParams, LoadingMatrix, OutputMatrix};
use crate::sim::{ExperimentReport, Scenario};

/// A parsed numeric table with an optional header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub values: DMatrix<f64>,
}

/// 17 significant digits: enough to reproduce every `f64` exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(line: u64, message: impl Into<String>) -> GppcaError {
    GppcaError::Parse {
        line: line as usize,
        message: message.into(),
    }
}

/// Parses a row-major numeric CSV. A first row containing any non-numeric
/// field is taken as a header.
pub fn parse_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if header.is_none() && rows.is_empty() => {
                header = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
                width = Some(rec.len());
                continue;
            }
            Err(_) => {
                let bad = rec.iter().find(|f| f.parse::<f64>().is_err()).unwrap_or("");
                return Err(parse_err(line, format!("not a number: {bad:?}")));
            }
        };
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(parse_err(line, format!("non-finite value {v}")));
        }
        match width {
            Some(w) if w != row.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", row.len())));
            }
            None => width = Some(row.len()),
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GppcaError::Parse {
            line: 0,
            message: "file contains no numeric rows (empty matrix)".into(),
        });
    }
    let ncols = rows[0].len();
    let values = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    Ok(Table { header, values })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_table(file)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    Ok(read_table(path)?.values)
}

/// Writes a matrix as CSV with 17 significant digits per value.
pub fn write_matrix<W: Write>(out: W, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| GppcaError::Io(std::io::Error::other(e.to_string()));
    if let Some(h) = header {
        w.write_record(h).map_err(to_io)?;
    }
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| format_float(m[(i, j)])))
            .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    write_matrix(File::create(path)?, m, header)
}

/// Reads an `n×p` input table; without a file the regular grid `1..n` is used.
pub fn read_inputs(path: Option<&Path>, n: usize) -> Result<InputGrid> {
    match path {
        None => Ok(InputGrid::regular(n)),
        Some(p) => {
            let m = read_matrix_csv(p)?;
            if m.nrows() != n {
                return Err(GppcaError::arg(format!(
                    "input file has {} rows for {n} data columns",
                    m.nrows()
                )));
            }
            InputGrid::new(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }
}

/// Reads a covariate table whose header names the columns.
pub fn read_covariates(path: &Path) -> Result<Covariates> {
    let t = read_table(path)?;
    let names = t
        .header
        .ok_or_else(|| GppcaError::arg("covariate file needs a header row naming its columns"))?;
    Ok(Covariates {
        names,
        values: t.values,
    })
}

pub fn read_config(path: &Path) -> Result<FitConfig> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// A built-in scenario name or a path to a scenario JSON file.
pub fn resolve_scenario(name_or_path: &str) -> Result<Scenario> {
    let p = Path::new(name_or_path);
    if p.is_file() {
        let text = std::fs::read_to_string(p)?;
        let s: Scenario = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    } else {
        Scenario::builtin(name_or_path)
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(GppcaError::arg(format!("ragged {what} matrix in model file")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

const MODEL_FORMAT: &str = "gppca-model/1";

/// On-disk form of a [`FittedModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub hyper: HyperParams,
    /// `k×d`, one inner vector per output.
    pub loadings: Vec<Vec<f64>>,
    /// `n×p` training inputs.
    pub inputs: Vec<Vec<f64>>,
    /// `k×n` training outputs.
    pub data: Vec<Vec<f64>>,
    pub mean_basis: MeanBasis,
    /// `n×q` design matrix.
    pub design: Vec<Vec<f64>>,
    pub report: FitReport,
}

impl ModelFile {
    pub fn from_model(model: &FittedModel) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            hyper: model.hyper().clone(),
            loadings: rows_of(model.loadings().values()),
            inputs: model.data().grid().points().to_vec(),
            data: rows_of(model.data().values()),
            mean_basis: model.design().basis().clone(),
            design: rows_of(model.design().h()),
            report: model.report().clone(),
        }
    }

    pub fn into_model(self) -> Result<FittedModel> {
        if self.format != MODEL_FORMAT {
            return Err(GppcaError::arg(format!(
                "unsupported model format {:?} (expected {MODEL_FORMAT:?})",
                self.format
            )));
        }
        let d = self.hyper.taus.len();
        let n = self.inputs.len();
        let grid = InputGrid::new(self.inputs)?;
        let data = OutputMatrix::new(from_rows(&self.data, n, "data")?, grid)?;
        let loadings = LoadingMatrix::new(from_rows(&self.loadings, d, "loadings")?)?;
        let q = self.design.first().map_or(0, Vec::len);
        let h = if self.design.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            from_rows(&self.design, q, "design")?
        };
        let design = MeanDesign::from_matrix(self.mean_basis, h)?;
        FittedModel::from_parts(data, loadings, self.hyper, design, self.report)
    }
}

pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&ModelFile::from_model(model))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    file.into_model()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one summary row per method.
pub fn write_summary<W: Write>(out: W, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| GppcaError::Io(std::io::Error::other(e.to_string()));
    w.write_record([
        "scenario",
        "method",
        "k",
        "d",
        "n",
        "sigma0_sq",
        "tau",
        "replicates",
        "failures",
        "median_angle",
        "mean_angle",
        "avg_mse",
        "median_mse",
    ])
    .map_err(to_io)?;
    let s = &report.scenario;
    for m in &report.summaries {
        w.write_record([
            s.name.clone(),
            m.method.to_string(),
            s.k.to_string(),
            s.d.to_string(),
            s.n.to_string(),
            s.sigma0_sq().to_string(),
            s.tau().to_string(),
            m.replicates.to_string(),
            m.failures.to_string(),
            m.median_angle.to_string(),
            m.mean_angle.to_string(),
            m.avg_mse.to_string(),
            m.median_mse.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per method and replicate.
pub fn write_replicates<W: Write>(out: W, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| GppcaError::Io(std::io::Error::other(e.to_string()));
    w.write_record(["replicate", "method", "angle", "mse", "sigma0_sq", "error"])
        .map_err(to_io)?;
    for r in &report.records {
        w.write_record([
            r.replicate.to_string(),
            r.method.to_string(),
            opt(r.angle),
            opt(r.mse),
            opt(r.sigma0_sq),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let m = DMatrix::from_row_slice(3, 4, &[
            0.1, -2.5e-300, 1.0 / 3.0, 6.02e23,
            f64::MIN_POSITIVE, -0.0, 7.0, std::f64::consts::PI,
            1e-17, 123_456_789.123_456_79, -1.0, 2.0_f64.sqrt(),
        ]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, None).unwrap();
        let back = parse_table(buf.as_slice()).unwrap().values;
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_detected() {
        let t = parse_table("a,b\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!(t.header.unwrap(), vec!["a", "b"]);
        assert_eq!(t.values.shape(), (2, 2));
    }

    #[test]
    fn header_only_is_error() {
        assert!(matches!(
            parse_table("a,b\n".as_bytes()),
            Err(GppcaError::Parse { .. })
        ));
    }

    #[test]
    fn ragged_rows_report_line() {
        match parse_table("1,2\n3,4\n5\n".as_bytes()) {
            Err(GppcaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        match parse_table("1,2\nNaN,4\n".as_bytes()) {
            Err(GppcaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_table("inf\n".as_bytes()).is_err());
    }

    #[test]
    fn garbage_after_data_is_error() {
        match parse_table("1,2\n3,x\n".as_bytes()) {
            Err(GppcaError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("\"x\""));
            }
            other => panic!("{other:?}"),
        }
    }
}
