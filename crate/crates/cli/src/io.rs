//! CSV ingestion and tidy CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::CliError;

/// A numeric table with optional row labels.
#[derive(Debug)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    pub values: DMatrix<f64>,
}

fn input_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}:{line}: {msg}", path.display()))
}

/// Reads a header row and numeric cells. When the first header cell is
/// empty or `site`, the first column holds row labels.
pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> =
        rdr.headers().map_err(|e| input_err(path, 1, e))?.iter().map(|s| s.to_string()).collect();
    if header.is_empty() {
        return Err(input_err(path, 1, "empty header"));
    }
    let labelled = header[0].is_empty() || header[0].eq_ignore_ascii_case("site");
    let columns: Vec<String> = if labelled { header[1..].to_vec() } else { header.clone() };
    if columns.is_empty() {
        return Err(input_err(path, 1, "no data columns"));
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(i + 2);
            input_err(path, line, e)
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        if rec.len() != header.len() {
            return Err(input_err(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let skip = usize::from(labelled);
        rows.push(if labelled { rec[0].to_string() } else { format!("{}", i + 1) });
        for (j, cell) in rec.iter().skip(skip).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| input_err(path, line, format!("column '{}': '{cell}' is not a number", columns[j])))?;
            if !v.is_finite() {
                return Err(input_err(path, line, format!("column '{}': non-finite value", columns[j])));
            }
            cells.push(v);
        }
    }
    if rows.is_empty() {
        return Err(input_err(path, 2, "no data rows"));
    }
    let values = DMatrix::from_row_slice(rows.len(), columns.len(), &cells);
    Ok(Table { columns, rows, values })
}

/// Count table: every cell must be a non-negative integer.
pub fn read_counts(path: &Path) -> Result<Table, CliError> {
    let t = read_table(path)?;
    for i in 0..t.values.nrows() {
        for j in 0..t.values.ncols() {
            let v = t.values[(i, j)];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(input_err(
                    path,
                    i + 2,
                    format!("column '{}': count {v} is not a non-negative integer", t.columns[j]),
                ));
            }
        }
    }
    Ok(t)
}

/// Cliques file: one clique per line, comma-separated species names.
pub fn read_cliques(path: &Path, species: &[String]) -> Result<Vec<Vec<usize>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut clique = Vec::new();
        for name in line.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let j = species
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| input_err(path, i + 1, format!("unknown species '{name}'")))?;
            if !clique.contains(&j) {
                clique.push(j);
            }
        }
        clique.sort_unstable();
        out.push(clique);
    }
    if out.is_empty() {
        return Err(input_err(path, 1, "no cliques"));
    }
    Ok(out)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// CSV writer whose first line is `# schema: nestor.<name>.v1`.
pub struct TidyWriter {
    inner: csv::Writer<BufWriter<File>>,
    path: PathBuf,
}

impl TidyWriter {
    pub fn create(dir: &Path, file: &str, schema: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(file);
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "# schema: nestor.{schema}.v1")?;
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
        inner.write_record(header).map_err(CliError::from_csv)?;
        Ok(TidyWriter { inner, path })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(CliError::from_csv)
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.inner.flush()?;
        Ok(self.path)
    }
}

/// Shortest round-trip representation, empty for missing values.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Writes a numeric matrix with a header and optional row labels.
pub fn write_matrix(path: &Path, columns: &[String], rows: Option<&[String]>, m: &DMatrix<f64>) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(CliError::from_csv)?;
    let mut header: Vec<String> = Vec::new();
    if rows.is_some() {
        header.push("site".into());
    }
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(CliError::from_csv)?;
    for i in 0..m.nrows() {
        let mut rec: Vec<String> = Vec::new();
        if let Some(r) = rows {
            rec.push(r[i].clone());
        }
        rec.extend((0..m.ncols()).map(|j| fmt(m[(i, j)])));
        w.write_record(&rec).map_err(CliError::from_csv)?;
    }
    w.flush()?;
    Ok(())
}
