//! CSV input/output and atomic file writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::estimator::Dataset;
use crate::family::GlmFamily;

/// A rectangular numeric table with optional header row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub headers: Option<Vec<String>>,
    pub rows: DMatrix<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> GhiveError {
    GhiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, row: usize, column: usize, message: impl Into<String>) -> GhiveError {
    GhiveError::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message: message.into(),
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Parses comma-separated text. The first record is a header when any of
/// its cells is non-numeric. Row and column numbers in errors are 1-based
/// file positions.
pub fn parse_csv(text: &str, path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut headers = None;
    let mut width = None;
    let mut data = Vec::new();
    let mut nrows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| parse_err(path, line, 0, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if idx == 0 && record.iter().any(|c| parse_cell(c).is_none()) {
            headers = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(parse_err(
                path,
                line,
                record.len().min(w) + 1,
                format!("expected {w} fields, found {}", record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let v =
                parse_cell(cell).ok_or_else(|| parse_err(path, line, col + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, col + 1, format!("not finite: {cell:?}")));
            }
            data.push(v);
        }
        nrows += 1;
    }
    let ncols = width.unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(parse_err(path, 0, 0, "no numeric rows"));
    }
    Ok(CsvTable {
        headers,
        rows: DMatrix::from_row_slice(nrows, ncols, &data),
    })
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_csv(&text, path)
}

/// A vector stored as one row or one column.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let t = read_csv(path)?;
    let (r, c) = t.rows.shape();
    if r != 1 && c != 1 {
        return Err(GhiveError::Dimension(format!(
            "{}: expected a single row or column, found {r}x{c}",
            path.display()
        )));
    }
    Ok(DVector::from_iterator(r * c, t.rows.iter().copied()))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// 17 significant digits; parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn matrix_to_csv(m: &DMatrix<f64>, headers: Option<&[String]>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(h) = headers {
        if h.len() != m.ncols() {
            return Err(GhiveError::Dimension(format!(
                "{} headers for {} columns",
                h.len(),
                m.ncols()
            )));
        }
        w.write_record(h).map_err(csv_err)?;
    }
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format_f64(*v)))
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| GhiveError::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub(crate) fn csv_err(e: csv::Error) -> GhiveError {
    GhiveError::InvalidInput(format!("csv: {e}"))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, headers: Option<&[String]>) -> Result<()> {
    atomic_write(path, matrix_to_csv(m, headers)?.as_bytes())
}

/// Column transformations applied to `X` on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub centered: bool,
    pub means: Vec<f64>,
    /// Sample standard deviations used for scaling; 1 for constant columns.
    pub scales: Vec<f64>,
    /// Columns left unscaled because their variance is zero.
    pub constant_columns: Vec<usize>,
}

/// Centres each column and scales it to unit sample variance.
pub fn standardize(x: &mut DMatrix<f64>) -> Preprocessing {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    let mut constant_columns = Vec::new();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (n - 1.0)).sqrt();
        let scale = if sd > 0.0 {
            col /= sd;
            sd
        } else {
            constant_columns.push(j);
            1.0
        };
        means.push(mean);
        scales.push(scale);
    }
    if !constant_columns.is_empty() {
        log::warn!("columns {constant_columns:?} of X are constant and were only centred");
    }
    Preprocessing {
        centered: true,
        means,
        scales,
        constant_columns,
    }
}

/// Reads `X` (n x p) and `Y` (n x M) and checks `Y` against `family`.
pub fn load_dataset(
    x_path: &Path,
    y_path: &Path,
    family: GlmFamily,
    center: bool,
) -> Result<(Dataset, Option<Preprocessing>)> {
    let mut x = read_csv(x_path)?.rows;
    let y = read_csv(y_path)?.rows;
    if x.nrows() != y.nrows() {
        return Err(GhiveError::Dimension(format!(
            "{} has {} rows but {} has {}",
            x_path.display(),
            x.nrows(),
            y_path.display(),
            y.nrows()
        )));
    }
    for m in 0..y.ncols() {
        for i in 0..y.nrows() {
            if let Err(e) = family.check_response(y[(i, m)]) {
                return Err(GhiveError::InvalidInput(format!(
                    "{}: row {}, column {}: {e}",
                    y_path.display(),
                    i + 1,
                    m + 1
                )));
            }
        }
    }
    let prep = if center { Some(standardize(&mut x)) } else { None };
    Ok((Dataset::new(x, y)?, prep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.csv")
    }

    #[test]
    fn header_detection() {
        let t = parse_csv("a,b\n1,2\n3,4\n", p()).unwrap();
        assert_eq!(t.headers, Some(vec!["a".to_string(), "b".to_string()]));
        assert_eq!(t.rows, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let t = parse_csv("1,2\n3,4", p()).unwrap();
        assert!(t.headers.is_none());
        assert_eq!(t.rows.nrows(), 2);
    }

    #[test]
    fn positioned_errors() {
        match parse_csv("1,2\n3,x\n", p()) {
            Err(GhiveError::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n3\n", p()) {
            Err(GhiveError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        match parse_csv("h1,h2\n1,2\n3,4,5\n", p()) {
            Err(GhiveError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("1,nan\n", p()).is_err());
        assert!(parse_csv("", p()).is_err());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 2.5e17, std::f64::consts::PI, -0.0]);
        let text = matrix_to_csv(&m, None).unwrap();
        let back = parse_csv(&text, p()).unwrap().rows;
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn centring_three_rows() {
        let mut x = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 4.0, 60.0]);
        let prep = standardize(&mut x);
        for j in 0..2 {
            assert!(x.column(j).sum().abs() < 1e-12);
            assert!((x.column(j).norm_squared() / 2.0 - 1.0).abs() < 1e-12);
        }
        assert!(prep.constant_columns.is_empty());
        let mut c = DMatrix::from_element(3, 1, 5.0);
        let prep = standardize(&mut c);
        assert_eq!(prep.constant_columns, vec![0]);
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn load_validates_family_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let xp = dir.path().join("x.csv");
        let yp = dir.path().join("y.csv");
        std::fs::write(&xp, "x1,x2\n1,2\n3,5\n4,4\n").unwrap();
        std::fs::write(&yp, "0\n2\n1\n").unwrap();
        let err = load_dataset(&xp, &yp, GlmFamily::Bernoulli, false).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        let (d, prep) = load_dataset(&xp, &yp, GlmFamily::Poisson, true).unwrap();
        assert!(prep.is_some());
        assert!(d.x().column(0).sum().abs() < 1e-12);
        std::fs::write(&yp, "0\n1\n").unwrap();
        assert!(matches!(
            load_dataset(&xp, &yp, GlmFamily::Gaussian, false),
            Err(GhiveError::Dimension(_))
        ));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("out.txt");
        atomic_write(&f, b"one").unwrap();
        atomic_write(&f, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&f).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let v = dir.path().join("v.csv");
        std::fs::write(&v, "1,2,3\n").unwrap();
        assert_eq!(read_vector(&v).unwrap().len(), 3);
    }
}
