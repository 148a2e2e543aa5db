//! Text formats: COO tensors and factor matrices.
//!
//! A COO file has one observed entry per line: N integer indices followed by
//! the value, separated by whitespace. Blank lines and lines starting with
//! `#` are ignored. Indices are 1-based unless the spec says otherwise.
//!
//! A model is a directory with one `factor_<n>.txt` per mode (n from 1):
//! a header line `I_n K`, then I_n lines of K values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{FactorMatrix, FactorModel, TensorEntry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IndexBase {
    Zero,
    #[default]
    One,
}

impl IndexBase {
    pub fn offset(self) -> usize {
        match self {
            IndexBase::Zero => 0,
            IndexBase::One => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooFileSpec {
    pub order: usize,
    pub index_base: IndexBase,
    /// Declared mode lengths; inferred from the largest index when absent.
    pub dims: Option<Vec<usize>>,
}

impl CooFileSpec {
    pub fn new(order: usize) -> Self {
        CooFileSpec {
            order,
            index_base: IndexBase::One,
            dims: None,
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a COO file; returns 0-based entries and the mode lengths.
pub fn read_coo(path: &Path, spec: &CooFileSpec) -> Result<(Vec<TensorEntry>, Vec<usize>)> {
    let file = fs::File::open(path)?;
    read_coo_from(BufReader::new(file), path, spec)
}

pub fn read_coo_from(reader: impl BufRead, path: &Path, spec: &CooFileSpec) -> Result<(Vec<TensorEntry>, Vec<usize>)> {
    let order = spec.order;
    if order == 0 {
        return Err(Error::param("tensor order must be at least 1"));
    }
    if let Some(d) = &spec.dims {
        if d.len() != order {
            return Err(Error::param("declared mode lengths do not match the order"));
        }
    }
    let base = spec.index_base.offset();
    let mut entries = Vec::new();
    let mut max_index = vec![0usize; order];
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != order + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", order + 1, fields.len()),
            ));
        }
        let mut indices = Vec::with_capacity(order);
        for (n, f) in fields[..order].iter().enumerate() {
            let raw: usize = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("index '{f}' in mode {} is not an integer", n + 1)))?;
            if raw < base {
                return Err(parse_err(path, lineno, format!("index {raw} below base {base} in mode {}", n + 1)));
            }
            let i = raw - base;
            if let Some(d) = &spec.dims {
                if i >= d[n] {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("index {raw} exceeds declared length {} of mode {}", d[n], n + 1),
                    ));
                }
            }
            max_index[n] = max_index[n].max(i + 1);
            indices.push(i);
        }
        let value: f64 = fields[order]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("value '{}' is not a number", fields[order])))?;
        if !value.is_finite() {
            return Err(parse_err(path, lineno, "value is not finite"));
        }
        entries.push(TensorEntry::new(indices, value));
    }
    let dims = spec.dims.clone().unwrap_or(max_index);
    Ok((entries, dims))
}

/// Order of a COO file, taken from the field count of its first data line.
pub fn sniff_order(path: &Path) -> Result<Option<usize>> {
    let reader = BufReader::new(fs::File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = trimmed.split_whitespace().count();
        return Ok((fields >= 2).then(|| fields - 1));
    }
    Ok(None)
}

/// Writes entries with the given index base. Values use the shortest
/// representation that parses back to the same f64.
pub fn write_coo<'a>(path: &Path, entries: impl IntoIterator<Item = &'a TensorEntry>, base: IndexBase) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let offset = base.offset();
    for e in entries {
        for i in &e.indices {
            write!(w, "{} ", i + offset)?;
        }
        writeln!(w, "{}", e.value)?;
    }
    w.flush()?;
    Ok(())
}

pub fn factor_path(dir: &Path, mode: usize) -> PathBuf {
    dir.join(format!("factor_{}.txt", mode + 1))
}

pub fn save_model(dir: &Path, model: &FactorModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (n, f) in model.factors().iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(factor_path(dir, n))?);
        writeln!(w, "{} {}", f.rows(), f.cols())?;
        for i in 0..f.rows() {
            let row: Vec<String> = f.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Loads `factor_1.txt`, `factor_2.txt`, ... until the first missing file.
pub fn load_model(dir: &Path, lambda: f64) -> Result<FactorModel> {
    let mut factors = Vec::new();
    loop {
        let path = factor_path(dir, factors.len());
        if !path.exists() {
            break;
        }
        factors.push(load_factor(&path)?);
    }
    if factors.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no factor files in {}", dir.display()),
        )));
    }
    FactorModel::from_factors(factors, lambda)
}

fn load_factor(path: &Path) -> Result<FactorMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|f| f.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, 1, "header must be two integers"))?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(path, 1, "header must be two integers"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (lineno, line) in lines {
        let before = data.len();
        for f in line.split_whitespace() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, lineno + 1, format!("'{f}' is not a number")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(path, lineno + 1, format!("expected {cols} values")));
        }
    }
    if data.len() != rows * cols {
        return Err(parse_err(path, 0, format!("expected {rows} rows")));
    }
    FactorMatrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_str(text: &str, spec: &CooFileSpec) -> Result<(Vec<TensorEntry>, Vec<usize>)> {
        read_coo_from(text.as_bytes(), Path::new("mem"), spec)
    }

    #[test]
    fn reads_one_based_pairs() {
        let (entries, dims) = read_str("1 1 5.0\n2 2 3.0", &CooFileSpec::new(2)).unwrap();
        assert_eq!(dims, vec![2, 2]);
        assert_eq!(entries, vec![TensorEntry::new(vec![0, 0], 5.0), TensorEntry::new(vec![1, 1], 3.0)]);
    }

    #[test]
    fn empty_input() {
        let (entries, dims) = read_str("", &CooFileSpec::new(3)).unwrap();
        assert!(entries.is_empty());
        assert_eq!(dims, vec![0, 0, 0]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = read_str("1 1 1.0\n1 2\n", &CooFileSpec::new(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_str("# c\n0 1 1.0\n", &CooFileSpec::new(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_str("1 x 1.0\n", &CooFileSpec::new(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = read_str("1 1 nan\n", &CooFileSpec::new(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let spec = CooFileSpec {
            dims: Some(vec![2, 2]),
            ..CooFileSpec::new(2)
        };
        assert!(read_str("3 1 1.0\n", &spec).is_err());
    }

    #[test]
    fn order_from_first_data_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.coo");
        fs::write(&path, "# header\n\n1 2 3 0.5\n").unwrap();
        assert_eq!(sniff_order(&path).unwrap(), Some(3));
        fs::write(&path, "").unwrap();
        assert_eq!(sniff_order(&path).unwrap(), None);
    }

    #[test]
    fn zero_based_input() {
        let spec = CooFileSpec {
            index_base: IndexBase::Zero,
            ..CooFileSpec::new(2)
        };
        let (entries, dims) = read_str("0 3 1.5\n", &spec).unwrap();
        assert_eq!(entries[0].indices, vec![0, 3]);
        assert_eq!(dims, vec![1, 4]);
    }

    #[test]
    fn coo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.coo");
        let entries = vec![
            TensorEntry::new(vec![0, 4, 2], 0.1 + 0.2),
            TensorEntry::new(vec![3, 0, 1], -1e-300),
            TensorEntry::new(vec![1, 1, 1], 12345.678901234567),
        ];
        for base in [IndexBase::Zero, IndexBase::One] {
            write_coo(&path, &entries, base).unwrap();
            let spec = CooFileSpec {
                index_base: base,
                ..CooFileSpec::new(3)
            };
            let (back, dims) = read_coo(&path, &spec).unwrap();
            assert_eq!(back, entries);
            assert_eq!(dims, vec![4, 5, 3]);
        }
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = FactorMatrix::from_vec(2, 2, vec![0.1, -2.5, 1.0 / 3.0, 7e-12]).unwrap();
        let b = FactorMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let model = FactorModel::from_factors(vec![a, b], 0.5).unwrap();
        save_model(dir.path(), &model).unwrap();
        let header = fs::read_to_string(factor_path(dir.path(), 1)).unwrap();
        assert!(header.starts_with("3 2\n1 2\n"));
        assert_eq!(load_model(dir.path(), 0.5).unwrap(), model);
        assert!(load_model(&dir.path().join("missing"), 0.0).is_err());
    }
}
