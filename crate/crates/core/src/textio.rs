//! Plain-text persistence helpers shared by model and table formats.
//!
//! Reals are written in shortest round-trip exponent form so every value
//! reloads bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn fmt_real(v: f64) -> String {
    format!("{v:e}")
}

pub fn parse_real(token: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::parse(path, line, format!("not a number: {token:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value {token:?}")));
    }
    Ok(v)
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let mut tmp = PathBuf::from(path);
    tmp.set_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq)]
enum Entry {
    Fields(Vec<String>),
    Matrix(DMatrix<f64>),
}

/// Tagged sequence of named token lists and dense matrices.
///
/// ```text
/// karyogate-bundle <kind> 1
/// field <name> <token>...
/// matrix <name> <rows> <cols>
/// <one line of cols reals per row>
/// end
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    kind: String,
    entries: Vec<(String, Entry)>,
}

const MAGIC: &str = "karyogate-bundle";
const VERSION: &str = "1";

impl Bundle {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn push_field<T: ToString>(&mut self, name: &str, tokens: impl IntoIterator<Item = T>) {
        self.entries.push((
            name.to_string(),
            Entry::Fields(tokens.into_iter().map(|t| t.to_string()).collect()),
        ));
    }

    pub fn push_reals(&mut self, name: &str, values: &[f64]) {
        self.push_field(name, values.iter().map(|&v| fmt_real(v)));
    }

    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.entries.push((name.to_string(), Entry::Matrix(m.clone())));
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {} {VERSION}\n", self.kind);
        for (name, entry) in &self.entries {
            match entry {
                Entry::Fields(tokens) => {
                    out.push_str("field ");
                    out.push_str(name);
                    for t in tokens {
                        out.push(' ');
                        out.push_str(t);
                    }
                    out.push('\n');
                }
                Entry::Matrix(m) => {
                    out.push_str(&format!("matrix {name} {} {}\n", m.nrows(), m.ncols()));
                    for r in 0..m.nrows() {
                        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_real(m[(r, c)])).collect();
                        out.push_str(&row.join(" "));
                        out.push('\n');
                    }
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        Self::parse(&read_text(path)?, path, expected_kind)
    }

    pub fn parse(text: &str, path: &Path, expected_kind: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty bundle"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 || head[0] != MAGIC || head[2] != VERSION {
            return Err(Error::parse(path, 1, format!("bad bundle header {header:?}")));
        }
        if head[1] != expected_kind {
            return Err(Error::parse(
                path,
                1,
                format!("bundle kind {} where {expected_kind} was expected", head[1]),
            ));
        }
        let mut bundle = Bundle::new(head[1]);
        let mut ended = false;
        while let Some((no, line)) = lines.next() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                [] => continue,
                ["end"] => {
                    ended = true;
                    break;
                }
                ["field", name, rest @ ..] => bundle.push_field(name, rest.iter().copied()),
                ["matrix", name, rows, cols] => {
                    let parse_dim = |t: &str| {
                        t.parse::<usize>()
                            .map_err(|_| Error::parse(path, no, format!("bad dimension {t:?}")))
                    };
                    let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rno, row) = lines
                            .next()
                            .ok_or_else(|| Error::parse(path, no, "matrix truncated"))?;
                        let before = data.len();
                        for t in row.split_whitespace() {
                            data.push(parse_real(t, path, rno)?);
                        }
                        if data.len() - before != cols {
                            return Err(Error::parse(
                                path,
                                rno,
                                format!("expected {cols} values, found {}", data.len() - before),
                            ));
                        }
                    }
                    bundle
                        .entries
                        .push((name.to_string(), Entry::Matrix(DMatrix::from_row_slice(rows, cols, &data))));
                }
                _ => return Err(Error::parse(path, no, format!("unrecognized line {line:?}"))),
            }
        }
        if !ended {
            return Err(Error::parse(path, text.lines().count(), "missing end marker"));
        }
        Ok(bundle)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::InvalidInput(format!("{} bundle lacks {name}", self.kind)))
    }

    pub fn field(&self, name: &str) -> Result<&[String]> {
        match self.entry(name)? {
            Entry::Fields(t) => Ok(t),
            Entry::Matrix(_) => Err(Error::InvalidInput(format!("{name} is a matrix"))),
        }
    }

    pub fn field_parsed<T: std::str::FromStr>(&self, name: &str) -> Result<Vec<T>> {
        self.field(name)?
            .iter()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::InvalidInput(format!("{} bundle: bad {name} token {t:?}", self.kind)))
            })
            .collect()
    }

    pub fn scalar<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let mut v = self.field_parsed::<T>(name)?;
        if v.len() != 1 {
            return Err(Error::InvalidInput(format!("{name} must hold one value")));
        }
        Ok(v.remove(0))
    }

    pub fn reals(&self, name: &str) -> Result<Vec<f64>> {
        let v: Vec<f64> = self.field_parsed(name)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} holds non-finite values")));
        }
        Ok(v)
    }

    pub fn matrix(&self, name: &str) -> Result<&DMatrix<f64>> {
        match self.entry(name)? {
            Entry::Matrix(m) => Ok(m),
            Entry::Fields(_) => Err(Error::InvalidInput(format!("{name} is not a matrix"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trips_bit_exactly() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1e-300, 3.0, f64::MAX, 1.0 / 3.0, -0.0]);
        let mut b = Bundle::new("demo");
        b.push_field("labels", [1, 2, 3]);
        b.push_reals("scale", &[0.7, 2.5e-8]);
        b.push_matrix("w", &m);
        let text = b.to_text();
        let back = Bundle::parse(&text, Path::new("x"), "demo").unwrap();
        assert_eq!(back, b);
        let w = back.matrix("w").unwrap();
        for (a, b) in w.iter().zip(m.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.field_parsed::<u32>("labels").unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn bundle_rejects_wrong_kind_and_truncation() {
        let mut b = Bundle::new("demo");
        b.push_matrix("w", &DMatrix::zeros(2, 2));
        let text = b.to_text();
        assert!(matches!(
            Bundle::parse(&text, Path::new("x"), "other"),
            Err(Error::Parse { line: 1, .. })
        ));
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Bundle::parse(&cut, Path::new("x"), "demo"), Err(Error::Parse { .. })));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
