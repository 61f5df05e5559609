//! Output files with a provenance header.
//!
//! CSV files start with `#` comment lines; JSON files wrap their payload as
//! `{"header": …, "data": …}`. Headers carry no timestamps so repeated runs
//! are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Format;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Marker left in the output directory when a command stops early.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Clone, Serialize)]
pub struct Header {
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub tolerances: Vec<(String, f64)>,
}

impl Header {
    pub fn new(command: &str, config_sha256: String) -> Self {
        Self { version: VERSION.to_string(), command: command.to_string(), config_sha256, tolerances: Vec::new() }
    }

    pub fn tol(mut self, name: &str, value: f64) -> Self {
        self.tolerances.push((name.to_string(), value));
        self
    }

    fn csv_lines(&self) -> String {
        let tol: Vec<String> = self.tolerances.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "# lsyk {}\n# command: {}\n# config_sha256: {}\n# tolerances: {}\n",
            self.version,
            self.command,
            self.config_sha256,
            tol.join(";")
        )
    }

    fn json(&self) -> Value {
        let tol: serde_json::Map<String, Value> = self.tolerances.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        json!({
            "version": self.version,
            "command": self.command,
            "config_sha256": self.config_sha256,
            "tolerances": tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::F(x) => format!("{x}"),
            Cell::I(x) => x.to_string(),
            Cell::S(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::F(x) if x.is_finite() => json!(x),
            Cell::F(_) | Cell::Empty => Value::Null,
            Cell::I(x) => json!(x),
            Cell::S(s) => json!(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::F(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::I(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::S(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::S(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::S(s)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(x: Option<T>) -> Self {
        x.map(Into::into).unwrap_or(Cell::Empty)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Writes the files of one command run.
pub struct Sink {
    pub dir: PathBuf,
    pub format: Format,
    pub header: Header,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, format: Format, header: Header) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let marker = dir.join(INCOMPLETE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker)?;
        }
        Ok(Self { dir: dir.to_path_buf(), format, header, written: Vec::new() })
    }

    fn put(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        f.write_all(body.as_bytes())?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// `stem.csv` or `stem.json` according to the configured format.
    pub fn table(&mut self, stem: &str, t: &Table) -> Result<PathBuf> {
        match self.format {
            Format::Csv => self.csv(&format!("{stem}.csv"), t),
            Format::Json => {
                let rows: Vec<Value> = t
                    .rows
                    .iter()
                    .map(|r| {
                        let obj: serde_json::Map<String, Value> =
                            t.columns.iter().zip(r).map(|(c, v)| (c.clone(), v.json())).collect();
                        Value::Object(obj)
                    })
                    .collect();
                self.json(&format!("{stem}.json"), &rows)
            }
        }
    }

    pub fn csv(&mut self, name: &str, t: &Table) -> Result<PathBuf> {
        let mut s = self.header.csv_lines();
        s.push_str(&t.columns.join(","));
        s.push('\n');
        for r in &t.rows {
            let cells: Vec<String> = r.iter().map(Cell::csv).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        self.put(name, &s)
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, data: &T) -> Result<PathBuf> {
        let body = json!({ "header": self.header.json(), "data": data });
        let mut s = serde_json::to_string_pretty(&body)?;
        s.push('\n');
        self.put(name, &s)
    }

    /// One JSON object per line, preceded by a header line.
    pub fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<PathBuf> {
        let mut s = serde_json::to_string(&json!({ "header": self.header.json() }))?;
        s.push('\n');
        for it in items {
            s.push_str(&serde_json::to_string(it)?);
            s.push('\n');
        }
        self.put(name, &s)
    }

    /// Records that the run stopped before all outputs were produced.
    pub fn flag_incomplete(&self, reason: &str) {
        let names: Vec<String> = self.written.iter().map(|p| p.display().to_string()).collect();
        let body = format!("{reason}\nwritten before stopping:\n{}\n", names.join("\n"));
        let _ = fs::write(self.dir.join(INCOMPLETE_MARKER), body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_block() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Sink::new(dir.path(), Format::Csv, Header::new("spectrum", "ab".into()).tol("eps", 1e-8)).unwrap();
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1.5.into(), Cell::Empty]);
        let p = s.table("x", &t).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert!(text.starts_with("# lsyk "));
        assert!(text.contains("# config_sha256: ab\n# tolerances: eps=0.00000001\na,b\n1.5,\n"));
    }

    #[test]
    fn json_rows_use_null_for_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Sink::new(dir.path(), Format::Json, Header::new("x", "h".into())).unwrap();
        let mut t = Table::new(&["a"]);
        t.push(vec![f64::NAN.into()]);
        let p = s.table("x", &t).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["data"][0]["a"], Value::Null);
        assert_eq!(v["header"]["command"], "x");
    }
}
