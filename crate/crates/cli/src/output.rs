//! Output directory: numeric tables (CSV and/or binary), JSON records and
//! the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Format;

/// Column-named table of numbers.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&'static str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// `MFTCTAB1`, column count and row count as u64 LE, each column name as
    /// u32 LE length + UTF-8, then the values as f64 LE row by row.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.rows.len() * self.columns.len());
        out.extend_from_slice(b"MFTCTAB1");
        out.extend_from_slice(&(self.columns.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for c in &self.columns {
            out.extend_from_slice(&(c.len() as u32).to_le_bytes());
            out.extend_from_slice(c.as_bytes());
        }
        for row in &self.rows {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    pub workers: usize,
    /// Effective configuration written next to the manifest.
    pub config_file: &'static str,
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub started_unix: u64,
    pub wall_time_s: f64,
    pub exit_code: i32,
    pub files: Vec<FileRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct OutputDir {
    root: PathBuf,
    format: Format,
    files: Vec<FileRecord>,
}

impl OutputDir {
    pub fn create(root: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            format,
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        let mut f =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(bytes)?;
        self.files.push(FileRecord {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_table(&mut self, table: &Table) -> Result<()> {
        if matches!(self.format, Format::Csv | Format::Both) {
            self.write_bytes(&format!("{}.csv", table.name), table.to_csv().as_bytes())?;
        }
        if matches!(self.format, Format::Binary | Format::Both) {
            self.write_bytes(&format!("{}.bin", table.name), &table.to_binary())?;
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `manifest.json`; the manifest lists every file written before it.
    pub fn finish(self, mut manifest: Manifest) -> Result<()> {
        manifest.files = self.files;
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout() {
        let mut t = Table::new("t", &["a", "bc"]);
        t.push(vec![1.0, -2.5]);
        let b = t.to_binary();
        assert_eq!(&b[..8], b"MFTCTAB1");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 1);
        let body = &b[24 + 4 + 1 + 4 + 2..];
        assert_eq!(f64::from_le_bytes(body[8..16].try_into().unwrap()), -2.5);
        assert_eq!(t.to_csv(), "a,bc\n1,-2.5\n");
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
