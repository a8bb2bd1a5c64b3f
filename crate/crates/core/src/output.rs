//! CSV tables with `# key: value` metadata headers, and run manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Metadata = Vec<(String, String)>;

pub fn write_table<T: Serialize>(path: &Path, meta: &Metadata, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in meta {
        writeln!(w, "# {k}: {v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Writes a table whose columns are not known at compile time.
pub fn write_raw(path: &Path, meta: &Metadata, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in meta {
        writeln!(w, "# {k}: {v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header)?;
    for row in rows {
        csv.write_record(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<(Metadata, Vec<T>)> {
    let mut meta = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix("# ") else {
            break;
        };
        let (k, v) = rest
            .split_once(": ")
            .ok_or_else(|| Error::Merge(format!("{}: malformed metadata line '{line}'", path.display())))?;
        meta.push((k.to_string(), v.to_string()));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok((meta, rows))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedEntry {
    pub mu_over_n: f64,
    pub mu: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub config_origins: BTreeMap<String, String>,
    pub master_seed: u64,
    /// Per-point seeds; realisation `j` at a point draws with `(seed, j)`.
    pub seeds: Vec<SeedEntry>,
    pub realisation_indices: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<serde_json::Value>,
    pub inputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    /// Fills in output checksums and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        for f in files {
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| f.display().to_string());
            self.outputs.insert(name, sha256_file(f)?);
        }
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: f64,
        b: Option<String>,
    }

    #[test]
    fn tables_round_trip_with_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let meta = vec![
            ("kind".to_string(), "test".to_string()),
            ("x".to_string(), "a: b".to_string()),
        ];
        let rows = vec![
            Row { a: 0.1 + 0.2, b: None },
            Row {
                a: 1e-300,
                b: Some("x;y".into()),
            },
        ];
        write_table(&path, &meta, &rows).unwrap();
        let (m, r): (Metadata, Vec<Row>) = read_table(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(r, rows);
        assert_eq!(sha256_file(&path).unwrap().len(), 64);
    }
}
