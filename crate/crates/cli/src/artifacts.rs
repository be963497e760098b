//! Atomic artifact writes and the CSV/JSON encoders.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Collects the files written into one run directory with their digests.
#[derive(Debug)]
pub struct ArtifactSink {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl ArtifactSink {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Relative name → SHA-256 of every file written so far.
    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.written
    }

    /// Writes `bytes` to `name` (relative, may contain `/`) via a temp file and rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.insert(name.to_string(), format!("{:x}", Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Compute(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_csv(&mut self, name: &str, csv: Csv) -> Result<(), CliError> {
        self.write(name, csv.0.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Compute(format!("{}: {e}", path.display()))
}

/// Row-oriented CSV text; floats use the shortest round-tripping form.
#[derive(Debug, Clone)]
pub struct Csv(String);

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut s = header.join(",");
        s.push('\n');
        Self(s)
    }

    pub fn row(&mut self, values: &[f64]) {
        for (k, v) in values.iter().enumerate() {
            if k > 0 {
                self.0.push(',');
            }
            let _ = write!(self.0, "{v}");
        }
        self.0.push('\n');
    }

    /// Row of preformatted cells.
    pub fn text_row(&mut self, cells: &[String]) {
        self.0.push_str(&cells.join(","));
        self.0.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = ArtifactSink::create(dir.path()).unwrap();
        let mut csv = Csv::new(&["v", "f"]);
        csv.row(&[0.1, 1.0 / 3.0]);
        sink.write_csv("sub/cost.csv", csv).unwrap();
        let text = fs::read_to_string(dir.path().join("sub/cost.csv")).unwrap();
        assert_eq!(text, "v,f\n0.1,0.3333333333333333\n");
        let names: Vec<_> = fs::read_dir(dir.path().join("sub")).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(sink.files().len(), 1);
    }
}
