//! Output files, statistical gates and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub expected: f64,
    pub empirical: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Gate {
    /// Passes when `|empirical - expected| < threshold`.
    pub fn within(name: &str, expected: f64, empirical: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            empirical,
            threshold,
            pass: (empirical - expected).abs() < threshold,
        }
    }

    /// Passes when `empirical < threshold`; `expected` is recorded as given.
    pub fn below(name: &str, expected: f64, empirical: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            empirical,
            threshold,
            pass: empirical < threshold,
        }
    }

    pub fn at_least(name: &str, expected: f64, empirical: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            empirical,
            threshold,
            pass: empirical >= threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub config: RunConfig,
    pub outputs: Vec<OutputFile>,
    pub gates: Vec<Gate>,
    pub all_gates_pass: bool,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Collects files written into one output directory.
pub struct Outputs {
    dir: PathBuf,
    format: Format,
    files: Vec<OutputFile>,
    pub gates: Vec<Gate>,
}

impl Outputs {
    pub fn create(dir: &Path, format: Format) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            files: Vec::new(),
            gates: Vec::new(),
        })
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.push(OutputFile {
            path: name.to_string(),
            bytes: contents.len() as u64,
        });
        Ok(())
    }

    /// Writes a numeric table as `<stem>.csv` and/or `<stem>.json`
    /// depending on the requested format.
    pub fn table(&mut self, stem: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect())
            .collect();
        if self.format.csv() {
            self.write(&format!("{stem}.csv"), render_csv(header, &cells).as_bytes())?;
        }
        if self.format.json() {
            let value = serde_json::json!({ "columns": header, "rows": rows });
            self.json(&format!("{stem}.json"), &value)?;
        }
        Ok(())
    }

    /// Table with text cells, written in the same formats as [`Self::table`].
    pub fn text_table(&mut self, stem: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        if self.format.csv() {
            self.write(&format!("{stem}.csv"), render_csv(header, rows).as_bytes())?;
        }
        if self.format.json() {
            let value = serde_json::json!({ "columns": header, "rows": rows });
            self.json(&format!("{stem}.json"), &value)?;
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest last; it lists every other file.
    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        manifest.all_gates_pass = self.gates.iter().all(|g| g.pass);
        manifest.outputs = self.files;
        manifest.gates = self.gates;
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_NAME);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

fn render_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
