//! Output directory plumbing: artifact files and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use pomfg_core::error::Result;
use pomfg_core::report;

fn now_utc() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Metadata and results of one run, rendered as the single `manifest.toml`
/// every output directory carries. Keys appear in insertion order; floats
/// are printed with 12 significant digits.
pub struct Manifest {
    subcommand: &'static str,
    started: String,
    config: Vec<(String, String)>,
    results: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(subcommand: &'static str) -> Self {
        Manifest { subcommand, started: now_utc(), config: Vec::new(), results: Vec::new() }
    }

    pub fn config_str(&mut self, key: &str, value: &str) {
        self.config.push((key.to_string(), quote(value)));
    }

    pub fn config_int(&mut self, key: &str, value: u64) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn config_float(&mut self, key: &str, value: f64) {
        self.config.push((key.to_string(), report::fmt(value)));
    }

    pub fn result_str(&mut self, key: &str, value: &str) {
        self.results.push((key.to_string(), quote(value)));
    }

    pub fn result_int(&mut self, key: &str, value: u64) {
        self.results.push((key.to_string(), value.to_string()));
    }

    pub fn result_bool(&mut self, key: &str, value: bool) {
        self.results.push((key.to_string(), value.to_string()));
    }

    pub fn result_float(&mut self, key: &str, value: f64) {
        self.results.push((key.to_string(), report::fmt(value)));
    }

    fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("[run]\n");
        out.push_str(&format!("subcommand = {}\n", quote(self.subcommand)));
        out.push_str(&format!("tool_version = {}\n", quote(env!("CARGO_PKG_VERSION"))));
        out.push_str(&format!("started_utc = {}\n", quote(&self.started)));
        out.push_str(&format!("finished_utc = {}\n", quote(&now_utc())));
        out.push_str("\n[config]\n");
        for (k, v) in &self.config {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("\n[results]\n");
        for (k, v) in &self.results {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// A created output directory; artifact writes are relative to it.
pub struct OutDir {
    path: PathBuf,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<OutDir> {
        fs::create_dir_all(path)?;
        Ok(OutDir { path: path.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.path.join(name), contents)?;
        Ok(())
    }

    /// Writes the manifest, closing out the run.
    pub fn finish(&self, manifest: &Manifest) -> Result<()> {
        self.write("manifest.toml", &manifest.render())
    }
}
