//! Run manifests: a `key = value` record written next to every output set.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved parameters in resolution order.
    pub params: Vec<(String, String)>,
    /// Input file path and its SHA-256 digest.
    pub inputs: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, params: Vec<(String, String)>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            params,
            inputs: Vec::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push((path.display().to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Parameters are written as `<subcommand>.<key>`, so the manifest can be
    /// passed back through `--config`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "tool = tempres").unwrap();
        writeln!(s, "tool_version = {}", self.tool_version).unwrap();
        writeln!(s, "subcommand = {}", self.subcommand).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        for (k, v) in &self.params {
            writeln!(s, "{}.{k} = {v}", self.subcommand).unwrap();
        }
        for (i, (path, digest)) in self.inputs.iter().enumerate() {
            writeln!(s, "input.{i}.path = {path}").unwrap();
            writeln!(s, "input.{i}.sha256 = {digest}").unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).map_err(|e| CliError::io(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn renders_qualified_params() {
        let mut m = RunManifest::new("resolve", vec![("eta".into(), "0.6".into())]);
        m.seed = Some(3);
        let text = m.render();
        assert!(text.contains("resolve.eta = 0.6\n"));
        assert!(text.contains("seed = 3\n"));
        let cfg = crate::config::ConfigFile::parse(&text).unwrap();
        assert_eq!(cfg.get("resolve", "eta"), Some("0.6"));
    }
}
