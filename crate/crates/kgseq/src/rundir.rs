//! Run directory layout and its manifest.
//!
//! ```text
//! <run>/config.txt       canonical config of the latest command
//! <run>/manifest.txt     `artifact <path> <sha256>` and `stage <name> <hash>`
//! <run>/data/            split graphs, names and QA files
//! <run>/registry/        mention registry
//! <run>/tokenizer/       vocabulary
//! <run>/checkpoints/     model files
//! <run>/pathpred/        template mapping
//! <run>/reports/         per-query rows, metric summaries, summary.md
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::formats::{read_text, sha256_hex, write_atomic};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, String>,
    pub stages: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parse(text: &str) -> AppResult<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                [] | [""] => {}
                ["artifact", p, h] => {
                    m.artifacts.insert(p.to_string(), h.to_string());
                }
                ["stage", n, h] => {
                    m.stages.insert(n.to_string(), h.to_string());
                }
                _ => return Err(AppError::Data(format!("manifest line {}: unrecognised", i + 1))),
            }
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (p, h) in &self.artifacts {
            writeln!(s, "artifact {p} {h}").unwrap();
        }
        for (n, h) in &self.stages {
            writeln!(s, "stage {n} {h}").unwrap();
        }
        s
    }
}

pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    pub fn open(root: &Path) -> AppResult<Self> {
        fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
        let mpath = root.join(MANIFEST_FILE);
        let manifest = if mpath.exists() {
            Manifest::parse(&read_text(&mpath)?)?
        } else {
            Manifest::default()
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Saved config, if any.
    pub fn load_config(&self) -> AppResult<Option<RunConfig>> {
        let p = self.path(CONFIG_FILE);
        if !p.exists() {
            return Ok(None);
        }
        RunConfig::parse(&read_text(&p)?).map(Some)
    }

    pub fn save_config(&self, cfg: &RunConfig) -> AppResult<()> {
        write_atomic(&self.path(CONFIG_FILE), cfg.render().as_bytes())
    }

    /// Bytes of an artifact produced by `producer`. Files edited after they
    /// were recorded are rejected.
    pub fn require(&self, rel: &str, producer: &'static str) -> AppResult<Vec<u8>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(AppError::MissingArtifact { path: p, producer });
        }
        let bytes = fs::read(&p).map_err(|e| AppError::io(&p, e))?;
        if let Some(h) = self.manifest.artifacts.get(rel) {
            if *h != sha256_hex(&bytes) {
                return Err(AppError::Data(format!(
                    "{} changed since `kgseq {producer}` wrote it; rerun that command",
                    p.display()
                )));
            }
        }
        Ok(bytes)
    }

    pub fn require_text(&self, rel: &str, producer: &'static str) -> AppResult<String> {
        String::from_utf8(self.require(rel, producer)?)
            .map_err(|_| AppError::Data(format!("{rel} is not UTF-8")))
    }

    pub fn artifact_hash(&self, rel: &str) -> Option<&str> {
        self.manifest.artifacts.get(rel).map(String::as_str)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> AppResult<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.manifest.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Refuses to redo a stage under a different hash unless forced.
    pub fn check_stage(&self, name: &str, hash: &str, force: bool) -> AppResult<()> {
        match self.manifest.stages.get(name) {
            Some(old) if old != hash && !force => Err(AppError::Config(format!(
                "stage `{name}` was run with different settings or inputs; pass --force to redo it"
            ))),
            _ => Ok(()),
        }
    }

    pub fn stage_hash(&self, name: &str) -> Option<&str> {
        self.manifest.stages.get(name).map(String::as_str)
    }

    pub fn finish_stage(&mut self, name: &str, hash: &str) -> AppResult<()> {
        self.manifest.stages.insert(name.to_string(), hash.to_string());
        self.save_manifest()
    }

    pub fn save_manifest(&self) -> AppResult<()> {
        write_atomic(&self.path(MANIFEST_FILE), self.manifest.render().as_bytes())
    }
}

/// Stage hash from config sections and the hashes of the inputs.
pub fn stage_key(cfg: &RunConfig, sections: &[&str], inputs: &[(&str, &str)]) -> String {
    let mut s = cfg.render_sections(sections);
    for (name, h) in inputs {
        writeln!(s, "input {name} {h}").unwrap();
    }
    sha256_hex(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::default();
        m.artifacts.insert("data/train.tsv".into(), "ab".into());
        m.stages.insert("split".into(), "cd".into());
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
        assert!(Manifest::parse("what is this").is_err());
    }

    #[test]
    fn stage_guard_and_tamper_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut rd = RunDir::open(dir.path()).unwrap();
        rd.write("a.txt", b"hello").unwrap();
        rd.finish_stage("s", "h1").unwrap();
        let rd = RunDir::open(dir.path()).unwrap();
        assert!(rd.check_stage("s", "h1", false).is_ok());
        assert!(matches!(rd.check_stage("s", "h2", false), Err(AppError::Config(_))));
        assert!(rd.check_stage("s", "h2", true).is_ok());
        assert_eq!(rd.require("a.txt", "x").unwrap(), b"hello");
        fs::write(dir.path().join("a.txt"), b"edited").unwrap();
        assert!(matches!(rd.require("a.txt", "x"), Err(AppError::Data(_))));
        assert!(matches!(rd.require("b.txt", "x"), Err(AppError::MissingArtifact { .. })));
    }
}
