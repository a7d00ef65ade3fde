//! Run manifests: what a command was asked to do and every file it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub git: String,
    /// Resolved arguments, defaults included.
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub artifacts: Vec<(String, PathBuf)>,
    pub metrics: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config: Vec<(String, String)>) -> Self {
        RunManifest { command: command.to_string(), git: git_describe(), config, ..Default::default() }
    }

    pub fn artifact(&mut self, kind: &str, path: &Path) {
        self.artifacts.push((kind.to_string(), path.to_path_buf()));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "git={}", self.git);
        let section = |s: &mut String, name: &str, rows: Vec<(String, String)>| {
            let _ = writeln!(s, "\n[{name}]");
            for (k, v) in rows {
                let _ = writeln!(s, "{k}={v}");
            }
        };
        section(&mut s, "config", self.config.clone());
        section(&mut s, "seeds", self.seeds.iter().map(|(k, v)| (k.clone(), v.to_string())).collect());
        section(&mut s, "artifacts", self.artifacts.iter().map(|(k, p)| (k.clone(), p.display().to_string())).collect());
        section(&mut s, "metrics", self.metrics.clone());
        s
    }

    /// Writes the manifest into `dir`, listing itself among the artifacts.
    pub fn write(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST_FILE);
        self.artifact("manifest", &path);
        fs::write(&path, self.render())?;
        Ok(path)
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
