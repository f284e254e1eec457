//! Run directories and their manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_SNAPSHOT: &str = "config.cfg";

/// Output directory of one command invocation: `<out>/<command>-<hash>`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub command: String,
    pub hash: String,
    artifacts: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(out: &Path, command: &str, config: &RunConfig, inputs: &str) -> Result<Self, CliError> {
        let hash = config.hash(&format!("{command}\n{inputs}"));
        let path = out.join(format!("{command}-{hash}"));
        std::fs::create_dir_all(&path).map_err(|e| CliError::Io(path.clone(), e))?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            hash,
            artifacts: Vec::new(),
        })
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Writes `bytes` to `rel` and records it as an artifact.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Io(parent.to_path_buf(), e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(path.clone(), e))?;
        self.artifacts.push(PathBuf::from(rel));
        Ok(path)
    }

    /// Records every file below `rel` (written by someone else) as artifacts.
    pub fn track_dir(&mut self, rel: &str) -> Result<(), CliError> {
        let mut stack = vec![self.path.join(rel)];
        let mut found = Vec::new();
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).map_err(|e| CliError::Io(dir.clone(), e))? {
                let p = entry.map_err(|e| CliError::Io(dir.clone(), e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    found.push(p.strip_prefix(&self.path).expect("inside run dir").to_path_buf());
                }
            }
        }
        found.sort();
        self.artifacts.extend(found);
        Ok(())
    }

    /// Writes the config snapshot and the manifest listing the command, the
    /// explicit flags, the seed and a SHA-256 per artifact.
    pub fn finish(mut self, config: &RunConfig, flags: &[String]) -> Result<PathBuf, CliError> {
        self.write(CONFIG_SNAPSHOT, config.to_text())?;
        let mut arts = self.artifacts.clone();
        arts.sort();
        arts.dedup();
        let mut m = String::new();
        let _ = writeln!(m, "command = {}", self.command);
        let _ = writeln!(m, "config_hash = {}", self.hash);
        let _ = writeln!(m, "seed = {}", config.get("seed"));
        let _ = writeln!(m, "flags = {}", flags.join(" "));
        let _ = writeln!(m, "\n[config]");
        m.push_str(&config.to_text());
        let _ = writeln!(m, "\n[artifacts]");
        for rel in &arts {
            let bytes = std::fs::read(self.path.join(rel)).map_err(|e| CliError::Io(self.path.join(rel), e))?;
            let _ = writeln!(m, "{:x}  {}", Sha256::digest(&bytes), rel.display());
        }
        let path = self.path.join(MANIFEST);
        std::fs::write(&path, m).map_err(|e| CliError::Io(path.clone(), e))?;
        Ok(self.path)
    }
}

/// `(sha256, relative path)` pairs from a manifest.
pub fn read_checksums(run_dir: &Path) -> Result<Vec<(String, String)>, CliError> {
    let path = run_dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(path.clone(), e))?;
    Ok(text
        .split("[artifacts]")
        .nth(1)
        .unwrap_or("")
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(h, p)| (h.to_string(), p.to_string()))
        .collect())
}
