use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

/// Record of one artifact-producing invocation, kept in its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub version: String,
    pub out_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: Status,
    pub error: Option<String>,
    pub artifacts: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    /// Creates `out_dir` and writes the manifest in the running state. An
    /// existing manifest is an error unless `force` is set.
    pub fn start(
        command: &str,
        config_path: Option<&Path>,
        seed: u64,
        out_dir: &Path,
        force: bool,
    ) -> Result<Self> {
        let path = out_dir.join(MANIFEST);
        if path.exists() && !force {
            bail!(
                "{} already holds a run; pass --force to overwrite it",
                out_dir.display()
            );
        }
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create {}", out_dir.display()))?;
        let m = RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            out_dir: out_dir.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
            status: Status::Running,
            error: None,
            artifacts: Vec::new(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.into());
        self.out_dir.join(name)
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        self.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.status = Status::Ok,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
        self.write()
    }

    fn write(&self) -> Result<()> {
        let path = self.out_dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("cannot write {}", path.display()))
    }

    #[cfg(test)]
    pub fn read(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
