use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const SUBDIRS: [&str; 4] = ["checkpoints", "logs", "reports", "viz"];

/// Build identifier recorded in every manifest.
pub fn build_id() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("NAE_GIT_REV"))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub dir: PathBuf,
    pub name: Option<String>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved training configuration in `key = value` form.
    pub config: String,
    pub config_hash: String,
    pub dataset: Option<DatasetRef>,
    pub eval_dataset: Option<DatasetRef>,
    pub build: String,
    /// Wall-clock seconds per phase, in the order they ran.
    pub timings: Vec<(String, f64)>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn time(&mut self, phase: &str, secs: f64) {
        self.timings.push((phase.to_string(), secs));
    }
}

/// A run directory with the fixed subdirectory layout.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout; a non-empty `root` is refused unless `force`.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        prepare_output(root, force)?;
        for sub in SUBDIRS {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(MANIFEST).is_file() {
            bail!("{} is not a run directory (no {MANIFEST})", root.display());
        }
        for sub in SUBDIRS {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::load(&self.manifest_path())
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        fs::write(self.manifest_path(), serde_json::to_string_pretty(m)? + "\n")?;
        Ok(())
    }
}

/// Ensures `dir` exists and is empty, clearing it first when `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                bail!("{} exists and is not empty (use --force to overwrite)", dir.display());
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}
