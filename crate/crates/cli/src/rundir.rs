// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{echo, RunConfig};
use crate::error::{CliError, CliResult};

/// A fresh directory for one command invocation. Never reused.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<command>-<timestamp>-seed<seed>`, adding a numeric
    /// suffix when that name is taken, and writes `effective_config.toml`.
    pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
        let base = format!("{command}-{stamp}-seed{}", cfg.seed);
        let mut k = 0;
        let path = loop {
            let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(CliError::io(&p, e)),
            }
        };
        let dir = Self { path };
        dir.write("effective_config.toml", &echo(cfg)?)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes a new file; refuses to replace an existing one.
    pub fn write(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.file(name);
        if p.exists() {
            return Err(CliError::Usage(format!("refusing to overwrite {}", p.display())));
        }
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json<S: serde::Serialize>(&self, name: &str, value: &S) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(visedit_core::Error::from)?;
        self.write(name, &(text + "\n"))
    }

    pub fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.file(name);
        fs::create_dir(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}
