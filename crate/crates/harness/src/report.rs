//! Artifact emission. CSVs start with a `# config_hash=` comment line, then
//! a header row; their bytes depend only on the config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};

pub struct Reporter {
    dir: PathBuf,
    config_hash: String,
    written: Vec<String>,
}

impl Reporter {
    pub fn new(dir: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        Ok(Reporter {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// File names written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut buf = format!("# config_hash={}\n", self.config_hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| HarnessError::io(self.dir.join(name), e))?;
        }
        self.write(name, &buf)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| HarnessError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }
}
