use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use ndpsim_core::engine::{MigrationEvent, StepRecord};

use crate::error::{CliError, CliResult};

/// An output directory, created on first use.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("creating {}", root.display()), e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn sub(&self, name: &str) -> CliResult<Self> {
        Self::create(&self.root.join(name))
    }

    fn writer(&self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::io(format!("creating {}", p.display()), e))
    }

    fn finish(&self, name: &str, w: impl Write, r: std::io::Result<()>) -> CliResult<()> {
        let mut w = w;
        r.and_then(|_| w.flush())
            .map_err(|e| CliError::io(format!("writing {}", self.path(name).display()), e))
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.writer(name)?;
        let r = serde_json::to_writer_pretty(&mut w, value)
            .map_err(std::io::Error::other)
            .and_then(|_| w.write_all(b"\n"));
        self.finish(name, w, r)
    }

    pub fn json_lines<T: Serialize>(&self, name: &str, items: &[T]) -> CliResult<()> {
        let mut w = self.writer(name)?;
        let r = items.iter().try_for_each(|item| {
            serde_json::to_writer(&mut w, item).map_err(std::io::Error::other)?;
            w.write_all(b"\n")
        });
        self.finish(name, w, r)
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let p = self.path(name);
        let err = |e: csv::Error| CliError::io(format!("writing {}", p.display()), e.into());
        let mut w = csv::Writer::from_writer(self.writer(name)?);
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io(format!("writing {}", p.display()), e))
    }

    pub fn steps(&self, steps: &[StepRecord]) -> CliResult<()> {
        self.csv("steps.csv", steps)
    }

    pub fn migrations(&self, events: &[MigrationEvent]) -> CliResult<()> {
        self.json_lines("migration_log.jsonl", events)
    }
}
