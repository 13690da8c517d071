//! Output directory bookkeeping: every file written goes into the manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    /// Effective configuration, defaults included; `config.txt` holds the same
    /// entries in re-runnable form.
    pub config: &'a std::collections::BTreeMap<String, String>,
    pub seed: u64,
    /// Set when some members failed and the summary covers the rest.
    pub partial: bool,
    pub notes: &'a [String],
    pub files: &'a [String],
}

impl Artifacts {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Opens `name` (relative, may contain one subdirectory) for writing.
    pub fn open(&mut self, name: &str) -> std::io::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(path)?))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut w = self.open(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()
    }

    /// Plot-ready `x, y, y_err` columns.
    pub fn series(&mut self, name: &str, header: [&str; 3], x: &[f64], y: &[f64], err: &[f64]) -> std::io::Result<()> {
        let mut w = self.open(name)?;
        writeln!(w, "{}", header.join(","))?;
        for i in 0..x.len().min(y.len()) {
            let e = err.get(i).copied().unwrap_or(0.0);
            writeln!(w, "{},{},{}", x[i], y[i], e)?;
        }
        w.flush()
    }

    pub fn trajectory(&mut self, name: &str, traj: &medlab::Trajectory) -> std::io::Result<()> {
        let mut w = self.open(name)?;
        traj.write_csv(&mut w).map_err(std::io::Error::other)?;
        w.flush()
    }

    /// Writes `config.txt` and `manifest.json`; call last.
    pub fn finish(mut self, command: &str, config: &Config, partial: bool, notes: &[String]) -> std::io::Result<()> {
        let seed = config.get::<u64>("seed").unwrap_or(0);
        let mut w = self.open("config.txt")?;
        write!(w, "{config}")?;
        w.flush()?;
        let files = self.files.clone();
        let manifest = Manifest {
            tool: "medlab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: config.entries(),
            seed,
            partial,
            notes,
            files: &files,
        };
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()
    }
}
