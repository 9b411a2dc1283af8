use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DBC_OUT_ROOT";

pub const MANIFEST_FILE: &str = "manifest.json";

/// `--out` if given, else `$DBC_OUT_ROOT/<command>`, else `runs/<command>`.
pub fn resolve_out(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Passed,
    Failed,
    Error,
}

/// Record of one command invocation, written when the run starts and
/// rewritten when it ends.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_secs: Option<f64>,
    pub version: String,
    pub status: RunStatus,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(skip)]
    dir: PathBuf,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    /// Creates `dir` and writes the manifest with status `running`.
    pub fn start<C: Serialize>(command: &str, config: &C, seeds: &[u64], dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let manifest = Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seeds: seeds.to_vec(),
            outputs: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: None,
            version: env!("CARGO_PKG_VERSION").into(),
            status: RunStatus::Running,
            notes: Vec::new(),
            dir: dir.to_path_buf(),
            clock: Some(Instant::now()),
        };
        manifest.write()?;
        Ok(manifest)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of an output file inside the run directory, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.into());
        self.dir.join(name)
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn finish(&mut self, status: RunStatus) -> Result<()> {
        self.status = status;
        self.wall_clock_secs = self.clock.map(|c| c.elapsed().as_secs_f64());
        self.write()
    }

    fn write(&self) -> Result<()> {
        let mut out = BufWriter::new(File::create(self.dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.dir = dir.to_path_buf();
        Ok(m)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON config file, or returns the default when `path` is `None`.
pub fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| {
                crate::error::CliError::Config(format!("{}: {e}", p.display()))
            })
        }
    }
}
