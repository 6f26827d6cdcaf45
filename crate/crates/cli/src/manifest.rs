//! `manifest.txt`: one `key: value` per line, rewritten atomically.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.txt";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::from(gplvm::GplvmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub struct Manifest {
    path: PathBuf,
    entries: Vec<(String, String)>,
    started: Instant,
}

impl Manifest {
    /// Creates `dir` if needed and writes the initial manifest with status `running`.
    pub fn start(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut m = Manifest {
            path: dir.join(FILE_NAME),
            entries: Vec::new(),
            started: Instant::now(),
        };
        m.set("command", command);
        m.set("tool_version", env!("CARGO_PKG_VERSION"));
        m.set("started_unix", format!("{:.3}", unix_now()));
        m.set("status", "running");
        m.write()?;
        Ok(m)
    }

    /// Adds or replaces a key. Newlines in values are flattened.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace(['\n', '\r'], " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> CliResult<()> {
        let hash = sha256_file(path)?;
        self.set(
            &format!("input.{name}"),
            format!("{} sha256:{hash}", path.display()),
        );
        Ok(())
    }

    pub fn write(&self) -> CliResult<()> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(&format!("{k}: {v}\n"));
        }
        let tmp = self.path.with_extension("txt.tmp");
        fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| io_err(&self.path, e))
    }

    pub fn finish(mut self, outcome: &CliResult<()>) -> CliResult<()> {
        self.set("finished_unix", format!("{:.3}", unix_now()));
        self.set(
            "elapsed_secs",
            format!("{:.3}", self.started.elapsed().as_secs_f64()),
        );
        match outcome {
            Ok(()) => self.set("status", "ok"),
            Err(e) => self.set("status", format!("failed: {e}")),
        }
        self.write()
    }
}

/// Runs `body` between the start and the final write of a manifest in `dir`.
pub fn with_manifest<F>(dir: &Path, command: &str, body: F) -> CliResult<()>
where
    F: FnOnce(&mut Manifest) -> CliResult<()>,
{
    let mut manifest = Manifest::start(dir, command)?;
    let outcome = body(&mut manifest);
    let finished = manifest.finish(&outcome);
    outcome.and(finished)
}
