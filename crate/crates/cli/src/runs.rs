//! Run-directory plumbing: the single-writer lock and trainer-state
//! discovery for resuming.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

const LOCK_NAME: &str = ".lock";

/// Exclusive claim on a run directory, released on drop. A second claim
/// fails until the first process exits; a crashed run leaves the file
/// behind and the error says how to clear it.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow::Error::new(
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "run directory {} is locked by another process; remove {} if that run is dead",
                        dir.display(),
                        path.display()
                    ),
                ),
            )),
            Err(e) => Err(anyhow::Error::new(e).context(format!("locking {}", dir.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Stem of the highest-epoch trainer state in the directory, if any
/// (`state_epoch_12.json` + `state_epoch_12.ckpt` pairs).
pub fn newest_state(dir: &Path) -> Result<Option<String>> {
    let mut best: Option<(usize, String)> = None;
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => bail!(
            "run directory {} does not exist, nothing to resume",
            dir.display()
        ),
        Err(e) => return Err(anyhow::Error::new(e).context(format!("reading {}", dir.display()))),
    };
    for entry in entries {
        let entry = entry.with_context(|| format!("reading {}", dir.display()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let stem = match name.strip_suffix(".json") {
            Some(stem) => stem,
            None => continue,
        };
        let epoch: usize = match stem.strip_prefix("state_epoch_").and_then(|n| n.parse().ok()) {
            Some(epoch) => epoch,
            None => continue,
        };
        if dir.join(format!("{stem}.ckpt")).exists()
            && best.as_ref().map_or(true, |(b, _)| epoch > *b)
        {
            best = Some((epoch, stem.to_string()));
        }
    }
    Ok(best.map(|(_, stem)| stem))
}
