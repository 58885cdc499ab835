//! Fixed run-directory layout and the single-writer lock.
//!
//! ```text
//! run/
//!   config.json            resolved RunConfig
//!   codec.ckpt             latest codec state (train-codec)
//!   denoiser.ckpt          latest denoiser state (train-diffusion)
//!   checkpoints/step_N.ckpt
//!   loss.csv               one row per log interval
//!   metrics.json           written by `eval --out`
//!   samples/*.png
//!   report.md
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{data, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const CODEC_CKPT: &str = "codec.ckpt";
pub const DENOISER_CKPT: &str = "denoiser.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";
pub const SAMPLES_DIR: &str = "samples";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

/// Held for the lifetime of a training command; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                data(format!(
                    "{} is locked by another run ({e}); remove {} if no run is active",
                    dir.display(),
                    path.display()
                ))
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn step_checkpoint(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINTS_DIR)
        .join(format!("step_{step:06}.ckpt"))
}

/// Loss log that keeps rows up to a resume point and appends after it.
pub struct LossLog {
    file: File,
}

impl LossLog {
    pub fn create(path: &Path) -> CliResult<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{}", fourplane_core::train::LOSS_CSV_HEADER)?;
        Ok(Self { file })
    }

    /// Drops rows logged after `step`, then reopens for appending.
    pub fn resume(path: &Path, step: u64) -> CliResult<Self> {
        let text = fs::read_to_string(path).unwrap_or_default();
        let mut keep = format!("{}\n", fourplane_core::train::LOSS_CSV_HEADER);
        for line in text.lines().skip(1) {
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| data(format!("bad row in {}: {line}", path.display())))?;
            if s <= step {
                keep.push_str(line);
                keep.push('\n');
            }
        }
        fs::write(path, keep)?;
        Ok(Self {
            file: OpenOptions::new().append(true).open(path)?,
        })
    }

    pub fn push(&mut self, rec: &fourplane_core::train::LossRecord) -> CliResult<()> {
        let row = fourplane_core::train::loss_csv(&[*rec]);
        // skip the header line loss_csv prepends
        let body = row.split_once('\n').map(|x| x.1).unwrap_or("");
        self.file.write_all(body.as_bytes())?;
        Ok(())
    }
}
