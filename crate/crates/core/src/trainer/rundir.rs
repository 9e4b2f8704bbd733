//! File names inside a run directory.
//!
//! ```text
//! <run>/config.resolved   every configuration key, re-loadable
//! <run>/metrics.csv       one row per epoch
//! <run>/stages.csv        one row per stage
//! <run>/summary.json      final numbers and run status
//! <run>/ckpt/             teacher.ckpt, {student,generator,embeddings,ema,ema_embeddings}_t<t>.ckpt
//! <run>/samples/          epoch<e>_{generator,ema}.csv
//! ```

use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STAGES_FILE: &str = "stages.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn ckpt_dir(run: &Path) -> PathBuf {
    run.join("ckpt")
}

pub fn samples_dir(run: &Path) -> PathBuf {
    run.join("samples")
}

/// `<run>/ckpt/<kind>_t<t>.ckpt`
pub fn ckpt_path(run: &Path, kind: &str, t: usize) -> PathBuf {
    ckpt_dir(run).join(format!("{kind}_t{t}.ckpt"))
}

pub fn teacher_path(run: &Path) -> PathBuf {
    ckpt_dir(run).join("teacher.ckpt")
}
