//! Teacher pretraining, generator pretraining, and the alternating
//! generator/student distillation loop (ABM, DFKD-Mem and MAD).

mod ablate;
mod distill;
mod memory;
pub mod rundir;
mod teacher;

pub use ablate::{run_ablation, AblationResult, AblationRow, Axis, AxisValue};
pub use distill::{
    run_distillation, run_distillation_with, Distiller, GeneratorStageReport, PretrainReport,
    RunSummary, StageReport, StudentStageReport,
};
pub use memory::MemoryBank;
pub use teacher::{pretrain_teacher, TeacherEpoch, TeacherReport};

use crate::config::{DatasetConfig, DatasetKind};
use crate::data::{self, Dataset};
use crate::diffcore::{RngState, Stream};
use crate::error::Result;

/// Builds the configured dataset and its stratified `(train, test)` split.
pub fn datasets(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = RngState::new(cfg.seed, Stream::Data);
    let full = match cfg.kind {
        DatasetKind::Blobs => data::make_blobs(cfg.classes, cfg.per_class, cfg.d_in, cfg.spread, &mut rng)?,
        DatasetKind::Rings => data::make_rings(cfg.classes, cfg.per_class, &mut rng)?,
    };
    let mut split_rng = RngState::new(cfg.seed, Stream::Split);
    data::split(&full, cfg.test_fraction, &mut split_rng)
}
