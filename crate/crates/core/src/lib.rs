//! Momentum adversarial distillation (MAD).
//!
//! Data-free knowledge distillation where a student is trained against a
//! frozen teacher on samples from an adversarial generator and from an
//! exponential moving average of that generator. The ABM and DFKD-Mem
//! baselines, teacher/generator pretraining, and the Jensen-Shannon
//! distribution-shift probe live here as well.

pub mod config;
pub mod data;
pub mod diag;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod models;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
