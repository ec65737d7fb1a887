//! Optimization loop, learning-rate schedule and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod scheduler;
pub mod state;

pub use checkpoint::{checkpoint_scalar_bytes, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::TrainConfig;
pub use scheduler::{plateau_schedule, PlateauScheduler, PLATEAU_THRESHOLD};
pub use state::{evaluate, predict_scores, EpochLog, EpochReport, ModelState};
