//! Object-centric video anomaly detection through jointly trained
//! self-supervised and distillation proxy tasks.
//!
//! One shared 3D convolutional backbone feeds four heads: arrow of time,
//! motion irregularity, middle-box reconstruction, and teacher
//! distillation. Training uses only normal video; at inference each head's
//! abnormality signal is averaged into a per-object score, reassembled
//! into per-frame anomaly maps and score series, and evaluated with
//! frame-level AUC, RBDC and TBDC.

pub mod checkpoint;
pub mod config;
pub mod detection;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sequences;
pub mod spriteworld;
pub mod teachers;
pub mod training;

pub use error::{Error, Result};
