//! LSTM training with structured dropout.
//!
//! Dropout masks that are uniform across the batch zero whole feature
//! columns, so the matrix multiplications of every training phase can run
//! on compacted operands: the forward projections skip dropped input
//! columns, the backward hidden-state GEMMs skip masked output columns, and
//! the weight-gradient GEMMs skip dropped rows. This crate provides the
//! dense reference math, the mask taxonomy, the compacted kernels, an LSTM
//! engine wired to them, a byte-level language model with a truncated-BPTT
//! trainer, and a phase-wise benchmark harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod lstm;
pub mod masks;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::{Scratch, SparsityKind};
pub use lstm::{ExecMode, GradientSet, LstmParams, StepCache, StepGradients};
pub use masks::{Mask, MaskCase, MaskSchedule, ScheduleShape, StructuredMask};
pub use model::{DropoutMode, ModelConfig, ModelGrads, ModelParams};
pub use scalar::{Precision, Scalar};
pub use tensor::Matrix;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type LstmParams32 = LstmParams<f32>;
pub type LstmParams64 = LstmParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
