//! Prototype memory for sampled-softmax representation learning.
//!
//! A bounded, recency-ordered store of class prototypes that are generated
//! online from mini-batch embeddings, refreshed when their class reappears and
//! disposed of when they become the oldest entry. Around the store sit the
//! margin losses that consume it, group-based batch samplers, hard class and
//! hard example mining, teacher-driven prototype generation, the sampled
//! softmax baselines it is compared against, and the instruments that measure
//! prototype obsolescence, memory residency and per-step cost.
//!
//! Everything runs in `f64` on the CPU at desk scale, on synthetic data.

pub mod baselines;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod head;
pub mod io;
pub mod losses;
pub mod memory;
pub mod mining;
pub mod sampling;
pub mod train;
pub mod vector;
pub mod weights;

pub use config::{LossConfig, PmConfig};
pub use error::{Error, Result};
pub use losses::{LogitsRow, LossGrad, MarginLoss};
pub use memory::PrototypeStore;
pub use vector::{normalize, ClassId, ExampleId, UnitVector};
pub use weights::WeightView;
