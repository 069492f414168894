//! Variational mixture-of-experts fusion with multimodal graph-based virtual
//! adversarial training, for zero-shot multimodal entity typing and relation
//! extraction on synthetic data.

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod head;
pub mod layers;
pub mod mgvat;
pub mod vmoe;

pub use error::{Error, Result};
