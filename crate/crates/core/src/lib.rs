//! Video classification with spatio-temporal focal modulation, trained by
//! knowledge distillation from a larger teacher.
//!
//! The crate is self-contained: a small reverse-mode tape (`tensor`) supplies
//! exactly the operators the architecture needs, `focal` implements the
//! dual-branch modulation layer, `network` assembles the four-stage model,
//! `distill` holds the loss blend, and `train`/`eval`/`data` cover the
//! synthetic-video experiment pipeline end to end.

pub mod check;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod eval;
pub mod focal;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use tensor::{Dtype, Element, Tensor, TensorError};
