//! Query-Reduction Networks.
//!
//! A QRN reads a story one sentence at a time and keeps a *reduced query*:
//! the question rewritten in light of what has been read so far. The
//! recurrence is gated like a GRU, but the candidate state never depends on
//! the previous state, so the whole sequence can also be evaluated in closed
//! form as one masked matrix product.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`param`], [`gradcheck`]: dense tensors with
//!   define-by-run reverse-mode differentiation.
//! - [`cell`]: the gated unit, sequential recurrence and layer stacking.
//! - [`scan`]: the time-parallel evaluation of the same recurrence.
//! - [`encoding`], [`heads`], [`model`]: input and output modules.
//! - [`data`], [`trainer`], [`checkpoint`], [`config`]: the training pipeline.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod param;
pub mod scan;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{QrnError, Result};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Precision, Scalar, Tensor};
