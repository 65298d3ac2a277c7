//! posterflow: a desk-scale, trainable tri-conditional diffusion transformer.
//!
//! The crate builds a small rectified-flow transformer that generates toy
//! "poster" images under three independent controls — background style,
//! subject, and glyph text — and studies the cost of injecting those
//! condition tokens:
//!
//! - [`arraymath`]: dense-array math, counter-based RNG, gradient checking
//! - [`synthdata`]: procedural poster samples with bit-exact PPM/PGM IO
//! - [`conditions`]: prompt/style/subject/glyph tokenizers and the
//!   dual-branch glyph feature encoder
//! - [`attention`]: full, decoupled, and cached attention over tagged
//!   token segments
//! - [`importance`]: attention-mass analysis per (condition, layer, step)
//!   and keep/omit routing schedules
//! - [`model`]: the transformer stack, flow-matching trainer, Euler
//!   sampler, evaluation metrics, and checkpoints
//! - [`costmodel`]: analytic FLOPs accounting and wall-clock benchmarks
//! - [`cli`]: the `posterflow` command-line pipeline
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod arraymath;
pub mod attention;
pub mod cli;
pub mod conditions;
pub mod costmodel;
pub mod error;
pub mod importance;
pub mod model;
pub mod synthdata;

pub use error::{Error, Result};
