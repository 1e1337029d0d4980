//! Simulation and optimization of RIS-assisted downlink MISO-NOMA networks.
//!
//! The RIS phase shifts are optimized by a few unrolled gradient steps while a
//! meta-trained network maps the resulting combined channels to a power
//! allocation. All physics and network arithmetic runs on a scalar
//! differentiation [`tape`] so that meta-gradients through the unrolled
//! steps are exact.

pub mod channel;
pub mod error;
pub mod fixture;
pub mod harness;
pub mod maml;
pub mod noma;
pub mod policy;
pub mod seeding;
pub mod tape;

pub use error::{Error, Result};
pub use tape::{ComplexVar, Op, Tape, Var};
