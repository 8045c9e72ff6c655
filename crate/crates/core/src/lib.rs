//! Flatness-aware prompt pretraining for test-time prompt tuning, on a
//! synthetic differentiable text encoder.
//!
//! Modules build on each other roughly in this order: [`numkit`] (matrices,
//! reverse-mode tape, random streams), [`encoder`], [`losses`], [`optim`],
//! [`probes`], [`theory`], [`calibration`], [`adapt`], and [`cli`].

pub mod adapt;
pub mod calibration;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod numkit;
pub mod optim;
pub mod probes;
pub mod theory;

pub use error::{Error, Result};
