//! Quality estimation for speech recognition output: a speech-conditional
//! masked language model, a zero-inflated Beta regression head with a
//! digamma-based gradient shortcut, baseline heads, metrics, and a seeded
//! synthetic corpus generator.

pub mod data;
pub mod dist;
pub mod errors;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod qe_head;
pub mod rng;
pub mod special;
pub mod speech_bert;
pub mod train;

pub use errors::{Result, ZiqeError};
