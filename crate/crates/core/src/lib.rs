//! Step-level preference optimization of reasoning traces.
//!
//! The crate trains a small categorical policy on a synthetic multi-hop
//! question-answering environment whose observations arrive as interleaved
//! audio and visual encodings. It provides rollout-based step correctness
//! estimates, contrastive step selection by perturbation sensitivity,
//! Bradley-Terry step preferences, outcome/process reward heads and the
//! evaluation modes used to compare them.

pub mod avsync;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod grammar;
pub mod io;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rollout;
pub mod seeds;
pub mod select;
pub mod synthenv;
pub mod trace;
pub mod vocab;

pub use error::{Error, Result};
