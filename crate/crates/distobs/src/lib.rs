//! Distributed state estimation for discrete-time LTI plants observed by a
//! directed sensor network.
//!
//! The crate checks feasibility conditions, synthesizes distributed observers
//! (a multi-sensor decomposition scheme and a Jordan-form scheme), and simulates
//! them under static or link-failing communication graphs.

pub mod cli;
pub mod conditions;
pub mod decomp;
pub mod error;
pub mod netgraph;
pub mod synth_c1;
pub mod synth_c2;
pub mod numkit;
pub mod simkit;

pub use error::{Error, Result};
pub use numkit::{Mat, ToleranceConfig};
