//! Deterministic simulator for federated prototype learning with
//! heterogeneous clients.
//!
//! Clients train a dual-branch feature projector (an L2-aligned shared
//! branch that produces class prototypes, and a contrastively trained
//! decision branch used for inference) on non-IID shards of a common
//! dataset. Each round they upload per-class prototypes together with
//! Fisher channel-importance scores; the server averages prototypes
//! client-wise and returns a personalized set in which each client's
//! most important channels keep their local values.
//!
//! The crate is a library first: see the `examples/` directory for one
//! runnable walkthrough per capability, from tape-based gradients up to
//! full ablation sweeps. A thin `feddbp` binary exposes the same
//! functionality as subcommands (`run`, `sweep-alpha`, `sweep-epochs`,
//! `ablate`, `verify`).
//!
//! Everything is a pure function of configuration and seed: replaying a
//! run reproduces its metrics bit for bit.

pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fisher;
pub mod model;
pub mod objectives;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
