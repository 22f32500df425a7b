//! Information-geometric diagnostics for mixture-of-experts routing.
//!
//! The library has three layers:
//!
//! * geometry of the probability simplex under the Fisher-Rao metric
//!   ([`simplex`]), including the specialization index FSI;
//! * a small synthetic classification task ([`task`]) and a trainable
//!   mixture-of-experts model ([`model`]) with analytic gradients;
//! * Fisher-information estimation and the heterogeneity score FHS
//!   ([`fisher`]), trajectory diagnostics ([`diagnostics`], [`trainer`]),
//!   baseline failure predictors ([`baselines`]), and reproducible
//!   experiment campaigns ([`campaign`]).
//!
//! Everything is deterministic: random draws come from named per-purpose
//! streams ([`rng`]), and re-running any experiment with the same
//! configuration and seed reproduces every output byte for byte.

pub mod baselines;
pub mod campaign;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fisher;
pub mod io;
pub mod linalg;
pub mod model;
pub mod report;
pub mod rng;
pub mod simplex;
pub mod task;
pub mod trainer;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
