//! Exact, lazily evaluated martingales on filtrations of finite partitions.

pub mod analysis;
pub mod cli;
pub mod constructions;
pub mod error;
pub mod filtration;
pub mod game;
pub mod martingale;
pub mod rational;
pub mod spec;

pub use error::{Error, Result};
pub use filtration::{CellId, Filtration, KPoint};
pub use rational::Rational;
