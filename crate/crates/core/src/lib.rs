//! Exact and large-N analysis of the SYK model coupled to a Markovian bath.

pub mod ensemble;
pub mod ep;
pub mod error;
pub mod fit;
pub mod krylov;
pub mod majorana;
pub mod model;
pub mod sd;
pub mod sparse;
pub mod spectrum;

pub use error::{Error, Result};
