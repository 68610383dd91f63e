pub mod cli;
pub mod cluster;
pub mod config;
pub mod dist;
pub mod emos;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod qm;
pub mod quadrature;
pub mod simplex;
pub mod verify;
pub mod special;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
