pub mod cells;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod network;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
