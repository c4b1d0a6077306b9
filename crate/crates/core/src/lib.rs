pub mod data_io;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
