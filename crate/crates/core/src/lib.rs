pub mod data;
pub mod error;
pub mod experiments;
pub mod keyvalue;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod seso;
pub mod training;

mod codec;

pub use error::{Error, Result};
