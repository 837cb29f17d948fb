pub mod audiofeat;
pub mod demo;
pub mod embedstore;
pub mod evalharness;
pub mod error;
pub mod featalign;
pub mod model;
pub mod parsefeat;
pub mod pipeline;
pub mod textfront;
pub mod trainer;
pub mod vocoder;

pub use error::{Error, Result};
