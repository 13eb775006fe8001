pub mod alignment;
pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod interpret;
pub mod model;
pub mod orthoinfer;
pub mod probeval;
pub mod rng;
pub mod saecore;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
