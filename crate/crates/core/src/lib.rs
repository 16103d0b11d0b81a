pub mod episodes;
mod error;
pub mod focus;
pub mod glance;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod seed;
mod scalar;
pub mod set_matching;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used for training and inference outside gradient checks.
pub type Real = f32;
pub type Model = model::GlanceFocus<Real>;
pub type ModelTrainer = trainer::Trainer<Real>;
