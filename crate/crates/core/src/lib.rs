pub mod autodiff;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod regime;
pub mod rng;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use regime::ConditionRegime;
