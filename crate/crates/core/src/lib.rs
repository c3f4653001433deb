pub mod cli;
pub mod density;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod lad_solver;
pub mod par;
pub mod ridge_solver;
pub mod synth;
pub mod targets;
pub mod text_features;
pub mod volume_space;

pub use error::{Error, Result};
