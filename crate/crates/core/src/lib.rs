pub mod config;
pub mod data;
pub mod error;
pub mod grading;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod selflearn;
pub mod slide_score;
pub mod stain;
pub mod synth;

pub use error::{Error, Result};
