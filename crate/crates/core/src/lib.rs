//! Visual in-context learning at desk scale: a frozen token-inpainting
//! backbone fills the missing quadrant of a four-cell task canvas, and a
//! trainable border prompt nudges the canvas toward better completions.
//!
//! Everything is deterministic given a root seed: dataset synthesis,
//! backbone pretraining, prompt training, and evaluation all derive their
//! randomness from labeled substreams (see [`seed`]).

pub mod backbone;
pub mod canvas;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod prompt;
pub mod retriever;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
