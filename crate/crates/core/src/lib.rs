pub mod dataset;
pub mod error;
pub mod eval_metrics;
pub mod harness;
pub mod image;
pub mod losses;
pub mod png_io;
pub mod nets;
pub mod parsing_net;
pub mod person_rep;
pub mod pix22dsurf;
pub mod style_editor;
pub mod pose;
pub mod sampling;
pub mod segmentation;
pub mod synth;
pub mod train_util;

pub use error::{Result, VtonError};
