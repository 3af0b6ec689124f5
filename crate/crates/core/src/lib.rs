//! Multimodal processing of speech-therapy recordings: ultrasound tongue
//! activity, speaker diarization, ultrasound embeddings, prompt-constrained
//! word alignment and the associated evaluation metrics.

mod binio;
pub mod error;
pub mod eta;
pub mod aligner;
pub mod diarizer;
pub mod embedder;
pub mod features;
pub mod gmm;
pub mod matrix;
pub mod metrics;
pub mod session_io;
pub mod synthgen;

pub use error::{Error, Result};
pub use matrix::Matrix;
