//! Discrete-code prosody-transfer text-to-speech, desk scale and hermetic.
//!
//! The pipeline: a mini residual vector quantizer turns reference audio into
//! discrete code matrices; a Mixer+GRU reference encoder maps codes to an
//! utterance-level style embedding; a compact variational synthesizer is
//! globally conditioned on style and speaker embeddings; training, objective
//! evaluation (cosine similarities, leakage probes) and a synthetic factorized
//! corpus make the whole loop reproducible on one CPU.

pub mod audio;
pub mod codec;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod refenc;
pub mod tensor;

pub mod backbone;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
