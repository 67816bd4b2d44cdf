//! Keyword-spotting experimentation toolkit.
//!
//! The crate covers the whole desk-scale pipeline: prompt generation with
//! prosody-control symbols, a deterministic procedural synthesizer with exact
//! unit alignments, a 40-band log-mel frontend stacked to 120-dim vectors, a
//! streaming SVDF encoder/decoder network with hand-written reverse-mode
//! gradients, the combined cross-entropy / max-pool objective, data-mixing
//! manifests and sweeps, and FRR at a fixed false-accept-per-hour budget.

pub mod audio;
pub mod augment;
pub mod datamix;
pub mod evaluator;
pub mod experiment;
pub mod frontend;
pub mod matrix;
pub mod objective;
pub mod optimizer;
pub mod report;
pub mod seed;
pub mod svdf;
pub mod textgen;
pub mod trainer;
pub mod tts;

pub use audio::{AudioClip, Label, UnitSegment};
pub use frontend::FeatureSequence;
pub use matrix::Matrix;
pub use svdf::{KwsModel, ModelConfig, StreamState};
