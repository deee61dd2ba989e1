//! Audiovisual speaker conversion toolkit.
//!
//! Converts one speaker's voice and face to another's by jointly
//! transforming acoustic and facial features, synthesizing waveforms with an
//! autoregressive vocoder, and reconstructing face images with an
//! adversarially trained generator. Includes DTW alignment of parallel
//! utterances, a synthetic correlated corpus generator for desk-scale
//! experiments, and a CCA-based audio-lip correlation evaluation.

pub mod align;
pub mod audio;
pub mod checkpoint;
pub mod error;
pub mod evalcca;
pub mod features;
pub mod imagegen;
pub mod mel;
pub mod nn;
pub mod synth;
pub mod transformnet;
pub mod vocoder;

pub use error::{Error, Result};
