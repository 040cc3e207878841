//! Algorithmic core for multi-aspect traffic scene classification from
//! imagery latents and road-network trajectory context.
//!
//! The crate is `no_std`-compatible (allocation required). It contains the
//! full pipeline below; all file formats, IO, and the command-line surface
//! live in the companion `roadscene` crate.
//!
//! * [`graph`] — road network model and segment-graph shortest paths
//! * [`matching`] — HMM map matching of GPS traces onto the network and
//!   per-window dynamic segment statistics
//! * [`tensor`] — dense `f64` tensors with tape-based reverse-mode
//!   differentiation and a finite-difference gradient checker
//! * [`context`] — segment property embeddings, feature fusion, and the
//!   tracklet transformer producing a trajectory context vector
//! * [`stubs`] — frozen seeded stand-ins for the image and text encoders
//! * [`prompt`] — learnable multi-aspect prompts with context injection and
//!   bi-level (cross-modal + cross-aspect) attention
//! * [`model`] — parameter store and the end-to-end forward pass
//! * [`train`] — loss, few-shot sampling, cosine-annealed SGD loop
//! * [`eval`] — predictions, template descriptions, accuracy / macro-F1
//! * [`synth`] — deterministic synthetic world generator for end-to-end tests

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod context;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matching;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod stubs;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
