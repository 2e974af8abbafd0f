//! Multi-scale ECG-text pretraining, end to end on the CPU.
//!
//! This crate holds everything algorithmic: a dense-tensor reverse-mode
//! autodiff engine with verifiable gradients, the ECG/text encoder stack,
//! the three-level training objective (captioning, beat-sentence alignment,
//! global contrastive), a synthetic paired ECG/report corpus generator, the
//! AdamW training loop, and the downstream evaluation protocols (zero-shot
//! classification, linear probing, transfer mapping, patient retrieval,
//! report generation with BLEU/ROUGE).
//!
//! The crate is `no_std`-compatible (`alloc` required); all transcendental
//! math goes through `libm` so results are bit-identical across platforms.
//! File formats, logging, and the CLI live in the companion `ecgtext-cli`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
