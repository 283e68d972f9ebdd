//! Phoneme-conditioned singing voice separation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, the optimizer and checkpoints.
//! - [`dsp`]: resampling, STFT/ISTFT, patching, masking and WAV I/O.
//! - [`phoneme`]: lexicon lookup, annotations and the phoneme activation matrix.
//! - [`conditioning`]: FiLM layers, weak control networks and strong basis tensors.
//! - [`unet`]: the conditioned U-Net and the waveform-level `separate` pipeline.
//! - [`training`]: batch sampling, mix augmentation, LR scheduling and the trainer.
//! - [`gradsuite`]: finite-difference checks of every differentiable op and the U-Net.
//! - [`evaluation`]: BSS-eval metrics, silence metrics and paired t-tests.
//! - [`dataset`]: stem merging, agreement splits, manifests and a synthetic corpus.
//!
//! Data-parallel loops go through [`parallel`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod conditioning;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod parallel;
pub mod phoneme;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
