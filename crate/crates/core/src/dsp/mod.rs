//! Audio front end: resampling, STFT/ISTFT, patching and masking.

mod patch;
mod resample;
mod stft;
pub mod wav;

use log::warn;

pub use patch::{apply_mask, assemble_patches, extract_patches, MagnitudePatch};
pub use resample::{resample, SINC_TAPS};
pub use stft::{hann_window, istft, stft, ComplexSpectrogram, StftConfig};

/// Sample rate the whole pipeline operates at.
pub const PIPELINE_RATE: u32 = 8192;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        let clip = AudioClip {
            samples,
            sample_rate,
        };
        clip.check_level();
        clip
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioClip {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Warn about non-finite samples or levels that suggest un-normalized input.
    pub fn check_level(&self) -> bool {
        let peak = self.samples.iter().fold(0f32, |m, v| m.max(v.abs()));
        if !peak.is_finite() || self.samples.iter().any(|v| !v.is_finite()) {
            warn!("audio contains non-finite samples");
            return false;
        }
        if peak > 10.0 {
            warn!("audio peak {peak:.1} exceeds 10; input is likely not normalized");
        }
        true
    }
}

/// Sum of squares.
pub fn energy(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64 * v as f64).sum()
}
