use super::ComplexSpectrogram;
use crate::error::{Error, Result};

/// A `frames x bins` magnitude window cut from a longer spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudePatch {
    /// First source frame covered by this patch.
    pub offset: usize,
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames x bins`; frames past the end of the source are zero.
    pub data: Vec<f32>,
}

/// Cut `magnitude` (row-major `total_frames x bins`) into consecutive
/// non-overlapping patches of `frames` frames, zero-padding the last one.
pub fn extract_patches(magnitude: &[f32], total_frames: usize, bins: usize, frames: usize) -> Result<Vec<MagnitudePatch>> {
    if frames == 0 || bins == 0 || magnitude.len() != total_frames * bins {
        return Err(Error::shape(
            "extract_patches",
            format!("{} values for {total_frames}x{bins}, patch length {frames}", magnitude.len()),
        ));
    }
    let count = total_frames.div_ceil(frames).max(1);
    Ok((0..count)
        .map(|p| {
            let offset = p * frames;
            let mut data = vec![0.0; frames * bins];
            let end = (offset + frames).min(total_frames);
            if end > offset {
                data[..(end - offset) * bins].copy_from_slice(&magnitude[offset * bins..end * bins]);
            }
            MagnitudePatch {
                offset,
                frames,
                bins,
                data,
            }
        })
        .collect())
}

/// Inverse of [`extract_patches`]: write patches back at their offsets and
/// truncate to `total_frames`.
pub fn assemble_patches(patches: &[MagnitudePatch], total_frames: usize, bins: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; total_frames * bins];
    for p in patches {
        if p.bins != bins || p.data.len() != p.frames * p.bins {
            return Err(Error::shape("assemble_patches", format!("patch {}x{} into {bins} bins", p.frames, p.bins)));
        }
        let end = (p.offset + p.frames).min(total_frames);
        if end > p.offset {
            out[p.offset * bins..end * bins].copy_from_slice(&p.data[..(end - p.offset) * bins]);
        }
    }
    Ok(out)
}

/// Multiply the mixture magnitudes by `mask` and keep the mixture phase.
///
/// The Nyquist coefficient, which the mask does not cover, is scaled by the
/// mask of the highest retained bin. Mask entries outside `[0, 1]` (or
/// non-finite) are rejected.
pub fn apply_mask(mixture: &ComplexSpectrogram, mask: &[f32]) -> Result<ComplexSpectrogram> {
    if mask.len() != mixture.data.len() {
        return Err(Error::shape(
            "apply_mask",
            format!("{} mask values for {}x{} spectrogram", mask.len(), mixture.frames, mixture.bins),
        ));
    }
    if let Some(bad) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::InvalidArgument(format!("mask value {bad} outside [0, 1]")));
    }
    let data = mixture.data.iter().zip(mask).map(|(c, &m)| c * m).collect();
    let bins = mixture.bins;
    let nyquist = mixture
        .nyquist
        .as_ref()
        .map(|n| n.iter().enumerate().map(|(k, v)| v * mask[k * bins + bins - 1]).collect());
    Ok(ComplexSpectrogram {
        data,
        nyquist,
        ..mixture.clone()
    })
}
