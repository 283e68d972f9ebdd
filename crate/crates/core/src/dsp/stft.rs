use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioClip, PIPELINE_RATE};
use crate::error::{Error, Result};

/// Analysis parameters. Frame `k` covers samples `[k * hop, k * hop + window)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    /// 1024-sample Hann window, hop 768, at 8192 Hz: 512 retained bins.
    fn default() -> Self {
        StftConfig {
            window: 1024,
            hop: 768,
            sample_rate: PIPELINE_RATE,
        }
    }
}

impl StftConfig {
    /// The same geometry scaled down by 8 (128 / 96), yielding 64 bins.
    /// Used by the desk-scale model preset.
    pub fn compact() -> Self {
        StftConfig {
            window: 128,
            hop: 96,
            sample_rate: PIPELINE_RATE,
        }
    }

    /// Retained bins: the Nyquist bin of the `window / 2 + 1` is dropped.
    pub fn bins(&self) -> usize {
        self.window / 2
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop).max(1)
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Center time of frame `k`, in seconds.
    pub fn frame_center(&self, k: usize) -> f64 {
        (k * self.hop) as f64 / self.sample_rate as f64 + self.window as f64 / (2.0 * self.sample_rate as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 4 || self.window % 2 != 0 || self.hop == 0 || self.hop > self.window {
            return Err(Error::InvalidArgument(format!("invalid STFT geometry {self:?}")));
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()) as f32)
        .collect()
}

/// Complex STFT with `bins()` retained bins per frame.
///
/// The real-valued Nyquist coefficient is kept separately so an unmodified
/// spectrogram inverts exactly. Spectrograms without it (`nyquist: None`)
/// invert with that bin set to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub config: StftConfig,
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames x bins`.
    pub data: Vec<Complex32>,
    pub nyquist: Option<Vec<f32>>,
    /// Length of the analysed signal, used to trim the inverse.
    pub num_samples: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, frames: usize, num_samples: usize) -> Self {
        let bins = config.bins();
        ComplexSpectrogram {
            config,
            frames,
            bins,
            data: vec![Complex32::new(0.0, 0.0); frames * bins],
            nyquist: None,
            num_samples,
        }
    }

    /// Row-major `frames x bins` magnitudes.
    pub fn magnitude(&self) -> Vec<f32> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Replace magnitudes while keeping this spectrogram's phase. The
    /// Nyquist side channel is dropped.
    pub fn with_magnitude(&self, magnitude: &[f32]) -> Result<ComplexSpectrogram> {
        if magnitude.len() != self.data.len() {
            return Err(Error::shape(
                "with_magnitude",
                format!("{} magnitudes for {}x{} spectrogram", magnitude.len(), self.frames, self.bins),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(magnitude)
            .map(|(c, &m)| {
                let n = c.norm();
                if n > 0.0 {
                    c * (m / n)
                } else {
                    Complex32::new(m, 0.0)
                }
            })
            .collect();
        Ok(ComplexSpectrogram {
            data,
            nyquist: None,
            ..self.clone()
        })
    }
}

struct Plans {
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn stft(audio: &AudioClip, config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if audio.sample_rate != config.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "audio at {} Hz, STFT configured for {} Hz",
            audio.sample_rate, config.sample_rate
        )));
    }
    let (win, hop, bins) = (config.window, config.hop, config.bins());
    let frames = config.frame_count(audio.len());
    let window = hann_window(win);
    let fft = plans(win).forward;
    let x = &audio.samples;
    let per_frame = crate::parallel::map_range(frames, |k| {
        let start = k * hop;
        let mut buf: Vec<Complex32> = (0..win)
            .map(|n| Complex32::new(x.get(start + n).copied().unwrap_or(0.0) * window[n], 0.0))
            .collect();
        fft.process(&mut buf);
        let nyq = buf[bins].re;
        buf.truncate(bins);
        (buf, nyq)
    });
    let mut data = Vec::with_capacity(frames * bins);
    let mut nyquist = Vec::with_capacity(frames);
    for (row, nyq) in per_frame {
        data.extend(row);
        nyquist.push(nyq);
    }
    Ok(ComplexSpectrogram {
        config: *config,
        frames,
        bins,
        data,
        nyquist: Some(nyquist),
        num_samples: audio.len(),
    })
}

/// Weighted overlap-add inverse normalized by the squared-window sum.
///
/// Samples where the window sum is below `1e-8` (only the very first sample
/// with a Hann window) are set to zero.
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip> {
    let config = &spec.config;
    config.validate()?;
    if spec.bins != config.bins() || spec.data.len() != spec.frames * spec.bins {
        return Err(Error::shape("istft", format!("{}x{} spectrogram inconsistent with {config:?}", spec.frames, spec.bins)));
    }
    let (win, hop, bins) = (config.window, config.hop, spec.bins);
    let window = hann_window(win);
    let ifft = plans(win).inverse;
    let span = (spec.frames - 1) * hop + win;
    let mut out = vec![0f64; span.max(spec.num_samples)];
    let mut wsum = vec![0f64; out.len()];
    let scale = 1.0 / win as f32;
    let frames = crate::parallel::map_range(spec.frames, |k| {
        let row = &spec.data[k * bins..(k + 1) * bins];
        let mut buf = vec![Complex32::new(0.0, 0.0); win];
        buf[..bins].copy_from_slice(row);
        buf[0].im = 0.0;
        let nyq = spec.nyquist.as_ref().map_or(0.0, |n| n[k]);
        buf[bins] = Complex32::new(nyq, 0.0);
        for j in 1..bins {
            buf[win - j] = row[j].conj();
        }
        ifft.process(&mut buf);
        buf.iter()
            .zip(&window)
            .map(|(c, &w)| c.re * scale * w)
            .collect::<Vec<f32>>()
    });
    for (k, frame) in frames.into_iter().enumerate() {
        let start = k * hop;
        for (n, v) in frame.into_iter().enumerate() {
            out[start + n] += v as f64;
            wsum[start + n] += (window[n] as f64).powi(2);
        }
    }
    let samples = out
        .iter()
        .zip(&wsum)
        .take(spec.num_samples)
        .map(|(&v, &w)| if w > 1e-8 { (v / w) as f32 } else { 0.0 })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: config.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), PIPELINE_RATE)
    }

    fn interior_snr(a: &[f32], b: &[f32], edge: usize) -> f64 {
        let (a, b) = (&a[edge..a.len() - edge], &b[edge..b.len() - edge]);
        let sig: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum();
        let err: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        10.0 * (sig / err).log10()
    }

    #[test]
    fn frame_count_for_twelve_seconds() {
        assert_eq!(StftConfig::default().frame_count(98304), 128);
        assert_eq!(StftConfig::default().frame_count(10), 1);
        assert_eq!(StftConfig::default().bins(), 512);
    }

    #[test]
    fn zero_in_zero_out() {
        let a = AudioClip::silence(5000, PIPELINE_RATE);
        let s = stft(&a, &StftConfig::default()).unwrap();
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        let back = istft(&ComplexSpectrogram::zeros(s.config, s.frames, 5000)).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_audio_gives_one_padded_frame() {
        let a = AudioClip::new(vec![0.5; 100], PIPELINE_RATE);
        let s = stft(&a, &StftConfig::default()).unwrap();
        assert_eq!(s.frames, 1);
    }

    #[test]
    fn impulse_matches_direct_dft() {
        let cfg = StftConfig::default();
        let mut x = vec![0.0; 1024];
        x[512] = 1.0;
        let s = stft(&AudioClip::new(x, PIPELINE_RATE), &cfg).unwrap();
        let w = hann_window(1024);
        // direct DFT of the windowed impulse: w[512] * exp(-i 2 pi k 512 / 1024)
        for k in 0..cfg.bins() {
            let ang = -2.0 * PI * k as f64 * 512.0 / 1024.0;
            let (re, im) = (w[512] as f64 * ang.cos(), w[512] as f64 * ang.sin());
            let c = s.data[k];
            assert!((c.re as f64 - re).abs() < 1e-5 && (c.im as f64 - im).abs() < 1e-5);
        }
    }

    #[test]
    fn white_noise_round_trip_above_60_db() {
        let a = noise(3 * 8192, 7);
        let s = stft(&a, &StftConfig::default()).unwrap();
        let b = istft(&s).unwrap();
        assert_eq!(b.len(), a.len());
        let snr = interior_snr(&a.samples, &b.samples, 512);
        assert!(snr > 60.0, "snr {snr}");
    }

    #[test]
    fn inverse_is_linear() {
        let cfg = StftConfig::default();
        let a = stft(&noise(9000, 1), &cfg).unwrap();
        let b = stft(&noise(9000, 2), &cfg).unwrap();
        let mut sum = a.clone();
        sum.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        let na = a.nyquist.as_ref().unwrap();
        let nb = b.nyquist.as_ref().unwrap();
        sum.nyquist = Some(na.iter().zip(nb).map(|(x, y)| x + y).collect());
        let (xa, xb, xs) = (istft(&a).unwrap(), istft(&b).unwrap(), istft(&sum).unwrap());
        // the first few samples sit under a near-zero window sum and amplify
        // rounding, so linearity is checked past them
        for i in cfg.window / 8..xs.len() {
            assert!((xs.samples[i] - xa.samples[i] - xb.samples[i]).abs() < 1e-5, "sample {i}");
        }
    }
}
