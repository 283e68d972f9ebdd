use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

/// Length of the interpolation kernel, counted in output-rate samples.
pub const SINC_TAPS: usize = 64;

const ROLLOFF: f64 = 0.94;

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited downsampling with a Blackman-windowed sinc kernel.
///
/// Every output sample is a normalized weighted sum of the input samples under
/// a kernel spanning [`SINC_TAPS`] output periods, with the low-pass cutoff
/// just below the target Nyquist frequency. Normalizing by the kernel sum keeps
/// DC exact. Output length is `round(len * target / source)`.
pub fn resample(audio: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let src = audio.sample_rate;
    if target_rate == 0 || src == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if target_rate > src {
        return Err(Error::InvalidArgument(format!(
            "upsampling from {src} Hz to {target_rate} Hz is not supported"
        )));
    }
    if target_rate == src {
        return Ok(audio.clone());
    }
    let ratio = target_rate as f64 / src as f64;
    let out_len = (audio.samples.len() as f64 * ratio).round() as usize;
    // cutoff in cycles per input sample
    let fc = 0.5 * ratio * ROLLOFF;
    let half_width = SINC_TAPS as f64 / 2.0 / ratio;
    let x = &audio.samples;
    let samples = crate::parallel::map_range(out_len, |n| {
        let t = n as f64 / ratio;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(x.len().saturating_sub(1));
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = k as f64 - t;
            let h = sinc(2.0 * fc * d) * blackman(d / half_width);
            acc += h * v as f64;
            norm += h;
        }
        if norm.abs() > 1e-12 {
            (acc / norm) as f32
        } else {
            0.0
        }
    });
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn same_rate_is_unchanged() {
        let a = AudioClip::new(vec![0.1, -0.2, 0.3], 8192);
        assert_eq!(resample(&a, 8192).unwrap(), a);
    }

    #[test]
    fn upsampling_rejected() {
        let a = AudioClip::new(vec![0.0; 10], 8000);
        assert!(resample(&a, 8192).is_err());
    }

    #[test]
    fn dc_is_preserved() {
        let a = AudioClip::new(vec![0.7; 44100], 44100);
        let b = resample(&a, 8192).unwrap();
        assert!((b.len() as i64 - 8192).abs() <= 1);
        assert!(b.samples.iter().all(|&v| (v - 0.7).abs() < 1e-3));
    }

    #[test]
    fn sine_peak_lands_in_right_bin() {
        let src = 44100.0;
        let a = AudioClip::new(
            (0..44100).map(|n| (2.0 * PI * 440.0 * n as f64 / src).sin() as f32).collect(),
            44100,
        );
        let b = resample(&a, 8192).unwrap();
        let n = 8192;
        let mut buf: Vec<Complex<f64>> = b.samples[..n].iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2).max_by(|&i, &j| buf[i].norm().total_cmp(&buf[j].norm())).unwrap();
        // 1 Hz bins over one second
        assert!((peak as i64 - 440).abs() <= 1, "peak bin {peak}");
    }
}
