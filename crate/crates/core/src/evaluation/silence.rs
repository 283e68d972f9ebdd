//! Leakage metrics on silent frames.
//!
//! PES (predicted energy at silence) averages the estimate's frame energy in
//! dB over frames where the reference is silent. EPS (energy at predicted
//! silence) averages the reference's frame energy over frames where the
//! estimate is silent but the reference is not. A frame is silent when its
//! energy is below `SILENCE_DB` relative to the squared peak amplitude of its
//! own signal.

use crate::dsp::StftConfig;

pub const FLOOR_DB: f64 = -80.0;
pub const SILENCE_DB: f64 = -25.0;
pub const EPSILON: f64 = 1e-9;

/// Sum of squared samples per frame on the STFT grid (zero past the end).
pub fn frame_energies(x: &[f64], window: usize, hop: usize) -> Vec<f64> {
    let frames = x.len().div_ceil(hop).max(1);
    (0..frames)
        .map(|k| {
            let start = k * hop;
            let end = (start + window).min(x.len());
            x.get(start..end).map_or(0.0, |s| s.iter().map(|v| v * v).sum())
        })
        .collect()
}

/// Per-frame silence flags for one signal.
pub fn silent_frames(x: &[f64], window: usize, hop: usize) -> Vec<bool> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = 10f64.powf(SILENCE_DB / 10.0) * peak * peak;
    frame_energies(x, window, hop)
        .into_iter()
        .map(|e| peak == 0.0 || e < threshold)
        .collect()
}

fn level_db(e: f64) -> f64 {
    (10.0 * (e + EPSILON).log10()).max(FLOOR_DB)
}

fn mean_level(energies: &[f64], select: impl Fn(usize) -> bool) -> Option<f64> {
    let picked: Vec<f64> = (0..energies.len()).filter(|&k| select(k)).map(|k| level_db(energies[k])).collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

/// `(PES, EPS)`, each `None` when no frame qualifies.
pub fn pes_eps(reference: &[f64], estimate: &[f64], config: &StftConfig) -> (Option<f64>, Option<f64>) {
    let (w, h) = (config.window, config.hop);
    let ref_silent = silent_frames(reference, w, h);
    let est_silent = silent_frames(estimate, w, h);
    let ref_e = frame_energies(reference, w, h);
    let est_e = frame_energies(estimate, w, h);
    let n = ref_e.len().min(est_e.len());
    let pes = mean_level(&est_e[..n], |k| ref_silent[k]);
    let eps = mean_level(&ref_e[..n], |k| est_silent[k] && !ref_silent[k]);
    (pes, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> StftConfig {
        StftConfig::default()
    }

    fn loud_then_quiet(frames_loud: usize, frames_total: usize) -> Vec<f64> {
        let hop = cfg().hop;
        (0..frames_total * hop)
            .map(|t| if t < frames_loud * hop { ((t * 7 % 13) as f64 - 6.0) / 6.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn zero_prediction_at_silence_hits_floor() {
        let r = loud_then_quiet(4, 10);
        let e = vec![0.0; r.len()];
        let (pes, eps) = pes_eps(&r, &e, &cfg());
        assert_eq!(pes, Some(FLOOR_DB));
        // the prediction is silent everywhere, so EPS covers the loud frames
        assert!(eps.unwrap() > 0.0);
    }

    #[test]
    fn perfect_prediction() {
        let r = loud_then_quiet(4, 10);
        let (pes, eps) = pes_eps(&r, &r, &cfg());
        assert_eq!(pes, Some(FLOOR_DB));
        assert!(eps.is_none() || eps == Some(FLOOR_DB));
    }

    #[test]
    fn single_silent_frame_level() {
        // one hop-long signal: one frame. Reference silent everywhere.
        let r = vec![0.0; 768];
        let mut e = vec![0.0; 768];
        e[100] = 1e-2;
        let (pes, _) = pes_eps(&r, &e, &cfg());
        let expect = 10.0 * (1e-4f64 + 1e-9).log10();
        assert!((pes.unwrap() - expect).abs() < 1e-9);
        assert!((expect + 40.0).abs() < 1e-3);
    }

    #[test]
    fn no_silent_reference_frame_means_no_pes() {
        let r: Vec<f64> = (0..4000).map(|t| (t as f64 * 0.1).sin()).collect();
        let (pes, _) = pes_eps(&r, &r, &cfg());
        assert!(pes.is_none());
    }

    proptest! {
        #[test]
        fn floor_and_monotone(gain in 0.0f64..10.0, extra in 0.0f64..5.0, seed in 0u64..100) {
            let r = loud_then_quiet(3, 8);
            let e: Vec<f64> = (0..r.len()).map(|t| gain * (((t as u64 * 31 + seed) % 17) as f64 - 8.0) / 8.0).collect();
            let louder: Vec<f64> = e.iter().map(|v| v * (1.0 + extra)).collect();
            let (p1, e1) = pes_eps(&r, &e, &cfg());
            let (p2, _) = pes_eps(&r, &louder, &cfg());
            prop_assert!(p1.unwrap() >= FLOOR_DB);
            prop_assert!(e1.is_none_or(|v| v >= FLOOR_DB));
            prop_assert!(p2.unwrap() >= p1.unwrap() - 1e-12);
        }
    }
}
