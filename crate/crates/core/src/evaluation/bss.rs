//! Source separation metrics by projection onto time-shifted references.
//!
//! Every estimate is split into `s_target + e_interf + e_artif`: the target
//! part is its least-squares projection onto `FILTER_LEN` delayed copies of
//! its own reference, the interference part is the extra energy captured by
//! adding every other reference's delays, and the artifact part is the
//! residual. Gram matrices are Toeplitz blocks of FFT cross-correlations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed distortion filter length in taps.
pub const FILTER_LEN: usize = 512;
/// Reported metrics are clamped to `[-CEILING, CEILING]` dB.
pub const CEILING: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// The three orthogonal parts of one estimate, each of length `n + L - 1`.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interf: Vec<f64>,
    pub artif: Vec<f64>,
}

impl Decomposition {
    pub fn metrics(&self) -> Option<SourceMetrics> {
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let target = e(&self.target);
        let sdr = ratio_db(target, e(&add(&self.interf, &self.artif)))?;
        let sir = ratio_db(target, e(&self.interf))?;
        let sar = ratio_db(e(&add(&self.target, &self.interf)), e(&self.artif))?;
        Some(SourceMetrics { sdr, sir, sar })
    }
}

/// `10 log10(num / den)` clamped to the ceiling; `None` for `0 / 0`.
pub fn ratio_db(num: f64, den: f64) -> Option<f64> {
    if num <= 0.0 && den <= 0.0 {
        return None;
    }
    if den <= 0.0 {
        return Some(CEILING);
    }
    if num <= 0.0 {
        return Some(-CEILING);
    }
    Some((10.0 * (num / den).log10()).clamp(-CEILING, CEILING))
}

struct Spectra {
    n_fft: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Spectra {
    fn new(n_fft: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectra {
            n_fft,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn fft(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.n_fft, Complex64::new(0.0, 0.0));
        self.forward.process(&mut buf);
        buf
    }

    /// Real part of the inverse transform of `a * conj(b)`: circular
    /// cross-correlation `c[k] = sum_t a[t + k] b[t]`.
    fn xcorr(&self, a: &[Complex64], b: &[Complex64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x * y.conj()).collect();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n_fft as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn ifft_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n_fft as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Correlation data shared by every estimate of one track.
struct Bases {
    n: usize,
    spectra: Spectra,
    ref_fft: Vec<Vec<Complex64>>,
    /// `auto[(i, j)]` cross-correlation of references `i` and `j`.
    cross: Vec<Vec<Vec<f64>>>,
}

impl Bases {
    fn new(references: &[Vec<f64>]) -> Self {
        let n = references[0].len();
        let spectra = Spectra::new((n + FILTER_LEN - 1).next_power_of_two());
        let ref_fft: Vec<_> = references.iter().map(|r| spectra.fft(r)).collect();
        let cross = ref_fft
            .iter()
            .map(|a| ref_fft.iter().map(|b| spectra.xcorr(a, b)).collect())
            .collect();
        Bases {
            n,
            spectra,
            ref_fft,
            cross,
        }
    }

    /// Value of `sum_t r_i[t - a] r_j[t - b]` for lags `a, b` in `0..L`.
    fn gram_entry(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        let c = &self.cross[j][i];
        // sum_t r_i[t] r_j[t + (a - b)] = c_ji[a - b] (circular index)
        let lag = (a as isize - b as isize).rem_euclid(self.spectra.n_fft as isize) as usize;
        c[lag]
    }

    /// Least-squares projection of `estimate` onto the delays of references `set`.
    fn project(&self, set: &[usize], estimate_fft: &[Complex64]) -> Vec<f64> {
        let l = FILTER_LEN;
        let dim = set.len() * l;
        let mut g = DMatrix::<f64>::zeros(dim, dim);
        for (bi, &i) in set.iter().enumerate() {
            for (bj, &j) in set.iter().enumerate() {
                for a in 0..l {
                    for b in 0..l {
                        g[(bi * l + a, bj * l + b)] = self.gram_entry(i, j, a, b);
                    }
                }
            }
        }
        let mut d = DVector::<f64>::zeros(dim);
        for (bi, &i) in set.iter().enumerate() {
            // sum_t r_i[t - a] e[t] = xcorr(e, r_i)[a]
            let c = self.spectra.xcorr(estimate_fft, &self.ref_fft[i]);
            for a in 0..l {
                d[bi * l + a] = c[a];
            }
        }
        let coeffs = solve_spd(g, d);
        // sum over references of r_i convolved with its filter
        let mut acc = vec![Complex64::new(0.0, 0.0); self.spectra.n_fft];
        for (bi, &i) in set.iter().enumerate() {
            let filt: Vec<f64> = (0..l).map(|a| coeffs[bi * l + a]).collect();
            let ff = self.spectra.fft(&filt);
            for ((o, r), f) in acc.iter_mut().zip(&self.ref_fft[i]).zip(&ff) {
                *o += r * f;
            }
        }
        let mut out = self.spectra.ifft_real(acc);
        out.truncate(self.n + l - 1);
        out
    }
}

/// Cholesky with an SVD fallback for rank-deficient Gram matrices.
fn solve_spd(g: DMatrix<f64>, d: DVector<f64>) -> DVector<f64> {
    if let Some(ch) = g.clone().cholesky() {
        let x = ch.solve(&d);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    let svd = g.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    svd.solve(&d, tol).unwrap_or_else(|_| DVector::zeros(d.len()))
}

fn check(references: &[Vec<f64>], estimates: &[Vec<f64>]) -> Result<()> {
    if references.is_empty() || references.len() != estimates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references for {} estimates",
            references.len(),
            estimates.len()
        )));
    }
    let n = references[0].len();
    if n == 0 || references.iter().chain(estimates).any(|s| s.len() != n) {
        return Err(Error::InvalidArgument("all sources must share one non-zero length".into()));
    }
    Ok(())
}

/// Decompose every estimate against the references. Sources whose reference
/// is silent get `None`.
pub fn decompose(references: &[Vec<f64>], estimates: &[Vec<f64>]) -> Result<Vec<Option<Decomposition>>> {
    check(references, estimates)?;
    let bases = Bases::new(references);
    let active: Vec<usize> = (0..references.len())
        .filter(|&i| references[i].iter().any(|&v| v != 0.0))
        .collect();
    let padded = bases.n + FILTER_LEN - 1;
    Ok((0..estimates.len())
        .map(|j| {
            if !active.contains(&j) {
                return None;
            }
            let est_fft = bases.spectra.fft(&estimates[j]);
            let target = bases.project(&[j], &est_fft);
            let all = if active.len() > 1 { bases.project(&active, &est_fft) } else { target.clone() };
            let interf: Vec<f64> = all.iter().zip(&target).map(|(a, t)| a - t).collect();
            let mut artif: Vec<f64> = all.iter().map(|a| -a).collect();
            for (o, &e) in artif.iter_mut().zip(&estimates[j]) {
                *o += e;
            }
            debug_assert_eq!(artif.len(), padded);
            Some(Decomposition { target, interf, artif })
        })
        .collect())
}

/// SDR, SIR and SAR for every estimate (global, whole-signal).
pub fn bss_eval(references: &[Vec<f64>], estimates: &[Vec<f64>]) -> Result<Vec<Option<SourceMetrics>>> {
    Ok(decompose(references, estimates)?
        .into_iter()
        .map(|d| d.and_then(|d| d.metrics()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_estimate_hits_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = vec![noise(2000, &mut rng), noise(2000, &mut rng)];
        for m in bss_eval(&refs, &refs).unwrap() {
            let m = m.unwrap();
            assert!(m.sdr > 70.0 && m.sir > 70.0 && m.sar > 70.0, "{m:?}");
        }
    }

    #[test]
    fn equal_interference_gives_zero_sir() {
        // noise bursts in disjoint halves of the signal: orthogonal, equal
        // norm, and only 511 samples of overlap under any allowed delay
        let n = 40_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..n).map(|t| if t < n / 2 { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let mut b: Vec<f64> = (0..n).map(|t| if t >= n / 2 { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let k = norm(&a) / norm(&b);
        b.iter_mut().for_each(|v| *v *= k);
        let est: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let m = bss_eval(&[a.clone(), b.clone()], &[est.clone(), est]).unwrap();
        let sir = m[0].unwrap().sir;
        assert!(sir.abs() < 0.5, "{sir}");
    }

    #[test]
    fn decomposition_is_orthogonal_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs = vec![noise(1500, &mut rng), noise(1500, &mut rng)];
        let ests: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| r.iter().map(|v| 0.8 * v + 0.3 * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let parts = decompose(&refs, &ests).unwrap();
        for (d, e) in parts.iter().zip(&ests) {
            let d = d.as_ref().unwrap();
            let en = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
            let total = en(e);
            let sum = en(&d.target) + en(&d.interf) + en(&d.artif);
            assert!(((sum - total) / total).abs() < 1e-6, "{sum} vs {total}");
        }
        let a = bss_eval(&refs, &ests).unwrap();
        let scale = |v: &Vec<Vec<f64>>| v.iter().map(|s| s.iter().map(|x| 3.5 * x).collect()).collect::<Vec<Vec<f64>>>();
        let b = bss_eval(&scale(&refs), &scale(&ests)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert!((x.sdr - y.sdr).abs() < 1e-6 && (x.sir - y.sir).abs() < 1e-6 && (x.sar - y.sar).abs() < 1e-6);
        }
    }

    #[test]
    fn silent_reference_is_undefined() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let refs = vec![noise(1000, &mut rng), vec![0.0; 1000]];
        let ests = vec![noise(1000, &mut rng), noise(1000, &mut rng)];
        let m = bss_eval(&refs, &ests).unwrap();
        assert!(m[0].is_some());
        assert!(m[1].is_none());
        assert!(bss_eval(&refs, &ests[..1]).is_err());
    }
}
