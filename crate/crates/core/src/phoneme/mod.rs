//! Phoneme context: lyric annotations rendered as a frame-by-phoneme
//! activation matrix, plus the normalized and time-pooled views consumed by
//! the conditioned models.

mod annotation;
mod lexicon;
pub mod vocab;

use log::warn;

pub use annotation::{AnnotationSequence, WordAnnotation};
pub use lexicon::Lexicon;
pub use vocab::{NON_PHONEME, P};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

/// Binary `frames x P` matrix. Every row has at least one active entry, and
/// the non-phoneme column is active exactly when no phoneme is.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationMatrix {
    frames: usize,
    data: Vec<u8>,
}

impl ActivationMatrix {
    /// A matrix with only the non-phoneme row active.
    pub fn silent(frames: usize) -> Self {
        let mut data = vec![0; frames * P];
        for t in 0..frames {
            data[t * P + NON_PHONEME] = 1;
        }
        ActivationMatrix { frames, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, frame: usize, col: usize) -> bool {
        self.data[frame * P + col] != 0
    }

    pub fn row(&self, frame: usize) -> &[u8] {
        &self.data[frame * P..(frame + 1) * P]
    }

    /// Activate phoneme `col` in `frame` (clearing the non-phoneme flag).
    pub fn activate(&mut self, frame: usize, col: usize) {
        debug_assert!(col < NON_PHONEME);
        self.data[frame * P + col] = 1;
        self.data[frame * P + NON_PHONEME] = 0;
    }

    /// Sum of each column.
    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; P];
        for row in self.data.chunks(P) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v as usize;
            }
        }
        sums
    }

    /// `len` frames starting at `offset` as an f32 tensor `[len, P]`; frames
    /// past the end are non-phoneme rows.
    pub fn window(&self, offset: usize, len: usize) -> Tensor<f32> {
        let mut out = vec![0f32; len * P];
        for t in 0..len {
            let src = offset + t;
            if src < self.frames {
                for (o, &v) in out[t * P..(t + 1) * P].iter_mut().zip(self.row(src)) {
                    *o = v as f32;
                }
            } else {
                out[t * P + NON_PHONEME] = 1.0;
            }
        }
        Tensor::new(vec![len, P], out).expect("window has positive extent")
    }

    /// A uniformly random permutation of all `P` columns, non-phoneme
    /// included, as used by shuffled-conditioning controls.
    pub fn shuffled<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..P).collect();
        perm.shuffle(rng);
        self.permute_phonemes(&perm).expect("a permutation of P columns")
    }

    /// [`shuffled`](Self::shuffled) driven by a fresh seeded stream.
    pub fn shuffled_seeded(&self, seed: u64) -> Self {
        use rand::SeedableRng;
        self.shuffled(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    /// Permute columns for shuffled controls: new column `perm[i]` receives
    /// old column `i`. A permutation of length 39 leaves the non-phoneme
    /// column in place; one of length `P` moves it too, after which the row
    /// invariants no longer hold.
    pub fn permute_phonemes(&self, perm: &[usize]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        let ok = (perm.len() == vocab::PHONEMES || perm.len() == P) && sorted == (0..perm.len()).collect::<Vec<_>>();
        if !ok {
            return Err(Error::InvalidArgument("not a permutation of the phoneme columns".into()));
        }
        let mut data = self.data.clone();
        for t in 0..self.frames {
            for (i, &j) in perm.iter().enumerate() {
                data[t * P + j] = self.data[t * P + i];
            }
        }
        Ok(ActivationMatrix { frames: self.frames, data })
    }
}

/// Center time of a frame in seconds and the frame-center membership rule.
fn frame_in_word(config: &StftConfig, k: usize, w: &WordAnnotation) -> bool {
    let c = config.frame_center(k);
    w.t_start <= c && c < w.t_end
}

/// Render annotations as a bag-of-phonemes matrix: every phoneme of a word is
/// active over each frame whose center lies in `[t_start, t_end)`.
pub fn build_activation_matrix(
    annotations: &AnnotationSequence,
    lexicon: &Lexicon,
    frames: usize,
    config: &StftConfig,
) -> ActivationMatrix {
    let mut z = ActivationMatrix::silent(frames);
    let sr = config.sample_rate as f64;
    let half = config.window as f64 / 2.0;
    let covered = config.frame_center(frames.saturating_sub(1)) + config.hop as f64 / sr;
    let mut truncated = 0;
    for w in &annotations.words {
        if w.t_end > covered {
            truncated += 1;
        }
        let phones = lexicon.text_phonemes(&w.text);
        if phones.is_empty() {
            continue;
        }
        // candidate range from the inverted center formula, then exact check
        let first = (((w.t_start * sr - half) / config.hop as f64).floor() - 1.0).max(0.0) as usize;
        let last = ((((w.t_end * sr - half) / config.hop as f64).ceil() + 1.0).max(0.0) as usize).min(frames);
        for k in first..last {
            if frame_in_word(config, k, w) {
                for &p in &phones {
                    z.activate(k, p);
                }
            }
        }
    }
    if truncated > 0 {
        warn!("{truncated} annotation(s) extend past the {frames}-frame signal and were truncated");
    }
    z
}

/// Softmax over the phoneme axis of `[.., P]`.
pub fn normalize_strong<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape().last() != Some(&P) {
        return Err(Error::shape("normalize_strong", format!("{:?} must end in {P}", z.shape())));
    }
    kernels::softmax(z, z.rank() - 1)
}

/// Average-pool `[.., N, P]` over non-overlapping windows of `2^depth` frames.
pub fn downsample_to_depth<T: Real>(z: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    let shape = z.shape();
    if shape.len() < 2 {
        return Err(Error::shape("downsample_to_depth", format!("{shape:?} must be [.., N, P]")));
    }
    let n = shape[shape.len() - 2];
    let p = shape[shape.len() - 1];
    let factor = 1usize.checked_shl(depth as u32).unwrap_or(0);
    if depth > 16 || factor == 0 || n % factor != 0 {
        return Err(Error::InvalidArgument(format!("cannot pool {n} frames to depth {depth}")));
    }
    if depth == 0 {
        return Ok(z.clone());
    }
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[shape.len() - 2] = n / factor;
    let pooled = z.reshape([lead * n / factor, factor, p])?;
    kernels::mean_axis(&pooled, 1)?.reshape(out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn word(t0: f64, t1: f64, text: &str) -> WordAnnotation {
        WordAnnotation {
            t_start: t0,
            t_end: t1,
            f_min: 0.0,
            f_max: 4096.0,
            text: text.into(),
            parent_index: None,
        }
    }

    fn frame_start_time(k: usize) -> f64 {
        (k * 768) as f64 / 8192.0 + 512.0 / 8192.0
    }

    #[test]
    fn column_permutations() {
        let mut m = ActivationMatrix::silent(3);
        m.activate(1, 0);
        let mut perm: Vec<usize> = (0..vocab::PHONEMES).collect();
        perm.swap(0, 5);
        let p = m.permute_phonemes(&perm).unwrap();
        assert!(p.get(1, 5) && !p.get(1, 0) && p.get(0, NON_PHONEME));
        let mut all: Vec<usize> = (0..P).collect();
        all.swap(NON_PHONEME, 2);
        let q = m.permute_phonemes(&all).unwrap();
        assert!(q.get(0, 2) && !q.get(0, NON_PHONEME) && q.get(1, 0));
        assert!(m.permute_phonemes(&[0, 1]).is_err());
        assert!(m.permute_phonemes(&vec![0; P]).is_err());
    }

    #[test]
    fn empty_annotations_are_silent() {
        let z = build_activation_matrix(&AnnotationSequence::new(1.0, vec![]).unwrap(), &Lexicon::builtin(), 50, &StftConfig::default());
        assert_eq!(z, ActivationMatrix::silent(50));
    }

    #[test]
    fn cat_spans_frames_ten_to_twenty() {
        // word boundaries placed exactly on the centers of frames 10 and 20
        let seq = AnnotationSequence::new(1.0, vec![word(frame_start_time(10), frame_start_time(20), "cat")]).unwrap();
        let z = build_activation_matrix(&seq, &Lexicon::builtin(), 40, &StftConfig::default());
        let (k, ae, t) = (vocab::index_of("K").unwrap(), vocab::index_of("AE").unwrap(), vocab::index_of("T").unwrap());
        for f in 0..40 {
            let inside = (10..20).contains(&f);
            assert_eq!(z.get(f, k) && z.get(f, ae) && z.get(f, t), inside, "frame {f}");
            assert_eq!(z.get(f, NON_PHONEME), !inside);
            assert_eq!(z.row(f).iter().filter(|&&v| v == 1).count(), if inside { 3 } else { 1 });
        }
    }

    #[test]
    fn non_phoneme_row_value() {
        let z = ActivationMatrix::silent(2).window(0, 2);
        let n = normalize_strong(&z).unwrap();
        let e = std::f64::consts::E;
        assert!((n.data()[NON_PHONEME] as f64 - e / (e + 39.0)).abs() < 1e-6);
        assert!((n.data()[0] as f64 - 1.0 / (e + 39.0)).abs() < 1e-6);
        assert!((e / (e + 39.0) - 0.0652).abs() < 1e-4);
    }

    #[test]
    fn depth_pooling_averages_pairs() {
        let z = Tensor::<f32>::from_f64([2, 2], &[0.2, 0.8, 0.6, 0.4]).unwrap();
        let d1 = downsample_to_depth(&z, 1).unwrap();
        assert_eq!(d1.shape(), &[1, 2]);
        assert!((d1.data()[0] - 0.4).abs() < 1e-7);
        assert_eq!(downsample_to_depth(&z, 0).unwrap(), z);
        assert!(downsample_to_depth(&z, 2).is_err());
    }

    #[test]
    fn window_pads_with_non_phoneme() {
        let w = ActivationMatrix::silent(3).window(2, 4);
        assert_eq!(w.shape(), &[4, P]);
        for t in 0..4 {
            assert_eq!(w.data()[t * P + NON_PHONEME], 1.0);
        }
    }

    proptest! {
        #[test]
        fn rows_stay_stochastic(bits in proptest::collection::vec(any::<bool>(), 64 * P), depth in 0usize..7) {
            let mut z = ActivationMatrix::silent(64);
            for (i, b) in bits.iter().enumerate() {
                if *b && i % P != NON_PHONEME {
                    z.activate(i / P, i % P);
                }
            }
            let n = normalize_strong(&z.window(0, 64)).unwrap();
            let d = downsample_to_depth(&n, depth).unwrap();
            for row in d.data().chunks(P) {
                prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_is_permutation_equivariant(bits in proptest::collection::vec(any::<bool>(), P), shift in 1usize..P) {
            let row: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
            let perm: Vec<f64> = (0..P).map(|i| row[(i + shift) % P]).collect();
            let a = normalize_strong(&Tensor::<f32>::from_f64([1, P], &row).unwrap()).unwrap();
            let b = normalize_strong(&Tensor::<f32>::from_f64([1, P], &perm).unwrap()).unwrap();
            for i in 0..P {
                prop_assert!((b.data()[i] - a.data()[(i + shift) % P]).abs() < 1e-7);
            }
        }

        #[test]
        fn matches_per_sample_rasterization(t0 in 0.0f64..3.0, len in 0.01f64..1.5) {
            // oracle: mark every sample inside the word, then read the sample at each frame center
            let cfg = StftConfig::default();
            let frames = 48;
            let seq = AnnotationSequence::new(1.0, vec![word(t0, t0 + len, "cat")]).unwrap();
            let z = build_activation_matrix(&seq, &Lexicon::builtin(), frames, &cfg);
            let k_idx = vocab::index_of("K").unwrap();
            for k in 0..frames {
                let center_sample = k * cfg.hop + cfg.window / 2;
                let start = (t0 * 8192.0).ceil() as usize;
                let end = ((t0 + len) * 8192.0).ceil() as usize;
                let inside = (start..end).contains(&center_sample);
                prop_assert_eq!(z.get(k, k_idx), inside, "frame {}", k);
            }
        }

        #[test]
        fn coverage_is_monotone(a in 0.0f64..2.0, b in 2.5f64..4.0) {
            let cfg = StftConfig::default();
            let lex = Lexicon::builtin();
            let one = AnnotationSequence::new(1.0, vec![word(a, a + 0.4, "love")]).unwrap();
            let two = AnnotationSequence::new(1.0, vec![word(a, a + 0.4, "love"), word(b, b + 0.5, "night")]).unwrap();
            let s1 = build_activation_matrix(&one, &lex, 64, &cfg).column_sums();
            let s2 = build_activation_matrix(&two, &lex, 64, &cfg).column_sums();
            for p in 0..vocab::PHONEMES {
                prop_assert!(s2[p] >= s1[p]);
            }
        }
    }
}
