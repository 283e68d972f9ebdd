//! Synthetic songs with exact lyric annotations.
//!
//! Vocals are sung words from the lexicon. Each phoneme of a word is voiced in
//! turn as a harmonic tone shaped by three resonances from [`FORMANTS`], plus
//! steady partials at the resonance centres so every phoneme has a clear
//! spectral signature. The accompaniment mixes band-limited noise, chord pads
//! and "decoy" voices from the same synthesizer that never appear in the
//! annotations, so telling vocals from decoys needs the lyric timing.

use std::f64::consts::PI;
use std::path::Path;

use log::info;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, ManifestEntry, Split};
use crate::dsp::{wav::write_wav, AudioClip, PIPELINE_RATE};
use crate::error::{Error, Result};
use crate::parallel;
use crate::phoneme::{vocab, AnnotationSequence, Lexicon, WordAnnotation};

/// Resonance centres in Hz for each phoneme, in vocabulary order. All values
/// are multiples of 8 Hz.
pub const FORMANTS: [[f64; 3]; vocab::PHONEMES] = [
    [248.0, 1288.0, 2672.0],
    [640.0, 1768.0, 2888.0],
    [416.0, 2248.0, 3104.0],
    [808.0, 1096.0, 3320.0],
    [584.0, 1576.0, 2600.0],
    [360.0, 2056.0, 2816.0],
    [752.0, 2536.0, 3032.0],
    [528.0, 1384.0, 3248.0],
    [304.0, 1864.0, 3464.0],
    [696.0, 2344.0, 2744.0],
    [472.0, 1192.0, 2960.0],
    [248.0, 1672.0, 3176.0],
    [640.0, 2152.0, 3392.0],
    [416.0, 1000.0, 2672.0],
    [808.0, 1480.0, 2888.0],
    [584.0, 1960.0, 3104.0],
    [360.0, 2440.0, 3320.0],
    [752.0, 1288.0, 2600.0],
    [528.0, 1768.0, 2816.0],
    [304.0, 2248.0, 3032.0],
    [696.0, 1096.0, 3248.0],
    [472.0, 1576.0, 3464.0],
    [248.0, 2056.0, 2744.0],
    [640.0, 2536.0, 2960.0],
    [416.0, 1384.0, 3176.0],
    [808.0, 1864.0, 3392.0],
    [584.0, 2344.0, 2672.0],
    [360.0, 1192.0, 2888.0],
    [752.0, 1672.0, 3104.0],
    [528.0, 2152.0, 3320.0],
    [304.0, 1000.0, 2600.0],
    [696.0, 1480.0, 2816.0],
    [472.0, 1960.0, 3032.0],
    [248.0, 2440.0, 3248.0],
    [640.0, 1288.0, 3464.0],
    [416.0, 1768.0, 2744.0],
    [808.0, 2248.0, 2960.0],
    [584.0, 1096.0, 3176.0],
    [360.0, 1576.0, 3392.0],
];

const FORMANT_GAINS: [f64; 3] = [1.0, 0.6, 0.4];
const FORMANT_WIDTH_HZ: f64 = 150.0;

pub fn formants(phoneme: usize) -> [f64; 3] {
    FORMANTS[phoneme]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub duration_secs: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 40,
            validation: 5,
            test: 10,
            duration_secs: 20.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn songs(&self) -> usize {
        self.train + self.validation + self.test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.validation {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

/// One sung phoneme in sample coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhonemeSpan {
    pub word: usize,
    pub phoneme: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct SynthSong {
    pub id: String,
    pub vocals: AudioClip,
    pub accompaniment: AudioClip,
    pub mixture: AudioClip,
    pub annotation: AnnotationSequence,
    pub schedule: Vec<PhonemeSpan>,
}

fn sung_words(lexicon: &Lexicon) -> Vec<(String, Vec<usize>)> {
    let mut words: Vec<(String, Vec<usize>)> = lexicon
        .words()
        .map(|w| (w.to_string(), lexicon.phoneme_indices(w)))
        .filter(|(_, p)| (1..=6).contains(&p.len()))
        .collect();
    words.sort();
    words
}

/// Add one voiced phoneme to `out` starting at sample `start`.
fn voice(out: &mut [f32], start: usize, len: usize, phoneme: usize, f0: f64, gain: f64, sr: f64) {
    let f = FORMANTS[phoneme];
    let envelope = |freq: f64| -> f64 {
        f.iter()
            .zip(FORMANT_GAINS)
            .map(|(c, g)| g * (-((freq - c) / FORMANT_WIDTH_HZ).powi(2)).exp())
            .sum()
    };
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&hf| hf < 0.46 * sr)
        .map(|hf| (hf, envelope(hf)))
        .collect();
    let hnorm: f64 = harmonics.iter().map(|(_, a)| a).sum::<f64>().max(1e-9);
    let ramp = ((0.008 * sr) as usize).clamp(1, len / 2 + 1);
    for n in 0..len {
        let Some(o) = out.get_mut(start + n) else { break };
        let t = (start + n) as f64 / sr;
        let edge = n.min(len - 1 - n);
        let env = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
        let partials: f64 = f.iter().zip(FORMANT_GAINS).map(|(c, g)| g * (2.0 * PI * c * t).sin()).sum();
        let buzz: f64 = harmonics.iter().map(|(hf, a)| a * (2.0 * PI * hf * t).sin()).sum::<f64>() / hnorm;
        *o += (gain * env * (0.7 * partials + 0.8 * buzz)) as f32;
    }
}

/// A sequence of sung words with rests: `(word text, phonemes, start, end, line)`.
type Timeline = Vec<(String, Vec<usize>, usize, usize, usize)>;

fn timeline(rng: &mut ChaCha8Rng, words: &[(String, Vec<usize>)], total: usize, sr: f64) -> Timeline {
    let secs = |s: f64| (s * sr) as usize;
    let mut out = Vec::new();
    let mut t = secs(rng.random_range(0.2..1.5));
    let mut line = 0;
    while t + secs(0.5) < total {
        if rng.random_bool(0.45) {
            t += secs(rng.random_range(1.0..3.0));
            continue;
        }
        for _ in 0..rng.random_range(3..=6) {
            let dur = secs(rng.random_range(0.3..0.7));
            if t + dur >= total {
                break;
            }
            let (w, p) = words.choose(rng).expect("lexicon has sung words").clone();
            out.push((w, p, t, t + dur, line));
            t += dur + secs(rng.random_range(0.05..0.2));
        }
        line += 1;
    }
    out
}

fn sing(out: &mut [f32], rng: &mut ChaCha8Rng, tl: &Timeline, sr: f64) -> Vec<PhonemeSpan> {
    let mut spans = Vec::new();
    for (wi, (_, phonemes, start, end, _)) in tl.iter().enumerate() {
        let f0 = rng.random_range(140.0..280.0);
        let gain = rng.random_range(0.25..0.4);
        let n = phonemes.len();
        let len = end - start;
        for (k, &p) in phonemes.iter().enumerate() {
            let s = start + k * len / n;
            let e = start + (k + 1) * len / n;
            voice(out, s, e - s, p, f0, gain, sr);
            spans.push(PhonemeSpan {
                word: wi,
                phoneme: p,
                start: s,
                end: e,
            });
        }
    }
    spans
}

fn pads_and_noise(out: &mut [f32], rng: &mut ChaCha8Rng, sr: f64) {
    let chord_len = (2.0 * sr) as usize;
    for (c, chunk) in out.chunks_mut(chord_len).enumerate() {
        let root = rng.random_range(110.0..220.0);
        for ratio in [1.0, 1.25, 1.5] {
            let f = root * ratio;
            for (n, o) in chunk.iter_mut().enumerate() {
                let t = (c * chord_len + n) as f64 / sr;
                let v: f64 = (1..=4).map(|h| (2.0 * PI * f * h as f64 * t).sin() / h as f64).sum();
                *o += (0.05 * v) as f32;
            }
        }
    }
    let (mut lo1, mut lo2) = (0.0f64, 0.0f64);
    for o in out.iter_mut() {
        let w: f64 = rng.random_range(-1.0..1.0);
        lo1 += 0.3 * (w - lo1);
        lo2 += 0.05 * (w - lo2);
        *o += (0.12 * (lo1 - lo2)) as f32;
    }
}

/// Generate song `index` of a corpus. Songs are independent, so any subset
/// can be produced in any order with identical results.
pub fn synth_song(index: usize, config: &SynthConfig, lexicon: &Lexicon) -> Result<SynthSong> {
    let words = sung_words(lexicon);
    if words.is_empty() {
        return Err(Error::Dataset("lexicon has no usable words".into()));
    }
    let sr = PIPELINE_RATE as f64;
    let total = (config.duration_secs * sr) as usize;
    if total == 0 {
        return Err(Error::InvalidArgument("song duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);

    let mut vocals = vec![0f32; total];
    let tl = timeline(&mut rng, &words, total, sr);
    let schedule = sing(&mut vocals, &mut rng, &tl, sr);

    let mut accompaniment = vec![0f32; total];
    pads_and_noise(&mut accompaniment, &mut rng, sr);
    let decoys = timeline(&mut rng, &words, total, sr);
    sing(&mut accompaniment, &mut rng, &decoys, sr);

    let annotation = AnnotationSequence::new(
        1.0,
        tl.iter()
            .map(|(w, p, s, e, line)| WordAnnotation {
                t_start: *s as f64 / sr,
                t_end: *e as f64 / sr,
                f_min: p.iter().map(|&q| FORMANTS[q][0]).fold(f64::MAX, f64::min),
                f_max: p.iter().map(|&q| FORMANTS[q][2]).fold(0.0, f64::max),
                text: w.to_lowercase(),
                parent_index: Some(*line),
            })
            .collect(),
    )?;
    let mixture: Vec<f32> = vocals.iter().zip(&accompaniment).map(|(v, a)| v + a).collect();
    Ok(SynthSong {
        id: format!("song{index:03}"),
        vocals: AudioClip::new(vocals, PIPELINE_RATE),
        accompaniment: AudioClip::new(accompaniment, PIPELINE_RATE),
        mixture: AudioClip::new(mixture, PIPELINE_RATE),
        annotation,
        schedule,
    })
}

/// Write a full corpus under `out`: one directory per song plus `all.tsv`,
/// `train.tsv`, `validation.tsv` and `test.tsv` manifests.
pub fn synth_generate(config: &SynthConfig, out: &Path, lexicon: &Lexicon) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let entries = parallel::map_range(config.songs(), |i| -> Result<ManifestEntry> {
        let song = synth_song(i, config, lexicon)?;
        let dir = out.join(&song.id);
        std::fs::create_dir_all(&dir)?;
        let entry = ManifestEntry {
            id: song.id.clone(),
            mixture: dir.join("mixture.wav"),
            vocals: dir.join("vocals.wav"),
            accompaniment: dir.join("accompaniment.wav"),
            annotation: Some(dir.join("annotation.json")),
            eta: song.annotation.eta,
            split: Some(config.split_of(i)),
        };
        write_wav(&entry.mixture, &song.mixture)?;
        write_wav(&entry.vocals, &song.vocals)?;
        write_wav(&entry.accompaniment, &song.accompaniment)?;
        song.annotation.save(entry.annotation.as_ref().expect("annotation path set"))?;
        Ok(entry)
    });
    let manifest = Manifest::new(entries.into_iter().collect::<Result<_>>()?);
    manifest.save(&out.join("all.tsv"))?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        manifest.with_split(split).save(&out.join(format!("{split}.tsv")))?;
    }
    info!("wrote {} synthetic songs to {}", manifest.len(), out.display());
    Ok(manifest)
}
