//! Stems, splits, manifests and the synthetic corpus.
//!
//! A manifest is tab-separated text with one song per line:
//!
//! ```text
//! # phonosep manifest
//! id  mixture  vocals  accompaniment  annotation  eta  split
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute. A missing
//! annotation is written as `-`, and `split` is one of `train`, `validation`,
//! `test` or `-`.
//!
//! Voice profiles are one `track_id epsilon` pair per line, where `epsilon`
//! is the track's mean singing-voice probability in `[0, 1]`. Blank lines and
//! lines starting with `#` are ignored.

mod synth;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

pub use synth::{formants, synth_generate, synth_song, SynthConfig, SynthSong, FORMANTS};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Default tolerance for merging tracks into the vocal stem.
pub const DEFAULT_NU: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackVoiceProfile {
    pub track_id: String,
    pub epsilon: f64,
}

pub fn parse_profiles(text: &str) -> std::result::Result<Vec<TrackVoiceProfile>, String> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, eps] = fields[..] else {
            return Err(format!("line {}: expected `track_id epsilon`", no + 1));
        };
        let epsilon: f64 = eps.parse().map_err(|e| format!("line {}: {e}", no + 1))?;
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(format!("line {}: epsilon {epsilon} outside [0, 1]", no + 1));
        }
        out.push(TrackVoiceProfile {
            track_id: id.to_string(),
            epsilon,
        });
    }
    Ok(out)
}

pub fn load_profiles(path: &Path) -> Result<Vec<TrackVoiceProfile>> {
    parse_profiles(&std::fs::read_to_string(path)?).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

#[derive(Clone, Debug)]
pub struct Sources {
    pub vocals: AudioClip,
    pub accompaniment: AudioClip,
    pub mixture: AudioClip,
    /// Ids of the tracks merged into the vocal stem.
    pub vocal_tracks: Vec<String>,
}

/// Merge tracks whose voice probability reaches `nu` times the highest one
/// into the vocal stem and the rest into the accompaniment. Shorter tracks
/// are zero-padded to the longest.
pub fn build_sources(tracks: &[(String, AudioClip)], profiles: &[TrackVoiceProfile], nu: f64) -> Result<Sources> {
    if tracks.is_empty() {
        return Err(Error::Dataset("no tracks to merge".into()));
    }
    let by_id: HashMap<&str, f64> = profiles.iter().map(|p| (p.track_id.as_str(), p.epsilon)).collect();
    if by_id.len() != tracks.len() {
        return Err(Error::Dataset(format!("{} profiles for {} tracks", by_id.len(), tracks.len())));
    }
    let eps: Vec<f64> = tracks
        .iter()
        .map(|(id, _)| by_id.get(id.as_str()).copied().ok_or_else(|| Error::Dataset(format!("no voice profile for track {id}"))))
        .collect::<Result<_>>()?;
    let rate = tracks[0].1.sample_rate;
    if let Some((id, _)) = tracks.iter().find(|(_, a)| a.sample_rate != rate) {
        return Err(Error::Dataset(format!("track {id} has a different sample rate")));
    }
    let threshold = eps.iter().cloned().fold(f64::MIN, f64::max) * nu;
    let len = tracks.iter().map(|(_, a)| a.len()).max().unwrap_or(0);
    let mut vocals = vec![0f32; len];
    let mut accompaniment = vec![0f32; len];
    let mut vocal_tracks = Vec::new();
    for ((id, audio), &e) in tracks.iter().zip(&eps) {
        let target = if e >= threshold {
            vocal_tracks.push(id.clone());
            &mut vocals
        } else {
            &mut accompaniment
        };
        for (o, s) in target.iter_mut().zip(&audio.samples) {
            *o += s;
        }
    }
    let mixture: Vec<f32> = vocals.iter().zip(&accompaniment).map(|(v, a)| v + a).collect();
    info!("merged {} of {} tracks into vocals", vocal_tracks.len(), tracks.len());
    Ok(Sources {
        vocals: AudioClip::new(vocals, rate),
        accompaniment: AudioClip::new(accompaniment, rate),
        mixture: AudioClip::new(mixture, rate),
        vocal_tracks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Lower agreement bounds of each split; each range is half-open up to the
/// next bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_min: f64,
    pub validation_min: f64,
    pub test_min: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_min: 0.7,
            validation_min: 0.88,
            test_min: 0.89,
        }
    }
}

impl SplitConfig {
    pub fn classify(&self, eta: f64) -> Option<Split> {
        if eta >= self.test_min {
            Some(Split::Test)
        } else if eta >= self.validation_min {
            Some(Split::Validation)
        } else if eta >= self.train_min {
            Some(Split::Train)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub vocals: PathBuf,
    pub accompaniment: PathBuf,
    pub annotation: Option<PathBuf>,
    pub eta: f64,
    pub split: Option<Split>,
}

const HEADER: [&str; 7] = ["id", "mixture", "vocals", "accompaniment", "annotation", "eta", "split"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse manifest text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines.next().ok_or("missing header")?.split('\t').collect();
        if header != HEADER {
            return Err(format!("unexpected header {header:?}"));
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut entries = Vec::new();
        for (no, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != HEADER.len() {
                return Err(format!("record {}: expected {} fields, got {}", no + 1, HEADER.len(), f.len()));
            }
            let eta: f64 = f[5].parse().map_err(|e| format!("record {}: eta: {e}", no + 1))?;
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                mixture: resolve(f[1]),
                vocals: resolve(f[2]),
                accompaniment: resolve(f[3]),
                annotation: (f[4] != "-").then(|| resolve(f[4])),
                eta,
                split: match f[6] {
                    "-" => None,
                    s => Some(s.parse().map_err(|e| format!("record {}: {e}", no + 1))?),
                },
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        // absolute, so entries stay valid when re-saved elsewhere
        let base = std::path::absolute(path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
        Self::parse(&text, &base).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Manifest text with paths under `base` written relative to it.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            let p = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
            p.strip_prefix(base).unwrap_or(&p).display().to_string()
        };
        let mut out = format!("# phonosep manifest\n{}\n", HEADER.join("\t"));
        for e in &self.entries {
            let fields = [
                e.id.clone(),
                rel(&e.mixture),
                rel(&e.vocals),
                rel(&e.accompaniment),
                e.annotation.as_deref().map_or("-".into(), rel),
                format!("{}", e.eta),
                e.split.map_or("-".into(), |s| s.to_string()),
            ];
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base)?;
        }
        let base = std::path::absolute(if base.as_os_str().is_empty() { Path::new(".") } else { base })?;
        std::fs::write(path, self.to_text(&base))?;
        Ok(())
    }

    /// Check that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let files = [Some(&e.mixture), Some(&e.vocals), Some(&e.accompaniment), e.annotation.as_ref()];
            for f in files.into_iter().flatten() {
                if !f.is_file() {
                    return Err(Error::Dataset(format!("song {}: missing file {}", e.id, f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest::new(self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitOutcome {
    pub train: Manifest,
    pub validation: Manifest,
    pub test: Manifest,
    /// Ids of songs below the training threshold.
    pub excluded: Vec<String>,
}

/// Partition songs by agreement score and tag each entry with its split.
pub fn split_by_agreement(manifest: &Manifest, config: &SplitConfig) -> SplitOutcome {
    let mut out = SplitOutcome::default();
    for e in &manifest.entries {
        let split = config.classify(e.eta);
        let tagged = ManifestEntry { split, ..e.clone() };
        match split {
            Some(Split::Train) => out.train.entries.push(tagged),
            Some(Split::Validation) => out.validation.entries.push(tagged),
            Some(Split::Test) => out.test.entries.push(tagged),
            None => out.excluded.push(e.id.clone()),
        }
    }
    info!(
        "split: {} train, {} validation, {} test, {} excluded",
        out.train.len(),
        out.validation.len(),
        out.test.len(),
        out.excluded.len()
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(v: &[f32]) -> AudioClip {
        AudioClip::new(v.to_vec(), 8192)
    }

    fn profile(id: &str, e: f64) -> TrackVoiceProfile {
        TrackVoiceProfile {
            track_id: id.into(),
            epsilon: e,
        }
    }

    #[test]
    fn merge_thresholds() {
        let tracks = vec![("a".to_string(), clip(&[1.0, 2.0])), ("b".to_string(), clip(&[10.0, 20.0, 30.0]))];
        let s = build_sources(&tracks, &[profile("a", 0.9), profile("b", 0.1)], DEFAULT_NU).unwrap();
        assert_eq!(s.vocal_tracks, vec!["a"]);
        assert_eq!(s.vocals.samples, vec![1.0, 2.0, 0.0]);
        assert_eq!(s.accompaniment.samples, vec![10.0, 20.0, 30.0]);
        assert_eq!(s.mixture.samples, vec![11.0, 22.0, 30.0]);
        let s = build_sources(&tracks, &[profile("a", 0.90), profile("b", 0.89)], DEFAULT_NU).unwrap();
        assert_eq!(s.vocal_tracks.len(), 2);
        assert!(s.accompaniment.samples.iter().all(|&v| v == 0.0));
        let one = build_sources(&tracks[..1], &[profile("a", 0.3)], DEFAULT_NU).unwrap();
        assert_eq!(one.vocals.samples, vec![1.0, 2.0]);
        assert!(one.accompaniment.samples.iter().all(|&v| v == 0.0));
        assert!(build_sources(&tracks, &[profile("a", 0.9)], DEFAULT_NU).is_err());
        assert!(build_sources(&tracks, &[profile("a", 0.9), profile("c", 0.9)], DEFAULT_NU).is_err());
    }

    proptest! {
        #[test]
        fn merge_conserves_mixture(eps in proptest::collection::vec(0.0f64..1.0, 1..6), seed in 0u32..1000) {
            let tracks: Vec<(String, AudioClip)> = eps
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let n = 5 + (seed as usize + i * 7) % 9;
                    (format!("t{i}"), clip(&(0..n).map(|k| ((k * 31 + i * 17 + seed as usize) % 23) as f32 - 11.0).collect::<Vec<_>>()))
                })
                .collect();
            let profiles: Vec<_> = eps.iter().enumerate().map(|(i, &e)| profile(&format!("t{i}"), e)).collect();
            let s = build_sources(&tracks, &profiles, DEFAULT_NU).unwrap();
            prop_assert!(!s.vocal_tracks.is_empty());
            for ((m, v), a) in s.mixture.samples.iter().zip(&s.vocals.samples).zip(&s.accompaniment.samples) {
                prop_assert_eq!(*m, v + a);
            }
        }

        #[test]
        fn splits_partition_the_eligible_songs(etas in proptest::collection::vec(0.0f64..1.0, 0..40)) {
            let m = Manifest::new(etas.iter().enumerate().map(|(i, &eta)| entry(&format!("s{i}"), eta)).collect());
            let out = split_by_agreement(&m, &SplitConfig::default());
            let total = out.train.len() + out.validation.len() + out.test.len() + out.excluded.len();
            prop_assert_eq!(total, etas.len());
            prop_assert!(out.train.entries.iter().all(|e| (0.7..0.88).contains(&e.eta)));
            prop_assert!(out.validation.entries.iter().all(|e| (0.88..0.89).contains(&e.eta)));
            prop_assert!(out.test.entries.iter().all(|e| e.eta >= 0.89));
            prop_assert_eq!(out.excluded.len(), etas.iter().filter(|&&e| e < 0.7).count());
        }
    }

    fn entry(id: &str, eta: f64) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            mixture: PathBuf::from(format!("/data/{id}/mixture.wav")),
            vocals: PathBuf::from(format!("/data/{id}/vocals.wav")),
            accompaniment: PathBuf::from(format!("/data/{id}/accompaniment.wav")),
            annotation: None,
            eta,
            split: None,
        }
    }

    #[test]
    fn table_boundaries() {
        let c = SplitConfig::default();
        assert_eq!(c.classify(0.75), Some(Split::Train));
        assert_eq!(c.classify(0.885), Some(Split::Validation));
        assert_eq!(c.classify(0.95), Some(Split::Test));
        assert_eq!(c.classify(0.5), None);
        assert_eq!(c.classify(0.7), Some(Split::Train));
        assert_eq!(c.classify(0.88), Some(Split::Validation));
        assert_eq!(c.classify(0.89), Some(Split::Test));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = entry("x", 0.9);
        for p in ["mixture.wav", "vocals.wav", "accompaniment.wav", "x.json"] {
            std::fs::write(dir.path().join(p), b"").unwrap();
        }
        e.mixture = dir.path().join("mixture.wav");
        e.vocals = dir.path().join("vocals.wav");
        e.accompaniment = dir.path().join("accompaniment.wav");
        e.annotation = Some(dir.path().join("x.json"));
        e.split = Some(Split::Test);
        let m = Manifest::new(vec![e, entry("y", 0.1)]);
        let path = dir.path().join("all.tsv");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\tmixture.wav\t"));
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.validate().is_err());
        assert!(Manifest::new(back.entries[..1].to_vec()).validate().is_ok());
        assert_eq!(back.with_split(Split::Test).len(), 1);
    }

    #[test]
    fn profile_parsing() {
        let p = parse_profiles("# comment\nvox 0.93\n\nguitar\t0.12\n").unwrap();
        assert_eq!(p, vec![profile("vox", 0.93), profile("guitar", 0.12)]);
        assert!(parse_profiles("a 1.5\n").is_err());
        assert!(parse_profiles("a\n").is_err());
    }
}
