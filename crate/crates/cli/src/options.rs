//! One flat option set shared by command-line flags and the config file.
//!
//! Every flag `--some-name` corresponds to the config key `some-name` and
//! vice versa (except `--config` itself). Flags override file values.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::UsageError;

macro_rules! options {
    ($($(#[doc = $doc:literal])* $name:ident: $ty:ty),* $(,)?) => {
        #[derive(clap::Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, rename_all = "kebab-case")]
        pub struct Options {
            $(
                $(#[doc = $doc])*
                #[arg(long, global = true)]
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $name: Option<$ty>,
            )*
        }

        impl Options {
            /// Config-file keys, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Values set here win; unset ones fall back to `base`.
            pub fn overlay(self, base: Options) -> Options {
                Options { $($name: self.$name.or(base.$name),)* }
            }
        }
    };
}

options! {
    /// Seed for every random choice (default 0)
    seed: u64,
    /// Worker threads for per-song and per-track work (1 runs sequentially)
    jobs: usize,
    /// Output directory
    out: PathBuf,
    /// Mixture WAV to separate
    mixture: PathBuf,
    /// Lyric annotation JSON for the mixture
    annotations: PathBuf,
    /// Model checkpoint
    model: PathBuf,
    /// Baseline report.tsv for paired t-tests
    baseline: PathBuf,
    /// Model variant: unet, W_si, W_co, S_a, S_a*, S_c, S_c*, S_f, S_f*, S_s, S_s*
    variant: String,
    /// Replace the network output with this constant mask
    mask_override: f32,
    /// Song manifest (TSV)
    manifest: PathBuf,
    /// Directory of per-instrument track WAVs, named <track_id>.wav
    tracks: PathBuf,
    /// Voice profile file: one `track_id epsilon` pair per line
    profiles: PathBuf,
    /// Vocal merge tolerance relative to the highest voice probability (default 0.98)
    nu: f64,
    /// Pronunciation dictionary in CMUdict format (default: built-in)
    lexicon: PathBuf,
    /// Directory of precomputed estimates, <dir>/<id>/{vocals,accompaniment}.wav
    estimates: PathBuf,
    /// Model geometry preset: full or tiny (default full)
    preset: String,
    /// Synthetic training songs (default 40)
    train_songs: usize,
    /// Synthetic validation songs (default 5)
    validation_songs: usize,
    /// Synthetic test songs (default 10)
    test_songs: usize,
    /// Synthetic song length in seconds (default 20)
    duration: f64,
    /// Maximum training epochs (default 1000)
    epochs: usize,
    /// Patches per batch (default 128)
    batch_size: usize,
    /// Batches per epoch (default 1024)
    batches_per_epoch: usize,
    /// Frozen validation batches (default 256)
    validation_batches: usize,
    /// Initial learning rate (default 0.001)
    lr: f64,
    /// Resume training from this checkpoint
    resume: PathBuf,
    /// Permute each song's phoneme columns (shuffled-conditioning control)
    shuffle_phonemes: bool,
    /// Number of consecutive seeds for grad-check (default 1)
    seeds: usize,
    /// Gradient precision for grad-check: f32 or f64 (default f32)
    precision: String,
}

impl Options {
    /// Read a TOML config file; unknown keys are rejected.
    pub fn from_file(path: &Path) -> anyhow::Result<Options> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            let keys: Vec<String> = Self::KEYS.iter().map(|k| k.replace('_', "-")).collect();
            UsageError(format!("config {}: {e}valid keys: {}", path.display(), keys.join(", "))).into()
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("options serialize to TOML")
    }

    /// Save the effective options next to a command's outputs.
    pub fn snapshot(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Fetch a required option or fail with a usage error naming its flag.
#[macro_export]
macro_rules! require {
    ($opts:expr, $name:ident) => {
        $opts.$name.clone().ok_or_else(|| {
            $crate::UsageError(format!("missing required option --{}", stringify!($name).replace('_', "-")))
        })?
    };
}
