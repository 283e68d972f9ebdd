//! Lyric annotation files.
//!
//! One JSON document per song:
//!
//! ```json
//! {
//!   "granularity": "word",
//!   "eta": 0.97,
//!   "words": [
//!     {"t_start": 1.20, "t_end": 1.55, "f_min": 180.0, "f_max": 2400.0,
//!      "text": "cat", "parent_index": 0}
//!   ]
//! }
//! ```
//!
//! Times are seconds, frequencies Hz. `parent_index` links a word to its line
//! and may be `null`. `eta` is the agreement score between annotators in
//! `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAnnotation {
    pub t_start: f64,
    pub t_end: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub text: String,
    #[serde(default)]
    pub parent_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSequence {
    #[serde(default = "default_granularity")]
    pub granularity: String,
    pub eta: f64,
    pub words: Vec<WordAnnotation>,
}

fn default_granularity() -> String {
    "word".into()
}

impl AnnotationSequence {
    pub fn new(eta: f64, words: Vec<WordAnnotation>) -> Result<Self> {
        let seq = AnnotationSequence {
            granularity: default_granularity(),
            eta,
            words,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Check per-word intervals, ordering and the agreement score.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Dataset(format!("agreement score {} outside [0, 1]", self.eta)));
        }
        for (k, w) in self.words.iter().enumerate() {
            if !(w.t_start.is_finite() && w.t_end.is_finite()) || w.t_start >= w.t_end {
                return Err(Error::Dataset(format!("word {k} ({:?}) has t_start >= t_end", w.text)));
            }
            if w.f_min > w.f_max {
                return Err(Error::Dataset(format!("word {k} ({:?}) has f_min > f_max", w.text)));
            }
        }
        for (k, pair) in self.words.windows(2).enumerate() {
            if pair[0].t_end > pair[1].t_start {
                return Err(Error::Dataset(format!("words {k} and {} overlap or are out of order", k + 1)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let seq: AnnotationSequence = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        seq.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn end_time(&self) -> f64 {
        self.words.last().map_or(0.0, |w| w.t_end)
    }
}
