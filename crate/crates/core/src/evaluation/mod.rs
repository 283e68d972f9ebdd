//! Track-level evaluation: BSS metrics, silence leakage, medians and paired tests.
//!
//! The machine-readable report is tab-separated text:
//!
//! ```text
//! # phonosep evaluation
//! track   vocals_sdr  vocals_sir  vocals_sar  accompaniment_sdr  accompaniment_sir  accompaniment_sar  pes  eps
//! song01  4.12        9.80        6.33        11.05              ...
//! ```
//!
//! Undefined values are written as `NA`. Lines starting with `#` are comments.

pub mod bss;
pub mod silence;
pub mod stats;

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

pub use bss::{bss_eval, decompose, Decomposition, SourceMetrics, CEILING, FILTER_LEN};
pub use silence::{pes_eps, FLOOR_DB};
pub use stats::{paired_t_test, PairedTest};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::parallel;

pub const METRICS: [&str; 8] = [
    "vocals_sdr",
    "vocals_sir",
    "vocals_sar",
    "accompaniment_sdr",
    "accompaniment_sir",
    "accompaniment_sar",
    "pes",
    "eps",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEval {
    pub id: String,
    pub vocals: Option<SourceMetrics>,
    pub accompaniment: Option<SourceMetrics>,
    pub pes: Option<f64>,
    pub eps: Option<f64>,
}

impl TrackEval {
    /// Values in [`METRICS`] order.
    pub fn values(&self) -> [Option<f64>; 8] {
        let v = self.vocals;
        let a = self.accompaniment;
        [
            v.map(|m| m.sdr),
            v.map(|m| m.sir),
            v.map(|m| m.sar),
            a.map(|m| m.sdr),
            a.map(|m| m.sir),
            a.map(|m| m.sar),
            self.pes,
            self.eps,
        ]
    }

    pub fn value(&self, metric: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == metric).and_then(|i| self.values()[i])
    }

    fn from_values(id: String, v: [Option<f64>; 8]) -> Self {
        let source = |a: Option<f64>, b: Option<f64>, c: Option<f64>| {
            Some(SourceMetrics {
                sdr: a?,
                sir: b?,
                sar: c?,
            })
        };
        TrackEval {
            id,
            vocals: source(v[0], v[1], v[2]),
            accompaniment: source(v[3], v[4], v[5]),
            pes: v[6],
            eps: v[7],
        }
    }
}

/// Aligned waveforms for one track at a common sample rate.
#[derive(Clone, Debug)]
pub struct TrackInput {
    pub id: String,
    pub vocals: Vec<f32>,
    pub accompaniment: Vec<f32>,
    pub est_vocals: Vec<f32>,
    pub est_accompaniment: Vec<f32>,
}

pub fn evaluate_track(input: &TrackInput, frames: &StftConfig) -> Result<TrackEval> {
    let lens = [
        input.vocals.len(),
        input.accompaniment.len(),
        input.est_vocals.len(),
        input.est_accompaniment.len(),
    ];
    let n = *lens.iter().min().unwrap();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("track {}: empty signal", input.id)));
    }
    if lens.iter().any(|&l| l != n) {
        warn!("track {}: lengths {lens:?} differ, truncating to {n}", input.id);
    }
    let f = |x: &[f32]| x[..n].iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let refs = vec![f(&input.vocals), f(&input.accompaniment)];
    let ests = vec![f(&input.est_vocals), f(&input.est_accompaniment)];
    let m = bss_eval(&refs, &ests)?;
    let (pes, eps) = pes_eps(&refs[0], &ests[0], frames);
    Ok(TrackEval {
        id: input.id.clone(),
        vocals: m[0],
        accompaniment: m[1],
        pes,
        eps,
    })
}

/// Evaluate every track, in parallel when enabled; results keep input order.
pub fn evaluate_tracks(inputs: &[TrackInput], frames: &StftConfig) -> Result<Vec<TrackEval>> {
    parallel::map_slice(inputs, |t| evaluate_track(t, frames)).into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub median: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub median: Option<f64>,
    pub baseline_median: Option<f64>,
    /// `None` when fewer than two tracks have the metric in both reports.
    pub test: Option<PairedTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tracks: Vec<TrackEval>,
    pub summary: Vec<MetricSummary>,
    pub comparisons: Vec<Comparison>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

impl EvalReport {
    pub fn new(tracks: Vec<TrackEval>) -> Self {
        let summary = METRICS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let defined: Vec<f64> = tracks.iter().filter_map(|t| t.values()[i]).collect();
                MetricSummary {
                    metric: name.to_string(),
                    median: median(&defined),
                    count: defined.len(),
                    excluded: tracks.len() - defined.len(),
                }
            })
            .collect();
        EvalReport {
            tracks,
            summary,
            comparisons: Vec::new(),
        }
    }

    pub fn median(&self, metric: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.metric == metric).and_then(|s| s.median)
    }

    /// Paired tests of every metric against `baseline`, matching tracks by id.
    pub fn compare(&mut self, baseline: &EvalReport) {
        self.comparisons = METRICS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for t in &self.tracks {
                    let Some(other) = baseline.tracks.iter().find(|o| o.id == t.id) else {
                        continue;
                    };
                    if let (Some(x), Some(y)) = (t.values()[i], other.values()[i]) {
                        a.push(x);
                        b.push(y);
                    }
                }
                Comparison {
                    metric: name.to_string(),
                    median: self.median(name),
                    baseline_median: baseline.median(name),
                    test: paired_t_test(&a, &b).ok(),
                }
            })
            .collect();
    }

    /// Human-readable table: one row per track, then a summary block.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let idw = self.tracks.iter().map(|t| t.id.len()).max().unwrap_or(5).max(6);
        let _ = write!(out, "{:<idw$}", "track");
        for m in METRICS {
            let _ = write!(out, " {m:>17}");
        }
        out.push('\n');
        for t in &self.tracks {
            let _ = write!(out, "{:<idw$}", t.id);
            for v in t.values() {
                let _ = write!(out, " {:>17}", fmt_opt(v, 2));
            }
            out.push('\n');
        }
        out.push_str("\nsummary\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "  {:<18} median {:>8}  ({} tracks, {} excluded)",
                s.metric,
                fmt_opt(s.median, 2),
                s.count,
                s.excluded
            );
        }
        if !self.comparisons.is_empty() {
            out.push_str("\npaired t-test against baseline\n");
            for c in &self.comparisons {
                let test = match c.test {
                    Some(t) if t.degenerate => format!("t {:>8} p {:.4} n {} (zero variance)", fmt_opt(Some(t.t), 3), t.p, t.n),
                    Some(t) => format!("t {:>8.3} p {:.4} n {}", t.t, t.p, t.n),
                    None => "not enough paired tracks".into(),
                };
                let _ = writeln!(
                    out,
                    "  {:<18} {:>8} vs {:>8}  {test}",
                    c.metric,
                    fmt_opt(c.median, 2),
                    fmt_opt(c.baseline_median, 2)
                );
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# phonosep evaluation\ntrack");
        for m in METRICS {
            out.push('\t');
            out.push_str(m);
        }
        out.push('\n');
        for t in &self.tracks {
            out.push_str(&t.id);
            for v in t.values() {
                out.push('\t');
                out.push_str(&v.map_or("NA".to_string(), |x| format!("{x}")));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines.next().ok_or("missing header")?.split('\t').collect();
        let expected: Vec<&str> = std::iter::once("track").chain(METRICS).collect();
        if header != expected {
            return Err(format!("unexpected header {header:?}"));
        }
        let mut tracks = Vec::new();
        for (no, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 9 {
                return Err(format!("row {}: expected 9 fields, got {}", no + 1, fields.len()));
            }
            let mut v = [None; 8];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = match *f {
                    "NA" => None,
                    s => Some(s.parse::<f64>().map_err(|e| format!("row {}: {s:?}: {e}", no + 1))?),
                };
            }
            tracks.push(TrackEval::from_values(fields[0].to_string(), v));
        }
        Ok(EvalReport::new(tracks))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("report.tsv"), self.to_tsv())?;
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("NA".into(), |x| format!("{x:.prec$}"))
}
