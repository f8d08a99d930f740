//! Result rows shared by `eval` and `sweep`, with CSV and JSON output.

use std::path::Path;

use ctxsteer::metrics::{HallucinationReport, TextQualityReport};
use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::error::StageError;

/// Median and standard deviation of per-token decode time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub std_ms: f64,
    pub n_tokens: usize,
}

impl LatencyStats {
    pub fn from_millis(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            median_ms: median,
            std_ms: var.sqrt(),
            n_tokens: n,
        })
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mode: String,
    pub alpha: f64,
    pub beta: f64,
    pub window: String,
    pub gate: String,
    pub hallucination: HallucinationReport,
    /// Hallucination metrics on captions cut to the alignment limit.
    pub aligned: HallucinationReport,
    pub align_limit: usize,
    pub quality: TextQualityReport,
    /// Mean preference over probe samples whose answer was found.
    pub probe_pref: Option<f64>,
    pub probe_found: usize,
    pub cover_macro: bool,
    pub degenerate: bool,
    pub latency: Option<LatencyStats>,
}

impl ReportRow {
    pub fn cover(&self) -> f64 {
        if self.cover_macro {
            self.hallucination.cover_macro
        } else {
            self.hallucination.cover
        }
    }

    pub fn is_vanilla(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }
}

/// Flag rows whose repetition is at least three times the vanilla row's.
/// A repetition-free vanilla row flags only rows that repeat at all.
pub fn is_degenerate(rep6: f64, vanilla_rep6: f64) -> bool {
    rep6 > 0.0 && rep6 >= 3.0 * vanilla_rep6
}

pub fn format_window(layers: impl IntoIterator<Item = usize>) -> String {
    let layers: Vec<usize> = layers.into_iter().collect();
    let contiguous = layers.windows(2).all(|w| w[1] == w[0] + 1);
    match (layers.first(), layers.last()) {
        (Some(a), Some(b)) if contiguous && layers.len() > 1 => format!("{a}-{b}"),
        _ => layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    mode: &'a str,
    alpha: f64,
    beta: f64,
    window: &'a str,
    gate: &'a str,
    #[serde(rename = "CHAIR_S")]
    chair_s: f64,
    #[serde(rename = "CHAIR_I")]
    chair_i: f64,
    #[serde(rename = "F1")]
    f1: f64,
    #[serde(rename = "Cover")]
    cover: f64,
    #[serde(rename = "CHAIR_S@len")]
    chair_s_aligned: f64,
    #[serde(rename = "CHAIR_I@len")]
    chair_i_aligned: f64,
    #[serde(rename = "Rep")]
    rep: f64,
    #[serde(rename = "MATTR50")]
    mattr: f64,
    probe_pref: Option<f64>,
    degenerate: bool,
    latency_median_ms: Option<f64>,
    latency_std_ms: Option<f64>,
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String, StageError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            label: &r.label,
            mode: &r.mode,
            alpha: r.alpha,
            beta: r.beta,
            window: &r.window,
            gate: &r.gate,
            chair_s: r.hallucination.chair_s,
            chair_i: r.hallucination.chair_i,
            f1: r.hallucination.f1,
            cover: r.cover(),
            chair_s_aligned: r.aligned.chair_s,
            chair_i_aligned: r.aligned.chair_i,
            rep: r.quality.rep6,
            mattr: r.quality.mattr50,
            probe_pref: r.probe_pref,
            degenerate: r.degenerate,
            latency_median_ms: r.latency.map(|l| l.median_ms),
            latency_std_ms: r.latency.map(|l| l.std_ms),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| StageError::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| StageError::Invalid(e.to_string()))
}

/// Writes `rows` as `<json_path>` and `<csv_path>`.
pub fn write_rows(rows: &[ReportRow], json_path: &Path, csv_path: &Path) -> Result<(), StageError> {
    artifacts::write_json(json_path, &rows)?;
    std::fs::write(csv_path, to_csv(rows)?)?;
    Ok(())
}
