//! Position-dependent hallucination prior and its tempered gate.
//!
//! Generated-token positions are grouped into buckets; each bucket's prior
//! is the fraction of object-mention tokens there that name an object absent
//! from the image. Coefficients `c_b = (P_b / max P)^(1/T)` become the gate.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{extract_objects, CaptionTokens, MetricsError, ObjectAnnotation};

pub const PRIOR_FORMAT: &str = "ctxsteer-prior";
pub const PRIOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no annotation for calibration image {0:?}")]
    MissingAnnotation(String),
    #[error("every bucket has zero hallucination rate")]
    AllZeroPrior,
    #[error("temperature must be finite and positive, got {0}")]
    InvalidTemperature(f64),
    #[error("bucket rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error("expected {expected} bucket rates, got {got}")]
    BucketCountMismatch { expected: usize, got: usize },
    #[error("invalid bucket scheme: {0}")]
    InvalidScheme(String),
    #[error("{count} image ids appear in both calibration and evaluation sets, e.g. {example:?}")]
    Overlap { count: usize, example: String },
    #[error("malformed prior file: {0}")]
    Parse(String),
    #[error(transparent)]
    Metrics(MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<MetricsError> for CalibrationError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::UnknownImage(id) => CalibrationError::MissingAnnotation(id),
            other => CalibrationError::Metrics(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// Half-open position buckets given by their start positions; the last
/// bucket is unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BucketScheme {
    starts: Vec<usize>,
}

impl Default for BucketScheme {
    /// Five-token buckets below 20, ten-token buckets up to 100, one tail.
    fn default() -> Self {
        let mut starts: Vec<usize> = (0..20).step_by(5).collect();
        starts.extend((20..=100).step_by(10));
        Self { starts }
    }
}

impl TryFrom<Vec<usize>> for BucketScheme {
    type Error = CalibrationError;

    fn try_from(starts: Vec<usize>) -> Result<Self> {
        Self::new(starts)
    }
}

impl From<BucketScheme> for Vec<usize> {
    fn from(s: BucketScheme) -> Self {
        s.starts
    }
}

impl BucketScheme {
    pub fn new(starts: Vec<usize>) -> Result<Self> {
        if starts.first() != Some(&0) {
            return Err(CalibrationError::InvalidScheme("first bucket must start at 0".into()));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalibrationError::InvalidScheme("starts must strictly increase".into()));
        }
        Ok(Self { starts })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// `(start, end)` of bucket `b`; `end` is `None` for the tail.
    pub fn bounds(&self, b: usize) -> (usize, Option<usize>) {
        (self.starts[b], self.starts.get(b + 1).copied())
    }
}

pub fn bucket_of(position: usize, scheme: &BucketScheme) -> usize {
    scheme.starts.partition_point(|&s| s <= position) - 1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCount {
    pub hallucinated: usize,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub p: Vec<f64>,
    pub counts: Vec<BucketCount>,
    /// Buckets with no object tokens; their rate is 0.
    pub empty_buckets: Vec<usize>,
}

/// Per-bucket hallucinated fraction of object tokens.
pub fn estimate_prior(
    captions: &[CaptionTokens],
    annotation: &ObjectAnnotation,
    scheme: &BucketScheme,
) -> Result<PriorEstimate> {
    let per_caption: Vec<Vec<BucketCount>> = captions
        .par_iter()
        .map(|c| {
            let mut counts = vec![BucketCount::default(); scheme.len()];
            for m in extract_objects(&c.image_id, &c.tokens, annotation)? {
                let b = &mut counts[bucket_of(m.position, scheme)];
                b.objects += 1;
                b.hallucinated += usize::from(!m.grounded);
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![BucketCount::default(); scheme.len()];
    for c in per_caption {
        for (total, part) in counts.iter_mut().zip(c) {
            total.objects += part.objects;
            total.hallucinated += part.hallucinated;
        }
    }
    Ok(estimate_from_counts(counts))
}

pub fn estimate_from_counts(counts: Vec<BucketCount>) -> PriorEstimate {
    let p = counts
        .iter()
        .map(|c| {
            if c.objects == 0 {
                0.0
            } else {
                c.hallucinated as f64 / c.objects as f64
            }
        })
        .collect();
    let empty_buckets = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.objects == 0)
        .map(|(i, _)| i)
        .collect();
    PriorEstimate {
        p,
        counts,
        empty_buckets,
    }
}

/// `c_b = (P_b / max P)^(1/T)`; the argmax bucket gets exactly 1.
pub fn temper(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(CalibrationError::InvalidTemperature(temperature));
    }
    if let Some(&bad) = p.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
        return Err(CalibrationError::InvalidRate(bad));
    }
    let max = p.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(CalibrationError::AllZeroPrior);
    }
    let exponent = 1.0 / temperature;
    Ok(p.iter().map(|&x| (x / max).powf(exponent)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionPrior {
    pub scheme: BucketScheme,
    pub p: Vec<f64>,
    pub temperature: f64,
    pub c: Vec<f64>,
    pub counts: Vec<BucketCount>,
}

#[derive(Serialize, Deserialize)]
struct PriorFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    prior: PositionPrior,
}

impl PositionPrior {
    pub fn new(scheme: BucketScheme, estimate: PriorEstimate, temperature: f64) -> Result<Self> {
        if estimate.p.len() != scheme.len() {
            return Err(CalibrationError::BucketCountMismatch {
                expected: scheme.len(),
                got: estimate.p.len(),
            });
        }
        let c = temper(&estimate.p, temperature)?;
        Ok(Self {
            scheme,
            p: estimate.p,
            temperature,
            c,
            counts: estimate.counts,
        })
    }

    /// Prior from explicit rates with no count bookkeeping.
    pub fn from_rates(scheme: BucketScheme, p: Vec<f64>, temperature: f64) -> Result<Self> {
        let counts = vec![BucketCount::default(); p.len()];
        Self::new(
            scheme,
            PriorEstimate {
                p,
                counts,
                empty_buckets: Vec::new(),
            },
            temperature,
        )
    }

    /// Gate for generated token `t`, clamped to `[0, 1]`.
    pub fn gate(&self, t: usize) -> f64 {
        self.c[bucket_of(t, &self.scheme)].clamp(0.0, 1.0)
    }

    pub fn to_text(&self) -> String {
        let file = PriorFile {
            format: PRIOR_FORMAT.into(),
            version: PRIOR_VERSION,
            prior: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("prior serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: PriorFile = serde_json::from_str(text).map_err(|e| CalibrationError::Parse(e.to_string()))?;
        if file.format != PRIOR_FORMAT || file.version != PRIOR_VERSION {
            return Err(CalibrationError::Parse(format!(
                "unsupported format {:?} version {}",
                file.format, file.version
            )));
        }
        let p = file.prior;
        let n = p.scheme.len();
        for len in [p.p.len(), p.c.len(), p.counts.len()] {
            if len != n {
                return Err(CalibrationError::BucketCountMismatch { expected: n, got: len });
            }
        }
        if p.c.iter().any(|c| !c.is_finite()) {
            return Err(CalibrationError::Parse("non-finite coefficient".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Refuse calibration and evaluation sets that share an image id. Ids are
/// compared by hash so the check also works on exported digests.
pub fn check_disjoint<'a>(
    calibration: impl IntoIterator<Item = &'a str>,
    evaluation: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let hashed: BTreeSet<(String, &str)> = calibration
        .into_iter()
        .map(|id| (crate::content_hash(id.as_bytes()), id))
        .collect();
    let cal: BTreeSet<&String> = hashed.iter().map(|(h, _)| h).collect();
    let overlap: Vec<&str> = evaluation
        .into_iter()
        .filter(|id| cal.contains(&crate::content_hash(id.as_bytes())))
        .collect();
    match overlap.first() {
        None => Ok(()),
        Some(example) => Err(CalibrationError::Overlap {
            count: overlap.len(),
            example: example.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scheme_map() {
        let s = BucketScheme::default();
        assert_eq!(s.len(), 13);
        for (pos, b) in [
            (0, 0),
            (4, 0),
            (5, 1),
            (17, 3),
            (19, 3),
            (20, 4),
            (23, 4),
            (95, 11),
            (99, 11),
            (100, 12),
        ] {
            assert_eq!(bucket_of(pos, &s), b, "position {pos}");
        }
        assert_eq!(bucket_of(10_000, &s), 12);
    }

    #[test]
    fn scheme_validation() {
        assert!(BucketScheme::new(vec![1, 5]).is_err());
        assert!(BucketScheme::new(vec![0, 5, 5]).is_err());
        assert!(serde_json::from_str::<BucketScheme>("[0, 3, 2]").is_err());
    }

    #[test]
    fn temper_examples() {
        let p = [0.1, 0.2, 0.4];
        let c1 = temper(&p, 1.0).unwrap();
        assert_eq!(c1, vec![0.25, 0.5, 1.0]);
        let c2 = temper(&p, 2.0).unwrap();
        assert!((c2[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(temper(&[0.0, 0.0], 1.0), Err(CalibrationError::AllZeroPrior)));
        assert!(matches!(temper(&p, 0.0), Err(CalibrationError::InvalidTemperature(_))));
    }

    #[test]
    fn gate_lookup() {
        let mut p = vec![0.4; 13];
        p[0] = 0.1;
        let prior = PositionPrior::from_rates(BucketScheme::default(), p, 1.0).unwrap();
        assert_eq!(prior.gate(0), 0.25);
        assert_eq!(prior.gate(500), prior.c[12]);
        let flat = PositionPrior::from_rates(BucketScheme::default(), vec![0.3; 13], 3.0).unwrap();
        assert!((0..300).all(|t| flat.gate(t) == 1.0));
    }

    #[test]
    fn disjointness() {
        assert!(check_disjoint(["a", "b"], ["c"]).is_ok());
        assert!(matches!(
            check_disjoint(["a", "b"], ["c", "b"]),
            Err(CalibrationError::Overlap { count: 1, .. })
        ));
    }

    #[test]
    fn prior_round_trip() {
        let prior = PositionPrior::from_rates(BucketScheme::default(), (0..13).map(|i| i as f64 / 20.0).collect(), 2.0)
            .unwrap();
        assert_eq!(PositionPrior::parse(&prior.to_text()).unwrap(), prior);
    }
}
