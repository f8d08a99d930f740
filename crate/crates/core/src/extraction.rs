//! Preference reading, weak-sample filtering, per-layer ridge fitting, and
//! grouped cross-validation for context preference vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConflictSample, CorpusError, Setup};
use crate::linalg::{ridge_fit, LinalgError};
use crate::model::{forward, generate_greedy, HookSite, ModelError, TokenId};
use crate::tokenizer::ToyTokenizer;
use crate::{DenseVector, DesignMatrix, Model, Scalar};

pub const CPV_FORMAT: &str = "ctxsteer-cpv";
pub const CPV_VERSION: u32 = 1;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_FOLDS: usize = 5;
/// Generated tokens searched for an answer.
pub const DEFAULT_ANSWER_WINDOW: usize = 8;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("candidate token id {id} is outside a vocabulary of {vocab}")]
    IdOutOfVocab { id: TokenId, vocab: usize },
    #[error("candidate sets must be nonempty")]
    EmptyCandidates,
    #[error("candidate sets overlap")]
    OverlappingCandidates,
    #[error("need at least {needed} records, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("{kind} vectors cannot be fitted on {setup:?} record {sample_id:?}")]
    SetupMismatch {
        kind: CpvKind,
        setup: Setup,
        sample_id: String,
    },
    #[error("{groups} concept groups cannot fill {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },
    #[error("record {sample_id:?} has no activation for layer {layer}")]
    MissingActivation { sample_id: String, layer: usize },
    #[error("every held-out fold has constant targets")]
    DegenerateFolds,
    #[error("unsupported vector file: {0}")]
    FormatVersionMismatch(String),
    #[error("malformed vector file: {0}")]
    ParseError(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("layer {layer} is outside 0..{n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExtractionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpvKind {
    /// Fitted on counterfactual samples.
    Vfv,
    /// Fitted jointly on both symmetric halves.
    Mrv,
}

impl CpvKind {
    pub fn accepts(self, setup: Setup) -> bool {
        match self {
            CpvKind::Vfv => setup == Setup::Counterfactual,
            CpvKind::Mrv => setup.is_symmetric(),
        }
    }
}

impl fmt::Display for CpvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CpvKind::Vfv => "VFV",
            CpvKind::Mrv => "MRV",
        })
    }
}

/// Earliest index of a token from either candidate set.
pub fn locate_focus(generated: &[TokenId], plus: &BTreeSet<TokenId>, minus: &BTreeSet<TokenId>) -> Option<usize> {
    generated.iter().position(|t| plus.contains(t) || minus.contains(t))
}

/// `max ℓ[T⁺] − max ℓ[T⁻]` on raw logits.
pub fn read_pref<S: Scalar>(logits: &[S], plus: &BTreeSet<TokenId>, minus: &BTreeSet<TokenId>) -> Result<f64> {
    if plus.is_empty() || minus.is_empty() {
        return Err(ExtractionError::EmptyCandidates);
    }
    if !plus.is_disjoint(minus) {
        return Err(ExtractionError::OverlappingCandidates);
    }
    let max_over = |set: &BTreeSet<TokenId>| -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for &id in set {
            let v = logits.get(id as usize).ok_or(ExtractionError::IdOutOfVocab {
                id,
                vocab: logits.len(),
            })?;
            best = best.max(v.to_f64_lossy());
        }
        Ok(best)
    };
    Ok(max_over(plus)? - max_over(minus)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub sample_id: String,
    pub setup: Setup,
    pub concept: String,
    /// Index of the answer's first token among generated tokens.
    pub t_star: usize,
    pub pref: f64,
    /// MLP output at the position that predicted token `t_star`.
    pub activations: BTreeMap<usize, DenseVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectReport {
    /// Sorted by sample id.
    pub records: Vec<PreferenceRecord>,
    /// Samples whose generation contained neither answer, sorted by id.
    pub not_found: Vec<NotFound>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NotFound {
    pub sample_id: String,
    pub setup: Setup,
}

/// Generate greedily for every sample, locate the answer, and read the
/// preference and activations one position before it.
pub fn collect_records<'a>(
    model: &Model,
    tokenizer: &ToyTokenizer,
    samples: impl IntoIterator<Item = &'a ConflictSample>,
    layers: &BTreeSet<usize>,
    answer_window: usize,
) -> Result<CollectReport> {
    if let Some(&layer) = layers.iter().find(|&&l| l >= model.n_layers()) {
        return Err(ExtractionError::LayerOutOfRange {
            layer,
            n_layers: model.n_layers(),
        });
    }
    let samples: Vec<&ConflictSample> = samples.into_iter().collect();
    let sites: BTreeSet<HookSite> = layers.iter().map(|&l| HookSite::mlp_output(l)).collect();
    let results: Vec<Result<std::result::Result<PreferenceRecord, NotFound>>> = samples
        .par_iter()
        .map(|s| record_one(model, tokenizer, s, &sites, answer_window))
        .collect();

    let mut report = CollectReport {
        records: Vec::new(),
        not_found: Vec::new(),
    };
    for r in results {
        match r? {
            Ok(rec) => report.records.push(rec),
            Err(id) => report.not_found.push(id),
        }
    }
    report.records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    report.not_found.sort();
    Ok(report)
}

fn record_one(
    model: &Model,
    tokenizer: &ToyTokenizer,
    sample: &ConflictSample,
    sites: &BTreeSet<HookSite>,
    answer_window: usize,
) -> Result<std::result::Result<PreferenceRecord, NotFound>> {
    let prefix = sample.prefix.materialize(model, tokenizer)?;
    let prompt = sample.prompt(tokenizer)?;
    let (plus, minus) = sample.candidates(tokenizer)?;
    let generation = generate_greedy(model, &prefix, &prompt, answer_window, None)?;
    let Some(t_star) = locate_focus(&generation.tokens, &plus, &minus) else {
        return Ok(Err(NotFound {
            sample_id: sample.sample_id.clone(),
            setup: sample.setup,
        }));
    };

    let mut seq = prompt;
    seq.extend_from_slice(&generation.tokens[..t_star]);
    let position = generation.prompt_len - 1 + t_star;
    let trace = forward(model, &prefix, &seq, &BTreeSet::from([position]), sites)?;
    let pref = read_pref(&trace.logits[&position], &plus, &minus)?;
    debug_assert_eq!(
        pref.to_bits(),
        read_pref(&generation.step_logits[t_star], &plus, &minus)?.to_bits()
    );
    let activations = sites
        .iter()
        .map(|site| {
            let v = trace
                .mlp_output(site.layer, position)
                .expect("requested site was recorded");
            (site.layer, v.cast::<f64>())
        })
        .collect();
    Ok(Ok(PreferenceRecord {
        sample_id: sample.sample_id.clone(),
        setup: sample.setup,
        concept: sample.concept.clone(),
        t_star,
        pref,
        activations,
    }))
}

/// Keep records with `|pref| ≥ epsilon`, in order.
pub fn filter_weak(records: Vec<PreferenceRecord>, epsilon: f64) -> Result<Vec<PreferenceRecord>> {
    let kept: Vec<_> = records.into_iter().filter(|r| r.pref.abs() >= epsilon).collect();
    if kept.len() < 2 {
        return Err(ExtractionError::TooFewSamples {
            needed: 2,
            got: kept.len(),
        });
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub weights: DenseVector,
    pub intercept: f64,
    pub r_squared: f64,
    /// Mean out-of-fold R², when cross-validation ran.
    pub cv_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextPreferenceVector {
    pub kind: CpvKind,
    pub per_layer: BTreeMap<usize, LayerFit>,
    pub lambda: f64,
    /// Weak-sample threshold applied before fitting (0 when unfiltered).
    pub epsilon: f64,
    pub n_used: usize,
    pub d_model: usize,
    pub source_corpus_hash: String,
}

impl ContextPreferenceVector {
    pub fn layers(&self) -> BTreeSet<usize> {
        self.per_layer.keys().copied().collect()
    }

    pub fn vector(&self, layer: usize) -> Option<&DenseVector> {
        self.per_layer.get(&layer).map(|f| &f.weights)
    }

    /// Refuse vectors that do not fit a model of this shape.
    pub fn check_model(&self, d_model: usize, n_layers: usize) -> Result<()> {
        if self.d_model != d_model {
            return Err(ExtractionError::DimMismatch {
                expected: d_model,
                got: self.d_model,
            });
        }
        if let Some(&layer) = self.per_layer.keys().find(|&&l| l >= n_layers) {
            return Err(ExtractionError::LayerOutOfRange { layer, n_layers });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let file = CpvFile {
            format: CPV_FORMAT.into(),
            version: CPV_VERSION,
            kind: self.kind,
            lambda: self.lambda,
            epsilon: self.epsilon,
            layers: self.per_layer.keys().copied().collect(),
            d_model: self.d_model,
            corpus_hash: self.source_corpus_hash.clone(),
            n_used: self.n_used,
            per_layer: self
                .per_layer
                .iter()
                .map(|(&layer, f)| LayerEntry {
                    layer,
                    intercept: f.intercept,
                    r_squared: f.r_squared,
                    cv_r2: f.cv_r2,
                    weights: f.weights.as_slice().to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("vector file serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ExtractionError::ParseError(e.to_string()))?;
        let format = value.get("format").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(CPV_FORMAT) || version != Some(CPV_VERSION as u64) {
            return Err(ExtractionError::FormatVersionMismatch(format!(
                "format {format:?} version {version:?}"
            )));
        }
        let file: CpvFile = serde_json::from_value(value).map_err(|e| ExtractionError::ParseError(e.to_string()))?;
        let listed: Vec<usize> = file.per_layer.iter().map(|e| e.layer).collect();
        if listed != file.layers {
            return Err(ExtractionError::ParseError(
                "layer list disagrees with per-layer entries".into(),
            ));
        }
        let mut per_layer = BTreeMap::new();
        for e in file.per_layer {
            if e.weights.len() != file.d_model {
                return Err(ExtractionError::DimMismatch {
                    expected: file.d_model,
                    got: e.weights.len(),
                });
            }
            let weights = DenseVector::new(e.weights)?;
            per_layer.insert(
                e.layer,
                LayerFit {
                    weights,
                    intercept: e.intercept,
                    r_squared: e.r_squared,
                    cv_r2: e.cv_r2,
                },
            );
        }
        Ok(Self {
            kind: file.kind,
            per_layer,
            lambda: file.lambda,
            epsilon: file.epsilon,
            n_used: file.n_used,
            d_model: file.d_model,
            source_corpus_hash: file.corpus_hash,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CpvFile {
    format: String,
    version: u32,
    kind: CpvKind,
    lambda: f64,
    epsilon: f64,
    layers: Vec<usize>,
    d_model: usize,
    corpus_hash: String,
    n_used: usize,
    per_layer: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    layer: usize,
    intercept: f64,
    r_squared: f64,
    cv_r2: Option<f64>,
    weights: Vec<f64>,
}

pub fn save_cpv(cpv: &ContextPreferenceVector, path: &Path) -> Result<()> {
    std::fs::write(path, cpv.to_text())?;
    Ok(())
}

pub fn load_cpv(path: &Path) -> Result<ContextPreferenceVector> {
    ContextPreferenceVector::parse(&std::fs::read_to_string(path)?)
}

/// Load and check against a model's width and depth.
pub fn load_cpv_for(path: &Path, model: &Model) -> Result<ContextPreferenceVector> {
    let cpv = load_cpv(path)?;
    cpv.check_model(model.d_model(), model.n_layers())?;
    Ok(cpv)
}

fn check_records(records: &[PreferenceRecord], kind: CpvKind) -> Result<BTreeSet<usize>> {
    if records.len() < 2 {
        return Err(ExtractionError::TooFewSamples {
            needed: 2,
            got: records.len(),
        });
    }
    if let Some(r) = records.iter().find(|r| !kind.accepts(r.setup)) {
        return Err(ExtractionError::SetupMismatch {
            kind,
            setup: r.setup,
            sample_id: r.sample_id.clone(),
        });
    }
    let layers: BTreeSet<usize> = records[0].activations.keys().copied().collect();
    for r in records {
        if let Some(&layer) = layers.iter().find(|l| !r.activations.contains_key(l)) {
            return Err(ExtractionError::MissingActivation {
                sample_id: r.sample_id.clone(),
                layer,
            });
        }
    }
    Ok(layers)
}

fn design(records: &[&PreferenceRecord], layer: usize) -> Result<(DesignMatrix, Vec<f64>)> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.activations[&layer].as_slice()).collect();
    let x = DesignMatrix::from_rows(&rows)?;
    let y = records.iter().map(|r| r.pref).collect();
    Ok((x, y))
}

/// One independent ridge regression per layer of activations onto `pref`.
/// The result carries `epsilon = 0` and an empty corpus hash; the caller
/// fills those in when it knows them.
pub fn fit_cpv(records: &[PreferenceRecord], kind: CpvKind, lambda: f64) -> Result<ContextPreferenceVector> {
    let layers = check_records(records, kind)?;
    let refs: Vec<&PreferenceRecord> = records.iter().collect();
    let fits: Vec<(usize, LayerFit)> = layers
        .par_iter()
        .map(|&layer| {
            let (x, y) = design(&refs, layer)?;
            let sol = ridge_fit(&x, &y, lambda)?;
            Ok((
                layer,
                LayerFit {
                    weights: sol.weights,
                    intercept: sol.intercept,
                    r_squared: sol.r_squared,
                    cv_r2: None,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let d_model = fits.first().map_or(0, |(_, f)| f.weights.dim());
    Ok(ContextPreferenceVector {
        kind,
        per_layer: fits.into_iter().collect(),
        lambda,
        epsilon: 0.0,
        n_used: records.len(),
        d_model,
        source_corpus_hash: String::new(),
    })
}

/// Assign concept groups to folds: largest groups first, each to the
/// currently smallest fold (ties to the lowest index).
pub fn assign_folds(records: &[PreferenceRecord], folds: usize) -> Result<Vec<usize>> {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *sizes.entry(r.concept.as_str()).or_default() += 1;
    }
    if folds < 2 || sizes.len() < folds {
        return Err(ExtractionError::TooFewGroups {
            groups: sizes.len(),
            folds,
        });
    }
    let mut order: Vec<(&str, usize)> = sizes.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut load = vec![0usize; folds];
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (concept, size) in order {
        let f = (0..folds).min_by_key(|&f| (load[f], f)).expect("folds > 0");
        load[f] += size;
        fold_of.insert(concept, f);
    }
    Ok(records.iter().map(|r| fold_of[r.concept.as_str()]).collect())
}

/// Mean out-of-fold R² per layer under group-aware folds. Folds whose
/// held-out targets are constant have no defined R² and are skipped.
pub fn crossval(
    records: &[PreferenceRecord],
    kind: CpvKind,
    folds: usize,
    lambda: f64,
) -> Result<BTreeMap<usize, f64>> {
    let layers = check_records(records, kind)?;
    let fold_of = assign_folds(records, folds)?;
    layers
        .par_iter()
        .map(|&layer| {
            let mut scores = Vec::new();
            for f in 0..folds {
                let (test, train): (Vec<_>, Vec<_>) = records.iter().zip(&fold_of).partition(|(_, &fold)| fold == f);
                let train: Vec<&PreferenceRecord> = train.into_iter().map(|(r, _)| r).collect();
                let test: Vec<&PreferenceRecord> = test.into_iter().map(|(r, _)| r).collect();
                let (x, y) = design(&train, layer)?;
                let sol = ridge_fit(&x, &y, lambda)?;
                let mean = test.iter().map(|r| r.pref).sum::<f64>() / test.len() as f64;
                let mut ss_res = 0.0;
                let mut ss_tot = 0.0;
                for r in &test {
                    let pred = sol.predict(r.activations[&layer].as_slice());
                    ss_res += (r.pref - pred).powi(2);
                    ss_tot += (r.pref - mean).powi(2);
                }
                if ss_tot > 0.0 {
                    scores.push(1.0 - ss_res / ss_tot);
                }
            }
            if scores.is_empty() {
                return Err(ExtractionError::DegenerateFolds);
            }
            Ok((layer, scores.iter().sum::<f64>() / scores.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub lambda: f64,
    pub epsilon: f64,
    pub folds: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            folds: DEFAULT_FOLDS,
        }
    }
}

/// Per-kind sample accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub samples: usize,
    pub not_found: usize,
    pub weak: usize,
    pub used: usize,
}

/// Filter, fit, and cross-validate one vector kind from collected records.
/// Records of other setups are ignored; `not_found` counts this kind's
/// samples that produced no record.
pub fn extract_cpv(
    report: &CollectReport,
    kind: CpvKind,
    params: FitParams,
    corpus_hash: &str,
) -> Result<(ContextPreferenceVector, DropReport)> {
    let own: Vec<PreferenceRecord> = report
        .records
        .iter()
        .filter(|r| kind.accepts(r.setup))
        .cloned()
        .collect();
    let not_found = report.not_found.iter().filter(|n| kind.accepts(n.setup)).count();
    let found = own.len();
    let kept = filter_weak(own, params.epsilon)?;
    let mut cpv = fit_cpv(&kept, kind, params.lambda)?;
    let cv = crossval(&kept, kind, params.folds, params.lambda)?;
    for (layer, r2) in cv {
        if let Some(f) = cpv.per_layer.get_mut(&layer) {
            f.cv_r2 = Some(r2);
        }
    }
    cpv.epsilon = params.epsilon;
    cpv.source_corpus_hash = corpus_hash.to_string();
    let drops = DropReport {
        samples: found + not_found,
        not_found,
        weak: found - kept.len(),
        used: kept.len(),
    };
    Ok((cpv, drops))
}
