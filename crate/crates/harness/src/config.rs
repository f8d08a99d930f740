//! Experiment configuration: one TOML file, optional per-flag overrides, and
//! an environment variable for the output root.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ctxsteer::corpus::SampleCounts;
use ctxsteer::extraction::{FitParams, DEFAULT_ANSWER_WINDOW, DEFAULT_EPSILON, DEFAULT_FOLDS, DEFAULT_LAMBDA};
use ctxsteer::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Environment variable read by the CLI for the output root.
pub const OUTPUT_ENV: &str = "CTXSTEER_OUT";
const FALLBACK_OUTPUT: &str = "ctxsteer-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub images: ImageSection,
    pub extraction: ExtractionSection,
    pub calibration: CalibrationSection,
    pub eval: EvalSection,
    pub injection: InjectionSection,
    pub sweep: SweepSection,
    pub latency: LatencySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            output_dir: None,
            model: ModelSection::default(),
            corpus: CorpusSection::default(),
            images: ImageSection::default(),
            extraction: ExtractionSection::default(),
            calibration: CalibrationSection::default(),
            eval: EvalSection::default(),
            injection: InjectionSection::default(),
            sweep: SweepSection::default(),
            latency: LatencySection::default(),
        }
    }
}

/// Either a checkpoint to load or the shape of a model to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Weight seed; defaults to the experiment seed.
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self {
            checkpoint: None,
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_mlp: c.d_mlp,
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    pub counts: SampleCounts,
    /// Held-out samples for the probe preference column.
    pub probe_counts: SampleCounts,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            counts: SampleCounts::default(),
            probe_counts: SampleCounts { cf: 15, a: 10, b: 10 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSection {
    pub calibration: usize,
    pub evaluation: usize,
}

impl Default for ImageSection {
    fn default() -> Self {
        Self {
            calibration: 60,
            evaluation: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    /// Defaults to the injection window plus every sweep window layer the
    /// model has.
    pub layers: Option<Vec<usize>>,
    pub all_layers: bool,
    pub lambda: f64,
    pub epsilon: f64,
    pub folds: usize,
    pub answer_window: usize,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        Self {
            layers: None,
            all_layers: false,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            folds: DEFAULT_FOLDS,
            answer_window: DEFAULT_ANSWER_WINDOW,
        }
    }
}

impl ExtractionSection {
    pub fn fit_params(&self) -> FitParams {
        FitParams {
            lambda: self.lambda,
            epsilon: self.epsilon,
            folds: self.folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub max_new: usize,
    /// Bucket start positions; the default is the 13-bucket scheme.
    pub buckets: Option<Vec<usize>>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            max_new: 64,
            buckets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_new: usize,
    pub align_limit: usize,
    /// Report macro-averaged Cover instead of micro.
    pub cover_macro: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_new: 64,
            align_limit: 64,
            cover_macro: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GateKind {
    ConstantOne,
    TemperedPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSection {
    pub alpha: f64,
    pub beta: f64,
    pub layers: Vec<usize>,
    pub gate: GateKind,
    /// Required with the tempered prior gate.
    pub temperature: Option<f64>,
    pub vfv: Option<PathBuf>,
    pub mrv: Option<PathBuf>,
    pub prior: Option<PathBuf>,
}

impl Default for InjectionSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            layers: (11..=14).collect(),
            gate: GateKind::TemperedPrior,
            temperature: Some(2.0),
            vfv: None,
            mrv: None,
            prior: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepMode {
    VfvOnly,
    MrvOnly,
    Joint,
    WindowAblation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mode: SweepMode,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub windows: Vec<Vec<usize>>,
    /// Gate for non-ablation sweeps; ablations always use the constant gate.
    pub gate: GateKind,
    /// Add per-token latency columns (makes the report timing-dependent).
    pub measure_latency: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            mode: SweepMode::VfvOnly,
            alphas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            betas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            windows: vec![vec![1, 2, 3, 4], vec![6, 7, 8, 9], vec![11, 12, 13, 14]],
            gate: GateKind::ConstantOne,
            measure_latency: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub n_tokens: usize,
    pub max_new: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        Self {
            n_tokens: 512,
            max_new: 128,
        }
    }
}

pub const MIN_LATENCY_TOKENS: usize = 500;

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub layers: Option<Vec<usize>>,
    pub gate: Option<GateKind>,
    pub temperature: Option<f64>,
    pub mode: Option<SweepMode>,
    pub n_tokens: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out {
            self.output_dir = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.alpha {
            self.injection.alpha = v;
        }
        if let Some(v) = o.beta {
            self.injection.beta = v;
        }
        if let Some(v) = &o.layers {
            self.injection.layers = v.clone();
        }
        if let Some(v) = o.gate {
            self.injection.gate = v;
        }
        if let Some(v) = o.temperature {
            self.injection.temperature = Some(v);
        }
        if let Some(v) = o.mode {
            self.sweep.mode = v;
        }
        if let Some(v) = o.n_tokens {
            self.latency.n_tokens = v;
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_mlp: m.d_mlp,
            vocab_size: m.vocab_size,
            max_seq: m.max_seq,
            seed: m.seed.unwrap_or(self.seed),
        }
    }

    pub fn extraction_layers(&self) -> BTreeSet<usize> {
        if self.extraction.all_layers {
            return (0..self.model.n_layers).collect();
        }
        if let Some(layers) = &self.extraction.layers {
            return layers.iter().copied().collect();
        }
        let windows = self
            .sweep
            .windows
            .iter()
            .flatten()
            .filter(|&&l| l < self.model.n_layers);
        self.injection.layers.iter().chain(windows).copied().collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT))
    }

    /// Every explicitly configured input file must exist.
    pub fn check_files(&self) -> Result<(), HarnessError> {
        let named = [
            ("model.checkpoint", &self.model.checkpoint),
            ("corpus.path", &self.corpus.path),
            ("injection.vfv", &self.injection.vfv),
            ("injection.mrv", &self.injection.mrv),
            ("injection.prior", &self.injection.prior),
        ];
        for (key, path) in named {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(HarnessError::Config(format!("{key} {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Checks that do not need any file on disk.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let depth = self.model.n_layers;
        let check_layers = |what: &str, layers: &[usize]| -> Result<(), HarnessError> {
            if layers.is_empty() {
                return Err(HarnessError::Config(format!("{what} must not be empty")));
            }
            if let Some(l) = layers.iter().find(|&&l| l >= depth) {
                return Err(HarnessError::Config(format!(
                    "{what} contains layer {l}, but the model has {depth} layers"
                )));
            }
            Ok(())
        };
        check_layers("injection.layers", &self.injection.layers)?;
        check_layers(
            "extraction.layers",
            &self.extraction_layers().into_iter().collect::<Vec<_>>(),
        )?;
        for c in [self.corpus.counts, self.corpus.probe_counts] {
            if c.cf == 0 || c.a == 0 || c.b == 0 {
                return bad("sample counts must be at least 1".into());
            }
            if c.a != c.b {
                return bad(format!("symmetric counts must match, got a={} b={}", c.a, c.b));
            }
        }
        if self.images.calibration == 0 || self.images.evaluation == 0 {
            return bad("image counts must be at least 1".into());
        }
        let x = &self.extraction;
        if !(x.lambda.is_finite() && x.lambda >= 0.0) {
            return bad(format!("extraction.lambda must be non-negative, got {}", x.lambda));
        }
        if !(x.epsilon.is_finite() && x.epsilon >= 0.0) {
            return bad(format!("extraction.epsilon must be non-negative, got {}", x.epsilon));
        }
        if x.folds < 2 {
            return bad("extraction.folds must be at least 2".into());
        }
        if x.answer_window == 0 || self.calibration.max_new == 0 || self.eval.max_new == 0 {
            return bad("generation lengths must be at least 1".into());
        }
        if self.eval.align_limit == 0 {
            return bad("eval.align_limit must be at least 1".into());
        }
        let inj = &self.injection;
        if !(inj.alpha.is_finite() && inj.beta.is_finite()) {
            return bad("injection strengths must be finite".into());
        }
        if let Some(t) = inj.temperature {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("injection.temperature must be positive, got {t}"));
            }
        }
        if inj.gate == GateKind::TemperedPrior && inj.temperature.is_none() {
            return bad("the tempered_prior gate needs an explicit injection.temperature".into());
        }
        let s = &self.sweep;
        let axis_ok = match s.mode {
            SweepMode::VfvOnly => !s.alphas.is_empty(),
            SweepMode::MrvOnly => !s.betas.is_empty(),
            SweepMode::Joint => !s.alphas.is_empty() && !s.betas.is_empty(),
            SweepMode::WindowAblation => !s.windows.is_empty(),
        };
        if !axis_ok {
            return bad(format!("sweep mode {:?} needs a nonempty grid axis", s.mode));
        }
        if s.alphas.iter().chain(&s.betas).any(|v| !v.is_finite()) {
            return bad("sweep strengths must be finite".into());
        }
        if s.mode == SweepMode::WindowAblation {
            for w in &s.windows {
                check_layers("sweep.windows", w)?;
            }
        }
        if s.gate == GateKind::TemperedPrior && inj.temperature.is_none() {
            return bad("a tempered_prior sweep needs injection.temperature".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_partial_file() {
        let c = ExperimentConfig::from_toml(
            "seed = 9\n[injection]\nalpha = -2.0\nlayers = [12]\n[sweep]\nmode = \"mrv_only\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.injection.alpha, -2.0);
        assert_eq!(c.sweep.mode, SweepMode::MrvOnly);
        let expected: BTreeSet<usize> = [1, 2, 3, 4, 6, 7, 8, 9, 11, 12, 13, 14].into();
        assert_eq!(c.extraction_layers(), expected);
        let mut shallow = c.clone();
        shallow.model.n_layers = 8;
        shallow.injection.layers = vec![5];
        assert_eq!(shallow.extraction_layers(), [1, 2, 3, 4, 5, 6, 7].into());
        let mut fixed = c;
        fixed.extraction.layers = Some(vec![3]);
        assert_eq!(fixed.extraction_layers(), [3].into());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let mut c = ExperimentConfig::default();
        c.injection.layers = vec![16];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.injection.temperature = None;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.corpus.counts.b = 54;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            alpha: Some(-1.5),
            layers: Some(vec![3, 4]),
            out: Some("x".into()),
            ..Default::default()
        });
        assert_eq!(c.injection.alpha, -1.5);
        assert_eq!(c.injection.layers, vec![3, 4]);
        assert_eq!(c.output_dir(), PathBuf::from("x"));
    }
}
