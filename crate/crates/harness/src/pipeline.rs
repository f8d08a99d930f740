//! Pipeline stages. Each stage reads its inputs from configured paths or the
//! output directory, writes its artifacts there, and records a manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ctxsteer::calibration::{self, BucketCount, BucketScheme, CalibrationError, PositionPrior};
use ctxsteer::corpus::{
    self, load_images, load_samples, prompt_tokens, synth_corpus, synth_images, ConflictSample, ImageSpec, SampleSet,
    CAPTION_PROMPT,
};
use ctxsteer::extraction::{
    collect_records, extract_cpv, load_cpv_for, locate_focus, read_pref, save_cpv, ContextPreferenceVector, CpvKind,
    DropReport,
};
use ctxsteer::linalg::{cosine, random_abs_cosine_baseline, random_pair_cosines, CosineSummary};
use ctxsteer::metrics::{
    chair, extract_objects, length_align, text_quality, CaptionMentions, CaptionTokens, HallucinationReport,
    ObjectAnnotation, TextQualityReport,
};
use ctxsteer::model::{generate_greedy_timed, TokenId};
use ctxsteer::steering::{steer_generate, Gate, InjectionHandle, InjectionSpec};
use ctxsteer::tokenizer::{ToyTokenizer, EOS};
use ctxsteer::{Model, PrefixEmbedding};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, ManifestBuilder};
use crate::config::{ExperimentConfig, GateKind, SweepMode, MIN_LATENCY_TOKENS};
use crate::error::{HarnessError, InStage, Stage, StageError};
use crate::qa::{self, QaReport};
use crate::report::{self, format_window, is_degenerate, LatencyStats, ReportRow};

const PROBE_STREAM: u64 = 1;
const CALIBRATION_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;
const BASELINE_STREAM: u64 = 4;
const BASELINE_PAIRS: usize = 1000;
const CAPTIONS_FORMAT: &str = "ctxsteer-captions";

/// Independent seed for one consumer of the experiment seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub corpus_samples: usize,
    pub probe_samples: usize,
    pub calibration_images: usize,
    pub eval_images: usize,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub r_squared: f64,
    pub cv_r2: Option<f64>,
    pub weight_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub drops: DropReport,
    pub layers: Vec<LayerSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCosine {
    pub layer: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub corpus_hash: String,
    pub n_samples: usize,
    pub not_found: usize,
    pub vfv: KindSummary,
    pub mrv: KindSummary,
    /// Per-layer cosine between the two vectors.
    pub vfv_mrv_cosine: Vec<LayerCosine>,
    pub vfv_mrv_mean_abs_cosine: f64,
    /// `sqrt(2 / (π·d))` for the model width.
    pub random_baseline: f64,
    /// Empirical `|cos|` over random Gaussian pairs at the model width.
    pub random_pairs: CosineSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_captions: usize,
    pub bucket_starts: Vec<usize>,
    pub p: Vec<f64>,
    pub counts: Vec<BucketCount>,
    pub empty_buckets: Vec<usize>,
    pub temperature: f64,
    /// Tempered gate values; absent when every bucket rate is zero.
    pub c: Option<Vec<f64>>,
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub requested_tokens: usize,
    pub max_new: usize,
    pub alpha: f64,
    pub beta: f64,
    pub window: String,
    pub gate: String,
    pub vanilla: LatencyStats,
    pub steered: LatencyStats,
    /// Steered over vanilla median per-token time.
    pub ratio: f64,
}

/// Everything one evaluation produces.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcome {
    pub hallucination: HallucinationReport,
    pub aligned: HallucinationReport,
    pub quality: TextQualityReport,
    pub probe_pref: Option<f64>,
    pub probe_found: usize,
    pub captions: Vec<CaptionTokens>,
}

struct PreparedImage {
    image_id: String,
    prefix: PrefixEmbedding,
}

struct PreparedProbe {
    prefix: PrefixEmbedding,
    prompt: Vec<TokenId>,
    plus: BTreeSet<TokenId>,
    minus: BTreeSet<TokenId>,
}

/// Generation and scoring settings shared by every evaluated point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub max_new: usize,
    pub align_limit: usize,
    pub answer_window: usize,
}

/// A model with its evaluation images and probe samples prepared, ready to
/// score any injection setting.
pub struct EvalContext {
    model: Model,
    tokenizer: ToyTokenizer,
    annotation: ObjectAnnotation,
    images: Vec<PreparedImage>,
    probe: Vec<PreparedProbe>,
    caption_prompt: Vec<TokenId>,
    vfv: Option<ContextPreferenceVector>,
    mrv: Option<ContextPreferenceVector>,
    settings: EvalSettings,
}

impl EvalContext {
    pub fn new(
        model: Model,
        tokenizer: ToyTokenizer,
        annotation: ObjectAnnotation,
        images: &[ImageSpec],
        probe: &[ConflictSample],
        settings: EvalSettings,
    ) -> Result<Self, StageError> {
        let images = images
            .iter()
            .map(|im| {
                Ok(PreparedImage {
                    image_id: im.image_id.clone(),
                    prefix: im.prefix.materialize(&model, &tokenizer)?,
                })
            })
            .collect::<Result<_, StageError>>()?;
        let probe = probe
            .iter()
            .map(|s| {
                let (plus, minus) = s.candidates(&tokenizer)?;
                Ok(PreparedProbe {
                    prefix: s.prefix.materialize(&model, &tokenizer)?,
                    prompt: s.prompt(&tokenizer)?,
                    plus,
                    minus,
                })
            })
            .collect::<Result<_, StageError>>()?;
        let caption_prompt = prompt_tokens(&tokenizer, CAPTION_PROMPT)?;
        Ok(Self {
            model,
            tokenizer,
            annotation,
            images,
            probe,
            caption_prompt,
            vfv: None,
            mrv: None,
            settings,
        })
    }

    pub fn with_vectors(mut self, vfv: Option<ContextPreferenceVector>, mrv: Option<ContextPreferenceVector>) -> Self {
        self.vfv = vfv;
        self.mrv = mrv;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn handle(&self, spec: &InjectionSpec) -> Result<InjectionHandle<f32>, StageError> {
        Ok(InjectionHandle::new(
            spec.clone(),
            self.vfv.clone(),
            self.mrv.clone(),
            &self.model,
        )?)
    }

    /// Greedy captions for every image, cut at the first end token.
    pub fn captions(&self, spec: &InjectionSpec) -> Result<Vec<Vec<TokenId>>, StageError> {
        let template = self.handle(spec)?;
        let eos = self.tokenizer.special(EOS);
        self.images
            .par_iter()
            .map(|im| {
                let mut h = template.clone();
                let g = steer_generate(
                    &self.model,
                    &mut h,
                    &im.prefix,
                    &self.caption_prompt,
                    self.settings.max_new,
                )?;
                let end = g.tokens.iter().position(|&t| t == eos).unwrap_or(g.tokens.len());
                Ok(g.tokens[..end].to_vec())
            })
            .collect()
    }

    /// Mean preference over probe samples whose answer appears, and how
    /// many did.
    pub fn probe_pref(&self, spec: &InjectionSpec) -> Result<(Option<f64>, usize), StageError> {
        let template = self.handle(spec)?;
        let prefs: Vec<Option<f64>> = self
            .probe
            .par_iter()
            .map(|p| {
                let mut h = template.clone();
                let g = steer_generate(&self.model, &mut h, &p.prefix, &p.prompt, self.settings.answer_window)?;
                match locate_focus(&g.tokens, &p.plus, &p.minus) {
                    Some(t) => Ok(Some(read_pref(&g.step_logits[t], &p.plus, &p.minus)?)),
                    None => Ok(None),
                }
            })
            .collect::<Result<_, StageError>>()?;
        let found: Vec<f64> = prefs.into_iter().flatten().collect();
        let mean = (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64);
        Ok((mean, found.len()))
    }

    pub fn evaluate(&self, spec: &InjectionSpec) -> Result<PointOutcome, StageError> {
        let ids = self.captions(spec)?;
        let captions: Vec<CaptionTokens> = self
            .images
            .iter()
            .zip(&ids)
            .map(|(im, toks)| CaptionTokens {
                image_id: im.image_id.clone(),
                tokens: toks.iter().map(|&t| self.tokenizer.surface(t)).collect(),
            })
            .collect();
        let mentions = |caps: &[CaptionTokens]| -> Result<Vec<CaptionMentions>, StageError> {
            caps.iter()
                .map(|c| {
                    Ok(CaptionMentions {
                        image_id: c.image_id.clone(),
                        mentions: extract_objects(&c.image_id, &c.tokens, &self.annotation)?,
                    })
                })
                .collect()
        };
        let hallucination = chair(&mentions(&captions)?, &self.annotation)?;
        let cut: Vec<CaptionTokens> = captions
            .iter()
            .zip(length_align(
                &captions.iter().map(|c| c.tokens.clone()).collect::<Vec<_>>(),
                self.settings.align_limit,
            ))
            .map(|(c, tokens)| CaptionTokens {
                image_id: c.image_id.clone(),
                tokens,
            })
            .collect();
        let aligned = chair(&mentions(&cut)?, &self.annotation)?;
        let quality = text_quality(&ids)?;
        let (probe_pref, probe_found) = self.probe_pref(spec)?;
        Ok(PointOutcome {
            hallucination,
            aligned,
            quality,
            probe_pref,
            probe_found,
            captions,
        })
    }

    /// Per-token decode times for vanilla and `spec`, alternating the two on
    /// each image until both have at least `n_tokens` samples.
    pub fn latency(
        &self,
        spec: &InjectionSpec,
        n_tokens: usize,
        max_new: usize,
    ) -> Result<(LatencyStats, LatencyStats), StageError> {
        if self.images.is_empty() {
            return Err(StageError::Invalid("latency needs at least one image".into()));
        }
        let steered = self.handle(spec)?;
        let run = |handle: Option<&InjectionHandle<f32>>, prefix: &PrefixEmbedding, times: &mut Vec<Duration>| {
            let mut h = handle.cloned();
            generate_greedy_timed(
                &self.model,
                prefix,
                &self.caption_prompt,
                max_new,
                h.as_mut().map(|h| h as _),
                Some(times),
            )
            .map(|_| ())
        };
        let mut scratch = Vec::new();
        run(None, &self.images[0].prefix, &mut scratch)?;
        run(Some(&steered), &self.images[0].prefix, &mut scratch)?;
        let (mut vanilla, mut injected) = (Vec::new(), Vec::new());
        for im in self.images.iter().cycle() {
            if vanilla.len() >= n_tokens && injected.len() >= n_tokens {
                break;
            }
            let before = (vanilla.len(), injected.len());
            run(None, &im.prefix, &mut vanilla)?;
            run(Some(&steered), &im.prefix, &mut injected)?;
            if (vanilla.len(), injected.len()) == before {
                return Err(StageError::Invalid("generation produced no timed tokens".into()));
            }
        }
        let ms = |d: &[Duration]| d.iter().map(|x| x.as_secs_f64() * 1e3).collect::<Vec<_>>();
        let stats = |d: &[Duration]| LatencyStats::from_millis(&ms(d)).expect("loop collected samples");
        Ok((stats(&vanilla), stats(&injected)))
    }
}

fn gate_label(gate: &Gate) -> String {
    match gate {
        Gate::ConstantOne => "constant_one".into(),
        Gate::TemperedPrior(p) => format!("tempered_prior(T={})", p.temperature),
    }
}

/// Builds a report row; `vanilla_rep6` is the reference for the
/// degeneracy flag.
pub fn make_row(
    label: &str,
    mode: &str,
    spec: &InjectionSpec,
    outcome: &PointOutcome,
    align_limit: usize,
    cover_macro: bool,
    vanilla_rep6: f64,
) -> ReportRow {
    ReportRow {
        label: label.to_string(),
        mode: mode.to_string(),
        alpha: spec.alpha,
        beta: spec.beta,
        window: format_window(spec.layers.iter().copied()),
        gate: gate_label(&spec.gate),
        hallucination: outcome.hallucination,
        aligned: outcome.aligned,
        align_limit,
        quality: outcome.quality,
        probe_pref: outcome.probe_pref,
        probe_found: outcome.probe_found,
        cover_macro,
        degenerate: !(spec.alpha == 0.0 && spec.beta == 0.0) && is_degenerate(outcome.quality.rep6, vanilla_rep6),
        latency: None,
    }
}

fn mode_name(mode: SweepMode) -> &'static str {
    match mode {
        SweepMode::VfvOnly => "vfv_only",
        SweepMode::MrvOnly => "mrv_only",
        SweepMode::Joint => "joint",
        SweepMode::WindowAblation => "window_ablation",
    }
}

/// Grid points of a sweep in report order, each with its label.
pub fn sweep_points(config: &ExperimentConfig, gate: &Gate) -> Vec<(String, InjectionSpec)> {
    let s = &config.sweep;
    let window: BTreeSet<usize> = config.injection.layers.iter().copied().collect();
    let spec = |alpha: f64, beta: f64, layers: BTreeSet<usize>, gate: Gate| InjectionSpec {
        layers,
        alpha,
        beta,
        gate,
    };
    match s.mode {
        SweepMode::VfvOnly => s
            .alphas
            .iter()
            .map(|&a| (format!("alpha={a}"), spec(a, 0.0, window.clone(), gate.clone())))
            .collect(),
        SweepMode::MrvOnly => s
            .betas
            .iter()
            .map(|&b| (format!("beta={b}"), spec(0.0, b, window.clone(), gate.clone())))
            .collect(),
        SweepMode::Joint => s
            .alphas
            .iter()
            .flat_map(|&a| s.betas.iter().map(move |&b| (a, b)))
            .map(|(a, b)| (format!("alpha={a},beta={b}"), spec(a, b, window.clone(), gate.clone())))
            .collect(),
        SweepMode::WindowAblation => s
            .windows
            .iter()
            .map(|w| {
                let layers: BTreeSet<usize> = w.iter().copied().collect();
                (
                    format!("window={}", format_window(layers.iter().copied())),
                    spec(config.injection.alpha, config.injection.beta, layers, Gate::ConstantOne),
                )
            })
            .collect(),
    }
}

fn write_captions(path: &Path, captions: &[CaptionTokens]) -> Result<(), StageError> {
    let mut text = serde_json::to_string(&serde_json::json!({"format": CAPTIONS_FORMAT, "version": 1}))?;
    text.push('\n');
    for c in captions {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs pipeline stages against one configuration and output directory.
pub struct Harness {
    config: ExperimentConfig,
    out: PathBuf,
    tokenizer: ToyTokenizer,
}

impl Harness {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        config.check_files()?;
        let out = config.output_dir();
        std::fs::create_dir_all(&out)
            .map_err(|e| HarnessError::Config(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self {
            config,
            out,
            tokenizer: ToyTokenizer::standard(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn model_path(&self) -> PathBuf {
        self.config
            .model
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.path(artifacts::MODEL))
    }

    fn corpus_path(&self) -> PathBuf {
        self.config
            .corpus
            .path
            .clone()
            .unwrap_or_else(|| self.path(artifacts::CORPUS))
    }

    fn vector_path(&self, kind: CpvKind) -> PathBuf {
        let (configured, name) = match kind {
            CpvKind::Vfv => (&self.config.injection.vfv, artifacts::VFV),
            CpvKind::Mrv => (&self.config.injection.mrv, artifacts::MRV),
        };
        configured.clone().unwrap_or_else(|| self.path(name))
    }

    fn prior_path(&self) -> PathBuf {
        self.config
            .injection
            .prior
            .clone()
            .unwrap_or_else(|| self.path(artifacts::PRIOR))
    }

    /// Loads the model and checks every configured layer against its depth.
    pub fn load_model(&self, stage: Stage, m: &mut ManifestBuilder) -> Result<Model, HarnessError> {
        let path = self.model_path();
        artifacts::require(&path).in_stage(stage)?;
        let model = Model::load(&path).in_stage(stage)?;
        m.input(&path);
        let depth = model.n_layers();
        let c = &self.config;
        let mut used: Vec<usize> = c.injection.layers.clone();
        used.extend(c.extraction_layers());
        if c.sweep.mode == SweepMode::WindowAblation {
            used.extend(c.sweep.windows.iter().flatten());
        }
        if let Some(l) = used.into_iter().find(|&l| l >= depth) {
            return Err(HarnessError::Config(format!(
                "layer {l} is outside the {depth}-layer model at {}",
                path.display()
            )));
        }
        Ok(model)
    }

    fn load_corpus(&self, stage: Stage, m: &mut ManifestBuilder) -> Result<SampleSet, HarnessError> {
        let path = self.corpus_path();
        artifacts::require(&path).in_stage(stage)?;
        m.input(&path);
        load_samples(&path, &self.tokenizer).in_stage(stage)
    }

    fn load_probe(&self, stage: Stage, m: &mut ManifestBuilder) -> Result<SampleSet, HarnessError> {
        let path = self.path(artifacts::PROBE);
        artifacts::require(&path).in_stage(stage)?;
        m.input(&path);
        load_samples(&path, &self.tokenizer).in_stage(stage)
    }

    fn load_images(&self, name: &str, stage: Stage, m: &mut ManifestBuilder) -> Result<Vec<ImageSpec>, HarnessError> {
        let path = self.path(name);
        artifacts::require(&path).in_stage(stage)?;
        m.input(&path);
        load_images(&path).in_stage(stage)
    }

    fn load_annotation(&self, stage: Stage, m: &mut ManifestBuilder) -> Result<ObjectAnnotation, HarnessError> {
        let path = self.path(artifacts::ANNOTATIONS);
        artifacts::require(&path).in_stage(stage)?;
        m.input(&path);
        ObjectAnnotation::load(&path).in_stage(stage)
    }

    /// Loads a vector when `needed`; a missing file is then a stage failure.
    fn load_vector(
        &self,
        kind: CpvKind,
        needed: bool,
        model: &Model,
        stage: Stage,
        m: &mut ManifestBuilder,
    ) -> Result<Option<ContextPreferenceVector>, HarnessError> {
        if !needed {
            return Ok(None);
        }
        let path = self.vector_path(kind);
        artifacts::require(&path).in_stage(stage)?;
        m.input(&path);
        load_cpv_for(&path, model).map(Some).in_stage(stage)
    }

    /// Resolves a gate kind. A tempered gate falls back to the constant gate
    /// when calibration found no hallucinated tokens at all.
    fn gate(&self, kind: GateKind, stage: Stage, m: &mut ManifestBuilder) -> Result<Gate, HarnessError> {
        if kind == GateKind::ConstantOne {
            return Ok(Gate::ConstantOne);
        }
        let temperature = self
            .config
            .injection
            .temperature
            .ok_or_else(|| HarnessError::Config("the tempered_prior gate needs injection.temperature".into()))?;
        let path = self.prior_path();
        if path.is_file() {
            m.input(&path);
            let prior = PositionPrior::load(&path).in_stage(stage)?;
            if prior.temperature == temperature {
                return Ok(Gate::TemperedPrior(prior));
            }
            let mut retempered =
                PositionPrior::from_rates(prior.scheme.clone(), prior.p.clone(), temperature).in_stage(stage)?;
            retempered.counts = prior.counts;
            return Ok(Gate::TemperedPrior(retempered));
        }
        let report_path = self.path(artifacts::CALIBRATION_REPORT);
        if self.config.injection.prior.is_none() && report_path.is_file() {
            let report: CalibrationReport = artifacts::read_json(&report_path).in_stage(stage)?;
            if report.all_zero {
                m.input(&report_path);
                eprintln!("warning: calibration found no hallucinated tokens; using a constant gate");
                return Ok(Gate::ConstantOne);
            }
        }
        Err(StageError::MissingInput(path)).in_stage(stage)
    }

    fn settings(&self) -> EvalSettings {
        EvalSettings {
            max_new: self.config.eval.max_new,
            align_limit: self.config.eval.align_limit,
            answer_window: self.config.extraction.answer_window,
        }
    }

    /// Model, corpus, probe set, images, and annotations.
    pub fn synth(&self) -> Result<SynthSummary, HarnessError> {
        let stage = Stage::Synth;
        let c = &self.config;
        let mut m = ManifestBuilder::default();
        let model = match &c.model.checkpoint {
            Some(path) => {
                m.input(path);
                Model::load(path).in_stage(stage)?
            }
            None => {
                let model = Model::new(c.model_config()).in_stage(stage)?;
                let path = self.path(artifacts::MODEL);
                model.save(&path).in_stage(stage)?;
                m.output(&path);
                model
            }
        };
        let corpus = match &c.corpus.path {
            Some(path) => {
                m.input(path);
                load_samples(path, &self.tokenizer).in_stage(stage)?
            }
            None => {
                let set = synth_corpus(c.seed, c.corpus.counts).in_stage(stage)?;
                let path = self.path(artifacts::CORPUS);
                set.save(&path).in_stage(stage)?;
                m.output(&path);
                set
            }
        };
        let probe = synth_corpus(sub_seed(c.seed, PROBE_STREAM), c.corpus.probe_counts).in_stage(stage)?;
        let probe_path = self.path(artifacts::PROBE);
        probe.save(&probe_path).in_stage(stage)?;
        m.output(&probe_path);

        let cal = synth_images(sub_seed(c.seed, CALIBRATION_STREAM), "cal", c.images.calibration);
        let eval = synth_images(sub_seed(c.seed, EVAL_STREAM), "eval", c.images.evaluation);
        let annotation = ObjectAnnotation::from_images(cal.iter().chain(&eval)).in_stage(stage)?;
        for (name, images) in [(artifacts::CALIBRATION_IMAGES, &cal), (artifacts::EVAL_IMAGES, &eval)] {
            let path = self.path(name);
            corpus::save_images(images, &path).in_stage(stage)?;
            m.output(&path);
        }
        let ann_path = self.path(artifacts::ANNOTATIONS);
        annotation.save(&ann_path).in_stage(stage)?;
        m.output(&ann_path);
        m.write("synth", c, &self.out).in_stage(stage)?;
        Ok(SynthSummary {
            corpus_samples: corpus.len(),
            probe_samples: probe.len(),
            calibration_images: cal.len(),
            eval_images: eval.len(),
            model_checksum: model.checksum(),
        })
    }

    /// Fits both preference vectors and reports fit quality and their
    /// mutual orthogonality.
    pub fn extract(&self) -> Result<ExtractionReport, HarnessError> {
        let stage = Stage::Extract;
        let c = &self.config;
        let mut m = ManifestBuilder::default();
        let model = self.load_model(stage, &mut m)?;
        let corpus = self.load_corpus(stage, &mut m)?;
        let layers = c.extraction_layers();
        let collected = collect_records(
            &model,
            &self.tokenizer,
            corpus.iter(),
            &layers,
            c.extraction.answer_window,
        )
        .in_stage(stage)?;
        let hash = corpus.content_hash();
        let params = c.extraction.fit_params();
        let (vfv, vfv_drops) = extract_cpv(&collected, CpvKind::Vfv, params, &hash).in_stage(stage)?;
        let (mrv, mrv_drops) = extract_cpv(&collected, CpvKind::Mrv, params, &hash).in_stage(stage)?;
        for (cpv, kind) in [(&vfv, CpvKind::Vfv), (&mrv, CpvKind::Mrv)] {
            let path = self.path(match kind {
                CpvKind::Vfv => artifacts::VFV,
                CpvKind::Mrv => artifacts::MRV,
            });
            save_cpv(cpv, &path).in_stage(stage)?;
            m.output(&path);
        }

        let summary = |cpv: &ContextPreferenceVector, drops: DropReport| KindSummary {
            drops,
            layers: cpv
                .per_layer
                .iter()
                .map(|(&layer, f)| LayerSummary {
                    layer,
                    r_squared: f.r_squared,
                    cv_r2: f.cv_r2,
                    weight_norm: f.weights.norm(),
                })
                .collect(),
        };
        let vfv_mrv_cosine = layers
            .iter()
            .map(|&layer| {
                let (a, b) = (vfv.vector(layer), mrv.vector(layer));
                let cos = match (a, b) {
                    (Some(a), Some(b)) => cosine(a, b).map_err(|e| StageError::Invalid(e.to_string())),
                    _ => Err(StageError::Invalid(format!(
                        "layer {layer} missing from a fitted vector"
                    ))),
                };
                Ok(LayerCosine { layer, cosine: cos? })
            })
            .collect::<Result<Vec<_>, StageError>>()
            .in_stage(stage)?;
        let mean_abs = vfv_mrv_cosine.iter().map(|x| x.cosine.abs()).sum::<f64>() / vfv_mrv_cosine.len().max(1) as f64;
        let random_pairs = random_pair_cosines(model.d_model(), BASELINE_PAIRS, sub_seed(c.seed, BASELINE_STREAM))
            .map_err(|e| StageError::Invalid(e.to_string()))
            .in_stage(stage)?;
        let report = ExtractionReport {
            corpus_hash: hash,
            n_samples: corpus.len(),
            not_found: collected.not_found.len(),
            vfv: summary(&vfv, vfv_drops),
            mrv: summary(&mrv, mrv_drops),
            vfv_mrv_cosine,
            vfv_mrv_mean_abs_cosine: mean_abs,
            random_baseline: random_abs_cosine_baseline(model.d_model()),
            random_pairs,
        };
        let path = self.path(artifacts::EXTRACTION_REPORT);
        artifacts::write_json(&path, &report).in_stage(stage)?;
        m.output(&path);
        m.write("extract", c, &self.out).in_stage(stage)?;
        Ok(report)
    }

    /// Estimates the position prior from vanilla captions of the
    /// calibration images.
    pub fn calibrate(&self) -> Result<CalibrationReport, HarnessError> {
        let stage = Stage::Calibrate;
        let c = &self.config;
        let temperature = c
            .injection
            .temperature
            .ok_or_else(|| HarnessError::Config("calibration needs injection.temperature".into()))?;
        let scheme = match &c.calibration.buckets {
            Some(starts) => BucketScheme::new(starts.clone()).map_err(|e| HarnessError::Config(e.to_string()))?,
            None => BucketScheme::default(),
        };
        let mut m = ManifestBuilder::default();
        let model = self.load_model(stage, &mut m)?;
        let images = self.load_images(artifacts::CALIBRATION_IMAGES, stage, &mut m)?;
        let annotation = self.load_annotation(stage, &mut m)?;
        let settings = EvalSettings {
            max_new: c.calibration.max_new,
            ..self.settings()
        };
        let ctx =
            EvalContext::new(model, self.tokenizer.clone(), annotation, &images, &[], settings).in_stage(stage)?;
        let ids = ctx.captions(&InjectionSpec::default()).in_stage(stage)?;
        let captions: Vec<CaptionTokens> = images
            .iter()
            .zip(&ids)
            .map(|(im, toks)| CaptionTokens {
                image_id: im.image_id.clone(),
                tokens: toks.iter().map(|&t| self.tokenizer.surface(t)).collect(),
            })
            .collect();
        let estimate = calibration::estimate_prior(&captions, &ctx.annotation, &scheme).in_stage(stage)?;
        let prior_path = self.path(artifacts::PRIOR);
        let c_values = match PositionPrior::new(scheme.clone(), estimate.clone(), temperature) {
            Ok(prior) => {
                prior.save(&prior_path).in_stage(stage)?;
                m.output(&prior_path);
                Some(prior.c)
            }
            Err(CalibrationError::AllZeroPrior) => {
                eprintln!("warning: no hallucinated object tokens in calibration captions; no prior written");
                if prior_path.is_file() {
                    std::fs::remove_file(&prior_path).in_stage(stage)?;
                }
                None
            }
            Err(e) => return Err(e).in_stage(stage),
        };
        let report = CalibrationReport {
            n_captions: captions.len(),
            bucket_starts: scheme.starts().to_vec(),
            p: estimate.p,
            counts: estimate.counts,
            empty_buckets: estimate.empty_buckets,
            temperature,
            all_zero: c_values.is_none(),
            c: c_values,
        };
        let path = self.path(artifacts::CALIBRATION_REPORT);
        artifacts::write_json(&path, &report).in_stage(stage)?;
        m.output(&path);
        m.write("calibrate", c, &self.out).in_stage(stage)?;
        Ok(report)
    }

    /// Loads the evaluation context, refusing image sets shared with
    /// calibration.
    fn eval_context(
        &self,
        stage: Stage,
        needs_vfv: bool,
        needs_mrv: bool,
        m: &mut ManifestBuilder,
    ) -> Result<EvalContext, HarnessError> {
        let model = self.load_model(stage, m)?;
        let cal = self.load_images(artifacts::CALIBRATION_IMAGES, stage, m)?;
        let eval = self.load_images(artifacts::EVAL_IMAGES, stage, m)?;
        calibration::check_disjoint(
            cal.iter().map(|i| i.image_id.as_str()),
            eval.iter().map(|i| i.image_id.as_str()),
        )
        .in_stage(stage)?;
        let annotation = self.load_annotation(stage, m)?;
        let probe = self.load_probe(stage, m)?;
        let vfv = self.load_vector(CpvKind::Vfv, needs_vfv, &model, stage, m)?;
        let mrv = self.load_vector(CpvKind::Mrv, needs_mrv, &model, stage, m)?;
        let samples: Vec<ConflictSample> = probe.iter().cloned().collect();
        let ctx = EvalContext::new(
            model,
            self.tokenizer.clone(),
            annotation,
            &eval,
            &samples,
            self.settings(),
        )
        .in_stage(stage)?;
        Ok(ctx.with_vectors(vfv, mrv))
    }

    fn vanilla_spec(&self) -> InjectionSpec {
        InjectionSpec {
            layers: self.config.injection.layers.iter().copied().collect(),
            ..InjectionSpec::default()
        }
    }

    /// Steered captioning of the evaluation images with the configured
    /// injection.
    pub fn eval(&self) -> Result<ReportRow, HarnessError> {
        let stage = Stage::Eval;
        let c = &self.config;
        let mut m = ManifestBuilder::default();
        let inj = &c.injection;
        let ctx = self.eval_context(stage, inj.alpha != 0.0, inj.beta != 0.0, &mut m)?;
        let spec = InjectionSpec {
            layers: inj.layers.iter().copied().collect(),
            alpha: inj.alpha,
            beta: inj.beta,
            gate: self.gate(inj.gate, stage, &mut m)?,
        };
        let outcome = ctx.evaluate(&spec).in_stage(stage)?;
        let vanilla_rep6 = if spec.alpha == 0.0 && spec.beta == 0.0 {
            outcome.quality.rep6
        } else {
            ctx.evaluate(&self.vanilla_spec()).in_stage(stage)?.quality.rep6
        };
        let row = make_row(
            "eval",
            "eval",
            &spec,
            &outcome,
            c.eval.align_limit,
            c.eval.cover_macro,
            vanilla_rep6,
        );
        let captions_path = self.path(artifacts::EVAL_CAPTIONS);
        write_captions(&captions_path, &outcome.captions).in_stage(stage)?;
        m.output(&captions_path);
        let (json, csv) = (
            self.path(artifacts::EVAL_REPORT_JSON),
            self.path(artifacts::EVAL_REPORT_CSV),
        );
        report::write_rows(std::slice::from_ref(&row), &json, &csv).in_stage(stage)?;
        m.output(&json);
        m.output(&csv);
        m.write("eval", c, &self.out).in_stage(stage)?;
        Ok(row)
    }

    /// One row per grid point in grid order, with a vanilla row first when
    /// the grid lacks one.
    pub fn sweep(&self) -> Result<Vec<ReportRow>, HarnessError> {
        let stage = Stage::Sweep;
        let c = &self.config;
        let mode = mode_name(c.sweep.mode);
        let mut m = ManifestBuilder::default();
        let gate_kind = match c.sweep.mode {
            SweepMode::WindowAblation => GateKind::ConstantOne,
            _ => c.sweep.gate,
        };
        let gate = self.gate(gate_kind, stage, &mut m)?;
        let points = sweep_points(c, &gate);
        let needs_vfv = points.iter().any(|(_, s)| s.alpha != 0.0);
        let needs_mrv = points.iter().any(|(_, s)| s.beta != 0.0);
        let ctx = self.eval_context(stage, needs_vfv, needs_mrv, &mut m)?;

        let vanilla_spec = self.vanilla_spec();
        let vanilla = ctx.evaluate(&vanilla_spec).in_stage(stage)?;
        let vanilla_rep6 = vanilla.quality.rep6;
        // a zero-strength point injects nothing, so it reuses the vanilla outcome
        let outcomes: Vec<PointOutcome> = points
            .par_iter()
            .map(|(_, spec)| {
                if spec.alpha == 0.0 && spec.beta == 0.0 {
                    Ok(vanilla.clone())
                } else {
                    ctx.evaluate(spec)
                }
            })
            .collect::<Result<_, StageError>>()
            .in_stage(stage)?;
        let mut rows: Vec<(ReportRow, InjectionSpec)> = Vec::new();
        if !points.iter().any(|(_, s)| s.alpha == 0.0 && s.beta == 0.0) {
            let row = make_row(
                "vanilla",
                mode,
                &vanilla_spec,
                &vanilla,
                c.eval.align_limit,
                c.eval.cover_macro,
                vanilla_rep6,
            );
            rows.push((row, vanilla_spec));
        }
        for ((label, spec), outcome) in points.into_iter().zip(&outcomes) {
            let label = if spec.alpha == 0.0 && spec.beta == 0.0 {
                "vanilla".to_string()
            } else {
                label
            };
            let row = make_row(
                &label,
                mode,
                &spec,
                outcome,
                c.eval.align_limit,
                c.eval.cover_macro,
                vanilla_rep6,
            );
            rows.push((row, spec));
        }
        if c.sweep.measure_latency {
            for (row, spec) in &mut rows {
                let (_, steered) = ctx
                    .latency(spec, c.latency.n_tokens, c.latency.max_new)
                    .in_stage(stage)?;
                row.latency = Some(steered);
            }
        }
        let rows: Vec<ReportRow> = rows.into_iter().map(|(r, _)| r).collect();
        let (json, csv) = (
            self.path(&artifacts::sweep_json(mode)),
            self.path(&artifacts::sweep_csv(mode)),
        );
        report::write_rows(&rows, &json, &csv).in_stage(stage)?;
        m.output(&json);
        m.output(&csv);
        m.write(&format!("sweep_{mode}"), c, &self.out).in_stage(stage)?;
        Ok(rows)
    }

    /// Median per-token decode time, vanilla against the configured
    /// injection, on identical prompts.
    pub fn latency(&self) -> Result<LatencyReport, HarnessError> {
        let stage = Stage::Latency;
        let c = &self.config;
        if c.latency.n_tokens < MIN_LATENCY_TOKENS {
            return Err(HarnessError::Config(format!(
                "latency needs at least {MIN_LATENCY_TOKENS} tokens, got {}",
                c.latency.n_tokens
            )));
        }
        let mut m = ManifestBuilder::default();
        let inj = &c.injection;
        let gate = self.gate(inj.gate, stage, &mut m)?;
        let ctx = self.eval_context(stage, inj.alpha != 0.0, inj.beta != 0.0, &mut m)?;
        let spec = InjectionSpec {
            layers: inj.layers.iter().copied().collect(),
            alpha: inj.alpha,
            beta: inj.beta,
            gate,
        };
        let (vanilla, steered) = ctx
            .latency(&spec, c.latency.n_tokens, c.latency.max_new)
            .in_stage(stage)?;
        let report = LatencyReport {
            requested_tokens: c.latency.n_tokens,
            max_new: c.latency.max_new,
            alpha: spec.alpha,
            beta: spec.beta,
            window: format_window(spec.layers.iter().copied()),
            gate: gate_label(&spec.gate),
            ratio: steered.median_ms / vanilla.median_ms,
            vanilla,
            steered,
        };
        let path = self.path(artifacts::LATENCY_REPORT);
        artifacts::write_json(&path, &report).in_stage(stage)?;
        m.output(&path);
        m.write("latency", c, &self.out).in_stage(stage)?;
        Ok(report)
    }

    /// Scores a yes/no question file.
    pub fn qa(&self, input: &Path) -> Result<QaReport, HarnessError> {
        let stage = Stage::Qa;
        let mut m = ManifestBuilder::default();
        let items = qa::load(input).in_stage(stage)?;
        m.input(input);
        let report = qa::score(&items).in_stage(stage)?;
        let path = self.path(artifacts::QA_REPORT);
        artifacts::write_json(&path, &report).in_stage(stage)?;
        m.output(&path);
        m.write("qa", &self.config, &self.out).in_stage(stage)?;
        Ok(report)
    }

    /// synth, extract, calibrate, eval, and sweep in order.
    pub fn run_all(&self) -> Result<Vec<ReportRow>, HarnessError> {
        self.synth()?;
        self.extract()?;
        self.calibrate()?;
        self.eval()?;
        self.sweep()
    }
}
