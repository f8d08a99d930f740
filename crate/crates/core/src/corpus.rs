//! Conflict samples for the two extraction setups, their on-disk format, and
//! a seeded synthetic generator over the toy vocabulary.
//!
//! Counterfactual samples pair an image showing an unusual attribute (a blue
//! banana) against the commonsense answer. Symmetric samples pair an image of
//! object A with text claiming B, and always come with the mirrored sample
//! (image B, text A) so token-frequency effects cancel when both halves are
//! fitted together.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::model::{ModelError, TokenId};
use crate::tokenizer::{TokenizeError, ToyTokenizer, ANSWER_CUE, ATTRIBUTE_CONCEPTS, BOS, OBJECT_CONCEPTS};
use crate::{Model, PrefixEmbedding};

pub const CORPUS_FORMAT: &str = "ctxsteer-corpus";
pub const CORPUS_VERSION: u32 = 1;
pub const IMAGES_FORMAT: &str = "ctxsteer-images";
pub const IMAGES_VERSION: u32 = 1;

/// Prompt used for free-form captions.
pub const CAPTION_PROMPT: &str = "describe the image .";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("unsupported file: expected {expected}, found {found}")]
    FormatMismatch { expected: String, found: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("symmetric sample {0:?} has no mirrored counterpart")]
    MirrorViolation(String),
    #[error("sample {0:?}: answer candidate sets overlap")]
    CandidateOverlap(String),
    #[error("answer {0:?} has no first token in the vocabulary")]
    UntokenizableAnswer(String),
    #[error("invalid sample {id:?}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("every sample count must be at least 1")]
    CountsTooSmall,
    #[error("symmetric halves must have equal counts, got {a} and {b}")]
    MirrorCountMismatch { a: usize, b: usize },
    #[error("unknown object word {0:?}")]
    UnknownObject(String),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<JsonlError> for CorpusError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io(e) => CorpusError::Io(e),
            JsonlError::Parse { line, message } => CorpusError::ParseError { line, message },
            JsonlError::Format { expected, found } => CorpusError::FormatMismatch { expected, found },
            JsonlError::Version { expected, found } => CorpusError::FormatMismatch {
                expected: format!("version {expected}"),
                found: format!("version {found}"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    Counterfactual,
    SymmetricA,
    SymmetricB,
}

impl Setup {
    pub fn is_symmetric(self) -> bool {
        matches!(self, Setup::SymmetricA | Setup::SymmetricB)
    }
}

/// `k` prefix rows encoding one word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixComponent {
    pub object: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixSpec {
    /// Explicit rows, each `d_model` wide.
    Inline(Vec<Vec<f32>>),
    /// Rows `√d · code(object) + noise_scale · z` with `z ~ N(0, I)` drawn
    /// from `seed`, components in order.
    Generator {
        objects: Vec<PrefixComponent>,
        noise_scale: f32,
        seed: u64,
    },
}

impl PrefixSpec {
    pub fn rows(&self) -> usize {
        match self {
            PrefixSpec::Inline(rows) => rows.len(),
            PrefixSpec::Generator { objects, .. } => objects.iter().map(|c| c.k).sum(),
        }
    }

    /// Build the prefix matrix for `model`.
    pub fn materialize(&self, model: &Model, tokenizer: &ToyTokenizer) -> Result<PrefixEmbedding, CorpusError> {
        let d = model.d_model();
        match self {
            PrefixSpec::Inline(rows) => {
                if let Some(bad) = rows.iter().find(|r| r.len() != d) {
                    return Err(ModelError::DimMismatch {
                        expected: d,
                        got: bad.len(),
                    }
                    .into());
                }
                let data: Vec<f32> = rows.iter().flatten().copied().collect();
                if data.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFinitePrefix.into());
                }
                Ok(PrefixEmbedding::from_vec(rows.len(), d, data).map_err(ModelError::from)?)
            }
            PrefixSpec::Generator {
                objects,
                noise_scale,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let scale = (d as f32).sqrt();
                let mut data = Vec::with_capacity(self.rows() * d);
                for c in objects {
                    let id = tokenizer
                        .id(&format!(" {}", c.object))
                        .ok_or_else(|| CorpusError::UnknownObject(c.object.clone()))?;
                    let code = model.token_code(id)?;
                    for _ in 0..c.k {
                        for x in code.iter() {
                            let z: f32 = StandardNormal.sample(&mut rng);
                            data.push(scale * *x + noise_scale * z);
                        }
                    }
                }
                Ok(PrefixEmbedding::from_vec(self.rows(), d, data).map_err(ModelError::from)?)
            }
        }
    }
}

/// Prompt token layout shared by every stage: `<bos> text <ans>`.
pub fn prompt_tokens(tokenizer: &ToyTokenizer, text: &str) -> Result<Vec<TokenId>, CorpusError> {
    let mut out = vec![tokenizer.special(BOS)];
    out.extend(tokenizer.encode(text)?);
    out.push(tokenizer.special(ANSWER_CUE));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSample {
    pub sample_id: String,
    pub setup: Setup,
    pub concept: String,
    pub question: String,
    /// Answer supported by the image.
    pub y_plus: String,
    /// Competing answer (commonsense or textual claim).
    pub y_minus: String,
    pub prefix: PrefixSpec,
}

impl ConflictSample {
    pub fn prompt(&self, tokenizer: &ToyTokenizer) -> Result<Vec<TokenId>, CorpusError> {
        prompt_tokens(tokenizer, &self.question)
    }

    /// First-token candidate sets `(T⁺, T⁻)`.
    pub fn candidates(&self, tokenizer: &ToyTokenizer) -> Result<(BTreeSet<TokenId>, BTreeSet<TokenId>), CorpusError> {
        let plus = first_token_candidates(&self.y_plus, tokenizer)?;
        let minus = first_token_candidates(&self.y_minus, tokenizer)?;
        if !plus.is_disjoint(&minus) {
            return Err(CorpusError::CandidateOverlap(self.sample_id.clone()));
        }
        Ok((plus, minus))
    }
}

/// First-token ids of the answer, its lowercase and capitalized forms, and
/// the leading-space variant of each.
pub fn first_token_candidates(answer: &str, tokenizer: &ToyTokenizer) -> Result<BTreeSet<TokenId>, CorpusError> {
    let lower = answer.to_lowercase();
    let mut chars = lower.chars();
    let capitalized: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    let mut out = BTreeSet::new();
    for form in [answer.to_string(), lower, capitalized] {
        for variant in [form.clone(), format!(" {form}")] {
            if let Some(id) = tokenizer.first_token(&variant) {
                out.insert(id);
            }
        }
    }
    if out.is_empty() {
        return Err(CorpusError::UntokenizableAnswer(answer.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub counterfactual: Vec<ConflictSample>,
    pub sym_a: Vec<ConflictSample>,
    pub sym_b: Vec<ConflictSample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.counterfactual.len() + self.sym_a.len() + self.sym_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples in file order: counterfactual, then each symmetric half.
    pub fn iter(&self) -> impl Iterator<Item = &ConflictSample> {
        self.counterfactual.iter().chain(&self.sym_a).chain(&self.sym_b)
    }

    pub fn concepts(&self) -> BTreeSet<&str> {
        self.iter().map(|s| s.concept.as_str()).collect()
    }

    /// Sort samples into their setup lists and validate.
    pub fn from_samples(samples: Vec<ConflictSample>, tokenizer: &ToyTokenizer) -> Result<Self, CorpusError> {
        let mut set = SampleSet::default();
        for s in samples {
            match s.setup {
                Setup::Counterfactual => set.counterfactual.push(s),
                Setup::SymmetricA => set.sym_a.push(s),
                Setup::SymmetricB => set.sym_b.push(s),
            }
        }
        set.validate(tokenizer)?;
        Ok(set)
    }

    pub fn validate(&self, tokenizer: &ToyTokenizer) -> Result<(), CorpusError> {
        let mut ids = HashSet::new();
        for s in self.iter() {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(CorpusError::DuplicateId(s.sample_id.clone()));
            }
            let invalid = |reason: &str| CorpusError::InvalidSample {
                id: s.sample_id.clone(),
                reason: reason.to_string(),
            };
            if s.concept.trim().is_empty() {
                return Err(invalid("empty concept"));
            }
            if s.y_plus == s.y_minus {
                return Err(invalid("y_plus equals y_minus"));
            }
            if s.prefix.rows() == 0 && s.question.trim().is_empty() {
                return Err(invalid("empty prefix and question"));
            }
            tokenizer
                .encode(&s.question)
                .map_err(|e| invalid(&format!("question: {e}")))?;
            s.candidates(tokenizer)?;
        }

        // mirror bijection: (A, B) in sym_a ⇔ (B, A) in sym_b, multiplicities equal
        let mut balance: BTreeMap<(&str, &str, &str), (Vec<&str>, usize)> = BTreeMap::new();
        for s in &self.sym_a {
            let e = balance
                .entry((s.concept.as_str(), s.y_plus.as_str(), s.y_minus.as_str()))
                .or_default();
            e.0.push(&s.sample_id);
        }
        for s in &self.sym_b {
            match balance.get_mut(&(s.concept.as_str(), s.y_minus.as_str(), s.y_plus.as_str())) {
                Some(e) if e.1 < e.0.len() => e.1 += 1,
                _ => return Err(CorpusError::MirrorViolation(s.sample_id.clone())),
            }
        }
        if let Some((ids, _)) = balance.values().find(|(ids, matched)| *matched < ids.len()) {
            return Err(CorpusError::MirrorViolation(ids[ids.len() - 1].to_string()));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let all: Vec<&ConflictSample> = self.iter().collect();
        jsonl::to_string(CORPUS_FORMAT, CORPUS_VERSION, &all)
    }

    pub fn parse(text: &str, tokenizer: &ToyTokenizer) -> Result<Self, CorpusError> {
        let samples: Vec<ConflictSample> = jsonl::parse(text, CORPUS_FORMAT, CORPUS_VERSION)?;
        Self::from_samples(samples, tokenizer)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// SHA-256 of the serialized corpus.
    pub fn content_hash(&self) -> String {
        crate::content_hash(self.to_jsonl().as_bytes())
    }
}

/// Read and validate a corpus file.
pub fn load_samples(path: &Path, tokenizer: &ToyTokenizer) -> Result<SampleSet, CorpusError> {
    let samples: Vec<ConflictSample> = jsonl::read(path, CORPUS_FORMAT, CORPUS_VERSION)?;
    SampleSet::from_samples(samples, tokenizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub cf: usize,
    pub a: usize,
    pub b: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { cf: 51, a: 55, b: 55 }
    }
}

/// Commonsense answers: `(subject, concept, answer)`.
pub const COMMONSENSE: &[(&str, &str, &str)] = &[
    ("apple", "color", "red"),
    ("banana", "color", "yellow"),
    ("lemon", "color", "yellow"),
    ("cherry", "color", "red"),
    ("bread", "color", "white"),
    ("table", "material", "wood"),
    ("chair", "material", "wood"),
    ("knife", "material", "metal"),
    ("spoon", "material", "metal"),
    ("hammer", "material", "metal"),
    ("pizza", "shape", "round"),
    ("cake", "shape", "round"),
    ("bread", "shape", "long"),
    ("pencil", "shape", "long"),
    ("bed", "shape", "flat"),
    ("bus", "size", "big"),
    ("train", "size", "huge"),
    ("pencil", "size", "small"),
    ("spoon", "size", "small"),
    ("horse", "size", "big"),
    ("car", "place", "road"),
    ("boat", "place", "water"),
    ("cow", "place", "farm"),
    ("knife", "place", "kitchen"),
    ("bus", "place", "road"),
];

fn attribute_question(concept: &str, subject: &str) -> String {
    match concept {
        "color" => format!("what color is the {subject} ?"),
        "material" => format!("what is the {subject} made of ?"),
        "shape" => format!("what shape is the {subject} ?"),
        "size" => format!("what size is the {subject} ?"),
        "place" => format!("where is the {subject} ?"),
        other => unreachable!("no template for concept {other}"),
    }
}

fn symmetric_question(claimed: &str) -> String {
    format!("this is a {claimed} . what is in the image ?")
}

/// Prefix rows per counterfactual attribute, subject, and symmetric object.
const ATTRIBUTE_ROWS: usize = 3;
const SUBJECT_ROWS: usize = 2;
const OBJECT_ROWS: usize = 3;
const PREFIX_NOISE: f32 = 0.3;

/// Take `n` items round-robin across groups, cycling inside a group once it
/// is exhausted.
fn round_robin<T: Clone>(groups: &[Vec<T>], n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let g = &groups[i % groups.len()];
            g[(i / groups.len()) % g.len()].clone()
        })
        .collect()
}

/// Deterministic synthetic corpus.
pub fn synth_corpus(seed: u64, counts: SampleCounts) -> Result<SampleSet, CorpusError> {
    if counts.cf == 0 || counts.a == 0 || counts.b == 0 {
        return Err(CorpusError::CountsTooSmall);
    }
    if counts.a != counts.b {
        return Err(CorpusError::MirrorCountMismatch {
            a: counts.a,
            b: counts.b,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut cf_groups: Vec<Vec<(&str, &str, &str, &str)>> = Vec::new();
    for (concept, values) in ATTRIBUTE_CONCEPTS {
        let mut combos: Vec<_> = COMMONSENSE
            .iter()
            .filter(|(_, c, _)| c == concept)
            .flat_map(|&(subject, _, usual)| {
                values
                    .iter()
                    .filter(move |v| **v != usual)
                    .map(move |&shown| (*concept, subject, shown, usual))
            })
            .collect();
        combos.shuffle(&mut rng);
        cf_groups.push(combos);
    }
    let mut sym_groups: Vec<Vec<(&str, &str, &str)>> = Vec::new();
    for (concept, members) in OBJECT_CONCEPTS {
        let mut pairs: Vec<_> = members
            .iter()
            .flat_map(|a| members.iter().filter(move |b| *b != a).map(move |b| (*concept, *a, *b)))
            .collect();
        pairs.shuffle(&mut rng);
        sym_groups.push(pairs);
    }

    let mut set = SampleSet::default();
    for (i, (concept, subject, shown, usual)) in round_robin(&cf_groups, counts.cf).into_iter().enumerate() {
        set.counterfactual.push(ConflictSample {
            sample_id: format!("cf-{i:03}"),
            setup: Setup::Counterfactual,
            concept: concept.to_string(),
            question: attribute_question(concept, subject),
            y_plus: shown.to_string(),
            y_minus: usual.to_string(),
            prefix: PrefixSpec::Generator {
                objects: vec![
                    PrefixComponent {
                        object: shown.to_string(),
                        k: ATTRIBUTE_ROWS,
                    },
                    PrefixComponent {
                        object: subject.to_string(),
                        k: SUBJECT_ROWS,
                    },
                ],
                noise_scale: PREFIX_NOISE,
                seed: rng.random(),
            },
        });
    }
    for (i, (concept, a, b)) in round_robin(&sym_groups, counts.a).into_iter().enumerate() {
        let image = |object: &str, seed: u64| PrefixSpec::Generator {
            objects: vec![PrefixComponent {
                object: object.to_string(),
                k: OBJECT_ROWS,
            }],
            noise_scale: PREFIX_NOISE,
            seed,
        };
        set.sym_a.push(ConflictSample {
            sample_id: format!("sa-{i:03}"),
            setup: Setup::SymmetricA,
            concept: concept.to_string(),
            question: symmetric_question(b),
            y_plus: a.to_string(),
            y_minus: b.to_string(),
            prefix: image(a, rng.random()),
        });
        set.sym_b.push(ConflictSample {
            sample_id: format!("sb-{i:03}"),
            setup: Setup::SymmetricB,
            concept: concept.to_string(),
            question: symmetric_question(a),
            y_plus: b.to_string(),
            y_minus: a.to_string(),
            prefix: image(b, rng.random()),
        });
    }
    set.validate(&ToyTokenizer::standard())?;
    Ok(set)
}

/// A synthetic image: its ground-truth objects and the prefix showing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub image_id: String,
    pub objects: Vec<String>,
    pub prefix: PrefixSpec,
}

/// `n` images with one to three distinct objects each, ids `{id_prefix}-NNNN`.
pub fn synth_images(seed: u64, id_prefix: &str, n: usize) -> Vec<ImageSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<&str> = OBJECT_CONCEPTS.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    (0..n)
        .map(|i| {
            let count = rng.random_range(1..=3);
            let objects: Vec<String> = vocab.choose_multiple(&mut rng, count).map(|s| s.to_string()).collect();
            let prefix = PrefixSpec::Generator {
                objects: objects
                    .iter()
                    .map(|o| PrefixComponent {
                        object: o.clone(),
                        k: OBJECT_ROWS,
                    })
                    .collect(),
                noise_scale: PREFIX_NOISE,
                seed: rng.random(),
            };
            ImageSpec {
                image_id: format!("{id_prefix}-{i:04}"),
                objects,
                prefix,
            }
        })
        .collect()
}

pub fn images_to_jsonl(images: &[ImageSpec]) -> String {
    jsonl::to_string(IMAGES_FORMAT, IMAGES_VERSION, images)
}

pub fn save_images(images: &[ImageSpec], path: &Path) -> Result<(), CorpusError> {
    std::fs::write(path, images_to_jsonl(images))?;
    Ok(())
}

pub fn load_images(path: &Path) -> Result<Vec<ImageSpec>, CorpusError> {
    let images: Vec<ImageSpec> = jsonl::read(path, IMAGES_FORMAT, IMAGES_VERSION)?;
    let mut seen = HashSet::new();
    for im in &images {
        if !seen.insert(im.image_id.as_str()) {
            return Err(CorpusError::DuplicateId(im.image_id.clone()));
        }
    }
    Ok(images)
}
