//! Object hallucination (CHAIR family) and text-quality metrics.
//!
//! Mentions are counted per token instance and never deduplicated, so a
//! caption that repeats a grounded object lowers CHAIR_I without touching
//! CHAIR_S. F1 and Cover work on deduplicated object sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ImageSpec;
use crate::tokenizer::{OBJECT_CONCEPTS, OBJECT_SYNONYMS};

pub const ANNOTATION_FORMAT: &str = "ctxsteer-annotations";
pub const ANNOTATION_VERSION: u32 = 1;
pub const DEFAULT_MATTR_WINDOW: usize = 50;
pub const DEFAULT_ALIGN_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no annotation for image {0:?}")]
    UnknownImage(String),
    #[error("no captions to score")]
    EmptyCorpus,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed annotation file: {0}")]
    Parse(String),
}

/// Ground-truth objects per image plus the object vocabulary and synonyms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub vocabulary: BTreeSet<String>,
    /// Surface form → canonical object.
    pub synonyms: BTreeMap<String, String>,
    pub images: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: ObjectAnnotation,
}

impl ObjectAnnotation {
    pub fn new(
        vocabulary: BTreeSet<String>,
        synonyms: BTreeMap<String, String>,
        images: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<Self, MetricsError> {
        let a = Self {
            vocabulary,
            synonyms,
            images,
        };
        a.validate()?;
        Ok(a)
    }

    /// Toy object vocabulary and synonym table with the given images' objects
    /// as ground truth.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageSpec>) -> Result<Self, MetricsError> {
        let vocabulary = OBJECT_CONCEPTS
            .iter()
            .flat_map(|(_, m)| m.iter().map(|s| s.to_string()))
            .collect();
        let synonyms = OBJECT_SYNONYMS
            .iter()
            .map(|(s, c)| (s.to_string(), c.to_string()))
            .collect();
        let images = images
            .into_iter()
            .map(|im| (im.image_id.clone(), im.objects.iter().cloned().collect()))
            .collect();
        Self::new(vocabulary, synonyms, images)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if let Some(c) = self.synonyms.values().find(|c| !self.vocabulary.contains(*c)) {
            return Err(MetricsError::InvalidAnnotation(format!(
                "synonym target {c:?} is not in the vocabulary"
            )));
        }
        for (id, gt) in &self.images {
            if let Some(o) = gt.iter().find(|o| !self.vocabulary.contains(*o)) {
                return Err(MetricsError::InvalidAnnotation(format!(
                    "image {id:?} lists unknown object {o:?}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical object named by a surface token, if any.
    pub fn canonical(&self, surface: &str) -> Option<&str> {
        let key = surface.trim().to_lowercase();
        if let Some(c) = self.synonyms.get(&key) {
            return Some(c);
        }
        self.vocabulary.get(&key).map(String::as_str)
    }

    pub fn ground_truth(&self, image_id: &str) -> Result<&BTreeSet<String>, MetricsError> {
        self.images
            .get(image_id)
            .ok_or_else(|| MetricsError::UnknownImage(image_id.to_string()))
    }

    pub fn to_text(&self) -> String {
        let file = AnnotationFile {
            format: ANNOTATION_FORMAT.into(),
            version: ANNOTATION_VERSION,
            body: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("annotation serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))?;
        if file.format != ANNOTATION_FORMAT || file.version != ANNOTATION_VERSION {
            return Err(MetricsError::Parse(format!(
                "unsupported format {:?} version {}",
                file.format, file.version
            )));
        }
        file.body.validate()?;
        Ok(file.body)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub position: usize,
    pub object: String,
    pub grounded: bool,
}

/// Object mentions of one caption, in token order.
pub type MentionList = Vec<Mention>;

/// One mention per object-token occurrence.
pub fn extract_objects<T: AsRef<str>>(
    image_id: &str,
    tokens: &[T],
    annotation: &ObjectAnnotation,
) -> Result<MentionList, MetricsError> {
    let gt = annotation.ground_truth(image_id)?;
    Ok(tokens
        .iter()
        .enumerate()
        .filter_map(|(position, t)| {
            annotation.canonical(t.as_ref()).map(|object| Mention {
                position,
                object: object.to_string(),
                grounded: gt.contains(object),
            })
        })
        .collect())
}

/// Surface tokens of one generated caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTokens {
    pub image_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionMentions {
    pub image_id: String,
    pub mentions: MentionList,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Micro-averaged coverage of ground-truth objects.
    pub cover: f64,
    /// Per-caption coverage averaged over captions with ground truth.
    pub cover_macro: f64,
    pub n_captions: usize,
    pub n_mentions: usize,
    pub n_hallucinated: usize,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Corpus-level CHAIR_S, CHAIR_I, F1 and Cover, all in percent.
pub fn chair(captions: &[CaptionMentions], annotation: &ObjectAnnotation) -> Result<HallucinationReport, MetricsError> {
    if captions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut hallucinated_captions = 0;
    let mut n_mentions = 0;
    let mut n_hallucinated = 0;
    let (mut tp, mut predicted, mut gt_total) = (0, 0, 0);
    let mut macro_sum = 0.0;
    let mut macro_n = 0;
    for c in captions {
        let gt = annotation.ground_truth(&c.image_id)?;
        let bad = c.mentions.iter().filter(|m| !m.grounded).count();
        n_mentions += c.mentions.len();
        n_hallucinated += bad;
        if bad > 0 {
            hallucinated_captions += 1;
        }
        let unique: BTreeSet<&str> = c.mentions.iter().map(|m| m.object.as_str()).collect();
        let hits = unique.iter().filter(|o| gt.contains(**o)).count();
        tp += hits;
        predicted += unique.len();
        gt_total += gt.len();
        if !gt.is_empty() {
            macro_sum += hits as f64 / gt.len() as f64;
            macro_n += 1;
        }
    }
    let precision = percent(tp, predicted);
    let recall = percent(tp, gt_total);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(HallucinationReport {
        chair_s: percent(hallucinated_captions, captions.len()),
        chair_i: percent(n_hallucinated, n_mentions),
        f1,
        precision,
        recall,
        cover: recall,
        cover_macro: if macro_n == 0 {
            0.0
        } else {
            100.0 * macro_sum / macro_n as f64
        },
        n_captions: captions.len(),
        n_mentions,
        n_hallucinated,
    })
}

/// Fraction of repeated 6-grams, `1 − unique / total`; 0 below six tokens.
pub fn rep6<T: Eq + Hash>(tokens: &[T]) -> f64 {
    if tokens.len() < 6 {
        return 0.0;
    }
    let grams: std::collections::HashSet<&[T]> = tokens.windows(6).collect();
    let total = tokens.len() - 5;
    1.0 - grams.len() as f64 / total as f64
}

/// Moving-average type-token ratio over every `window`-token span (stride
/// 1); texts shorter than the window get their plain type-token ratio, and
/// an empty text scores 0.
///
/// # Panics
/// If `window` is zero.
pub fn mattr<T: Eq + Hash>(tokens: &[T], window: usize) -> f64 {
    assert!(window >= 1, "window must be positive");
    if tokens.is_empty() {
        return 0.0;
    }
    if tokens.len() < window {
        let types: std::collections::HashSet<&T> = tokens.iter().collect();
        return types.len() as f64 / tokens.len() as f64;
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in &tokens[..window] {
        *counts.entry(t).or_default() += 1;
    }
    let mut sum = counts.len();
    for i in window..tokens.len() {
        let out = &tokens[i - window];
        let c = counts.get_mut(out).expect("outgoing token was counted");
        *c -= 1;
        if *c == 0 {
            counts.remove(out);
        }
        *counts.entry(&tokens[i]).or_default() += 1;
        sum += counts.len();
    }
    let windows = tokens.len() - window + 1;
    sum as f64 / (windows * window) as f64
}

/// Truncate every caption to its first `limit` tokens.
pub fn length_align<T: Clone>(captions: &[Vec<T>], limit: usize) -> Vec<Vec<T>> {
    captions.iter().map(|c| c[..c.len().min(limit)].to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextQualityReport {
    /// Raw fraction; tables conventionally print it ×10⁻³.
    pub rep6: f64,
    pub mattr50: f64,
}

/// Caption means of [`rep6`] and [`mattr`] (window 50).
pub fn text_quality<T: Eq + Hash>(captions: &[Vec<T>]) -> Result<TextQualityReport, MetricsError> {
    if captions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let n = captions.len() as f64;
    Ok(TextQualityReport {
        rep6: captions.iter().map(|c| rep6(c)).sum::<f64>() / n,
        mattr50: captions.iter().map(|c| mattr(c, DEFAULT_MATTR_WINDOW)).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann() -> ObjectAnnotation {
        let vocab = ["dog", "cat", "tree", "couch"].iter().map(|s| s.to_string()).collect();
        let syn = BTreeMap::from([("sofa".to_string(), "couch".to_string())]);
        let images = BTreeMap::from([(
            "im".to_string(),
            ["dog", "tree"].iter().map(|s| s.to_string()).collect(),
        )]);
        ObjectAnnotation::new(vocab, syn, images).unwrap()
    }

    fn words(s: &str) -> Vec<&str> {
        s.split(' ').collect()
    }

    #[test]
    fn instance_level_mentions() {
        let a = ann();
        let m = extract_objects("im", &words("a dog and a dog"), &a).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|x| x.grounded));
        let m = extract_objects("im", &words("a Dog and a sofa"), &a).unwrap();
        assert_eq!(
            m,
            vec![
                Mention {
                    position: 1,
                    object: "dog".into(),
                    grounded: true
                },
                Mention {
                    position: 4,
                    object: "couch".into(),
                    grounded: false
                }
            ]
        );
        assert!(extract_objects("im", &words("nothing here"), &a).unwrap().is_empty());
        assert!(matches!(
            extract_objects("nope", &words("dog"), &a),
            Err(MetricsError::UnknownImage(_))
        ));
    }

    #[test]
    fn chair_single_caption() {
        let a = ann();
        let mentions = extract_objects("im", &words("a dog and a cat"), &a).unwrap();
        let r = chair(
            &[CaptionMentions {
                image_id: "im".into(),
                mentions,
            }],
            &a,
        )
        .unwrap();
        assert_eq!((r.chair_s, r.chair_i, r.cover), (100.0, 50.0, 50.0));
        assert_eq!((r.precision, r.recall, r.f1), (50.0, 50.0, 50.0));
        assert!(matches!(chair(&[], &a), Err(MetricsError::EmptyCorpus)));
    }

    #[test]
    fn rep6_and_mattr_examples() {
        assert_eq!(rep6(&[1; 7]), 0.5);
        assert_eq!(rep6(&[1, 2, 3, 4, 5, 6]), 0.0);
        assert_eq!(rep6(&[1; 5]), 0.0);
        let distinct: Vec<u32> = (0..50).collect();
        assert_eq!(mattr(&distinct, 50), 1.0);
        assert_eq!(mattr(&[7u32; 100], 50), 0.02);
        let alt: Vec<u32> = (0..100).map(|i| i % 2).collect();
        assert_eq!(mattr(&alt, 50), 0.04);
        assert_eq!(mattr(&[1, 1, 2, 3], 50), 0.75);
    }

    #[test]
    fn align_truncates() {
        let caps = vec![(0..100).collect::<Vec<u32>>(), (0..10).collect()];
        let al = length_align(&caps, 64);
        assert_eq!((al[0].len(), al[1].len()), (64, 10));
    }

    #[test]
    fn annotation_round_trip() {
        let a = ann();
        assert_eq!(ObjectAnnotation::parse(&a.to_text()).unwrap(), a);
    }
}
