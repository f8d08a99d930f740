//! Fixed word-level vocabulary for the toy backend.
//!
//! Object and attribute words carry four surface forms (`apple`, `Apple`,
//! ` apple`, ` Apple`); function words carry a bare and a leading-space form;
//! punctuation has a single form. Ids are assigned in table order and the
//! table fits in the default 256-token model vocabulary.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::TokenId;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const ANSWER_CUE: &str = "<ans>";
pub const PAD: &str = "<pad>";

/// Object concepts: each entry is `(concept, members)`. These nouns are the
/// object vocabulary for hallucination metrics.
pub const OBJECT_CONCEPTS: &[(&str, &[&str])] = &[
    ("fruit", &["apple", "banana", "cherry", "lemon"]),
    ("animal", &["dog", "cat", "horse", "cow"]),
    ("vehicle", &["car", "bus", "train", "boat"]),
    ("furniture", &["chair", "table", "bed", "couch"]),
    ("food", &["pizza", "cake", "bread", "sandwich"]),
    ("tool", &["hammer", "pencil", "knife", "spoon"]),
];

/// Attribute concepts used by counterfactual samples.
pub const ATTRIBUTE_CONCEPTS: &[(&str, &[&str])] = &[
    ("color", &["red", "yellow", "blue", "green", "white"]),
    ("material", &["wood", "metal", "glass", "stone"]),
    ("shape", &["round", "square", "long", "flat"]),
    ("size", &["big", "small", "huge", "tiny"]),
    ("place", &["road", "water", "farm", "kitchen"]),
];

/// Surface synonyms of object nouns: `(synonym, canonical)`.
pub const OBJECT_SYNONYMS: &[(&str, &str)] = &[("sofa", "couch"), ("puppy", "dog"), ("kitten", "cat")];

const FUNCTION_WORDS: &[&str] = &[
    "what", "color", "is", "the", "made", "of", "shape", "size", "where", "this", "a", "an", "in", "image", "describe",
    "and", "there", "with", "on", "it", "yes", "no",
];

const PUNCTUATION: &[&str] = &[".", ",", "?"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizeError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
}

#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self::standard()
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl ToyTokenizer {
    /// The shipped vocabulary.
    pub fn standard() -> Self {
        let mut surfaces: Vec<String> = [PAD, BOS, EOS, ANSWER_CUE].iter().map(|s| s.to_string()).collect();
        let content = OBJECT_CONCEPTS
            .iter()
            .chain(ATTRIBUTE_CONCEPTS)
            .flat_map(|(_, ws)| ws.iter().copied())
            .chain(OBJECT_SYNONYMS.iter().map(|(s, _)| *s));
        for w in content {
            let cap = capitalize(w);
            surfaces.push(w.to_string());
            surfaces.push(cap.clone());
            surfaces.push(format!(" {w}"));
            surfaces.push(format!(" {cap}"));
        }
        for w in FUNCTION_WORDS {
            surfaces.push(w.to_string());
            surfaces.push(format!(" {w}"));
        }
        surfaces.extend(PUNCTUATION.iter().map(|s| s.to_string()));
        let mut index = HashMap::new();
        for (i, s) in surfaces.iter().enumerate() {
            let prev = index.insert(s.clone(), i as TokenId);
            assert!(prev.is_none(), "duplicate surface {s:?}");
        }
        Self { surfaces, index }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Surface form of `id`; ids past the table (unused model slots) render
    /// as `<unused:N>`.
    pub fn surface(&self, id: TokenId) -> String {
        self.surfaces
            .get(id as usize)
            .cloned()
            .unwrap_or_else(|| format!("<unused:{id}>"))
    }

    pub fn special(&self, name: &str) -> TokenId {
        self.id(name).expect("special token is in the table")
    }

    fn lookup_word(&self, word: &str, leading_space: bool) -> Option<TokenId> {
        if leading_space {
            if let Some(id) = self.id(&format!(" {word}")) {
                return Some(id);
            }
        }
        self.id(word)
    }

    /// Word-level encoding: the first word takes its bare form, later words
    /// their leading-space form (punctuation has only one form).
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizeError> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, w)| {
                self.lookup_word(w, i > 0)
                    .ok_or_else(|| TokenizeError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// First token of `text`, honoring a leading space if present.
    pub fn first_token(&self, text: &str) -> Option<TokenId> {
        let leading = text.starts_with(char::is_whitespace);
        let word = text.split_whitespace().next()?;
        self.lookup_word(word, leading)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.surface(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_default_vocab() {
        let t = ToyTokenizer::standard();
        assert!(t.len() <= 256, "{}", t.len());
    }

    #[test]
    fn encode_decode() {
        let t = ToyTokenizer::standard();
        let ids = t.encode("what color is the banana ?").unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(t.decode(&ids), "what color is the banana?");
        assert_eq!(ids[4], t.id(" banana").unwrap());
        assert!(matches!(t.encode("a zebra"), Err(TokenizeError::UnknownWord(w)) if w == "zebra"));
    }

    #[test]
    fn first_token_respects_leading_space() {
        let t = ToyTokenizer::standard();
        assert_eq!(t.first_token(" Apple pie"), t.id(" Apple"));
        assert_eq!(t.first_token("apple"), t.id("apple"));
        assert_eq!(t.first_token(" ."), t.id("."));
        assert_eq!(t.first_token("   "), None);
        assert_eq!(t.surface(250), "<unused:250>");
    }
}
