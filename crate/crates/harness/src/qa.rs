//! Binary yes/no question scoring: accuracy, precision, recall, F1 and the
//! share of "yes" answers, with "yes" as the positive class.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::StageError;

pub const QA_FORMAT: &str = "ctxsteer-qa";
pub const QA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: String,
    /// Gold answer, `yes` or `no`.
    pub label: String,
    /// Free-form model answer.
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

/// An answer counts as "yes" when its first word is yes; anything else is "no".
pub fn is_yes(answer: &str) -> bool {
    answer
        .split_whitespace()
        .next()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .eq_ignore_ascii_case("yes")
        })
        .unwrap_or(false)
}

fn parse_label(item: &QaItem) -> Result<bool, StageError> {
    match item.label.trim().to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(StageError::Invalid(format!(
            "question {:?} has label {other:?}, expected yes or no",
            item.question_id
        ))),
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Scores in percent.
pub fn score(items: &[QaItem]) -> Result<QaReport, StageError> {
    if items.is_empty() {
        return Err(StageError::Invalid("no questions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for item in items {
        match (parse_label(item)?, is_yes(&item.answer)) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(QaReport {
        n: items.len(),
        accuracy: ratio(tp + tn, items.len()),
        precision,
        recall,
        f1,
        yes_ratio: ratio(tp + fp, items.len()),
    })
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Header line followed by one JSON item per line.
pub fn parse(text: &str) -> Result<Vec<QaItem>, StageError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| StageError::Invalid("empty question file".into()))?;
    let header: Header = serde_json::from_str(first)?;
    if header.format != QA_FORMAT || header.version != QA_VERSION {
        return Err(StageError::Invalid(format!(
            "expected {QA_FORMAT} v{QA_VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| StageError::Invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn load(path: &Path) -> Result<Vec<QaItem>, StageError> {
    parse(&crate::artifacts::read_input(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(label: &str, answer: &str) -> QaItem {
        QaItem {
            question_id: "q".into(),
            label: label.into(),
            answer: answer.into(),
        }
    }

    #[test]
    fn yes_detection() {
        assert!(is_yes("Yes, there is."));
        assert!(is_yes(" yes"));
        assert!(!is_yes("no"));
        assert!(!is_yes("there is a yes"));
        assert!(!is_yes(""));
    }

    #[test]
    fn hand_counts() {
        // tp 2, fp 1, tn 3, fn 2
        let items = [
            item("yes", "yes"),
            item("yes", "Yes."),
            item("no", "yes"),
            item("no", "no"),
            item("no", "No"),
            item("no", "apple"),
            item("yes", "no"),
            item("yes", ""),
        ];
        let r = score(&items).unwrap();
        assert_eq!(r.n, 8);
        assert_eq!(r.accuracy, 62.5);
        assert_eq!(r.precision, 100.0 * 2.0 / 3.0);
        assert_eq!(r.recall, 50.0);
        let f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
        assert_eq!(r.f1, f1);
        assert_eq!(r.yes_ratio, 37.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(score(&[]).is_err());
        assert!(score(&[item("maybe", "yes")]).is_err());
        assert!(parse("{\"format\":\"other\",\"version\":1}\n").is_err());
        let ok = parse(
            "{\"format\":\"ctxsteer-qa\",\"version\":1}\n{\"question_id\":\"a\",\"label\":\"no\",\"answer\":\"no\"}\n",
        )
        .unwrap();
        assert_eq!(ok.len(), 1);
    }
}
