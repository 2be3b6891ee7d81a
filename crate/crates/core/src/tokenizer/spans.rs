//! User-specified emphasis on spans of the prompt, resolved to per-token weights.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{NormalizedText, TokenSequence};
use crate::error::{Error, Result};

/// One nonnegative weight per sequence position, SOS and EOS pinned to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenWeights {
    values: Vec<f64>,
}

impl TokenWeights {
    pub fn neutral(seq_len: usize) -> Self {
        assert!(seq_len >= 2, "a sequence holds at least SOS and EOS");
        Self {
            values: vec![1.0; seq_len],
        }
    }

    /// Build from the N content-token weights.
    pub fn from_content(content: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(content.len() + 2);
        values.push(1.0);
        for (i, &w) in content.iter().enumerate() {
            check_weight(&format!("token {}", i + 1), w)?;
            values.push(w);
        }
        values.push(1.0);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn content(&self) -> &[f64] {
        &self.values[1..self.values.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Set the weight at a content position (1..=N).
    pub fn set(&mut self, pos: usize, weight: f64) -> Result<()> {
        if pos == 0 || pos + 1 >= self.values.len() {
            return Err(Error::InvalidWeight {
                what: format!("position {pos} (content positions are 1..={})", self.values.len() - 2),
                value: weight,
            });
        }
        check_weight(&format!("token {pos}"), weight)?;
        self.values[pos] = weight;
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for TokenWeights {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidWeight {
                what: "weight vector length".into(),
                value: values.len() as f64,
            });
        }
        let last = values.len() - 1;
        for (i, &w) in values.iter().enumerate() {
            if (i == 0 || i == last) && w != 1.0 {
                return Err(Error::InvalidWeight {
                    what: format!("SOS/EOS position {i} (must be 1)"),
                    value: w,
                });
            }
            check_weight(&format!("token {i}"), w)?;
        }
        Ok(Self { values })
    }
}

impl From<TokenWeights> for Vec<f64> {
    fn from(w: TokenWeights) -> Self {
        w.values
    }
}

fn check_weight(what: &str, w: f64) -> Result<()> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidWeight {
            what: what.to_string(),
            value: w,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpanTarget {
    /// Verbatim substring, matched against the normalized prompt.
    Text { text: String },
    /// Half-open byte range of the source prompt.
    Range { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanEntry {
    #[serde(flatten)]
    pub target: SpanTarget,
    pub weight: f64,
}

impl SpanEntry {
    pub fn text(text: impl Into<String>, weight: f64) -> Self {
        Self {
            target: SpanTarget::Text { text: text.into() },
            weight,
        }
    }

    pub fn range(range: Range<usize>, weight: f64) -> Self {
        Self {
            target: SpanTarget::Range {
                start: range.start,
                end: range.end,
            },
            weight,
        }
    }
}

/// `{"default": 1.0, "entries": [{"text": "...", "weight": 1.5}]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanWeightSpec {
    #[serde(default = "one")]
    pub default: f64,
    #[serde(default)]
    pub entries: Vec<SpanEntry>,
}

fn one() -> f64 {
    1.0
}

impl Default for SpanWeightSpec {
    fn default() -> Self {
        Self {
            default: 1.0,
            entries: Vec::new(),
        }
    }
}

impl SpanWeightSpec {
    pub fn with(mut self, entry: SpanEntry) -> Self {
        self.entries.push(entry);
        self
    }

    /// Replace the weight of the text entry matching `text`, or append one.
    pub fn set_text_weight(&mut self, text: &str, weight: f64) {
        let existing = self.entries.iter_mut().find(
            |e| matches!(&e.target, SpanTarget::Text { text: t } if t == text),
        );
        match existing {
            Some(e) => e.weight = weight,
            None => self.entries.push(SpanEntry::text(text, weight)),
        }
    }
}

fn intersects(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Content-token indices (0-based among content tokens) covered by one entry.
fn resolve(seq: &TokenSequence, target: &SpanTarget) -> Result<Vec<usize>> {
    let covered: Vec<usize> = match target {
        SpanTarget::Text { text } => {
            let needle = NormalizedText::new(text).text;
            if needle.is_empty() {
                return Err(Error::SpanNotFound(text.clone()));
            }
            let hay = &seq.normalized().text;
            let starts: Vec<usize> = hay
                .char_indices()
                .map(|(i, _)| i)
                .filter(|&i| hay[i..].starts_with(&needle))
                .collect();
            match starts.as_slice() {
                [] => return Err(Error::SpanNotFound(text.clone())),
                [start] => {
                    let range = *start..start + needle.len();
                    (0..seq.spans().len())
                        .filter(|&i| intersects(&seq.spans()[i], &range))
                        .collect()
                }
                many => {
                    return Err(Error::AmbiguousSpan {
                        text: text.clone(),
                        count: many.len(),
                    })
                }
            }
        }
        SpanTarget::Range { start, end } => {
            let range = *start..*end;
            (0..seq.source_spans().len())
                .filter(|&i| intersects(&seq.source_spans()[i], &range))
                .collect()
        }
    };
    if covered.is_empty() {
        let what = match target {
            SpanTarget::Text { text } => text.clone(),
            SpanTarget::Range { start, end } => format!("{start}..{end}"),
        };
        return Err(Error::SpanNotFound(what));
    }
    Ok(covered)
}

/// Resolve span weights against a tokenized prompt.
///
/// Every token touched by an entry takes that entry's weight (multi-token
/// words share it uniformly); untouched content tokens take the default.
pub fn map_span_weights(seq: &TokenSequence, spec: &SpanWeightSpec) -> Result<TokenWeights> {
    check_weight("default", spec.default)?;
    let n = seq.content_len();
    let mut content = vec![spec.default; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (e, entry) in spec.entries.iter().enumerate() {
        check_weight(&format!("entry {e}"), entry.weight)?;
        for i in resolve(seq, &entry.target)? {
            if let Some(first) = owner[i] {
                return Err(Error::OverlapError { first, second: e });
            }
            owner[i] = Some(e);
            content[i] = entry.weight;
        }
    }
    TokenWeights::from_content(&content)
}
