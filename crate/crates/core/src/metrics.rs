//! Entity span decoding and the span-F1 / token-accuracy metrics.
//!
//! Span decoding follows the lenient conlleval convention: `B-X` always opens
//! a span, `I-X` continues an open span of type `X` and otherwise opens one,
//! and `O` closes. A bare tag without a `B-`/`I-` prefix behaves like `I-`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Inclusive token range with an entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Non-overlapping spans of one sentence, ordered by start.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpanSet {
    pub spans: Vec<Span>,
}

impl SpanSet {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(label: &str) -> Tag<'_> {
    if label == "O" {
        Tag::Outside
    } else if let Some(t) = label.strip_prefix("B-") {
        Tag::Begin(t)
    } else if let Some(t) = label.strip_prefix("I-") {
        Tag::Inside(t)
    } else {
        Tag::Inside(label)
    }
}

pub fn decode_spans<S: AsRef<str>>(labels: &[S]) -> SpanSet {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, l) in labels.iter().enumerate() {
        let tag = parse_tag(l.as_ref());
        let continues = matches!((&tag, open), (Tag::Inside(t), Some((_, o))) if *t == o);
        if continues {
            continue;
        }
        if let Some((s, kind)) = open.take() {
            spans.push(Span {
                start: s,
                end: i - 1,
                kind: kind.into(),
            });
        }
        open = match tag {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some((i, t)),
        };
    }
    if let Some((s, kind)) = open {
        spans.push(Span {
            start: s,
            end: labels.len() - 1,
            kind: kind.into(),
        });
    }
    SpanSet { spans }
}

/// Canonical BIO labels for `spans` over a sentence of length `n`.
pub fn encode_spans(spans: &SpanSet, n: usize) -> Result<Vec<String>> {
    let mut out: Vec<String> = (0..n).map(|_| String::from("O")).collect();
    let mut last_end: Option<usize> = None;
    for s in &spans.spans {
        if s.start > s.end || s.end >= n {
            return Err(Error::contract(format!("span {}..={} invalid for length {n}", s.start, s.end)));
        }
        if last_end.is_some_and(|e| s.start <= e) {
            return Err(Error::contract("spans overlap or are unordered"));
        }
        out[s.start] = format!("B-{}", s.kind);
        for l in &mut out[s.start + 1..=s.end] {
            *l = format!("I-{}", s.kind);
        }
        last_end = Some(s.end);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub gold: usize,
    pub predicted: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, gold: usize, predicted: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            correct,
            gold,
            predicted,
        }
    }
}

/// Micro-averaged exact-match span precision, recall and F1.
pub fn span_f1(gold: &[SpanSet], pred: &[SpanSet]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            what: "sentences",
            expected: gold.len(),
            got: pred.len(),
        });
    }
    let (mut correct, mut n_gold, mut n_pred) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        n_gold += g.len();
        n_pred += p.len();
        correct += p.spans.iter().filter(|s| g.spans.contains(s)).count();
    }
    Ok(Prf::from_counts(correct, n_gold, n_pred))
}

/// Fraction of tokens labeled identically.
pub fn token_accuracy<T: PartialEq>(gold: &[impl AsRef<[T]>], pred: &[impl AsRef<[T]>]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            what: "sentences",
            expected: gold.len(),
            got: pred.len(),
        });
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g.len() != p.len() {
            return Err(Error::ShapeMismatch {
                what: "sentence length",
                expected: g.len(),
                got: p.len(),
            });
        }
        hit += g.iter().zip(p).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
