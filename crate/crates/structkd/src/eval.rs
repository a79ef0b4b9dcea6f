use rayon::prelude::*;
use serde::Serialize;
use structkd_core::metrics::{decode_spans, span_f1, token_accuracy, Prf};

use crate::config::LabelScheme;
use crate::corpus::TaggedSentence;
use crate::error::Result;
use crate::model::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum Score {
    SpanF1 {
        precision: f64,
        recall: f64,
        f1: f64,
        correct: usize,
        gold: usize,
        predicted: usize,
    },
    Accuracy {
        accuracy: f64,
    },
}

impl Score {
    /// The headline number in [0, 1]: F1 or accuracy.
    pub fn value(&self) -> f64 {
        match *self {
            Score::SpanF1 { f1, .. } => f1,
            Score::Accuracy { accuracy } => accuracy,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Score::SpanF1 { .. } => "f1",
            Score::Accuracy { .. } => "accuracy",
        }
    }
}

impl From<Prf> for Score {
    fn from(p: Prf) -> Self {
        Score::SpanF1 {
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            correct: p.correct,
            gold: p.gold,
            predicted: p.predicted,
        }
    }
}

pub fn score_labels(scheme: LabelScheme, gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<Score> {
    Ok(match scheme {
        LabelScheme::Bio => {
            let g: Vec<_> = gold.iter().map(|s| decode_spans(s)).collect();
            let p: Vec<_> = pred.iter().map(|s| decode_spans(s)).collect();
            span_f1(&g, &p)?.into()
        }
        LabelScheme::Raw => Score::Accuracy {
            accuracy: token_accuracy::<String>(gold, pred)?,
        },
    })
}

/// Decodes every sentence with `model` (in parallel, order preserved).
pub fn predict_all(model: &TrainedModel, sentences: &[TaggedSentence]) -> Result<Vec<Vec<String>>> {
    sentences.par_iter().map(|s| model.predict(&s.tokens)).collect()
}

pub fn evaluate(model: &TrainedModel, sentences: &[TaggedSentence], scheme: LabelScheme) -> Result<Score> {
    let pred = predict_all(model, sentences)?;
    let gold: Vec<Vec<String>> = sentences.iter().map(|s| s.labels.clone()).collect();
    score_labels(scheme, &gold, &pred)
}

/// Unweighted mean over languages.
pub fn macro_average(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
