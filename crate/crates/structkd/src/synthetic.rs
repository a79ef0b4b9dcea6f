//! Seeded multilingual toy tagging task.
//!
//! Every language has its own vocabulary and its own word → tag mapping, with
//! tag sequences drawn from a language-specific Markov chain. Training labels
//! can be corrupted with uniform noise; dev and test labels are clean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, TaggedSentence};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub languages: Vec<String>,
    pub num_labels: usize,
    pub words_per_label: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub label_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            languages: vec!["aa".into(), "bb".into()],
            num_labels: 5,
            words_per_label: 6,
            train: 100,
            dev: 50,
            test: 50,
            min_len: 4,
            max_len: 10,
            label_noise: 0.1,
        }
    }
}

pub fn label_name(i: usize) -> String {
    format!("T{i}")
}

struct Language {
    name: String,
    /// `words[label]`: surface forms emitted by that label
    words: Vec<Vec<String>>,
    /// row `num_labels` is the start distribution
    transitions: Vec<Vec<f64>>,
}

fn sample(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl Language {
    fn new(name: &str, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let v = spec.num_labels;
        let mut ids: Vec<usize> = (0..v * spec.words_per_label).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let words = (0..v)
            .map(|l| {
                ids[l * spec.words_per_label..(l + 1) * spec.words_per_label]
                    .iter()
                    .map(|w| format!("{name}{w:03}"))
                    .collect()
            })
            .collect();
        let transitions = (0..=v)
            .map(|_| {
                let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(3) + 0.02).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / z).collect()
            })
            .collect();
        Language {
            name: name.to_string(),
            words,
            transitions,
        }
    }

    fn sentence(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng, noise: f64) -> TaggedSentence {
        let v = spec.num_labels;
        let n = rng.random_range(spec.min_len..=spec.max_len);
        let mut prev = v;
        let mut tokens = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = sample(rng, &self.transitions[prev]);
            let w = &self.words[y];
            tokens.push(w[rng.random_range(0..w.len())].clone());
            let shown = if noise > 0.0 && rng.random::<f64>() < noise {
                (y + rng.random_range(1..v)) % v
            } else {
                y
            };
            labels.push(label_name(shown));
            prev = y;
        }
        TaggedSentence { tokens, labels }
    }
}

/// One corpus per language in `spec.languages`.
pub fn synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Corpus>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.languages
        .iter()
        .map(|name| {
            let lang = Language::new(name, spec, &mut rng);
            let mut split = |count, noise| (0..count).map(|_| lang.sentence(spec, &mut rng, noise)).collect();
            let train = split(spec.train, spec.label_noise);
            let dev = split(spec.dev, 0.0);
            let test = split(spec.test, 0.0);
            Corpus::new(lang.name.clone(), train, dev, test)
        })
        .collect()
}
