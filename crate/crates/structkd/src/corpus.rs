//! CoNLL column files and per-language corpora.

use std::fs;
use std::io::Write;
use std::path::Path;

use structkd_core::Tagset;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl TaggedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which column holds the label. `Last` suits files with a variable number of
/// feature columns between token and tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Index(usize),
    Last,
}

impl Column {
    fn resolve(self, width: usize) -> usize {
        match self {
            Column::Index(i) => i,
            Column::Last => width - 1,
        }
    }
}

/// Parses CoNLL text: whitespace-separated columns, blank lines between
/// sentences, `-DOCSTART-` lines skipped.
pub fn parse_conll(text: &str, path: &Path, token_column: usize, label_column: Column) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut cur = TaggedSentence {
        tokens: Vec::new(),
        labels: Vec::new(),
    };
    let mut width = None;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    TaggedSentence {
                        tokens: Vec::new(),
                        labels: Vec::new(),
                    },
                ));
            }
            continue;
        }
        if cols[0].starts_with("-DOCSTART-") {
            continue;
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(err(lineno, format!("expected {w} columns, found {}", cols.len())));
            }
            _ => {}
        }
        let lc = label_column.resolve(cols.len());
        for c in [token_column, lc] {
            if c >= cols.len() {
                return Err(err(lineno, format!("column {c} missing ({} columns)", cols.len())));
            }
        }
        cur.tokens.push(cols[token_column].to_string());
        cur.labels.push(cols[lc].to_string());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn read_conll(path: &Path, token_column: usize, label_column: Column) -> Result<Vec<TaggedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences = parse_conll(&text, path, token_column, label_column)?;
    if sentences.is_empty() {
        log::warn!("{}: no sentences", path.display());
    }
    Ok(sentences)
}

/// Writes `token label` lines with a blank line after each sentence.
pub fn write_conll(w: &mut impl Write, sentences: &[TaggedSentence]) -> std::io::Result<()> {
    for s in sentences {
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            writeln!(w, "{t} {l}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Labels for one language: train, dev and test splits with a shared tagset.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub language: String,
    pub train: Vec<TaggedSentence>,
    pub dev: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
    tagset: Tagset,
}

impl Corpus {
    /// Builds a corpus whose tagset is every label observed in any split.
    pub fn new(
        language: impl Into<String>,
        train: Vec<TaggedSentence>,
        dev: Vec<TaggedSentence>,
        test: Vec<TaggedSentence>,
    ) -> Result<Self> {
        let language = language.into();
        let all = train.iter().chain(&dev).chain(&test);
        for s in all.clone() {
            if s.is_empty() || s.tokens.len() != s.labels.len() {
                return Err(Error::Data(format!("{language}: empty or ragged sentence")));
            }
        }
        if train.is_empty() {
            return Err(Error::Config(format!("{language}: empty training split")));
        }
        let tagset = Tagset::from_observed(all.flat_map(|s| s.labels.iter().map(String::as_str)))?;
        Ok(Corpus {
            language,
            train,
            dev,
            test,
            tagset,
        })
    }

    pub fn tagset(&self) -> &Tagset {
        &self.tagset
    }
}

/// Union of the tagsets of several corpora, sorted.
pub fn joint_tagset<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Result<Tagset> {
    let mut labels: Vec<&str> = corpora
        .into_iter()
        .flat_map(|c| c.tagset().labels().iter().map(String::as_str))
        .collect();
    labels.sort_unstable();
    labels.dedup();
    Ok(Tagset::from_observed(labels)?)
}
