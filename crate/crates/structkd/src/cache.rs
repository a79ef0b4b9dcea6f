//! Teacher cache: one JSON object per training sentence.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;
use structkd_core::{KBestList, KdLossKind, KdTarget, LabelSequence, Matrix, PosteriorMatrix};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCacheRecord {
    pub sentence_id: String,
    pub language: String,
    pub kbest: Option<KBestList>,
    /// Token posteriors, or emission-softmax distributions for token-level KD.
    pub posteriors: Option<PosteriorMatrix>,
    pub teacher_hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    labels: Vec<usize>,
    weight: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    sentence_id: String,
    language: String,
    #[serde(default)]
    kbest: Option<Vec<RawEntry>>,
    #[serde(default)]
    posteriors: Option<Vec<Vec<f64>>>,
    teacher_hash: String,
}

/// 17 significant digits; parses back to the same `f64`.
fn float(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").unwrap();
}

fn json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serializes"));
}

impl TeacherCacheRecord {
    /// Checks that the record carries what `kind` consumes.
    pub fn check_kind(&self, kind: KdLossKind) -> Result<()> {
        let missing = |what: &str| {
            Err(Error::Data(format!(
                "cache record {} lacks {what} needed by {} KD",
                self.sentence_id,
                kind.name()
            )))
        };
        if kind.needs_kbest() {
            match &self.kbest {
                None => return missing("a k-best list"),
                Some(l) if Some(l.len()) > kind.k() => return missing("a k-best list of the configured size"),
                _ => {}
            }
        }
        if kind.needs_token_distributions() && self.posteriors.is_none() {
            return missing("token distributions");
        }
        Ok(())
    }

    pub fn target(&self) -> KdTarget {
        KdTarget {
            kbest: self.kbest.clone(),
            distributions: self.posteriors.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = String::from("{\"sentence_id\":");
        json_str(&mut s, &self.sentence_id);
        s.push_str(",\"language\":");
        json_str(&mut s, &self.language);
        if let Some(list) = &self.kbest {
            s.push_str(",\"kbest\":[");
            for (i, e) in list.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                s.push_str("{\"labels\":[");
                let labels: Vec<String> = e.labels.0.iter().map(|l| l.to_string()).collect();
                s.push_str(&labels.join(","));
                s.push_str("],\"weight\":");
                float(&mut s, e.weight);
                s.push('}');
            }
            s.push(']');
        }
        if let Some(p) = &self.posteriors {
            s.push_str(",\"posteriors\":[");
            for r in 0..p.len() {
                if r > 0 {
                    s.push(',');
                }
                s.push('[');
                for (c, &x) in p.matrix().row(r).iter().enumerate() {
                    if c > 0 {
                        s.push(',');
                    }
                    float(&mut s, x);
                }
                s.push(']');
            }
            s.push(']');
        }
        s.push_str(",\"teacher_hash\":");
        json_str(&mut s, &self.teacher_hash);
        s.push('}');
        s
    }

    pub fn from_json_line(line: &str) -> std::result::Result<Self, String> {
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if raw.kbest.is_none() && raw.posteriors.is_none() {
            return Err("record has neither kbest nor posteriors".into());
        }
        let kbest = raw
            .kbest
            .map(|entries| {
                KBestList::from_weighted(
                    entries
                        .into_iter()
                        .map(|e| (LabelSequence(e.labels), e.weight))
                        .collect(),
                )
            })
            .transpose()
            .map_err(|e| e.to_string())?;
        let posteriors = raw
            .posteriors
            .map(|rows| Matrix::from_rows(&rows).and_then(PosteriorMatrix::new))
            .transpose()
            .map_err(|e| e.to_string())?;
        Ok(TeacherCacheRecord {
            sentence_id: raw.sentence_id,
            language: raw.language,
            kbest,
            posteriors,
            teacher_hash: raw.teacher_hash,
        })
    }
}

pub fn write_cache(w: &mut impl Write, records: &[TeacherCacheRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn save_cache(path: &Path, records: &[TeacherCacheRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_cache(&mut buf, records).expect("write to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: &Path) -> Result<Vec<TeacherCacheRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(TeacherCacheRecord::from_json_line(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(out)
}
