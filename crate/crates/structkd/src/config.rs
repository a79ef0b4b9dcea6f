//! Experiment configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use structkd_core::{KdLossKind, OutputHead};

use crate::corpus::Column;
use crate::error::{Error, Result};

/// How gold labels are scored on dev/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    /// BIO spans, scored by span F1.
    Bio,
    /// Plain tags, scored by token accuracy.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    /// Stop once the learning rate has been decayed this many times.
    pub max_decays: usize,
    pub tau: f64,
    pub kd_kind: Option<KdLossKind>,
    pub seed: u64,
    pub clip_norm: f64,
    /// Probability of zeroing an input embedding unit during training.
    pub input_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 2000,
            lr: 0.1,
            lr_decay: 0.5,
            patience_epochs: 10,
            max_epochs: 100,
            max_decays: 3,
            tau: 1.0,
            kd_kind: None,
            seed: 1,
            clip_norm: 5.0,
            input_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_tokens == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return bad("batch_tokens, max_epochs and patience_epochs must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau must be non-negative");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return bad("input_dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub head: OutputHead,
    /// Text file of precomputed word vectors; the embedding table is frozen.
    pub embeddings: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            emb_dim: 64,
            hidden: 128,
            head: OutputHead::Crf,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageConfig {
    pub name: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub token_column: usize,
    pub label_column: Column,
    /// Pretrained teacher checkpoint; trained on demand when absent.
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub teacher_model: ModelConfig,
    pub scheme: LabelScheme,
    pub languages: Vec<LanguageConfig>,
    /// Precomputed teacher cache to use instead of running the teachers.
    pub cache: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    batch_tokens: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    patience_epochs: Option<usize>,
    max_epochs: Option<usize>,
    max_decays: Option<usize>,
    tau: Option<f64>,
    kd: Option<String>,
    k: Option<usize>,
    seed: Option<u64>,
    clip_norm: Option<f64>,
    input_dropout: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    emb_dim: Option<usize>,
    hidden: Option<usize>,
    head: Option<String>,
    embeddings: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LanguageFile {
    name: String,
    train: PathBuf,
    dev: PathBuf,
    test: Option<PathBuf>,
    token_column: Option<usize>,
    label_column: Option<usize>,
    teacher: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    train: Option<TrainFile>,
    model: Option<ModelFile>,
    teacher_model: Option<ModelFile>,
    scheme: Option<LabelScheme>,
    #[serde(default)]
    languages: Vec<LanguageFile>,
    cache: Option<PathBuf>,
}

/// Largest k-best list a configuration may ask for.
pub const MAX_K: usize = 10;

/// `"none"` (or absent) disables distillation.
pub fn parse_kd_kind(name: Option<&str>, k: Option<usize>) -> Result<Option<KdLossKind>> {
    match name {
        None | Some("none") => Ok(None),
        Some(n) => {
            let needs_k = matches!(n, "topk" | "topwk" | "pos_topwk");
            let k = if needs_k { Some(k.unwrap_or(1)) } else { None };
            if let Some(k) = k.filter(|k| !(1..=MAX_K).contains(k)) {
                return Err(Error::Config(format!("k = {k} outside 1..={MAX_K}")));
            }
            Ok(Some(KdLossKind::from_name(n, k).map_err(|e| Error::Config(e.to_string()))?))
        }
    }
}

fn parse_head(name: &str) -> Result<OutputHead> {
    match name {
        "crf" => Ok(OutputHead::Crf),
        "softmax" => Ok(OutputHead::Softmax),
        other => Err(Error::Config(format!("unknown output head {other:?}"))),
    }
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl ModelConfig {
    fn merge(base: &ModelConfig, f: Option<ModelFile>, dir: &Path) -> Result<Self> {
        let Some(f) = f else { return Ok(base.clone()) };
        Ok(ModelConfig {
            emb_dim: f.emb_dim.unwrap_or(base.emb_dim),
            hidden: f.hidden.unwrap_or(base.hidden),
            head: f.head.as_deref().map(parse_head).transpose()?.unwrap_or(base.head),
            embeddings: f.embeddings.map(|p| resolve(dir, p)).or_else(|| base.embeddings.clone()),
        })
    }
}

/// Sets `path` (dot-separated; numeric segments index arrays) in `root`.
/// The value is parsed as a TOML value, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: {part:?} is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{key}: {part:?} is not a table"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

impl ExperimentConfig {
    /// Parses config text. Relative paths are resolved against `dir`.
    pub fn from_toml(text: &str, dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let file: ExperimentFile = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let d = TrainConfig::default();
        let train = match file.train {
            None => d,
            Some(t) => TrainConfig {
                batch_tokens: t.batch_tokens.unwrap_or(d.batch_tokens),
                lr: t.lr.unwrap_or(d.lr),
                lr_decay: t.lr_decay.unwrap_or(d.lr_decay),
                patience_epochs: t.patience_epochs.unwrap_or(d.patience_epochs),
                max_epochs: t.max_epochs.unwrap_or(d.max_epochs),
                max_decays: t.max_decays.unwrap_or(d.max_decays),
                tau: t.tau.unwrap_or(d.tau),
                kd_kind: parse_kd_kind(t.kd.as_deref(), t.k)?,
                seed: t.seed.unwrap_or(d.seed),
                clip_norm: t.clip_norm.unwrap_or(d.clip_norm),
                input_dropout: t.input_dropout.unwrap_or(d.input_dropout),
            },
        };
        train.validate()?;
        let model = ModelConfig::merge(&ModelConfig::default(), file.model, dir)?;
        let teacher_model = ModelConfig::merge(&model, file.teacher_model, dir)?;
        let languages: Vec<LanguageConfig> = file
            .languages
            .into_iter()
            .map(|l| LanguageConfig {
                name: l.name,
                train: resolve(dir, l.train),
                dev: resolve(dir, l.dev),
                test: l.test.map(|p| resolve(dir, p)),
                token_column: l.token_column.unwrap_or(0),
                label_column: l.label_column.map_or(Column::Last, Column::Index),
                teacher: l.teacher.map(|p| resolve(dir, p)),
            })
            .collect();
        let mut names: Vec<&str> = languages.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate language name".into()));
        }
        Ok(ExperimentConfig {
            train,
            model,
            teacher_model,
            scheme: file.scheme.unwrap_or(LabelScheme::Bio),
            languages,
            cache: file.cache.map(|p| resolve(dir, p)),
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, dir, overrides)
    }
}
