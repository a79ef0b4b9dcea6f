//! Teacher training, teacher caching and student distillation.
//!
//! Distillation is two-phase: every teacher cache record is produced before
//! the first student update. Progress is reported through [`PipelineEvent`]s.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use structkd_core::losses::emission_probs;
use structkd_core::objective::{decode, sentence_loss_and_grad, Distillation};
use structkd_core::optim::{clip_global_norm, sgd_step, PlateauScheduler};
use structkd_core::{
    kbest_viterbi, posteriors, InterpolationState, KdLossKind, KdTarget, LabelSequence, Lattice, Matrix, ModelDims,
    ModelParams, PosteriorMatrix, Sentence, Tagset, TokenBatch,
};

use crate::cache::TeacherCacheRecord;
use crate::checkpoint::model_hash;
use crate::config::{LabelScheme, ModelConfig, TrainConfig};
use crate::corpus::{Corpus, TaggedSentence};
use crate::embeddings::load_vectors;
use crate::error::{Error, Result};
use crate::eval::{macro_average, score_labels};
use crate::model::TrainedModel;
use crate::vocab::Vocab;

/// Sentences per unit of parallel gradient work. Fixed so the summation order
/// does not depend on the thread count.
const CHUNK: usize = 4;

/// One line of the training event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// λ used during this epoch.
    pub lambda: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Mean per-sentence training loss.
    pub train_loss: f64,
    pub dev_metric_per_language: BTreeMap<String, f64>,
    pub dev_macro: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    CacheRecordWritten { sentence_id: String },
    CacheComplete { records: usize },
    Update { epoch: usize, step: usize, loss: f64 },
    EpochEnd(EpochRecord),
}

/// Stable identifier of the `index`-th training sentence of `language`.
pub fn sentence_id(language: &str, index: usize) -> String {
    format!("{language}:{index:06}")
}

/// Seed for the shuffle and dropout masks of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffles sentence indices with `seed`, then packs them greedily so each
/// batch holds at most `budget` tokens. Longer sentences form their own batch.
pub fn batch_indices(lengths: &[usize], budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let n = lengths[i];
        if n > budget {
            log::warn!("sentence of {n} tokens exceeds the batch budget of {budget}");
            if !cur.is_empty() {
                batches.push(std::mem::take(&mut cur));
                used = 0;
            }
            batches.push(vec![i]);
            continue;
        }
        if used + n > budget && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

pub fn batch_by_tokens(sentences: &[Sentence], budget: usize, seed: u64) -> Vec<TokenBatch> {
    let lengths: Vec<usize> = sentences.iter().map(|s| s.tokens.len()).collect();
    batch_indices(&lengths, budget, seed)
        .into_iter()
        .map(|b| TokenBatch::new(b.into_iter().map(|i| sentences[i].clone()).collect()))
        .collect()
}

/// A training sentence with its optional teacher target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub language: String,
    pub tokens: Vec<u32>,
    pub gold: LabelSequence,
    pub target: Option<KdTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub examples: Vec<Example>,
    /// Distillation loss; `None` trains on gold labels only.
    pub kd: Option<KdLossKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevLanguage {
    pub name: String,
    pub tokens: Vec<Vec<u32>>,
    pub gold: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevSet {
    pub languages: Vec<DevLanguage>,
    pub tagset: Tagset,
    pub scheme: LabelScheme,
}

impl DevSet {
    pub fn new(corpora: &[&Corpus], vocab: &Vocab, tagset: &Tagset, scheme: LabelScheme) -> Self {
        DevSet {
            languages: corpora
                .iter()
                .map(|c| DevLanguage {
                    name: c.language.clone(),
                    tokens: c.dev.iter().map(|s| vocab.ids(&s.tokens)).collect(),
                    gold: c.dev.iter().map(|s| s.labels.clone()).collect(),
                })
                .collect(),
            tagset: tagset.clone(),
            scheme,
        }
    }

    /// Per-language metric and its macro average.
    pub fn evaluate(&self, params: &ModelParams) -> Result<(BTreeMap<String, f64>, f64)> {
        let mut per = BTreeMap::new();
        for lang in &self.languages {
            let pred = lang
                .tokens
                .par_iter()
                .map(|t| {
                    let ids = decode(params, t)?;
                    Ok(self.tagset.decode(&ids.0)?.into_iter().map(String::from).collect())
                })
                .collect::<Result<Vec<Vec<String>>>>()?;
            per.insert(lang.name.clone(), score_labels(self.scheme, &lang.gold, &pred)?.value());
        }
        let m = macro_average(per.values().copied());
        Ok((per, m))
    }
}

/// Epoch-at-a-time optimizer loop. Cloning a trainer snapshots the full
/// training state, so a run can be forked and resumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    params: ModelParams,
    config: TrainConfig,
    state: InterpolationState,
    scheduler: PlateauScheduler,
    epoch: usize,
    step: usize,
    best: Option<(f64, usize, ModelParams)>,
    history: Vec<EpochRecord>,
}

impl Trainer {
    /// `distill` starts λ at 1; otherwise λ stays 0.
    pub fn new(params: ModelParams, config: &TrainConfig, distill: bool) -> Result<Self> {
        config.validate()?;
        let state = if distill {
            InterpolationState::initial(config.tau)?
        } else {
            InterpolationState::new(0.0, 0.0)?
        };
        Ok(Trainer {
            params,
            config: config.clone(),
            state,
            scheduler: PlateauScheduler::new(config.lr, config.lr_decay, config.patience_epochs),
            epoch: 0,
            step: 0,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// λ for the next epoch.
    pub fn lambda(&self) -> f64 {
        self.state.lambda()
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Best dev metric so far with its epoch and parameters.
    pub fn best(&self) -> Option<(f64, usize, &ModelParams)> {
        self.best.as_ref().map(|(m, e, p)| (*m, *e, p))
    }

    /// True once the epoch budget or the decay budget is spent.
    pub fn finished(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.scheduler.decays() >= self.config.max_decays
    }

    fn dropout_mask(&self, seed: u64, index: usize, n: usize) -> Option<Matrix> {
        let p = self.config.input_dropout;
        if p == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let e = self.params.dims.emb_dim;
        let keep = 1.0 / (1.0 - p);
        let data = (0..n * e)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Some(Matrix::from_vec(n, e, data).expect("mask shape"))
    }

    /// Summed loss and gradient over the sentences of one batch.
    fn batch_gradient(&self, train: &TrainSet, batch: &[usize], seed: u64) -> Result<(f64, ModelParams)> {
        let kd_kind = train.kd.filter(|_| self.state.lambda() > 0.0);
        let parts = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = self.params.zeros_like();
                let mut loss = 0.0;
                for &i in chunk {
                    let ex = &train.examples[i];
                    let mask = self.dropout_mask(seed, i, ex.tokens.len());
                    let kd = match kd_kind {
                        None => None,
                        Some(kind) => Some(Distillation {
                            kind,
                            target: ex.target.as_ref().ok_or_else(|| {
                                Error::Data(format!("no teacher target for sentence {}", ex.id))
                            })?,
                        }),
                    };
                    loss += sentence_loss_and_grad(
                        &self.params,
                        &ex.tokens,
                        mask.as_ref(),
                        &ex.gold,
                        kd,
                        self.state,
                        &mut grads,
                    )?
                    .total;
                }
                Ok((loss, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut it = parts.into_iter();
        let (mut loss, mut grads) = it.next().expect("non-empty batch");
        for (l, g) in it {
            loss += l;
            grads.add_scaled(&g, 1.0);
        }
        Ok((loss, grads))
    }

    /// Trains one epoch, evaluates on `dev`, updates the schedule and anneals λ.
    pub fn run_epoch(
        &mut self,
        train: &TrainSet,
        dev: &DevSet,
        observer: &mut dyn FnMut(&PipelineEvent),
    ) -> Result<EpochRecord> {
        if train.examples.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        self.epoch += 1;
        let lambda = if train.kd.is_some() { self.state.lambda() } else { 0.0 };
        let lr = self.scheduler.lr();
        let seed = epoch_seed(self.config.seed, self.epoch);
        let lengths: Vec<usize> = train.examples.iter().map(|e| e.tokens.len()).collect();
        let mut total = 0.0;
        for batch in batch_indices(&lengths, self.config.batch_tokens, seed) {
            let (loss, mut grads) = self.batch_gradient(train, &batch, seed)?;
            let b = batch.len() as f64;
            grads.scale(1.0 / b);
            clip_global_norm(&mut grads, self.config.clip_norm);
            sgd_step(&mut self.params, &grads, lr);
            if !self.params.is_finite() {
                return Err(Error::Data(format!("parameters diverged in epoch {}", self.epoch)));
            }
            self.step += 1;
            total += loss;
            observer(&PipelineEvent::Update {
                epoch: self.epoch,
                step: self.step,
                loss: loss / b,
            });
        }
        let (per, dev_macro) = dev.evaluate(&self.params)?;
        if self.best.as_ref().is_none_or(|(m, _, _)| dev_macro > *m) {
            self.best = Some((dev_macro, self.epoch, self.params.clone()));
        }
        self.scheduler.observe(dev_macro);
        self.state = self.state.anneal();
        let record = EpochRecord {
            epoch: self.epoch,
            lambda,
            lr,
            train_loss: total / train.examples.len() as f64,
            dev_metric_per_language: per,
            dev_macro,
        };
        log::info!(
            "epoch {} lambda {:.3} lr {:.4} loss {:.4} dev {:.4}",
            record.epoch,
            record.lambda,
            record.lr,
            record.train_loss,
            record.dev_macro
        );
        self.history.push(record.clone());
        observer(&PipelineEvent::EpochEnd(record.clone()));
        Ok(record)
    }

    /// Runs epochs until [`Trainer::finished`].
    pub fn run(&mut self, train: &TrainSet, dev: &DevSet, observer: &mut dyn FnMut(&PipelineEvent)) -> Result<()> {
        while !self.finished() {
            self.run_epoch(train, dev, observer)?;
        }
        Ok(())
    }

    /// Best-dev parameters (the current ones if no epoch ran).
    pub fn into_best(self) -> (ModelParams, Vec<EpochRecord>) {
        let params = self.best.map_or(self.params, |(_, _, p)| p);
        (params, self.history)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Best logged dev macro metric.
    pub fn best_dev(&self) -> f64 {
        self.history.iter().map(|r| r.dev_macro).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.history
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.dev_macro >= r.dev_macro => Some(b),
                _ => Some(r),
            })
    }
}

fn init_params(model: &ModelConfig, vocab: &Vocab, tagset: &Tagset, seed: u64) -> Result<ModelParams> {
    let dims = ModelDims {
        vocab: vocab.len(),
        emb_dim: model.emb_dim,
        hidden: model.hidden,
        num_labels: tagset.len(),
    };
    let mut params = ModelParams::init(dims, model.head, seed)?;
    if let Some(path) = &model.embeddings {
        load_vectors(path, vocab, &mut params)?;
    }
    Ok(params)
}

fn gold_ids(tagset: &Tagset, s: &TaggedSentence) -> Result<LabelSequence> {
    tagset
        .encode(&s.labels)
        .map(LabelSequence)
        .map_err(|e| Error::Config(format!("label outside the tagset: {e}")))
}

/// Trains a monolingual model on gold labels and returns its best-dev
/// checkpoint. `tagset` must cover the corpus labels (it is usually the
/// joint tagset so the teacher can later supervise a multilingual student).
pub fn train_teacher(
    corpus: &Corpus,
    tagset: &Tagset,
    train: &TrainConfig,
    model: &ModelConfig,
    scheme: LabelScheme,
    observer: &mut dyn FnMut(&PipelineEvent),
) -> Result<TrainOutcome> {
    if corpus.train.is_empty() {
        return Err(Error::Config(format!("{}: empty training split", corpus.language)));
    }
    let vocab = Vocab::from_words(corpus.train.iter().flat_map(|s| s.tokens.iter()));
    let examples = corpus
        .train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Example {
                id: sentence_id(&corpus.language, i),
                language: corpus.language.clone(),
                tokens: vocab.ids(&s.tokens),
                gold: gold_ids(tagset, s)?,
                target: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = TrainSet { examples, kd: None };
    let dev = DevSet::new(&[corpus], &vocab, tagset, scheme);
    let mut trainer = Trainer::new(init_params(model, &vocab, tagset, train.seed)?, train, false)?;
    trainer.run(&set, &dev, observer)?;
    let (params, history) = trainer.into_best();
    Ok(TrainOutcome {
        model: TrainedModel::new(params, vocab, tagset.clone())?,
        history,
    })
}

/// Teacher outputs for one sentence, as needed by `kind`.
pub fn teacher_record(
    teacher: &TrainedModel,
    teacher_hash: &str,
    sentence_id: String,
    language: &str,
    tokens: &[String],
    kind: KdLossKind,
) -> Result<TeacherCacheRecord> {
    record_from_lattice(&teacher.lattice(tokens)?, teacher_hash, sentence_id, language, kind)
}

/// Cache record for a teacher lattice: the k-best list and/or the token
/// distributions that `kind` consumes.
pub fn record_from_lattice(
    lattice: &Lattice,
    teacher_hash: &str,
    sentence_id: String,
    language: &str,
    kind: KdLossKind,
) -> Result<TeacherCacheRecord> {
    let kbest = match kind.k() {
        Some(k) if kind.needs_kbest() => Some(kbest_viterbi(lattice, k)?),
        _ => None,
    };
    let dists = match kind {
        KdLossKind::Token | KdLossKind::Emission => Some(PosteriorMatrix::new(emission_probs(lattice))?),
        KdLossKind::Posterior | KdLossKind::PosTopWK { .. } => Some(posteriors(lattice)),
        _ => None,
    };
    Ok(TeacherCacheRecord {
        sentence_id,
        language: language.to_string(),
        kbest,
        posteriors: dists,
        teacher_hash: teacher_hash.to_string(),
    })
}

/// Runs every teacher over its language's training split. Records come back
/// in corpus order, then sentence order.
pub fn cache_teachers(
    teachers: &BTreeMap<String, TrainedModel>,
    corpora: &[Corpus],
    tagset: &Tagset,
    kind: KdLossKind,
    observer: &mut dyn FnMut(&PipelineEvent),
) -> Result<Vec<TeacherCacheRecord>> {
    let mut records = Vec::new();
    for corpus in corpora {
        let lang = &corpus.language;
        let teacher = teachers
            .get(lang)
            .ok_or_else(|| Error::Config(format!("no teacher for language {lang}")))?;
        if teacher.tagset != *tagset {
            return Err(Error::Config(format!(
                "teacher for {lang} has tagset {:?}, student uses {:?}",
                teacher.tagset.labels(),
                tagset.labels()
            )));
        }
        let hash = model_hash(teacher);
        let batch = corpus
            .train
            .par_iter()
            .enumerate()
            .map(|(i, s)| teacher_record(teacher, &hash, sentence_id(lang, i), lang, &s.tokens, kind))
            .collect::<Result<Vec<_>>>()?;
        for r in &batch {
            observer(&PipelineEvent::CacheRecordWritten {
                sentence_id: r.sentence_id.clone(),
            });
        }
        records.extend(batch);
    }
    observer(&PipelineEvent::CacheComplete { records: records.len() });
    Ok(records)
}

fn check_record(r: &TeacherCacheRecord, lang: &str, n: usize, v: usize, kind: KdLossKind) -> Result<()> {
    r.check_kind(kind)?;
    let bad = |what: &str| Err(Error::Data(format!("cache record {}: {what}", r.sentence_id)));
    if r.language != lang {
        return bad(&format!("language {} but sentence is {lang}", r.language));
    }
    if let Some(p) = &r.posteriors {
        if p.len() != n || p.num_labels() != v {
            return bad("distribution shape does not match the sentence");
        }
    }
    if let Some(list) = &r.kbest {
        if list.iter().any(|e| e.labels.len() != n || e.labels.0.iter().any(|&l| l >= v)) {
            return bad("k-best sequence does not match the sentence");
        }
    }
    Ok(())
}

/// Merged multilingual training set; with `kd` set, every sentence is paired
/// with its cache record.
pub fn student_train_set(
    corpora: &[Corpus],
    cache: &[TeacherCacheRecord],
    vocab: &Vocab,
    tagset: &Tagset,
    kd: Option<KdLossKind>,
) -> Result<TrainSet> {
    let index: HashMap<&str, &TeacherCacheRecord> = cache.iter().map(|r| (r.sentence_id.as_str(), r)).collect();
    let mut examples = Vec::new();
    for corpus in corpora {
        for (i, s) in corpus.train.iter().enumerate() {
            let id = sentence_id(&corpus.language, i);
            let target = match kd {
                None => None,
                Some(kind) => {
                    let r = index
                        .get(id.as_str())
                        .ok_or_else(|| Error::Data(format!("no teacher cache record for sentence {id}")))?;
                    check_record(r, &corpus.language, s.len(), tagset.len(), kind)?;
                    Some(r.target())
                }
            };
            examples.push(Example {
                id,
                language: corpus.language.clone(),
                tokens: vocab.ids(&s.tokens),
                gold: gold_ids(tagset, s)?,
                target,
            });
        }
    }
    Ok(TrainSet { examples, kd })
}

/// Vocabulary over the training splits of all corpora.
pub fn joint_vocab(corpora: &[Corpus]) -> Vocab {
    Vocab::from_words(corpora.iter().flat_map(|c| c.train.iter().flat_map(|s| s.tokens.iter())))
}

/// Trains the multilingual student on gold labels plus cached teacher targets
/// (`train.kd_kind`), annealing λ each epoch.
pub fn train_student(
    corpora: &[Corpus],
    cache: &[TeacherCacheRecord],
    tagset: &Tagset,
    train: &TrainConfig,
    model: &ModelConfig,
    scheme: LabelScheme,
    observer: &mut dyn FnMut(&PipelineEvent),
) -> Result<TrainOutcome> {
    if corpora.is_empty() {
        return Err(Error::Config("no corpora".into()));
    }
    let vocab = joint_vocab(corpora);
    let set = student_train_set(corpora, cache, &vocab, tagset, train.kd_kind)?;
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let dev = DevSet::new(&refs, &vocab, tagset, scheme);
    let params = init_params(model, &vocab, tagset, train.seed)?;
    let mut trainer = Trainer::new(params, train, train.kd_kind.is_some())?;
    trainer.run(&set, &dev, observer)?;
    let (params, history) = trainer.into_best();
    Ok(TrainOutcome {
        model: TrainedModel::new(params, vocab, tagset.clone())?,
        history,
    })
}

/// Caches all teacher targets, then trains the student.
pub fn distill(
    corpora: &[Corpus],
    teachers: &BTreeMap<String, TrainedModel>,
    tagset: &Tagset,
    train: &TrainConfig,
    model: &ModelConfig,
    scheme: LabelScheme,
    observer: &mut dyn FnMut(&PipelineEvent),
) -> Result<(Vec<TeacherCacheRecord>, TrainOutcome)> {
    let cache = match train.kd_kind {
        Some(kind) => cache_teachers(teachers, corpora, tagset, kind, observer)?,
        None => Vec::new(),
    };
    let outcome = train_student(corpora, &cache, tagset, train, model, scheme, observer)?;
    Ok((cache, outcome))
}

/// The configured loss with its list size set to `k`; kinds without a k-best
/// list become Top-WK.
pub fn with_k(kind: Option<KdLossKind>, k: usize) -> KdLossKind {
    match kind {
        Some(KdLossKind::TopK { .. }) => KdLossKind::TopK { k },
        Some(KdLossKind::PosTopWK { .. }) => KdLossKind::PosTopWK { k },
        _ => KdLossKind::TopWK { k },
    }
}
