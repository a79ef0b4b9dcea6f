//! Command-line front end. Every artifact goes under `--out`, listed with its
//! sha256 in `manifest.json`; a failed command leaves a `FAILED` marker.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cache::{load_cache, write_cache};
use crate::checkpoint::{self, digest};
use crate::config::{ExperimentConfig, LabelScheme, TrainConfig};
use crate::corpus::{joint_tagset, read_conll, Column, Corpus};
use crate::eval::{macro_average, predict_all, score_labels, Score};
use crate::model::TrainedModel;
use crate::pipeline::{self, EpochRecord, PipelineEvent};
use crate::potentials::{fixed, inspect, parse_potentials};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "STRUCTKD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "structkd", version, about = "Structure-level knowledge distillation for linear-chain CRF taggers")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Split {
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Bio,
    Raw,
}

impl From<SchemeArg> for LabelScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Bio => LabelScheme::Bio,
            SchemeArg::Raw => LabelScheme::Raw,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one monolingual teacher per language (or only `--language`).
    TrainTeacher {
        #[arg(long)]
        language: Vec<String>,
    },
    /// Write the teacher cache for the configured KD loss.
    Cache,
    /// Cache teacher targets (unless a cache file is configured), then train the student.
    Distill,
    /// Score a model on the configured languages, or a prediction file against a gold file.
    Eval {
        #[arg(long, conflicts_with_all = ["gold", "pred"])]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, requires = "pred")]
        gold: Option<PathBuf>,
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
        /// Label scheme; defaults to the config's, or BIO.
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
    },
    /// Tag a CoNLL file; writes `predictions.conll` with the prediction appended as the last column.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        token_column: usize,
    },
    /// Print sequence probabilities, top-k, alpha, beta and posteriors of a raw potential table.
    InspectLattice {
        #[arg(long)]
        potentials: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Distill once per k and tabulate the dev metric against k.
    KSweep {
        #[arg(long, value_delimiter = ',', default_values_t = 1..=10)]
        ks: Vec<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Cache => "cache",
            Command::Distill => "distill",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::InspectLattice { .. } => "inspect-lattice",
            Command::KSweep { .. } => "k-sweep",
        }
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    status: &'a str,
    artifacts: &'a [Artifact],
}

/// Writes files under the output directory and remembers their hashes.
struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let _ = fs::remove_file(dir.join("FAILED"));
        Ok(Outputs {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: digest(bytes),
            bytes: bytes.len(),
        });
        Ok(path)
    }

    fn manifest(&self, command: &str, status: &str) -> anyhow::Result<()> {
        let m = Manifest {
            command,
            status,
            artifacts: &self.artifacts,
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(self.path("manifest.json"), text).context("writing manifest")?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("{} needs --config", cli.command.name()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let cfg = ExperimentConfig::load(path, &overrides)?;
    if cfg.languages.is_empty() {
        bail!("{}: no [[languages]] configured", path.display());
    }
    Ok(cfg)
}

fn load_corpora(cfg: &ExperimentConfig) -> anyhow::Result<Vec<Corpus>> {
    cfg.languages
        .iter()
        .map(|l| {
            let read = |p: &Path| read_conll(p, l.token_column, l.label_column);
            let test = match &l.test {
                Some(p) => read(p)?,
                None => Vec::new(),
            };
            Ok(Corpus::new(l.name.clone(), read(&l.train)?, read(&l.dev)?, test)?)
        })
        .collect()
}

fn jsonl<T: Serialize>(items: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn teacher_name(lang: &str) -> String {
    format!("teacher-{lang}.ckpt")
}

fn load_teachers(cfg: &ExperimentConfig, out: &Outputs) -> anyhow::Result<BTreeMap<String, TrainedModel>> {
    let mut teachers = BTreeMap::new();
    for l in &cfg.languages {
        let path = l.teacher.clone().unwrap_or_else(|| out.path(&teacher_name(&l.name)));
        if !path.exists() {
            bail!(
                "no teacher for language {}: {} not found (run train-teacher or set the language's teacher path)",
                l.name,
                path.display()
            );
        }
        let (model, _) = checkpoint::load(&path)?;
        teachers.insert(l.name.clone(), model);
    }
    Ok(teachers)
}

fn pct(x: f64) -> String {
    fixed(100.0 * x, 2)
}

fn score_lines(prefix: &str, s: &Score) -> Vec<(String, String)> {
    match *s {
        Score::SpanF1 {
            precision, recall, f1, ..
        } => vec![
            (format!("{prefix}precision"), pct(precision)),
            (format!("{prefix}recall"), pct(recall)),
            (format!("{prefix}f1"), pct(f1)),
        ],
        Score::Accuracy { accuracy } => vec![(format!("{prefix}accuracy"), pct(accuracy))],
    }
}

fn print_score(label: &str, s: &Score) {
    match *s {
        Score::SpanF1 {
            precision, recall, f1, ..
        } => println!("{label}F1 = {} (P = {}, R = {})", pct(f1), pct(precision), pct(recall)),
        Score::Accuracy { accuracy } => println!("{label}accuracy = {}", pct(accuracy)),
    }
}

fn write_metrics(out: &mut Outputs, per: &BTreeMap<String, Score>, macro_avg: Option<f64>) -> anyhow::Result<()> {
    let mut text = String::new();
    for (lang, s) in per {
        let prefix = if lang.is_empty() { String::new() } else { format!("{lang}.") };
        for (k, v) in score_lines(&prefix, s) {
            text.push_str(&format!("{k} = {v}\n"));
        }
    }
    if let Some(m) = macro_avg {
        text.push_str(&format!("macro = {}\n", pct(m)));
    }
    out.write("metrics.txt", text.as_bytes())?;
    let json = serde_json::json!({ "languages": per, "macro": macro_avg });
    out.write("metrics.json", (serde_json::to_string_pretty(&json)? + "\n").as_bytes())?;
    Ok(())
}

fn observer() -> impl FnMut(&PipelineEvent) {
    |e| {
        if let PipelineEvent::CacheComplete { records } = e {
            log::info!("teacher cache complete: {records} records");
        }
    }
}

fn tsv_row(cells: &[String]) -> String {
    cells.join("\t") + "\n"
}

fn run_command(cli: &Cli, out: &mut Outputs) -> anyhow::Result<()> {
    match &cli.command {
        Command::TrainTeacher { language } => {
            let cfg = load_config(cli)?;
            let corpora = load_corpora(&cfg)?;
            let tagset = joint_tagset(&corpora)?;
            for name in language {
                if !corpora.iter().any(|c| &c.language == name) {
                    bail!("unknown language {name}");
                }
            }
            for corpus in corpora.iter().filter(|c| language.is_empty() || language.contains(&c.language)) {
                let train = TrainConfig {
                    kd_kind: None,
                    ..cfg.train.clone()
                };
                let outcome =
                    pipeline::train_teacher(corpus, &tagset, &train, &cfg.teacher_model, cfg.scheme, &mut observer())?;
                let lang = &corpus.language;
                out.write(&teacher_name(lang), &checkpoint::to_bytes(&outcome.model))?;
                out.write(&format!("teacher-{lang}.events.jsonl"), &jsonl(&outcome.history)?)?;
                println!("{lang}: best dev {}", pct(outcome.best_dev()));
            }
        }
        Command::Cache => {
            let cfg = load_config(cli)?;
            let kind = cfg.train.kd_kind.ok_or_else(|| anyhow!("cache needs train.kd to name a KD loss"))?;
            let corpora = load_corpora(&cfg)?;
            let tagset = joint_tagset(&corpora)?;
            let teachers = load_teachers(&cfg, out)?;
            let records = pipeline::cache_teachers(&teachers, &corpora, &tagset, kind, &mut observer())?;
            let mut buf = Vec::new();
            write_cache(&mut buf, &records)?;
            out.write("teacher_cache.jsonl", &buf)?;
            println!("{} records", records.len());
        }
        Command::Distill => {
            let cfg = load_config(cli)?;
            let corpora = load_corpora(&cfg)?;
            let tagset = joint_tagset(&corpora)?;
            let cache = match (cfg.train.kd_kind, &cfg.cache) {
                (None, _) => Vec::new(),
                (Some(_), Some(path)) => load_cache(path)?,
                (Some(kind), None) => {
                    let teachers = load_teachers(&cfg, out)?;
                    let records = pipeline::cache_teachers(&teachers, &corpora, &tagset, kind, &mut observer())?;
                    let mut buf = Vec::new();
                    write_cache(&mut buf, &records)?;
                    out.write("teacher_cache.jsonl", &buf)?;
                    records
                }
            };
            let outcome = pipeline::train_student(
                &corpora,
                &cache,
                &tagset,
                &cfg.train,
                &cfg.model,
                cfg.scheme,
                &mut observer(),
            )?;
            out.write("student.ckpt", &checkpoint::to_bytes(&outcome.model))?;
            out.write("student.events.jsonl", &jsonl(&outcome.history)?)?;
            println!("student: best dev {}", pct(outcome.best_dev()));
        }
        Command::Eval {
            model,
            split,
            gold,
            pred,
            scheme,
        } => {
            let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            let scheme = scheme
                .map(LabelScheme::from)
                .or(cfg.as_ref().map(|c| c.scheme))
                .unwrap_or(LabelScheme::Bio);
            let mut per = BTreeMap::new();
            let macro_avg;
            if let (Some(g), Some(p)) = (gold, pred) {
                let g = read_conll(g, 0, Column::Last)?;
                let p = read_conll(p, 0, Column::Last)?;
                if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.len() != b.len()) {
                    bail!("gold and prediction files are not aligned");
                }
                let labels = |s: &[crate::corpus::TaggedSentence]| s.iter().map(|x| x.labels.clone()).collect::<Vec<_>>();
                let s = score_labels(scheme, &labels(&g), &labels(&p))?;
                print_score("", &s);
                per.insert(String::new(), s);
                macro_avg = None;
            } else {
                let model = model.as_ref().ok_or_else(|| anyhow!("eval needs --model or --gold/--pred"))?;
                let cfg = cfg.ok_or_else(|| anyhow!("eval --model needs --config for the corpora"))?;
                let (m, _) = checkpoint::load(model)?;
                for corpus in load_corpora(&cfg)? {
                    let sentences = match split {
                        Split::Dev => &corpus.dev,
                        Split::Test => &corpus.test,
                    };
                    if sentences.is_empty() {
                        bail!("{}: {split:?} split is empty or not configured", corpus.language);
                    }
                    let s = crate::eval::evaluate(&m, sentences, scheme)?;
                    print_score(&format!("{}: ", corpus.language), &s);
                    per.insert(corpus.language.clone(), s);
                }
                let m = macro_average(per.values().map(Score::value));
                println!("macro: {} = {}", per.values().next().map_or("f1", Score::name), pct(m));
                macro_avg = Some(m);
            }
            write_metrics(out, &per, macro_avg)?;
        }
        Command::Predict {
            model,
            input,
            token_column,
        } => {
            let (m, _) = checkpoint::load(model)?;
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let sentences = crate::corpus::parse_conll(&text, input, *token_column, Column::Index(*token_column))?;
            let preds = predict_all(&m, &sentences)?;
            let mut buf = Vec::new();
            let mut rows = text
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with("-DOCSTART-"));
            for p in &preds {
                for label in p {
                    let line = rows.next().expect("parsed rows");
                    writeln!(buf, "{} {label}", line.split_whitespace().collect::<Vec<_>>().join(" "))?;
                }
                writeln!(buf)?;
            }
            out.write("predictions.conll", &buf)?;
            println!("{} sentences tagged", preds.len());
        }
        Command::InspectLattice { potentials, k } => {
            let text = fs::read_to_string(potentials).with_context(|| format!("reading {}", potentials.display()))?;
            let report = inspect(&parse_potentials(&text)?, *k)?.render();
            print!("{report}");
            out.write("lattice.txt", report.as_bytes())?;
        }
        Command::KSweep { ks } => {
            let cfg = load_config(cli)?;
            if ks.is_empty() || ks.iter().any(|k| !(1..=crate::config::MAX_K).contains(k)) {
                bail!("k values must lie in 1..={}", crate::config::MAX_K);
            }
            let corpora = load_corpora(&cfg)?;
            let tagset = joint_tagset(&corpora)?;
            let teachers = load_teachers(&cfg, out)?;
            let langs: Vec<String> = corpora.iter().map(|c| c.language.clone()).collect();
            let mut header = vec!["k".to_string(), "dev_macro".to_string()];
            header.extend(langs.iter().cloned());
            let mut table = tsv_row(&header);
            let mut logs: Vec<(usize, Vec<EpochRecord>)> = Vec::new();
            for &k in ks {
                let train = TrainConfig {
                    kd_kind: Some(pipeline::with_k(cfg.train.kd_kind, k)),
                    ..cfg.train.clone()
                };
                let (_, outcome) =
                    pipeline::distill(&corpora, &teachers, &tagset, &train, &cfg.model, cfg.scheme, &mut observer())?;
                let best = outcome.best_record().ok_or_else(|| anyhow!("no epochs ran"))?;
                let mut row = vec![k.to_string(), pct(best.dev_macro)];
                row.extend(langs.iter().map(|l| pct(best.dev_metric_per_language[l])));
                println!("k = {k}: dev {}", pct(best.dev_macro));
                table.push_str(&tsv_row(&row));
                logs.push((k, outcome.history));
            }
            out.write("k_sweep.tsv", table.as_bytes())?;
            for (k, history) in logs {
                out.write(&format!("k_sweep.k{k}.events.jsonl"), &jsonl(&history)?)?;
            }
        }
    }
    Ok(())
}

/// Runs one command. Whatever happens, the manifest records the artifacts
/// written so far and the final status.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Ok(n) = std::env::var(THREADS_ENV) {
        let n: usize = n.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut out = Outputs::new(&cli.out)?;
    let result = run_command(cli, &mut out);
    match &result {
        Ok(()) => out.manifest(cli.command.name(), "ok")?,
        Err(e) => {
            let _ = fs::write(out.path("FAILED"), format!("{e:#}\n"));
            let _ = out.manifest(cli.command.name(), "failed");
        }
    }
    result
}
