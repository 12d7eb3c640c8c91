//! Command-line front end and the annotate / bench pipelines.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::{format_sentence, read_column_file, write_column_file_as, Corpus, Schema, Sentence, Task};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::leakage::{audit, deduplicate, resplit_pos, Splits};
use crate::model::{JointModel, ModelConfig, TagMode};
use crate::trainer::{grid_search, multi_seed, train, validate, Checkpoint, Grid, TaskCorpora, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Train,
    Eval,
    Annotate,
    Audit,
    Resplit,
    Bench,
}

/// How corpus files are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorpusFormat {
    /// Two columns for POS and NER, ten-column CoNLL-X for parsing.
    Native,
    /// Six columns everywhere.
    Joint,
}

#[derive(Debug, Parser)]
#[command(name = "jointnlp", version, about = "Joint POS tagging, NER and dependency parsing")]
#[command(arg_required_else_help = true)]
pub struct Args {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Model directory (written by train, read by eval/annotate/bench).
    #[arg(long = "save_dir")]
    pub save_dir: Option<PathBuf>,
    #[arg(long = "input_file")]
    pub input_file: Option<PathBuf>,
    #[arg(long = "output_file")]
    pub output_file: Option<PathBuf>,
    /// Directory for the re-split POS files.
    #[arg(long = "output_dir")]
    pub output_dir: Option<PathBuf>,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "lambda-pos")]
    pub lambda_pos: Option<f64>,
    #[arg(long = "lambda-ner")]
    pub lambda_ner: Option<f64>,
    /// Training batch size (default 32) or bench batch size (default 8).
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train once per seed and report test mean and standard deviation.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long = "max-grad-norm")]
    pub max_grad_norm: Option<f64>,
    /// Score validation data only after the last epoch.
    #[arg(long = "eval-final-only")]
    pub eval_final_only: bool,
    /// Leave tokens tagged CH out of UAS/LAS.
    #[arg(long = "exclude-punct")]
    pub exclude_punct: bool,

    #[arg(long = "grid-lr", value_delimiter = ',')]
    pub grid_lr: Vec<f64>,
    #[arg(long = "grid-lambda-pos", value_delimiter = ',')]
    pub grid_lambda_pos: Vec<f64>,
    #[arg(long = "grid-lambda-ner", value_delimiter = ',')]
    pub grid_lambda_ner: Vec<f64>,

    #[arg(long = "encoder-dim")]
    pub encoder_dim: Option<usize>,
    #[arg(long = "encoder-layers")]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub merges: Option<usize>,
    /// Frozen word vectors (`word v1 ... vd` per line) instead of the
    /// trainable encoder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long = "parser-dim")]
    pub parser_dim: Option<usize>,
    /// Feed argmax POS tags instead of the tag distribution.
    #[arg(long = "hard-tags")]
    pub hard_tags: bool,
    /// Parse from encoder output alone.
    #[arg(long = "no-parser-pos")]
    pub no_parser_pos: bool,

    #[arg(long = "corpus-format", value_enum, default_value = "native")]
    pub corpus_format: CorpusFormat,
    /// Six-column file used as training data for all three tasks.
    #[arg(long = "joint-train")]
    pub joint_train: Option<PathBuf>,
    #[arg(long = "joint-valid")]
    pub joint_valid: Option<PathBuf>,
    #[arg(long = "joint-test")]
    pub joint_test: Option<PathBuf>,
    #[arg(long = "pos-train")]
    pub pos_train: Option<PathBuf>,
    #[arg(long = "pos-valid")]
    pub pos_valid: Option<PathBuf>,
    #[arg(long = "pos-test")]
    pub pos_test: Option<PathBuf>,
    #[arg(long = "ner-train")]
    pub ner_train: Option<PathBuf>,
    #[arg(long = "ner-valid")]
    pub ner_valid: Option<PathBuf>,
    #[arg(long = "ner-test")]
    pub ner_test: Option<PathBuf>,
    #[arg(long = "dep-train")]
    pub dep_train: Option<PathBuf>,
    #[arg(long = "dep-valid")]
    pub dep_valid: Option<PathBuf>,
    #[arg(long = "dep-test")]
    pub dep_test: Option<PathBuf>,
    /// Fail resplit when an evaluation sentence has no POS counterpart.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Copy, Debug)]
enum Split {
    Train,
    Valid,
    Test,
}

impl Args {
    fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--mode {} needs --{flag}", format!("{:?}", self.mode).to_lowercase())))
    }

    fn schema(&self, task: Task) -> Schema {
        match (self.corpus_format, task) {
            (CorpusFormat::Joint, _) => Schema::Joint,
            (_, Task::Pos) => Schema::Pos,
            (_, Task::Ner) => Schema::Ner,
            _ => Schema::Dep,
        }
    }

    fn task_path(&self, task: Task, split: Split) -> Option<&Path> {
        let (specific, joint) = match (task, split) {
            (Task::Pos, Split::Train) => (&self.pos_train, &self.joint_train),
            (Task::Pos, Split::Valid) => (&self.pos_valid, &self.joint_valid),
            (Task::Pos, Split::Test) => (&self.pos_test, &self.joint_test),
            (Task::Ner, Split::Train) => (&self.ner_train, &self.joint_train),
            (Task::Ner, Split::Valid) => (&self.ner_valid, &self.joint_valid),
            (Task::Ner, Split::Test) => (&self.ner_test, &self.joint_test),
            (_, Split::Train) => (&self.dep_train, &self.joint_train),
            (_, Split::Valid) => (&self.dep_valid, &self.joint_valid),
            (_, Split::Test) => (&self.dep_test, &self.joint_test),
        };
        specific.as_deref().or(joint.as_deref())
    }

    /// Reads the corpus of one task and split, requiring its annotation.
    fn read_task(&self, task: Task, split: Split) -> Result<Option<Corpus>> {
        let Some(path) = self.task_path(task, split) else {
            return Ok(None);
        };
        let is_joint = Some(path) == self.joint_path(split);
        let schema = if is_joint { Schema::Joint } else { self.schema(task) };
        let corpus = read_column_file(path, schema)?;
        Ok(Some(Corpus::new(corpus.sentences, task)?))
    }

    fn joint_path(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.joint_train.as_deref(),
            Split::Valid => self.joint_valid.as_deref(),
            Split::Test => self.joint_test.as_deref(),
        }
    }

    fn task_corpora(&self, split: Split) -> Result<Option<TaskCorpora>> {
        let pos = self.read_task(Task::Pos, split)?;
        let ner = self.read_task(Task::Ner, split)?;
        let dep = self.read_task(Task::Dep, split)?;
        match (pos, ner, dep) {
            (Some(pos), Some(ner), Some(dep)) => Ok(Some(TaskCorpora { pos, ner, dep })),
            (None, None, None) => Ok(None),
            _ => Err(Error::Config(
                format!("{split:?} data must be given for all three tasks").to_lowercase(),
            )),
        }
    }

    fn splits(&self, task: Task) -> Result<Splits> {
        let empty = || Corpus {
            sentences: Vec::new(),
            task,
        };
        Ok(Splits {
            train: self.read_task(task, Split::Train)?.unwrap_or_else(empty),
            valid: self.read_task(task, Split::Valid)?.unwrap_or_else(empty),
            test: self.read_task(task, Split::Test)?.unwrap_or_else(empty),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            lambda_pos: self.lambda_pos.unwrap_or(d.lambda_pos),
            lambda_ner: self.lambda_ner.unwrap_or(d.lambda_ner),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            max_grad_norm: self.max_grad_norm,
            eval_each_epoch: !self.eval_final_only,
            exclude_punct: self.exclude_punct,
            ..d
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let mut encoder = EncoderConfig {
            dim: self.encoder_dim.unwrap_or(d.encoder.dim),
            layers: self.encoder_layers.unwrap_or(d.encoder.layers),
            merges: self.merges.unwrap_or(d.encoder.merges),
            ..d.encoder
        };
        if let Some(path) = &self.embeddings {
            let emb = crate::encoder::PrecomputedEmbeddings::load(path)?;
            encoder.kind = EncoderKind::ExternalPrecomputed {
                path: path.display().to_string(),
            };
            encoder.dim = emb.dim();
        }
        Ok(ModelConfig {
            encoder,
            parser_dim: self.parser_dim.unwrap_or(d.parser_dim),
            tag_mode: if self.hard_tags { TagMode::Hard } else { TagMode::Soft },
            parser_pos_features: !self.no_parser_pos,
            seed: d.seed,
        })
    }

    fn grid(&self, config: &TrainConfig) -> Option<Grid> {
        if self.grid_lr.is_empty() && self.grid_lambda_pos.is_empty() && self.grid_lambda_ner.is_empty() {
            return None;
        }
        let or = |v: &Vec<f64>, x: f64| if v.is_empty() { vec![x] } else { v.clone() };
        Some(Grid {
            lr: or(&self.grid_lr, config.lr),
            lambda_pos: or(&self.grid_lambda_pos, config.lambda_pos),
            lambda_ner: or(&self.grid_lambda_ner, config.lambda_ner),
        })
    }
}

/// Parses `argv` and runs the selected mode. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(args: &Args) -> Result<()> {
    match args.mode {
        Mode::Train => run_train(args),
        Mode::Eval => run_eval(args),
        Mode::Annotate => {
            let model = JointModel::load(args.require(&args.save_dir, "save_dir")?)?;
            let n = annotate_file(
                &model,
                args.require(&args.input_file, "input_file")?,
                args.require(&args.output_file, "output_file")?,
            )?;
            info!("annotated {n} sentences");
            Ok(())
        }
        Mode::Audit => run_audit(args),
        Mode::Resplit => run_resplit(args),
        Mode::Bench => {
            let model = JointModel::load(args.require(&args.save_dir, "save_dir")?)?;
            let sentences = read_plain_sentences(args.require(&args.input_file, "input_file")?)?;
            let report = bench(&model, &sentences, args.batch_size.unwrap_or(8))?;
            info!("{}", report.line());
            if let Some(out) = &args.output_file {
                fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_train(args: &Args) -> Result<()> {
    let config = args.train_config();
    config.validate()?;
    let model_config = args.model_config()?;
    let save_dir = args.require(&args.save_dir, "save_dir")?;
    let train_data = args
        .task_corpora(Split::Train)?
        .ok_or_else(|| Error::Config("--mode train needs training data".to_string()))?;
    let valid = args
        .task_corpora(Split::Valid)?
        .ok_or_else(|| Error::Config("--mode train needs validation data".to_string()))?;

    if !args.seeds.is_empty() {
        let test = args
            .task_corpora(Split::Test)?
            .ok_or_else(|| Error::Config("--seeds needs test data".to_string()))?;
        let result = multi_seed(&config, &model_config, &train_data, &valid, &test, &args.seeds)?;
        for r in &result.rows {
            info!("seed {:>6}  test avg {:.2}", r.seed, 100.0 * r.scores.average);
        }
        info!(
            "mean avg {:.2} ± {:.2}",
            100.0 * result.mean.average,
            100.0 * result.stdev.average
        );
        if let Some(out) = &args.output_file {
            write_json(out, &result)?;
        }
        return Ok(());
    }

    let checkpoint = match args.grid(&config) {
        Some(grid) => {
            let result = grid_search(&config, &grid, &model_config, &train_data, &valid)?;
            for (i, r) in result.rows.iter().enumerate() {
                info!(
                    "{} lr {:e} lambda-pos {} lambda-ner {} avg {:.2}",
                    if i == result.best { "*" } else { " " },
                    r.lr,
                    r.lambda_pos,
                    r.lambda_ner,
                    100.0 * r.scores.average
                );
            }
            if let Some(out) = &args.output_file {
                write_json(out, &result.rows)?;
            }
            result.checkpoint
        }
        None => train(&config, &model_config, &train_data, &valid)?,
    };
    checkpoint.save(save_dir)?;
    info!(
        "saved epoch {} to {} (valid avg {:.2})",
        checkpoint.epoch,
        save_dir.display(),
        100.0 * checkpoint.scores.average
    );
    Ok(())
}

fn run_eval(args: &Args) -> Result<()> {
    let ckpt = Checkpoint::load(args.require(&args.save_dir, "save_dir")?)?;
    let data = match args.task_corpora(Split::Test)? {
        Some(d) => d,
        None => args
            .task_corpora(Split::Valid)?
            .ok_or_else(|| Error::Config("--mode eval needs test or validation data".to_string()))?,
    };
    let scores = validate(&ckpt.model, &data, args.exclude_punct)?;
    info!(
        "pos {:.2}  ner {:.2}  uas {:.2}  las {:.2}  avg {:.2}",
        100.0 * scores.pos_accuracy,
        100.0 * scores.ner_f1,
        100.0 * scores.uas,
        100.0 * scores.las,
        100.0 * scores.average
    );
    if let Some(out) = &args.output_file {
        write_json(out, &scores)?;
    }
    Ok(())
}

fn run_audit(args: &Args) -> Result<()> {
    let report = audit(&args.splits(Task::Pos)?, &args.splits(Task::Ner)?, &args.splits(Task::Dep)?);
    for line in report.to_text().lines() {
        info!("{line}");
    }
    if let Some(out) = &args.output_file {
        fs::write(out, report.to_text())?;
        fs::write(json_sibling(out), report.to_json()?)?;
    }
    Ok(())
}

/// `report.txt` → `report.json`; a path already ending in `.json` gets
/// `.json.json` to keep the text file intact.
pub fn json_sibling(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    } else {
        path.with_extension("json")
    }
}

fn run_resplit(args: &Args) -> Result<()> {
    let pos = args.splits(Task::Pos)?;
    let ner = args.splits(Task::Ner)?;
    let dep = args.splits(Task::Dep)?;
    let out_dir = args.require(&args.output_dir, "output_dir")?;
    let all = Corpus {
        sentences: [pos.train.sentences, pos.valid.sentences, pos.test.sentences].concat(),
        task: Task::Pos,
    };
    let (all, removed) = deduplicate(&all);
    info!("removed {removed} duplicate POS sentences");
    let result = resplit_pos(&all, &ner, &dep, args.strict)?;
    fs::create_dir_all(out_dir)?;
    let schema = args.schema(Task::Pos);
    for (name, corpus) in [
        ("pos.train", &result.splits.train),
        ("pos.valid", &result.splits.valid),
        ("pos.test", &result.splits.test),
    ] {
        write_column_file_as(corpus, &out_dir.join(format!("{name}.txt")), schema)?;
        info!("{name}: {} sentences", corpus.len());
    }
    let report = audit(&result.splits, &ner, &dep);
    fs::write(out_dir.join("audit.txt"), report.to_text())?;
    fs::write(out_dir.join("audit.json"), report.to_json()?)?;
    Ok(())
}

/// One pre-tokenized sentence per non-empty line. Blank lines are skipped
/// with a warning.
pub fn parse_plain_sentences(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let words: Vec<String> = line.split_whitespace().map(String::from).collect();
        if words.is_empty() {
            warn!("line {}: empty, skipped", i + 1);
            continue;
        }
        out.push(words);
    }
    out
}

pub fn read_plain_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(parse_plain_sentences(&fs::read_to_string(path)?))
}

/// Annotates sentences in input order and renders them in six columns.
pub fn annotate_text(model: &JointModel, text: &str) -> Result<(String, usize)> {
    let sentences = parse_plain_sentences(text);
    let rendered = sentences
        .iter()
        .map(|words| Ok(format_sentence(&model.annotate(words)?, Schema::Joint)))
        .collect::<Result<Vec<_>>>()?;
    Ok((rendered.join("\n"), sentences.len()))
}

pub fn annotate_file(model: &JointModel, input: &Path, output: &Path) -> Result<usize> {
    let (out, n) = annotate_text(model, &fs::read_to_string(input)?)?;
    fs::write(output, out)?;
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sentences: usize,
    pub batch_size: usize,
    pub tokens_per_sentence: f64,
    pub seconds: f64,
    pub sentences_per_second: f64,
}

impl BenchReport {
    pub fn line(&self) -> String {
        format!(
            "{:.2} sentences/s over {} sentences (batch {}, {:.1} tokens per sentence)",
            self.sentences_per_second, self.sentences, self.batch_size, self.tokens_per_sentence
        )
    }
}

/// Wall-clock throughput of full annotation, batch by batch in input order.
pub fn bench(model: &JointModel, sentences: &[Vec<String>], batch_size: usize) -> Result<BenchReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".to_string()));
    }
    if sentences.is_empty() {
        warn!("bench input is empty");
        return Ok(BenchReport {
            sentences: 0,
            batch_size,
            tokens_per_sentence: 0.0,
            seconds: 0.0,
            sentences_per_second: 0.0,
        });
    }
    let start = Instant::now();
    let mut done: Vec<Sentence> = Vec::with_capacity(sentences.len());
    for batch in sentences.chunks(batch_size) {
        for words in batch {
            done.push(model.annotate(words)?);
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let tokens: usize = sentences.iter().map(Vec::len).sum();
    Ok(BenchReport {
        sentences: sentences.len(),
        batch_size,
        tokens_per_sentence: tokens as f64 / sentences.len() as f64,
        seconds,
        sentences_per_second: if seconds > 0.0 { sentences.len() as f64 / seconds } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse() {
        let a = Args::try_parse_from([
            "jointnlp",
            "--mode",
            "annotate",
            "--save_dir",
            "M",
            "--input_file",
            "in.txt",
            "--output_file",
            "out.txt",
        ])
        .unwrap();
        assert_eq!(a.mode, Mode::Annotate);
        assert_eq!(a.save_dir.as_deref(), Some(Path::new("M")));
    }

    #[test]
    fn grid_lists_split_on_commas() {
        let a = Args::try_parse_from(["jointnlp", "--mode", "train", "--grid-lr", "1e-5,2e-5"]).unwrap();
        let grid = a.grid(&a.train_config()).unwrap();
        assert_eq!(grid.lr, vec![1e-5, 2e-5]);
        assert_eq!(grid.lambda_pos, vec![0.4]);
    }

    #[test]
    fn unknown_flag_and_empty_argv_exit_2() {
        assert_eq!(run(["jointnlp", "--bogus"]), 2);
        assert_eq!(run(["jointnlp"]), 2);
    }

    #[test]
    fn lambda_constraint_is_reported() {
        let a = Args::try_parse_from(["jointnlp", "--mode", "train", "--lambda-pos", "0.9", "--lambda-ner", "0.3"]).unwrap();
        let err = dispatch(&a).unwrap_err().to_string();
        assert!(err.contains("must not exceed 1"), "{err}");
    }

    #[test]
    fn blank_lines_are_skipped() {
        let s = parse_plain_sentences("a b\n\n  \nc\n");
        assert_eq!(s, vec![vec!["a", "b"], vec!["c"]]);
    }

    #[test]
    fn json_sibling_paths() {
        assert_eq!(json_sibling(Path::new("r.txt")), PathBuf::from("r.json"));
        assert_eq!(json_sibling(Path::new("r.json")), PathBuf::from("r.json.json"));
    }
}
