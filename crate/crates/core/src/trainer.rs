//! Joint training: weighted loss, epoch schedules over unequal corpora,
//! checkpoint selection, grid search and multi-seed runs.
//!
//! The combined objective is
//!
//! ```text
//! L = λ1 L_pos + λ2 L_ner + (1 − λ1 − λ2) L_dep
//! ```
//!
//! where each task loss is the mean over its batch of per-sentence sums.

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamW, Graph, Var};
use crate::corpus::{Corpus, Sentence, Vocabs};
use crate::encoder::Bpe;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{JointModel, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda_pos: f64,
    pub lambda_ner: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; off when `None`.
    pub max_grad_norm: Option<f64>,
    /// Score the validation sets after every epoch (otherwise only after
    /// the last one).
    pub eval_each_epoch: bool,
    pub exclude_punct: bool,
    pub min_word_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamW::default();
        TrainConfig {
            lr: 1e-5,
            lambda_pos: 0.4,
            lambda_ner: 0.2,
            batch_size: 32,
            epochs: 40,
            seed: 1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            max_grad_norm: None,
            eval_each_epoch: true,
            exclude_punct: false,
            min_word_count: 1,
        }
    }
}

pub fn check_lambdas(lambda_pos: f64, lambda_ner: f64) -> Result<()> {
    if !(lambda_pos >= 0.0 && lambda_ner >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative (lambda-pos {lambda_pos}, lambda-ner {lambda_ner})"
        )));
    }
    if lambda_pos + lambda_ner > 1.0 {
        return Err(Error::Config(format!(
            "lambda-pos + lambda-ner must not exceed 1 (got {lambda_pos} + {lambda_ner})"
        )));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambdas(self.lambda_pos, self.lambda_ner)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive (got {})", self.lr)));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::Config(format!("gradient clipping norm must be positive (got {n})")));
            }
        }
        Ok(())
    }

    pub fn lambda_dep(&self) -> f64 {
        1.0 - self.lambda_pos - self.lambda_ner
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One corpus per task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskCorpora {
    pub pos: Corpus,
    pub ner: Corpus,
    pub dep: Corpus,
}

impl TaskCorpora {
    /// The same jointly annotated corpus for all three tasks.
    pub fn shared(corpus: &Corpus) -> Self {
        TaskCorpora {
            pos: corpus.clone(),
            ner: corpus.clone(),
            dep: corpus.clone(),
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.pos.len(), self.ner.len(), self.dep.len()]
    }
}

/// Sentence indices of one step, one batch per task (POS, NER, parsing).
pub type StepBatches = [Vec<usize>; 3];

/// Batches for one epoch.
///
/// The number of steps is `ceil(largest / batch_size)`. Every corpus is
/// shuffled and used once in full; corpora smaller than the largest are
/// then topped up with uniform draws with replacement, so all three streams
/// have the largest corpus's length and every step carries one batch per
/// task.
pub fn make_epoch_schedule<R: Rng>(sizes: [usize; 3], batch_size: usize, rng: &mut R) -> Result<Vec<StepBatches>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".to_string()));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Empty(format!("{} training corpus is empty", ["POS", "NER", "parsing"][i])));
    }
    let largest = *sizes.iter().max().expect("three sizes");
    let streams: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.extend((n..largest).map(|_| rng.random_range(0..n)));
            order
        })
        .collect();
    let steps = largest.div_ceil(batch_size);
    Ok((0..steps)
        .map(|s| {
            let range = s * batch_size..((s + 1) * batch_size).min(largest);
            [
                streams[0][range.clone()].to_vec(),
                streams[1][range.clone()].to_vec(),
                streams[2][range].to_vec(),
            ]
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pos: f64,
    pub ner: f64,
    pub dep: f64,
    pub combined: f64,
}

impl LossBreakdown {
    /// `λ1 pos + λ2 ner + (1 − λ1 − λ2) dep`, evaluated in the same order as
    /// the training graph.
    pub fn recombine(&self, lambda_pos: f64, lambda_ner: f64) -> f64 {
        lambda_pos * self.pos + lambda_ner * self.ner + (1.0 - lambda_pos - lambda_ner) * self.dep
    }
}

fn batch_mean(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let mut total = *losses
        .first()
        .ok_or_else(|| Error::Empty("batch has no sentences".to_string()))?;
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / losses.len() as f64)
}

/// Builds the weighted joint loss of one triple of batches on `g` and
/// returns it with the per-task means.
pub fn joint_loss(
    model: &JointModel,
    g: &mut Graph,
    batches: [&[&Sentence]; 3],
    lambda_pos: f64,
    lambda_ner: f64,
) -> Result<(Var, [Var; 3])> {
    let pos = batches[0].iter().map(|s| model.pos_loss(g, s)).collect::<Result<Vec<_>>>()?;
    let ner = batches[1].iter().map(|s| model.ner_loss(g, s)).collect::<Result<Vec<_>>>()?;
    let dep = model.dep_batch_loss(g, batches[2])?;
    let dep = g.scale(dep, 1.0 / batches[2].len() as f64)?;
    let parts = [batch_mean(g, &pos)?, batch_mean(g, &ner)?, dep];
    let a = g.scale(parts[0], lambda_pos)?;
    let b = g.scale(parts[1], lambda_ner)?;
    let c = g.scale(parts[2], 1.0 - lambda_pos - lambda_ner)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok((total, parts))
}

/// Forward, backward and one optimizer update on the combined loss.
/// Gradients are cleared afterwards.
pub fn train_step(model: &mut JointModel, batches: [&[&Sentence]; 3], config: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (total, parts) = joint_loss(model, &mut g, batches, config.lambda_pos, config.lambda_ner)?;
    let breakdown = LossBreakdown {
        pos: g.scalar(parts[0]),
        ner: g.scalar(parts[1]),
        dep: g.scalar(parts[2]),
        combined: g.scalar(total),
    };
    g.backward(total, &mut model.store)?;
    // release the tape's shared handles so the update happens in place
    drop(g);
    if let Some(max) = config.max_grad_norm {
        model.store.clip_grad_norm(max);
    }
    model.store.adamw_step(&config.optimizer());
    model.store.zero_grad();
    Ok(breakdown)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub pos_accuracy: f64,
    pub ner_f1: f64,
    pub uas: f64,
    pub las: f64,
    /// Unweighted mean of POS accuracy, NER F1 and LAS.
    pub average: f64,
}

/// Annotates each validation corpus (once when they are identical) and
/// scores every task.
pub fn validate(model: &JointModel, data: &TaskCorpora, exclude_punct: bool) -> Result<ValidationScores> {
    let pos_pred = model.annotate_all(&data.pos.sentences)?;
    let ner_pred = if data.ner == data.pos {
        pos_pred.clone()
    } else {
        model.annotate_all(&data.ner.sentences)?
    };
    let dep_pred = if data.dep == data.pos {
        pos_pred.clone()
    } else if data.dep == data.ner {
        ner_pred.clone()
    } else {
        model.annotate_all(&data.dep.sentences)?
    };
    let pos_accuracy = metrics::evaluate_pos(&data.pos.sentences, &pos_pred)?;
    let ner_f1 = metrics::evaluate_ner(&data.ner.sentences, &ner_pred)?.f1;
    let att = metrics::evaluate_dep(&data.dep.sentences, &dep_pred, exclude_punct)?;
    Ok(ValidationScores {
        pos_accuracy,
        ner_f1,
        uas: att.uas,
        las: att.las,
        average: (pos_accuracy + ner_f1 + att.las) / 3.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub scores: Option<ValidationScores>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let l = &self.loss;
        let mut out = format!(
            "epoch {:>3}  loss pos {:.4} ner {:.4} dep {:.4} all {:.4}",
            self.epoch, l.pos, l.ner, l.dep, l.combined
        );
        if let Some(s) = &self.scores {
            out.push_str(&format!(
                "  valid pos {:.2} ner {:.2} las {:.2} avg {:.2}",
                100.0 * s.pos_accuracy,
                100.0 * s.ner_f1,
                100.0 * s.las,
                100.0 * s.average
            ));
        }
        out
    }
}

/// A trained model with the validation scores that selected it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: JointModel,
    pub train_config: TrainConfig,
    pub scores: ValidationScores,
    /// Epoch the parameters come from (0 = initialization).
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    epoch: usize,
    scores: ValidationScores,
}

pub const TRAINING_FILE: &str = "training.json";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let meta = CheckpointMeta {
            train: self.train_config.clone(),
            epoch: self.epoch,
            scores: self.scores,
        };
        fs::write(dir.join(TRAINING_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = JointModel::load(dir)?;
        let text = fs::read_to_string(dir.join(TRAINING_FILE)).map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            message: format!("{TRAINING_FILE}: {e}"),
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        Ok(Checkpoint {
            model,
            train_config: meta.train,
            scores: meta.scores,
            epoch: meta.epoch,
            history: Vec::new(),
        })
    }
}

/// Vocabularies and merge table learned from the training corpora.
pub fn prepare(model_config: &ModelConfig, train: &TaskCorpora, min_word_count: usize) -> (Vocabs, Bpe) {
    let all = || train.pos.sentences.iter().chain(&train.ner.sentences).chain(&train.dep.sentences);
    let vocabs = Vocabs::from_sentences(all(), min_word_count);
    let words = all().flat_map(|s| s.tokens().iter().map(|t| t.form.as_str()));
    let bpe = Bpe::train(words, model_config.encoder.merges);
    (vocabs, bpe)
}

/// Warns when POS training sentences occur in the NER or parsing
/// validation sets.
fn warn_on_leakage(train: &TaskCorpora, valid: &TaskCorpora) {
    use crate::leakage::SentenceKey;
    let keys: std::collections::HashSet<SentenceKey> = train.pos.sentences.iter().map(SentenceKey::of).collect();
    for (name, corpus) in [("NER", &valid.ner), ("parsing", &valid.dep)] {
        let hits = corpus.sentences.iter().filter(|s| keys.contains(&SentenceKey::of(s))).count();
        if hits > 0 {
            warn!("{hits} of {} {name} validation sentences also occur in POS training data", corpus.len());
        }
    }
}

/// Trains for `config.epochs` epochs and returns the epoch (including the
/// initialization) with the best validation average. Earlier epochs win
/// ties.
pub fn train(config: &TrainConfig, model_config: &ModelConfig, train: &TaskCorpora, valid: &TaskCorpora) -> Result<Checkpoint> {
    config.validate()?;
    warn_on_leakage(train, valid);
    let (vocabs, bpe) = prepare(model_config, train, config.min_word_count);
    let model_config = ModelConfig {
        seed: config.seed,
        ..model_config.clone()
    };
    let mut model = JointModel::new(model_config, vocabs, bpe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let initial = validate(&model, valid, config.exclude_punct)?;
    let mut history = vec![EpochLog {
        epoch: 0,
        loss: LossBreakdown::default(),
        scores: Some(initial),
    }];
    info!("{}", history[0].line());
    let mut best = (model.clone(), initial, 0usize);

    for epoch in 1..=config.epochs {
        let schedule = make_epoch_schedule(train.sizes(), config.batch_size, &mut rng)?;
        let mut sum = LossBreakdown::default();
        for (step, [p, n, d]) in schedule.iter().enumerate() {
            let pos: Vec<&Sentence> = p.iter().map(|&i| &train.pos.sentences[i]).collect();
            let ner: Vec<&Sentence> = n.iter().map(|&i| &train.ner.sentences[i]).collect();
            let dep: Vec<&Sentence> = d.iter().map(|&i| &train.dep.sentences[i]).collect();
            let l = train_step(&mut model, [&pos, &ner, &dep], config).map_err(|e| {
                warn!("epoch {epoch} step {}: {e}", step + 1);
                e
            })?;
            sum.pos += l.pos;
            sum.ner += l.ner;
            sum.dep += l.dep;
            sum.combined += l.combined;
        }
        let k = schedule.len() as f64;
        let loss = LossBreakdown {
            pos: sum.pos / k,
            ner: sum.ner / k,
            dep: sum.dep / k,
            combined: sum.combined / k,
        };
        let scores = if config.eval_each_epoch || epoch == config.epochs {
            Some(validate(&model, valid, config.exclude_punct)?)
        } else {
            None
        };
        let log = EpochLog { epoch, loss, scores };
        info!("{}", log.line());
        if let Some(s) = scores {
            if s.average > best.1.average {
                best = (model.clone(), s, epoch);
            }
        }
        history.push(log);
    }

    let (model, scores, epoch) = best;
    Ok(Checkpoint {
        model,
        train_config: config.clone(),
        scores,
        epoch,
        history,
    })
}

/// Value lists for an exhaustive search over learning rate and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub lambda_pos: Vec<f64>,
    pub lambda_ner: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub lambda_pos: f64,
    pub lambda_ner: f64,
    pub scores: ValidationScores,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the winner (first on ties).
    pub best: usize,
    pub checkpoint: Checkpoint,
}

impl Grid {
    /// Valid combinations in `lr`, then `lambda_pos`, then `lambda_ner`
    /// order. Combinations with `λ1 + λ2 > 1` are dropped with a warning.
    pub fn combinations(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &lp in &self.lambda_pos {
                for &ln in &self.lambda_ner {
                    match check_lambdas(lp, ln) {
                        Ok(()) => out.push((lr, lp, ln)),
                        Err(e) => warn!("skipping lr {lr}, lambda-pos {lp}, lambda-ner {ln}: {e}"),
                    }
                }
            }
        }
        out
    }
}

pub fn grid_search(
    base: &TrainConfig,
    grid: &Grid,
    model_config: &ModelConfig,
    train_data: &TaskCorpora,
    valid: &TaskCorpora,
) -> Result<GridResult> {
    if grid.lr.is_empty() || grid.lambda_pos.is_empty() || grid.lambda_ner.is_empty() {
        return Err(Error::Config("every grid list needs at least one value".to_string()));
    }
    let combos = grid.combinations();
    if combos.is_empty() {
        return Err(Error::Config("no valid grid combination".to_string()));
    }
    let mut rows = Vec::new();
    let mut best: Option<(usize, Checkpoint)> = None;
    for (lr, lambda_pos, lambda_ner) in combos {
        let config = TrainConfig {
            lr,
            lambda_pos,
            lambda_ner,
            ..base.clone()
        };
        let ckpt = train(&config, model_config, train_data, valid)?;
        info!(
            "grid lr {lr} lambda-pos {lambda_pos} lambda-ner {lambda_ner}: avg {:.2}",
            100.0 * ckpt.scores.average
        );
        rows.push(GridRow {
            lr,
            lambda_pos,
            lambda_ner,
            scores: ckpt.scores,
        });
        if best.as_ref().is_none_or(|(_, b)| ckpt.scores.average > b.scores.average) {
            best = Some((rows.len() - 1, ckpt));
        }
    }
    let (best, checkpoint) = best.expect("at least one combination");
    Ok(GridResult { rows, best, checkpoint })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub scores: ValidationScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedResult {
    pub rows: Vec<SeedRow>,
    pub mean: ValidationScores,
    /// Sample standard deviation (0 for a single seed).
    pub stdev: ValidationScores,
}

fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains once per seed (selecting on `valid`) and scores each selected
/// model on `test`.
pub fn multi_seed(
    config: &TrainConfig,
    model_config: &ModelConfig,
    train_data: &TaskCorpora,
    valid: &TaskCorpora,
    test: &TaskCorpora,
    seeds: &[u64],
) -> Result<MultiSeedResult> {
    if seeds.is_empty() {
        return Err(Error::Config("multi-seed run needs at least one seed".to_string()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = TrainConfig { seed, ..config.clone() };
        let ckpt = train(&c, model_config, train_data, valid)?;
        let scores = validate(&ckpt.model, test, config.exclude_punct)?;
        info!("seed {seed}: test avg {:.2}", 100.0 * scores.average);
        rows.push(SeedRow { seed, scores });
    }
    let field = |f: fn(&ValidationScores) -> f64| mean_stdev(&rows.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
    let stats = [
        field(|s| s.pos_accuracy),
        field(|s| s.ner_f1),
        field(|s| s.uas),
        field(|s| s.las),
        field(|s| s.average),
    ];
    let pick = |i: usize| ValidationScores {
        pos_accuracy: if i == 0 { stats[0].0 } else { stats[0].1 },
        ner_f1: if i == 0 { stats[1].0 } else { stats[1].1 },
        uas: if i == 0 { stats[2].0 } else { stats[2].1 },
        las: if i == 0 { stats[3].0 } else { stats[3].1 },
        average: if i == 0 { stats[4].0 } else { stats[4].1 },
    };
    Ok(MultiSeedResult {
        rows,
        mean: pick(0),
        stdev: pick(1),
    })
}
