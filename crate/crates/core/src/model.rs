//! The joint model: shared encoder, POS layer, NER layer and parser, plus
//! checkpoint files.
//!
//! ```text
//! e = encode(words)
//! p = softmax(e W + b)                       POS
//! h = affine([e ; W1 p]), CRF                NER
//! z = [e ; W2 p], biaffine arcs + labels     parsing
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::corpus::{Sentence, Token, Vocab, Vocabs};
use crate::dep::DepHead;
use crate::encoder::{Bpe, DeskEncoder, Encoder, EncoderConfig, EncoderKind, PrecomputedEmbeddings};
use crate::error::{Error, Result};
use crate::metrics::repair_bio;
use crate::ner::NerHead;
use crate::pos::{PosHead, TagConsumer, TAG_DIM};

/// How POS predictions are fed to the NER layer and the parser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagMode {
    /// Expected tag embedding `W p`.
    #[default]
    Soft,
    /// Embedding of the argmax tag.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Output size of each of the four parser projections.
    pub parser_dim: usize,
    pub tag_mode: TagMode,
    /// When false the parser sees `e` alone.
    pub parser_pos_features: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            parser_dim: 400,
            tag_mode: TagMode::Soft,
            parser_pos_features: true,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub bpe: Bpe,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pos: PosHead,
    pub ner: NerHead,
    pub dep: DepHead,
}

/// Intermediate results shared by the three layers for one sentence.
#[derive(Clone, Copy, Debug)]
pub struct SharedForward {
    pub e: Var,
    pub pos_logits: Var,
    pub p: Var,
}

fn label_ids(vocab: &Vocab, name: &str, labels: Option<Vec<&str>>) -> Result<Vec<usize>> {
    let labels = labels.ok_or_else(|| Error::Config(format!("sentence lacks {name} annotation")))?;
    labels
        .iter()
        .map(|l| {
            vocab.get(l).ok_or_else(|| Error::UnknownLabel {
                vocab: name.to_string(),
                label: l.to_string(),
            })
        })
        .collect()
}

impl JointModel {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, vocabs: Vocabs, bpe: Bpe) -> Result<Self> {
        for (name, v) in [("POS", &vocabs.pos), ("NER", &vocabs.ner), ("relation", &vocabs.deprel)] {
            if v.is_empty() {
                return Err(Error::Config(format!("{name} label vocabulary is empty")));
            }
        }
        if config.parser_dim == 0 {
            return Err(Error::Config("parser dimension must be positive".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = match &config.encoder.kind {
            EncoderKind::DeskScale => Encoder::Desk(DeskEncoder::init(
                &mut store,
                &mut rng,
                bpe.vocab().len(),
                config.encoder.dim,
                config.encoder.layers,
            )?),
            EncoderKind::ExternalPrecomputed { path } => {
                let emb = PrecomputedEmbeddings::load(Path::new(path))?;
                if emb.dim() != config.encoder.dim {
                    return Err(Error::Config(format!(
                        "embedding file has dimension {}, configured {}",
                        emb.dim(),
                        config.encoder.dim
                    )));
                }
                Encoder::Precomputed(emb)
            }
        };
        let d = encoder.dim();
        let pos = PosHead::init(&mut store, &mut rng, d, vocabs.pos.len())?;
        let ner = NerHead::init(&mut store, &mut rng, d + TAG_DIM, vocabs.ner.len())?;
        let parser_in = if config.parser_pos_features { d + TAG_DIM } else { d };
        let dep = DepHead::init(&mut store, &mut rng, parser_in, config.parser_dim, vocabs.deprel.len())?;
        Ok(JointModel {
            config,
            vocabs,
            bpe,
            store,
            encoder,
            pos,
            ner,
            dep,
        })
    }

    pub fn shared<S: AsRef<str>>(&self, g: &mut Graph, forms: &[S]) -> Result<SharedForward> {
        let e = self.encoder.encode(g, &self.store, &self.bpe, forms)?;
        let (pos_logits, p) = self.pos.forward(g, &self.store, e)?;
        Ok(SharedForward { e, pos_logits, p })
    }

    fn tags(&self, g: &mut Graph, p: Var, consumer: TagConsumer) -> Result<Var> {
        match self.config.tag_mode {
            TagMode::Soft => self.pos.soft_tags(g, &self.store, p, consumer),
            TagMode::Hard => self.pos.hard_tags(g, &self.store, p, consumer),
        }
    }

    /// Summed token cross-entropy of the POS layer.
    pub fn pos_loss(&self, g: &mut Graph, sentence: &Sentence) -> Result<Var> {
        let gold = label_ids(&self.vocabs.pos, "POS", sentence.pos_tags())?;
        let f = self.shared(g, &sentence.forms())?;
        self.pos.loss(g, f.pos_logits, &gold)
    }

    /// CRF negative log-likelihood of the gold label sequence.
    pub fn ner_loss(&self, g: &mut Graph, sentence: &Sentence) -> Result<Var> {
        let gold = label_ids(&self.vocabs.ner, "NER", sentence.ner_labels())?;
        let f = self.shared(g, &sentence.forms())?;
        let t = self.tags(g, f.p, TagConsumer::Ner)?;
        let h = self.ner.emissions(g, &self.store, f.e, t)?;
        self.ner.nll(g, &self.store, h, &gold)
    }

    /// Head plus relation cross-entropy.
    pub fn dep_loss(&self, g: &mut Graph, sentence: &Sentence) -> Result<Var> {
        self.dep_batch_loss(g, &[sentence])
    }

    /// Sum of [`JointModel::dep_loss`] over `sentences`.
    pub fn dep_batch_loss(&self, g: &mut Graph, sentences: &[&Sentence]) -> Result<Var> {
        let mut prepared = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            let heads = sentence
                .heads()
                .ok_or_else(|| Error::Config("sentence lacks dependency annotation".to_string()))?;
            let labels = label_ids(&self.vocabs.deprel, "relation", sentence.deprels())?;
            let f = self.shared(g, &sentence.forms())?;
            let t = self.parser_tags(g, f.p)?;
            let reprs = self.dep.reprs(g, &self.store, f.e, t)?;
            prepared.push((reprs, heads, labels));
        }
        let items: Vec<_> = prepared
            .iter()
            .map(|(r, h, l)| (r, h.as_slice(), l.as_slice()))
            .collect();
        self.dep.batch_loss(g, &self.store, &items)
    }

    fn parser_tags(&self, g: &mut Graph, p: Var) -> Result<Option<Var>> {
        if self.config.parser_pos_features {
            Ok(Some(self.tags(g, p, TagConsumer::Parser)?))
        } else {
            Ok(None)
        }
    }

    /// Full annotation of one pre-tokenized sentence: argmax POS, Viterbi
    /// NER (with dangling `I-X` rewritten as `B-X`) and the maximum
    /// spanning tree with its best relations.
    pub fn annotate<S: AsRef<str>>(&self, forms: &[S]) -> Result<Sentence> {
        let mut g = Graph::new();
        let f = self.shared(&mut g, forms)?;
        let probs = g.value(f.p);
        let pos: Vec<&str> = (0..probs.rows())
            .map(|i| self.vocabs.pos.decode(probs.argmax_row(i)).unwrap_or_default())
            .collect();

        let t1 = self.tags(&mut g, f.p, TagConsumer::Ner)?;
        let h = self.ner.emissions(&mut g, &self.store, f.e, t1)?;
        let path = self.ner.decode(&self.store, g.value(h))?;
        let ner_raw: Vec<&str> = path
            .labels
            .iter()
            .map(|&l| self.vocabs.ner.decode(l).unwrap_or_default())
            .collect();
        let ner = repair_bio(&ner_raw);

        let t2 = self.parser_tags(&mut g, f.p)?;
        let reprs = self.dep.reprs(&mut g, &self.store, f.e, t2)?;
        let tree = self.dep.decode(&mut g, &self.store, &reprs)?;

        let tokens = forms
            .iter()
            .enumerate()
            .map(|(i, form)| Token {
                index: i + 1,
                form: form.as_ref().to_string(),
                pos: Some(pos[i].to_string()),
                ner: Some(ner[i].clone()),
                head: Some(tree.heads[i]),
                deprel: Some(self.vocabs.deprel.decode(tree.labels[i]).unwrap_or_default().to_string()),
            })
            .collect();
        Sentence::new(tokens)
    }

    pub fn annotate_all(&self, sentences: &[Sentence]) -> Result<Vec<Sentence>> {
        sentences.iter().map(|s| self.annotate(&s.forms())).collect()
    }

    /// Writes `config.json`, the vocabularies, the merge table and the
    /// parameters into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)? + "\n")?;
        for (name, v) in self.vocab_files() {
            fs::write(dir.join(name), v.to_text())?;
        }
        fs::write(dir.join(MERGES_FILE), self.bpe.to_text())?;
        self.store.save(dir, PARAMS_STEM)
    }

    fn vocab_files(&self) -> [(&'static str, &Vocab); 5] {
        [
            ("vocab.word.txt", &self.vocabs.word),
            ("vocab.pos.txt", &self.vocabs.pos),
            ("vocab.ner.txt", &self.vocabs.ner),
            ("vocab.deprel.txt", &self.vocabs.deprel),
            ("vocab.char.txt", &self.vocabs.subword),
        ]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| fail(format!("{name}: {e}")));
        let config: ModelConfig = serde_json::from_str(&read(CONFIG_FILE)?)?;
        let vocabs = Vocabs {
            word: Vocab::from_text(&read("vocab.word.txt")?)?,
            pos: Vocab::from_text(&read("vocab.pos.txt")?)?,
            ner: Vocab::from_text(&read("vocab.ner.txt")?)?,
            deprel: Vocab::from_text(&read("vocab.deprel.txt")?)?,
            subword: Vocab::from_text(&read("vocab.char.txt")?)?,
        };
        let bpe = Bpe::from_text(&read(MERGES_FILE)?)?;
        let mut model = JointModel::new(config, vocabs, bpe)?;
        let loaded = ParamStore::load(dir, PARAMS_STEM)?;
        if loaded.len() != model.store.len() {
            return Err(fail(format!(
                "{} parameters stored, model expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids() {
            let name = model.store.name(id);
            let shape = model.store.value(id).shape();
            match loaded.id(name) {
                Some(other) if other == id && loaded.value(other).shape() == shape => {}
                _ => return Err(fail(format!("parameter {name} missing or misshapen"))),
            }
        }
        model.store = loaded;
        Ok(model)
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const PARAMS_STEM: &str = "params";
