//! Annotated sentences, column-file readers/writers and vocabularies.
//!
//! The canonical on-disk layout is six tab-separated columns per token
//! (index, form, POS, NER, head, relation) with one blank line between
//! sentences. Missing cells are written as `_`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MISSING: &str = "_";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub index: usize,
    pub form: String,
    pub pos: Option<String>,
    pub ner: Option<String>,
    /// Head position, `0` for the synthetic root.
    pub head: Option<usize>,
    pub deprel: Option<String>,
}

impl Token {
    pub fn new(index: usize, form: &str) -> Self {
        Token {
            index,
            form: form.to_string(),
            pos: None,
            ner: None,
            head: None,
            deprel: None,
        }
    }
}

/// Which layers of a sentence carry gold annotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Annotations {
    pub pos: bool,
    pub ner: bool,
    pub dep: bool,
}

impl Annotations {
    pub fn covers(&self, task: Task) -> bool {
        match task {
            Task::Pos => self.pos,
            Task::Ner => self.ner,
            Task::Dep => self.dep,
            Task::Joint => self.pos && self.ner && self.dep,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pos,
    Ner,
    Dep,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    tokens: Vec<Token>,
    annotations: Annotations,
}

impl Sentence {
    /// Validates indices, BIO labels and (when every token has a head) the
    /// tree shape.
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        let invalid = |message: String| Error::InvalidSentence { sentence: 0, message };
        if tokens.is_empty() {
            return Err(invalid("sentence has no tokens".to_string()));
        }
        let n = tokens.len();
        for (i, tok) in tokens.iter().enumerate() {
            if tok.index != i + 1 {
                return Err(invalid(format!("token {} has index {}", i + 1, tok.index)));
            }
            if let Some(ner) = &tok.ner {
                if !is_bio_label(ner) {
                    return Err(invalid(format!("invalid BIO label {ner:?} at token {}", i + 1)));
                }
            }
            if let Some(head) = tok.head {
                if head > n || head == tok.index {
                    return Err(invalid(format!("head {head} out of range at token {}", i + 1)));
                }
            }
        }
        let annotations = Annotations {
            pos: tokens.iter().all(|t| t.pos.is_some()),
            ner: tokens.iter().all(|t| t.ner.is_some()),
            dep: tokens.iter().all(|t| t.head.is_some() && t.deprel.is_some()),
        };
        if annotations.dep {
            let heads: Vec<usize> = tokens.iter().map(|t| t.head.unwrap_or(0)).collect();
            crate::dep::validate_tree(&heads).map_err(|e| invalid(e.to_string()))?;
        }
        Ok(Sentence { tokens, annotations })
    }

    /// Unannotated sentence from word forms.
    pub fn from_forms<S: AsRef<str>>(forms: &[S]) -> Result<Self> {
        Sentence::new(
            forms
                .iter()
                .enumerate()
                .map(|(i, f)| Token::new(i + 1, f.as_ref()))
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn annotations(&self) -> Annotations {
        self.annotations
    }

    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    pub fn pos_tags(&self) -> Option<Vec<&str>> {
        self.tokens.iter().map(|t| t.pos.as_deref()).collect()
    }

    pub fn ner_labels(&self) -> Option<Vec<&str>> {
        self.tokens.iter().map(|t| t.ner.as_deref()).collect()
    }

    pub fn heads(&self) -> Option<Vec<usize>> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn deprels(&self) -> Option<Vec<&str>> {
        self.tokens.iter().map(|t| t.deprel.as_deref()).collect()
    }
}

pub fn is_bio_label(label: &str) -> bool {
    label == "O"
        || label
            .strip_prefix("B-")
            .or_else(|| label.strip_prefix("I-"))
            .is_some_and(|t| !t.is_empty())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub task: Task,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, task: Task) -> Result<Self> {
        if let Some(i) = sentences.iter().position(|s| !s.annotations().covers(task)) {
            return Err(Error::InvalidSentence {
                sentence: i + 1,
                message: format!("missing {task:?} annotation"),
            });
        }
        Ok(Corpus { sentences, task })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Column layout of an input file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// `form POS`
    Pos,
    /// `form NER`
    Ner,
    /// CoNLL-X: `ID FORM LEMMA CPOSTAG POSTAG FEATS HEAD DEPREL PHEAD PDEPREL`
    Dep,
    /// `index form POS NER head relation`
    Joint,
}

impl Schema {
    fn columns(self) -> usize {
        match self {
            Schema::Pos | Schema::Ner => 2,
            Schema::Dep => 10,
            Schema::Joint => 6,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Schema::Pos => Task::Pos,
            Schema::Ner => Task::Ner,
            Schema::Dep => Task::Dep,
            Schema::Joint => Task::Joint,
        }
    }
}

fn cell(value: &str) -> Option<String> {
    (value != MISSING).then(|| value.to_string())
}

fn render(value: Option<&str>) -> &str {
    value.unwrap_or(MISSING)
}

fn parse_token(fields: &[&str], schema: Schema, position: usize) -> std::result::Result<Token, String> {
    if fields.len() != schema.columns() {
        return Err(format!("expected {} columns, found {}", schema.columns(), fields.len()));
    }
    let parse_index = |s: &str| s.parse::<usize>().map_err(|_| format!("invalid index {s:?}"));
    let parse_head = |s: &str| -> std::result::Result<Option<usize>, String> {
        if s == MISSING {
            Ok(None)
        } else {
            s.parse::<usize>().map(Some).map_err(|_| format!("invalid head {s:?}"))
        }
    };
    let token = match schema {
        Schema::Pos => Token {
            pos: cell(fields[1]),
            ..Token::new(position, fields[0])
        },
        Schema::Ner => Token {
            ner: cell(fields[1]),
            ..Token::new(position, fields[0])
        },
        Schema::Dep => Token {
            index: parse_index(fields[0])?,
            form: fields[1].to_string(),
            pos: cell(fields[3]).or_else(|| cell(fields[4])),
            ner: None,
            head: parse_head(fields[6])?,
            deprel: cell(fields[7]),
        },
        Schema::Joint => Token {
            index: parse_index(fields[0])?,
            form: fields[1].to_string(),
            pos: cell(fields[2]),
            ner: cell(fields[3]),
            head: parse_head(fields[4])?,
            deprel: cell(fields[5]),
        },
    };
    if let Some(ner) = &token.ner {
        if !is_bio_label(ner) {
            return Err(format!("invalid BIO label {ner:?}"));
        }
    }
    Ok(token)
}

/// Parses column-formatted text. `origin` names the source in errors.
pub fn parse_columns(text: &str, schema: Schema, origin: &str) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    let mut first_line = 0;

    let finish = |tokens: &mut Vec<Token>, sentences: &mut Vec<Sentence>, first_line: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let sentence = Sentence::new(std::mem::take(tokens)).map_err(|e| match e {
            Error::InvalidSentence { message, .. } => Error::InvalidSentence {
                sentence: sentences.len() + 1,
                message: format!("{origin}:{first_line}: {message}"),
            },
            other => other,
        })?;
        sentences.push(sentence);
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            finish(&mut tokens, &mut sentences, first_line)?;
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        if tokens.is_empty() {
            first_line = lineno + 1;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let token = parse_token(&fields, schema, tokens.len() + 1).map_err(|message| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            message,
        })?;
        tokens.push(token);
    }
    finish(&mut tokens, &mut sentences, first_line)?;

    let task = match schema {
        Schema::Joint => infer_task(&sentences),
        other => other.task(),
    };
    Corpus::new(sentences, task)
}

/// Most specific task shared by all sentences of a six-column file.
fn infer_task(sentences: &[Sentence]) -> Task {
    let all = |task| sentences.iter().all(|s| s.annotations().covers(task));
    [Task::Joint, Task::Dep, Task::Ner, Task::Pos]
        .into_iter()
        .find(|&t| all(t))
        .unwrap_or(Task::Joint)
}

pub fn read_column_file(path: &Path, schema: Schema) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_columns(&text, schema, &path.display().to_string())
}

pub fn format_sentence(sentence: &Sentence, schema: Schema) -> String {
    let mut out = String::new();
    for t in sentence.tokens() {
        let head = t.head.map(|h| h.to_string());
        let head = render(head.as_deref());
        let line = match schema {
            Schema::Pos => format!("{}\t{}", t.form, render(t.pos.as_deref())),
            Schema::Ner => format!("{}\t{}", t.form, render(t.ner.as_deref())),
            Schema::Dep => {
                let pos = render(t.pos.as_deref());
                format!(
                    "{}\t{}\t_\t{pos}\t{pos}\t_\t{head}\t{}\t_\t_",
                    t.index,
                    t.form,
                    render(t.deprel.as_deref())
                )
            }
            Schema::Joint => format!(
                "{}\t{}\t{}\t{}\t{head}\t{}",
                t.index,
                t.form,
                render(t.pos.as_deref()),
                render(t.ner.as_deref()),
                render(t.deprel.as_deref())
            ),
        };
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn format_corpus(corpus: &Corpus, schema: Schema) -> String {
    corpus
        .sentences
        .iter()
        .map(|s| format_sentence(s, schema))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Writes the canonical six-column form.
pub fn write_column_file(corpus: &Corpus, path: &Path) -> Result<()> {
    write_column_file_as(corpus, path, Schema::Joint)
}

pub fn write_column_file_as(corpus: &Corpus, path: &Path, schema: Schema) -> Result<()> {
    fs::write(path, format_corpus(corpus, schema))?;
    Ok(())
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Bidirectional string/id map. Word-like vocabularies reserve ids 0 and 1
/// for padding and unknown items; label vocabularies have no specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
    specials: bool,
    frozen: bool,
}

impl Vocab {
    pub fn with_specials() -> Self {
        let mut v = Vocab {
            items: Vec::new(),
            index: HashMap::new(),
            specials: true,
            frozen: false,
        };
        v.insert(PAD);
        v.insert(UNK);
        v
    }

    pub fn labels() -> Self {
        Vocab {
            items: Vec::new(),
            index: HashMap::new(),
            specials: false,
            frozen: false,
        }
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut v = Vocab::labels();
        for l in labels {
            v.insert(l.as_ref());
        }
        v
    }

    /// Adds `item` unless present or frozen; returns its id (or the unknown
    /// id when frozen).
    pub fn insert(&mut self, item: &str) -> Option<usize> {
        if let Some(&id) = self.index.get(item) {
            return Some(id);
        }
        if self.frozen {
            return self.unk();
        }
        let id = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), id);
        Some(id)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pad(&self) -> Option<usize> {
        self.specials.then_some(0)
    }

    pub fn unk(&self) -> Option<usize> {
        self.specials.then_some(1)
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    /// Id of `item`, falling back to the unknown id. Label vocabularies have
    /// no fallback.
    pub fn encode(&self, item: &str) -> Option<usize> {
        self.get(item).or_else(|| self.unk())
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// One item per line, preceded by a header recording the layout.
    pub fn to_text(&self) -> String {
        let mut out = format!("# specials={}\n", self.specials as u8);
        let skip = if self.specials { 2 } else { 0 };
        for item in &self.items[skip..] {
            out.push_str(item);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let mut vocab = match header.trim() {
            "# specials=1" => Vocab::with_specials(),
            "# specials=0" => Vocab::labels(),
            other => return Err(Error::Config(format!("bad vocabulary header {other:?}"))),
        };
        for line in lines {
            vocab.insert(line);
        }
        vocab.freeze();
        Ok(vocab)
    }
}

/// Vocabularies shared by all layers of the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub word: Vocab,
    pub pos: Vocab,
    pub ner: Vocab,
    pub deprel: Vocab,
    /// Character inventory; the encoder extends it with learned merges.
    pub subword: Vocab,
}

pub fn build_vocabs(corpus: &Corpus, min_count: usize) -> Vocabs {
    Vocabs::from_sentences(corpus.sentences.iter(), min_count)
}

impl Vocabs {
    /// Word types seen fewer than `min_count` times are left out (and map to
    /// the unknown id); every observed label is kept.
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a Sentence>, min_count: usize) -> Vocabs {
        let mut words: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, usize> = BTreeMap::new();
        let mut pos = std::collections::BTreeSet::new();
        let mut ner = std::collections::BTreeSet::new();
        let mut deprel = std::collections::BTreeSet::new();
        for s in sentences {
            for t in s.tokens() {
                *words.entry(t.form.as_str()).or_default() += 1;
                for c in t.form.chars() {
                    *chars.entry(c).or_default() += 1;
                }
                if let Some(p) = &t.pos {
                    pos.insert(p.as_str());
                }
                if let Some(n) = &t.ner {
                    ner.insert(n.as_str());
                }
                if let Some(d) = &t.deprel {
                    deprel.insert(d.as_str());
                }
            }
        }
        let mut by_freq: Vec<(&str, usize)> = words.into_iter().filter(|&(_, c)| c >= min_count).collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut word = Vocab::with_specials();
        for (w, _) in by_freq {
            word.insert(w);
        }
        let mut subword = Vocab::with_specials();
        for c in chars.keys() {
            subword.insert(&c.to_string());
        }
        let mut ner_vocab = Vocab::labels();
        ner_vocab.insert("O");
        for n in ner {
            ner_vocab.insert(n);
        }
        let mut vocabs = Vocabs {
            word,
            pos: Vocab::from_labels(&pos.into_iter().collect::<Vec<_>>()),
            ner: ner_vocab,
            deprel: Vocab::from_labels(&deprel.into_iter().collect::<Vec<_>>()),
            subword,
        };
        for v in [
            &mut vocabs.word,
            &mut vocabs.pos,
            &mut vocabs.ner,
            &mut vocabs.deprel,
            &mut vocabs.subword,
        ] {
            v.freeze();
        }
        vocabs
    }
}
