//! Character-level byte-pair-encoding merges learned from word forms.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::{Corpus, Sentence, Vocab};
use crate::error::{Error, Result};

/// Subword pieces of a sentence, flattened, with the position of each
/// word's first piece.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordSegmentation {
    pub pieces: Vec<String>,
    pub ids: Vec<usize>,
    pub first: Vec<usize>,
}

impl SubwordSegmentation {
    /// Pieces belonging to word `i`.
    pub fn word_pieces(&self, i: usize) -> &[String] {
        let end = self.first.get(i + 1).copied().unwrap_or(self.pieces.len());
        &self.pieces[self.first[i]..end]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bpe {
    chars: Vec<String>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocab,
}

pub fn train_bpe(corpus: &Corpus, merges: usize) -> Bpe {
    Bpe::train(
        corpus.sentences.iter().flat_map(|s| s.tokens().iter().map(|t| t.form.as_str())),
        merges,
    )
}

fn merge_symbols(symbols: &[String], pair: (&str, &str)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl Bpe {
    /// Greedily learns up to `merges` merges; the most frequent adjacent
    /// pair wins, ties going to the lexicographically smallest pair.
    pub fn train<'a>(words: impl IntoIterator<Item = &'a str>, merges: usize) -> Bpe {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut entries: Vec<(Vec<String>, usize)> = counts
            .iter()
            .map(|(w, &c)| (w.chars().map(String::from).collect(), c))
            .collect();
        let mut chars: Vec<String> = counts.keys().flat_map(|w| w.chars().map(String::from)).collect();
        chars.sort();
        chars.dedup();

        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (symbols, count) in &entries {
                for win in symbols.windows(2) {
                    *pairs.entry((win[0].as_str(), win[1].as_str())).or_default() += count;
                }
            }
            // BTreeMap iterates pairs in lexicographic order, so the first
            // maximum found is the tie-break winner.
            let Some((best, _)) = pairs.iter().fold(None::<(&(&str, &str), usize)>, |acc, (p, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((p, c)),
            }) else {
                break;
            };
            let pair = (best.0.to_string(), best.1.to_string());
            for (symbols, _) in &mut entries {
                *symbols = merge_symbols(symbols, (&pair.0, &pair.1));
            }
            learned.push(pair);
        }
        Bpe::from_parts(&chars, learned)
    }

    fn from_parts(chars: &[String], merges: Vec<(String, String)>) -> Bpe {
        let mut vocab = Vocab::with_specials();
        for c in chars {
            vocab.insert(c);
        }
        for (a, b) in &merges {
            vocab.insert(&format!("{a}{b}"));
        }
        vocab.freeze();
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Bpe {
            chars: chars.to_vec(),
            merges,
            ranks,
            vocab,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Applies learned merges in rank order. Never fails: unseen characters
    /// stay single pieces.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|&(r, _)| r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((a, b)) = best else { break };
            symbols = merge_symbols(&symbols, (&a, &b));
        }
        symbols
    }

    pub fn segment(&self, sentence: &Sentence) -> SubwordSegmentation {
        self.segment_forms(&sentence.forms())
    }

    pub fn segment_forms<S: AsRef<str>>(&self, forms: &[S]) -> SubwordSegmentation {
        let mut seg = SubwordSegmentation {
            pieces: Vec::new(),
            ids: Vec::new(),
            first: Vec::with_capacity(forms.len()),
        };
        for form in forms {
            seg.first.push(seg.pieces.len());
            for piece in self.segment_word(form.as_ref()) {
                seg.ids.push(self.vocab.encode(&piece).expect("subword vocab has specials"));
                seg.pieces.push(piece);
            }
        }
        seg
    }

    /// Merge table file: a header listing the base characters, then one
    /// space-separated pair per line in rank order.
    pub fn to_text(&self) -> String {
        let mut out = format!("#chars {}\n", self.chars.join(" "));
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Bpe> {
        let mut lines = text.lines();
        let chars: Vec<String> = lines
            .next()
            .and_then(|h| h.strip_prefix("#chars"))
            .ok_or_else(|| Error::Config("merge table lacks #chars header".to_string()))?
            .split_whitespace()
            .map(String::from)
            .collect();
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(Error::Config(format!("merge table line {}: {line:?}", i + 2))),
            }
        }
        Ok(Bpe::from_parts(&chars, merges))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_merges_means_characters() {
        let bpe = Bpe::train(["làm_việc", "tại"], 0);
        assert!(bpe.merges().is_empty());
        let pieces = bpe.segment_word("làm_việc");
        assert_eq!(pieces.len(), "làm_việc".chars().count());
        let seg = bpe.segment_forms(&["làm_việc"]);
        assert_eq!(seg.first, vec![0]);
    }

    #[test]
    fn most_frequent_pair_first() {
        let words = vec!["aaab"; 5];
        let bpe = Bpe::train(words, 1);
        assert_eq!(bpe.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur once; ("a","b") sorts first.
        let bpe = Bpe::train(["cd", "ab"], 1);
        assert_eq!(bpe.merges(), &[("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn learned_word_is_one_piece() {
        let bpe = Bpe::train(vec!["VinAI"; 3], 10);
        let seg = bpe.segment_forms(&["VinAI", "VinAI"]);
        assert_eq!(seg.pieces, vec!["VinAI", "VinAI"]);
        assert_eq!(seg.first, vec![0, 1]);
    }

    #[test]
    fn unseen_characters_fall_back_to_unknown() {
        let bpe = Bpe::train(["abc"], 2);
        let seg = bpe.segment_forms(&["xyzab"]);
        assert_eq!(seg.pieces.concat(), "xyzab");
        assert_eq!(seg.ids[0], bpe.vocab().unk().unwrap());
    }

    #[test]
    fn merge_table_round_trip() {
        let bpe = Bpe::train(["Hà_Nội", "Hà_Nội", "Nội", "tại"], 6);
        let back = Bpe::from_text(&bpe.to_text()).unwrap();
        assert_eq!(back, bpe);
    }
}
