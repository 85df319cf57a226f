//! IOB corpora: CoNLL parsing, vocabulary and label indexing, the seeded
//! train/validation split, and exact-match chunk scoring.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;

pub const UNK: &str = "<unk>";

/// One labelled sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub labels: Vec<String>,
}

impl TaggedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawCorpus {
    pub sentences: Vec<TaggedSentence>,
}

impl RawCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(TaggedSentence::len).sum()
    }

    /// `word\tlabel` lines, one blank line after every sentence.
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            for (w, l) in s.words.iter().zip(&s.labels) {
                out.push_str(w);
                out.push('\t');
                out.push_str(l);
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// Parses `word<whitespace>label` lines; blank lines end sentences.
pub fn parse_conll(text: &str) -> Result<RawCorpus> {
    let mut sentences = Vec::new();
    let mut current = TaggedSentence {
        words: Vec::new(),
        labels: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {
                if !current.is_empty() {
                    sentences.push(std::mem::replace(
                        &mut current,
                        TaggedSentence {
                            words: Vec::new(),
                            labels: Vec::new(),
                        },
                    ));
                }
            }
            [word, label] => {
                parse_label(label).map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("invalid IOB label {label:?}"),
                })?;
                current.words.push(word.to_string());
                current.labels.push(label.to_string());
            }
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 2 fields, found {}", fields.len()),
                })
            }
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(RawCorpus { sentences })
}

/// An encoded sentence: token indices with aligned label indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Word and label indices. Index 0 is reserved for unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    labels: Vec<String>,
    lowercase: bool,
    word_index: HashMap<String, usize>,
    label_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    words: Vec<String>,
    labels: Vec<String>,
    lowercase: bool,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_parts(r.words, r.labels, r.lowercase)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            words: v.words,
            labels: v.labels,
            lowercase: v.lowercase,
        }
    }
}

impl Vocabulary {
    /// Words seen at least `min_count` times get their own index, in order
    /// of first appearance; labels are indexed in order of first appearance.
    pub fn build(corpus: &RawCorpus, min_count: usize, lowercase: bool) -> Self {
        let norm = |w: &str| {
            if lowercase {
                w.to_lowercase()
            } else {
                w.to_string()
            }
        };
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut labels = Vec::new();
        let mut seen_labels = HashMap::new();
        for s in &corpus.sentences {
            for (w, l) in s.words.iter().zip(&s.labels) {
                let w = norm(w);
                let c = counts.entry(w.clone()).or_insert(0);
                if *c == 0 {
                    order.push(w);
                }
                *c += 1;
                if !seen_labels.contains_key(l) {
                    seen_labels.insert(l.clone(), labels.len());
                    labels.push(l.clone());
                }
            }
        }
        let mut words = vec![UNK.to_string()];
        words.extend(
            order
                .into_iter()
                .filter(|w| counts[w] >= min_count.max(1) && w != UNK),
        );
        Vocabulary::from_parts(words, labels, lowercase)
    }

    fn from_parts(words: Vec<String>, labels: Vec<String>, lowercase: bool) -> Self {
        let word_index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let label_index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Vocabulary {
            words,
            labels,
            lowercase,
            word_index,
            label_index,
        }
    }

    /// Number of word indices, `<unk>` included.
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn encode_word(&self, word: &str) -> usize {
        let found = if self.lowercase {
            self.word_index.get(&word.to_lowercase())
        } else {
            self.word_index.get(word)
        };
        found.copied().unwrap_or(0)
    }

    pub fn decode_word(&self, index: usize) -> &str {
        self.words.get(index).map_or(UNK, String::as_str)
    }

    pub fn encode_label(&self, label: &str) -> Result<usize> {
        self.label_index
            .get(label)
            .copied()
            .ok_or_else(|| Error::Schema(format!("label {label:?} is not in the label set")))
    }

    /// Indices past the known label set decode to `O`.
    pub fn decode_label(&self, index: usize) -> &str {
        self.labels.get(index).map_or("O", String::as_str)
    }

    pub fn encode(&self, sentence: &TaggedSentence) -> Result<Sequence> {
        Ok(Sequence {
            tokens: sentence.words.iter().map(|w| self.encode_word(w)).collect(),
            labels: sentence
                .labels
                .iter()
                .map(|l| self.encode_label(l))
                .collect::<Result<_>>()?,
        })
    }

    pub fn encode_corpus(&self, corpus: &RawCorpus) -> Result<Vec<Sequence>> {
        corpus.sentences.iter().map(|s| self.encode(s)).collect()
    }
}

/// Seeded shuffle, then the first `floor(n * fraction)` items go to train.
pub fn split_train_val<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = items.len();
    let n_train = (n as f64 * fraction).floor() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::CorpusTooSmall(format!(
            "{n} sentences cannot be split at {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

/// A labelled span; `start` and `end` are inclusive 0-based token indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_label(label: &str) -> Result<Tag<'_>> {
    if label == "O" {
        return Ok(Tag::Outside);
    }
    match label.split_once('-') {
        Some(("B", kind)) if !kind.is_empty() => Ok(Tag::Begin(kind)),
        Some(("I", kind)) if !kind.is_empty() => Ok(Tag::Inside(kind)),
        _ => Err(Error::Label(label.to_string())),
    }
}

/// IOB chunks. `I-X` continues an open chunk of type X and otherwise opens
/// a new one.
pub fn extract_chunks<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Chunk>> {
    let mut chunks = Vec::new();
    let mut open: Option<Chunk> = None;
    for (t, label) in labels.iter().enumerate() {
        match parse_label(label.as_ref())? {
            Tag::Outside => chunks.extend(open.take()),
            Tag::Begin(kind) => {
                chunks.extend(open.take());
                open = Some(Chunk {
                    kind: kind.to_string(),
                    start: t,
                    end: t,
                });
            }
            Tag::Inside(kind) => match open.as_mut() {
                Some(c) if c.kind == kind => c.end = t,
                _ => {
                    chunks.extend(open.take());
                    open = Some(Chunk {
                        kind: kind.to_string(),
                        start: t,
                        end: t,
                    });
                }
            },
        }
    }
    chunks.extend(open);
    Ok(chunks)
}

/// Renders chunks back to IOB labels over `len` tokens.
pub fn chunks_to_iob(chunks: &[Chunk], len: usize) -> Vec<String> {
    let mut out = vec!["O".to_string(); len];
    for c in chunks {
        out[c.start] = format!("B-{}", c.kind);
        for label in &mut out[c.start + 1..=c.end] {
            *label = format!("I-{}", c.kind);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub true_positives: usize,
    pub predicted_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub token_accuracy: f64,
}

impl fmt::Display for EvalReport {
    /// `P\tR\tF\ttoken_acc`, four decimals each.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.precision, self.recall, self.f_measure, self.token_accuracy
        )
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Exact `(type, start, end)` chunk matching, summed over sentences.
pub fn score<G: AsRef<str>, P: AsRef<str>>(gold: &[Vec<G>], predicted: &[Vec<P>]) -> Result<EvalReport> {
    if gold.len() != predicted.len() {
        return Err(Error::Alignment {
            sentence: gold.len().min(predicted.len()),
            gold: gold.len(),
            predicted: predicted.len(),
        });
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    let (mut correct_tokens, mut tokens) = (0, 0);
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Alignment {
                sentence: i,
                gold: g.len(),
                predicted: p.len(),
            });
        }
        let gc = extract_chunks(g)?;
        let pc = extract_chunks(p)?;
        tp += pc.iter().filter(|c| gc.contains(c)).count();
        n_pred += pc.len();
        n_gold += gc.len();
        correct_tokens += g.iter().zip(p).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
        tokens += g.len();
    }
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        true_positives: tp,
        predicted_count: n_pred,
        gold_count: n_gold,
        precision,
        recall,
        f_measure,
        token_accuracy: ratio(correct_tokens, tokens),
    })
}
