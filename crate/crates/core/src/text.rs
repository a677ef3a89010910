//! Word-level vocabulary, tokenization with word-boundary tracking, and
//! whole-word masking.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MSK: &str = "[MSK]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const MSK_ID: usize = 3;
pub const UNK_ID: usize = 4;

const RESERVED: [&str; 5] = [PAD, CLS, SEP, MSK, UNK];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if ids.insert(p.clone(), i).is_some() {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("duplicate piece {p:?}"),
                });
            }
        }
        Ok(Self { pieces, ids })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> usize {
        self.ids.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.ids.contains_key(piece)
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    /// One `piece<TAB>id` line per entry, in id order.
    pub fn to_text(&self) -> String {
        self.pieces
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{p}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let bad = |detail: &str| Error::Format {
                what: "vocabulary",
                detail: format!("line {}: {detail}", line_no + 1),
            };
            let (piece, id) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("id is not an integer"))?;
            if id != pieces.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            pieces.push(piece.to_string());
        }
        if pieces.len() < RESERVED.len() || pieces[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                what: "vocabulary",
                detail: "reserved tokens missing from the lowest ids".into(),
            });
        }
        Self::from_pieces(pieces)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Lowercases and splits on whitespace; each punctuation character becomes
/// its own word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Frequency-ranked word vocabulary (ties broken alphabetically) holding at
/// most `max_size` words after the reserved tokens.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for word in split_words(line) {
            *counts.entry(word).or_default() += 1;
        }
    }
    if lines == 0 || counts.is_empty() {
        return Err(Error::arg("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    let pieces = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w))
        .collect();
    Vocabulary::from_pieces(pieces)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Contiguous, in-order token ranges, one per source word.
    pub groups: Vec<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes into at most `max_len` pieces, dropping whole trailing words.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = Vec::new();
    let mut groups = Vec::new();
    for word in split_words(text) {
        // One piece per word with a word-level vocabulary.
        let pieces = [vocab.id(&word)];
        if ids.len() + pieces.len() > max_len {
            break;
        }
        let start = ids.len();
        ids.extend_from_slice(&pieces);
        groups.push(start..ids.len());
    }
    TokenSequence { ids, groups }
}

/// Space-joined pieces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.ids
        .iter()
        .map(|&id| vocab.piece(id).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub groups: Vec<Range<usize>>,
    /// Ascending token positions replaced by `[MSK]`.
    pub masked_positions: Vec<usize>,
    /// Original ids at `masked_positions`.
    pub originals: Vec<usize>,
}

impl MaskedSequence {
    /// No masking at all; used on the inference path.
    pub fn unmasked(seq: &TokenSequence) -> Self {
        Self {
            ids: seq.ids.clone(),
            groups: seq.groups.clone(),
            masked_positions: Vec::new(),
            originals: Vec::new(),
        }
    }

    pub fn restore(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        for (&p, &o) in self.masked_positions.iter().zip(&self.originals) {
            ids[p] = o;
        }
        ids
    }
}

/// Selects each word group with probability `prob` and replaces all of its
/// tokens with `[MSK]`. If no group is selected, one is chosen uniformly so
/// every nonempty sequence has at least one masked word.
pub fn apply_wwm_mask<R: Rng + ?Sized>(seq: &TokenSequence, prob: f64, rng: &mut R) -> MaskedSequence {
    let mut selected: Vec<bool> = seq.groups.iter().map(|_| rng.random::<f64>() < prob).collect();
    if !seq.groups.is_empty() && !selected.iter().any(|&s| s) {
        let forced = rng.random_range(0..seq.groups.len());
        selected[forced] = true;
    }
    let mut ids = seq.ids.clone();
    let mut masked_positions = Vec::new();
    let mut originals = Vec::new();
    for (group, _) in seq.groups.iter().zip(&selected).filter(|(_, &s)| s) {
        for pos in group.clone() {
            masked_positions.push(pos);
            originals.push(ids[pos]);
            ids[pos] = MSK_ID;
        }
    }
    MaskedSequence {
        ids,
        groups: seq.groups.clone(),
        masked_positions,
        originals,
    }
}
