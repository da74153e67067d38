//! Word-level vocabulary over item titles.
//!
//! Titles are lowercased and split into alphanumeric runs; every other
//! non-space character becomes a token of its own. Ids `0..5` are reserved
//! for `[PAD] [UNK] [EOS] [MASK] [SEP]`; corpus tokens follow, ordered by
//! descending frequency then lexicographically.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const SEP: usize = 4;
pub const RESERVED: usize = 5;
pub const RESERVED_NAMES: [&str; RESERVED] = ["[PAD]", "[UNK]", "[EOS]", "[MASK]", "[SEP]"];

/// Tokens that masking must never replace.
pub fn is_structural(id: usize) -> bool {
    matches!(id, PAD | EOS | MASK | SEP)
}

/// Lowercases and splits a title into word and punctuation tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids plus per-position loss flags and per-item spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Half-open `[start, end)` ranges, one per item, in order.
    pub item_spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: usize, scored: bool) {
        self.ids.push(id);
        self.loss_mask.push(scored);
    }

    /// Appends `other`'s ids as new items, shifting its spans.
    pub fn extend_items(&mut self, other: &TokenSequence, scored: bool) {
        let off = self.ids.len();
        self.ids.extend_from_slice(&other.ids);
        self.loss_mask.extend(std::iter::repeat_n(scored, other.ids.len()));
        self.item_spans
            .extend(other.item_spans.iter().map(|&(s, e)| (s + off, e + off)));
    }
}

/// Result of [`Vocabulary::mask_tokens`]: the masked sequence, the ids it
/// replaced and where.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub seq: TokenSequence,
    pub original: Vec<usize>,
    pub positions: Vec<usize>,
}

impl Vocabulary {
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut titles = 0usize;
        for title in corpus {
            titles += 1;
            for tok in normalize(title.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if titles == 0 || counts.is_empty() {
            return Err(Error::Tokenizer("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Tokenizer(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i + RESERVED).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total size including the reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.tokens.get(id - RESERVED).map(String::as_str)
        }
    }

    pub fn encode_item(&self, title: &str) -> Result<TokenSequence> {
        let ids: Vec<usize> = normalize(title)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptyTitle);
        }
        let n = ids.len();
        Ok(TokenSequence {
            ids,
            loss_mask: vec![false; n],
            item_spans: vec![(0, n)],
        })
    }

    /// Joins titles with a single `[SEP]`, keeping the most recent
    /// `max_items` titles.
    pub fn encode_sequence<S: AsRef<str>>(&self, titles: &[S], max_items: usize) -> Result<TokenSequence> {
        if titles.is_empty() {
            return Err(Error::Tokenizer("cannot encode an empty item sequence".into()));
        }
        if max_items == 0 {
            return Err(Error::Parameter("max_items must be positive".into()));
        }
        let kept = &titles[titles.len().saturating_sub(max_items)..];
        let mut seq = TokenSequence {
            ids: Vec::new(),
            loss_mask: Vec::new(),
            item_spans: Vec::new(),
        };
        for (i, title) in kept.iter().enumerate() {
            if i > 0 {
                seq.push(SEP, false);
            }
            seq.extend_items(&self.encode_item(title.as_ref())?, false);
        }
        Ok(seq)
    }

    /// Replaces each maskable token by `[MASK]` with probability `rate`.
    /// When sampling selects nothing, one maskable position chosen uniformly
    /// is masked anyway.
    pub fn mask_tokens(&self, seq: &TokenSequence, rate: f64, seed: u64) -> Result<MaskedSequence> {
        mask_tokens(seq, rate, seed)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut after_sep = true;
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Index(format!("token id {id} out of range for vocabulary of {}", self.size()))
            })?;
            if id == SEP {
                out.push_str(", ");
                after_sep = true;
                continue;
            }
            if !after_sep {
                out.push(' ');
            }
            out.push_str(tok);
            after_sep = false;
        }
        Ok(out)
    }

    /// Serialized form: the five reserved names, then one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in RESERVED_NAMES.iter().map(|s| *s).chain(self.tokens.iter().map(String::as_str)) {
            let _ = writeln!(s, "{name}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED {
            return Err(Error::Format("vocabulary file lacks the reserved header".into()));
        }
        for (i, (got, want)) in lines.iter().zip(RESERVED_NAMES).enumerate() {
            if *got != want {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {want}, found {got:?}"),
                });
            }
        }
        Self::from_tokens(lines[RESERVED..].iter().map(|s| s.to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn mask_tokens(seq: &TokenSequence, rate: f64, seed: u64) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("mask rate must lie in [0, 1], got {rate}")));
    }
    let maskable: Vec<usize> = (0..seq.ids.len())
        .filter(|&p| !is_structural(seq.ids[p]))
        .collect();
    if maskable.is_empty() {
        return Err(Error::Tokenizer("sequence has no maskable tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    if positions.is_empty() {
        positions.push(maskable[rng.random_range(0..maskable.len())]);
    }
    let mut masked = seq.clone();
    for &p in &positions {
        masked.ids[p] = MASK;
    }
    Ok(MaskedSequence {
        seq: masked,
        original: seq.ids.clone(),
        positions,
    })
}
