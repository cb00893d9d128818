//! Symbol inventories and transcript tokenization.
//!
//! A [`SymbolSet`] is `[BLANK] + graphemes + slu_labels`. Graphemes are single
//! characters; SLU labels are names that appear in transcripts as `⟦NAME⟧`.
//! SLU labels always occupy the highest indices so that vocabulary extension
//! only ever appends.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// Reserved spelling of the BLANK symbol, also the mandatory first line of a
/// symbol-set file.
pub const BLANK: &str = "<blank>";
pub const TAG_OPEN: char = '⟦';
pub const TAG_CLOSE: char = '⟧';

#[derive(Debug, Error, PartialEq)]
pub enum SymbolError {
    #[error("duplicate symbol {0:?}")]
    Duplicate(String),
    #[error("symbol {0:?} is reserved")]
    Reserved(String),
    #[error("grapheme {0:?} must be exactly one character")]
    NotSingleChar(String),
    #[error("SLU label {0:?} must be non-empty with no tag brackets or whitespace (the first label needs two or more characters)")]
    BadLabel(String),
    #[error("symbol inventory needs at least 2 entries including BLANK, got {0}")]
    TooSmall(usize),
    #[error("unknown character {ch:?} at offset {offset}")]
    UnknownChar { ch: char, offset: usize },
    #[error("unknown tag ⟦{tag}⟧ at offset {offset}")]
    UnknownTag { tag: String, offset: usize },
    #[error("unterminated tag starting at offset {0}")]
    UnterminatedTag(usize),
    #[error("symbol id {0} out of range")]
    BadId(usize),
    #[error("blank id is not a valid label")]
    BlankInLabels,
    #[error("symbol file: {0}")]
    File(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UnknownPolicy {
    #[default]
    Strict,
    Skip,
}

/// Ordered inventory of distinct symbols with BLANK at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolSet {
    symbols: Vec<String>,
    n_graphemes: usize,
    index: HashMap<String, usize>,
}

impl SymbolSet {
    pub const BLANK_INDEX: usize = 0;

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_index(&self) -> usize {
        Self::BLANK_INDEX
    }

    pub fn n_graphemes(&self) -> usize {
        self.n_graphemes
    }

    pub fn n_slu_labels(&self) -> usize {
        self.symbols.len() - 1 - self.n_graphemes
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn graphemes(&self) -> &[String] {
        &self.symbols[1..1 + self.n_graphemes]
    }

    pub fn slu_labels(&self) -> &[String] {
        &self.symbols[1 + self.n_graphemes..]
    }

    pub fn lookup(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol_at(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn is_slu(&self, index: usize) -> bool {
        index > self.n_graphemes && index < self.symbols.len()
    }

    /// A new set with `labels` appended after the existing SLU labels.
    pub fn extend(&self, labels: &[String]) -> Result<SymbolSet, SymbolError> {
        let mut slu: Vec<String> = self.slu_labels().to_vec();
        slu.extend(labels.iter().cloned());
        build_symbol_set(self.graphemes(), &slu)
    }

    /// Writes the one-symbol-per-line file form.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            let _ = writeln!(s, "{sym}");
        }
        s
    }

    /// Parses the file form. Single-character lines before the first
    /// multi-character line are graphemes; everything after is an SLU label.
    pub fn from_file_string(text: &str) -> Result<SymbolSet, SymbolError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(BLANK) => {}
            other => {
                return Err(SymbolError::File(format!(
                    "first line must be {BLANK:?}, got {other:?}"
                )))
            }
        }
        let mut graphemes = Vec::new();
        let mut labels = Vec::new();
        for line in lines {
            if line.chars().count() == 1 && labels.is_empty() {
                graphemes.push(line.to_string());
            } else if line.is_empty() {
                return Err(SymbolError::File("empty line".into()));
            } else {
                labels.push(line.to_string());
            }
        }
        build_symbol_set(&graphemes, &labels)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_file_string())
    }

    pub fn load(path: &Path) -> Result<SymbolSet, SymbolError> {
        let text = std::fs::read_to_string(path).map_err(|e| SymbolError::File(format!("{}: {e}", path.display())))?;
        Self::from_file_string(&text)
    }
}

/// Target symbol sequence; never contains BLANK.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    /// Validates every id against `set`.
    pub fn new(ids: Vec<usize>, set: &SymbolSet) -> Result<Self, SymbolError> {
        for &id in &ids {
            if id == SymbolSet::BLANK_INDEX {
                return Err(SymbolError::BlankInLabels);
            }
            if id >= set.len() {
                return Err(SymbolError::BadId(id));
            }
        }
        Ok(Self(ids))
    }

    /// Wraps ids already known to be valid non-blank indices.
    pub fn from_ids_unchecked(ids: Vec<usize>) -> Self {
        debug_assert!(!ids.contains(&SymbolSet::BLANK_INDEX));
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }
}

/// Builds `[BLANK] + graphemes + slu_labels`.
pub fn build_symbol_set<S: AsRef<str>>(graphemes: &[S], slu_labels: &[S]) -> Result<SymbolSet, SymbolError> {
    let total = 1 + graphemes.len() + slu_labels.len();
    if total < 2 {
        return Err(SymbolError::TooSmall(total));
    }
    let mut symbols = Vec::with_capacity(total);
    let mut index = HashMap::with_capacity(total);
    symbols.push(BLANK.to_string());
    index.insert(BLANK.to_string(), 0);
    for (is_label, s) in graphemes
        .iter()
        .map(|g| (false, g.as_ref()))
        .chain(slu_labels.iter().map(|l| (true, l.as_ref())))
    {
        if s == BLANK {
            return Err(SymbolError::Reserved(s.to_string()));
        }
        if is_label {
            let first = symbols.len() == 1 + graphemes.len();
            let bad = s.is_empty()
                || (first && s.chars().count() < 2)
                || s.contains(TAG_OPEN)
                || s.contains(TAG_CLOSE)
                || s.chars().any(char::is_whitespace);
            if bad {
                return Err(SymbolError::BadLabel(s.to_string()));
            }
        } else {
            let mut chars = s.chars();
            let one = chars.next().is_some() && chars.next().is_none();
            if !one {
                return Err(SymbolError::NotSingleChar(s.to_string()));
            }
            if s.starts_with(TAG_OPEN) || s.starts_with(TAG_CLOSE) {
                return Err(SymbolError::Reserved(s.to_string()));
            }
        }
        if index.insert(s.to_string(), symbols.len()).is_some() {
            return Err(SymbolError::Duplicate(s.to_string()));
        }
        symbols.push(s.to_string());
    }
    Ok(SymbolSet {
        symbols,
        n_graphemes: graphemes.len(),
        index,
    })
}

/// The default 41-character output inventory: `a`–`z`, space, apostrophe,
/// hyphen, period, comma, and the ten digits. The corpus generator spells
/// numbers out, so the digit slots stay unused filler.
pub fn default_graphemes() -> Vec<String> {
    let mut g: Vec<String> = ('a'..='z').map(String::from).collect();
    g.extend([" ", "'", "-", ".", ","].iter().map(|s| s.to_string()));
    g.extend(('0'..='9').map(String::from));
    g
}

pub fn default_symbol_set() -> SymbolSet {
    build_symbol_set::<String>(&default_graphemes(), &[]).expect("default inventory is valid")
}

/// Splits `text` into symbol ids. Characters are lowercased; `⟦NAME⟧` maps to
/// the SLU symbol `NAME`. Offsets in errors are character offsets.
pub fn tokenize(text: &str, set: &SymbolSet, policy: UnknownPolicy) -> Result<LabelSequence, SymbolError> {
    let mut ids = Vec::with_capacity(text.len());
    let mut chars = text.chars().enumerate().peekable();
    let mut buf = [0u8; 4];
    while let Some((offset, ch)) = chars.next() {
        if ch == TAG_OPEN {
            let mut tag = String::new();
            let mut closed = false;
            for (_, c) in chars.by_ref() {
                if c == TAG_CLOSE {
                    closed = true;
                    break;
                }
                tag.push(c);
            }
            if !closed {
                return Err(SymbolError::UnterminatedTag(offset));
            }
            match set.lookup(&tag).filter(|&i| set.is_slu(i)) {
                Some(id) => ids.push(id),
                None if policy == UnknownPolicy::Skip => {}
                None => return Err(SymbolError::UnknownTag { tag, offset }),
            }
            continue;
        }
        for lc in ch.to_lowercase() {
            let key: &str = lc.encode_utf8(&mut buf);
            match set.lookup(key).filter(|&i| i != 0 && !set.is_slu(i)) {
                Some(id) => ids.push(id),
                None if policy == UnknownPolicy::Skip => {}
                None => return Err(SymbolError::UnknownChar { ch, offset }),
            }
        }
    }
    Ok(LabelSequence(ids))
}

/// Inverse of [`tokenize`] for in-set text.
pub fn detokenize(ids: &LabelSequence, set: &SymbolSet) -> String {
    let mut out = String::new();
    for &id in ids.ids() {
        let sym = set.symbol_at(id).unwrap_or("");
        if set.is_slu(id) {
            out.push(TAG_OPEN);
            out.push_str(sym);
            out.push(TAG_CLOSE);
        } else {
            out.push_str(sym);
        }
    }
    out
}

/// Drops SLU symbols, keeping only graphemes.
pub fn strip_slu(ids: &LabelSequence, set: &SymbolSet) -> LabelSequence {
    LabelSequence(ids.ids().iter().copied().filter(|&i| !set.is_slu(i)).collect())
}
