use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<s>", "<pad>", "</s>", "<unk>"];

/// Symbol table with the four reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dictionary {
    symbols: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Default for Dictionary {
    fn default() -> Self {
        Self::new()
    }
}

impl Dictionary {
    /// Reserved symbols only.
    pub fn new() -> Self {
        let symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Self {
            counts: vec![0; symbols.len()],
            symbols,
            index,
        }
    }

    /// Keeps symbols seen at least `min_count` times, most frequent first,
    /// ties in lexicographic order.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: u64) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Invalid("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(sym, c)| c >= min_count && !RESERVED.contains(&sym))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut dict = Self::new();
        for (sym, c) in kept {
            dict.push(sym, c);
        }
        Ok(dict)
    }

    fn push(&mut self, symbol: &str, count: u64) {
        let id = self.symbols.len() as u32;
        self.symbols.push(symbol.to_string());
        self.counts.push(count);
        self.index.insert(symbol.to_string(), id);
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() == RESERVED.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    /// Looks up each token (unknowns map to `<unk>`) and appends `</s>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Joins symbols with spaces, dropping bos/pad/eos.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != PAD && id != EOS)
            .map(|&id| self.symbol(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `symbol count` per line in id order, reserved ids omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (sym, c) in self.symbols.iter().zip(&self.counts).skip(RESERVED.len()) {
            let _ = writeln!(out, "{sym} {c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut dict = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (sym, count) = line
                .rsplit_once(' ')
                .ok_or_else(|| Error::Invalid(format!("dictionary line {}: expected 'symbol count'", lineno + 1)))?;
            let count = count
                .parse()
                .map_err(|_| Error::Invalid(format!("dictionary line {}: bad count '{count}'", lineno + 1)))?;
            if dict.index.contains_key(sym) {
                return Err(Error::Invalid(format!(
                    "dictionary line {}: duplicate symbol '{sym}'",
                    lineno + 1
                )));
            }
            dict.push(sym, count);
        }
        Ok(dict)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
