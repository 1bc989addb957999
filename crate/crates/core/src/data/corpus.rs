use std::fs;
use std::path::Path;

use crate::data::batch::SequencePair;
use crate::data::dictionary::Dictionary;
use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

/// One whitespace-tokenized sentence per line.
pub fn read_tokenized(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize_lines(&text))
}

pub fn tokenize_lines(text: &str) -> Vec<Sentence> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

/// Reads a source/target file pair; line counts must agree.
pub fn read_parallel(source: &Path, target: &Path) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    let src = read_tokenized(source)?;
    let tgt = read_tokenized(target)?;
    if src.len() != tgt.len() {
        return Err(Error::Invalid(format!(
            "{} has {} lines but {} has {}",
            source.display(),
            src.len(),
            target.display(),
            tgt.len()
        )));
    }
    Ok((src, tgt))
}

/// Encodes aligned sentences into pairs indexed by line number.
pub fn encode_pairs(
    src_dict: &Dictionary,
    tgt_dict: &Dictionary,
    source: &[Sentence],
    target: &[Sentence],
) -> Result<Vec<SequencePair>> {
    if source.len() != target.len() {
        return Err(Error::Invalid(format!(
            "{} source sentences but {} target sentences",
            source.len(),
            target.len()
        )));
    }
    source
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (s, t))| SequencePair::new(src_dict.encode(s), tgt_dict.encode(t), i))
        .collect()
}
