//! Tasks own the dictionaries and the training corpus.

use std::fmt;
use std::path::Path;

use crate::data::corpus::{encode_pairs, read_parallel, Sentence};
use crate::data::{Dictionary, SequencePair};
use crate::error::{Error, Result};
use crate::registry::{KeySpec, Plugin, Registry, Tasks};

pub trait Task: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn src_dict(&self) -> &Dictionary;
    fn tgt_dict(&self) -> &Dictionary;
    fn train_pairs(&self) -> &[SequencePair];

    fn encode_source(&self, line: &str) -> Vec<u32> {
        let toks: Vec<&str> = line.split_whitespace().collect();
        self.src_dict().encode(&toks)
    }

    fn encode_target(&self, line: &str) -> Vec<u32> {
        let toks: Vec<&str> = line.split_whitespace().collect();
        self.tgt_dict().encode(&toks)
    }

    fn decode_target(&self, ids: &[u32]) -> String {
        self.tgt_dict().decode(ids)
    }
}

#[derive(Clone, Debug)]
pub struct TranslationTask {
    src_dict: Dictionary,
    tgt_dict: Dictionary,
    pairs: Vec<SequencePair>,
}

impl TranslationTask {
    /// Builds dictionaries from the sentences and encodes them.
    pub fn from_sentences(source: &[Sentence], target: &[Sentence], min_count: u64) -> Result<Self> {
        let src_dict = Dictionary::build(source, min_count)?;
        let tgt_dict = Dictionary::build(target, min_count)?;
        let pairs = encode_pairs(&src_dict, &tgt_dict, source, target)?;
        Ok(Self {
            src_dict,
            tgt_dict,
            pairs,
        })
    }

    pub fn from_files(source: &Path, target: &Path, min_count: u64) -> Result<Self> {
        let (s, t) = read_parallel(source, target)?;
        Self::from_sentences(&s, &t, min_count)
    }

    /// A task with fixed dictionaries and no training data (inference).
    pub fn from_dictionaries(src_dict: Dictionary, tgt_dict: Dictionary) -> Self {
        Self {
            src_dict,
            tgt_dict,
            pairs: Vec::new(),
        }
    }

    /// Encodes a corpus against this task's dictionaries.
    pub fn with_pairs_from(&self, source: &[Sentence], target: &[Sentence]) -> Result<Self> {
        Ok(Self {
            pairs: encode_pairs(&self.src_dict, &self.tgt_dict, source, target)?,
            ..self.clone()
        })
    }
}

impl Task for TranslationTask {
    fn name(&self) -> &str {
        "translation"
    }

    fn src_dict(&self) -> &Dictionary {
        &self.src_dict
    }

    fn tgt_dict(&self) -> &Dictionary {
        &self.tgt_dict
    }

    fn train_pairs(&self) -> &[SequencePair] {
        &self.pairs
    }
}

pub fn register_builtins(registry: &mut Registry) -> Result<()> {
    registry.register::<Tasks>(
        "translation",
        Plugin::new(
            "seqforge",
            vec![
                KeySpec::new("source_path", "", "training source file"),
                KeySpec::new("target_path", "", "training target file"),
                KeySpec::new("min_count", 1i64, "minimum symbol count kept in a dictionary"),
            ],
            |c, _| {
                let (src, tgt) = (c.get_str("source_path")?, c.get_str("target_path")?);
                if src.is_empty() || tgt.is_empty() {
                    return Err(Error::Construction {
                        component: "task 'translation'".into(),
                        message: "source_path and target_path are required".into(),
                    });
                }
                let min_count = c.get_usize("min_count")? as u64;
                Ok(Box::new(TranslationTask::from_files(Path::new(src), Path::new(tgt), min_count)?) as Box<dyn Task>)
            },
        ),
    )
}
