use crate::data::dictionary::{BOS, PAD};
use crate::error::{Error, Result};

/// One source/target example; both sides end with `</s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Position in the original corpus.
    pub index: usize,
}

impl SequencePair {
    pub fn new(source: Vec<u32>, target: Vec<u32>, index: usize) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Invalid(format!("pair {index} has an empty side")));
        }
        Ok(Self { source, target, index })
    }

    pub fn validate(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        let bad = |ids: &[u32], vocab: usize| ids.iter().copied().find(|&id| id as usize >= vocab);
        if let Some(id) = bad(&self.source, src_vocab) {
            return Err(Error::Bounds {
                index: id as usize,
                len: src_vocab,
            });
        }
        if let Some(id) = bad(&self.target, tgt_vocab) {
            return Err(Error::Bounds {
                index: id as usize,
                len: tgt_vocab,
            });
        }
        Ok(())
    }
}

/// Right-padded id matrices for a group of pairs.
///
/// `target_input` is the target shifted right behind `<s>`; `target_output` is
/// the target itself. Row `r` of every matrix belongs to `indices[r]`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MiniBatch {
    pub source: Vec<u32>,
    pub source_width: usize,
    pub target_input: Vec<u32>,
    pub target_output: Vec<u32>,
    pub target_width: usize,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
    /// Non-pad tokens in `target_output`.
    pub ntokens: usize,
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn collate<'a>(pairs: impl IntoIterator<Item = &'a SequencePair>) -> Self {
        let pairs: Vec<&SequencePair> = pairs.into_iter().collect();
        let source_width = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let target_width = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let rows = pairs.len();
        let mut source = vec![PAD; rows * source_width];
        let mut target_input = vec![PAD; rows * target_width];
        let mut target_output = vec![PAD; rows * target_width];
        for (r, p) in pairs.iter().enumerate() {
            source[r * source_width..r * source_width + p.source.len()].copy_from_slice(&p.source);
            let t = &mut target_input[r * target_width..r * target_width + p.target.len()];
            t[0] = BOS;
            t[1..].copy_from_slice(&p.target[..p.target.len() - 1]);
            target_output[r * target_width..r * target_width + p.target.len()].copy_from_slice(&p.target);
        }
        let target_lengths: Vec<usize> = pairs.iter().map(|p| p.target.len()).collect();
        Self {
            source,
            source_width,
            target_input,
            target_output,
            target_width,
            source_lengths: pairs.iter().map(|p| p.source.len()).collect(),
            ntokens: target_lengths.iter().sum(),
            target_lengths,
            indices: pairs.iter().map(|p| p.index).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn source_row(&self, r: usize) -> &[u32] {
        &self.source[r * self.source_width..r * self.source_width + self.source_lengths[r]]
    }

    pub fn target_row(&self, r: usize) -> &[u32] {
        &self.target_output[r * self.target_width..r * self.target_width + self.target_lengths[r]]
    }

    /// Reconstructs the pairs this batch was built from.
    pub fn pairs(&self) -> Vec<SequencePair> {
        (0..self.len())
            .map(|r| SequencePair {
                source: self.source_row(r).to_vec(),
                target: self.target_row(r).to_vec(),
                index: self.indices[r],
            })
            .collect()
    }

    /// Padded cost: rows times the wider of the two padded sides.
    pub fn cost(&self) -> usize {
        self.len() * self.source_width.max(self.target_width)
    }

    /// Splits rows into `parts` contiguous, near-equal chunks (possibly empty).
    pub fn split(&self, parts: usize) -> Vec<MiniBatch> {
        assert!(parts > 0, "split into zero parts");
        let pairs = self.pairs();
        let base = pairs.len() / parts;
        let extra = pairs.len() % parts;
        let mut out = Vec::with_capacity(parts);
        let mut start = 0;
        for p in 0..parts {
            let n = base + usize::from(p < extra);
            out.push(MiniBatch::collate(&pairs[start..start + n]));
            start += n;
        }
        out
    }

    /// Stacks batches row-wise, re-padding to the widest member.
    pub fn concat(batches: &[MiniBatch]) -> MiniBatch {
        let pairs: Vec<SequencePair> = batches.iter().flat_map(MiniBatch::pairs).collect();
        MiniBatch::collate(&pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dictionary::EOS;

    fn pair(src: &[u32], tgt: &[u32], index: usize) -> SequencePair {
        SequencePair::new(src.to_vec(), tgt.to_vec(), index).unwrap()
    }

    #[test]
    fn collate_pads_and_shifts() {
        let b = MiniBatch::collate(&[pair(&[5, 6, EOS], &[7, EOS], 0), pair(&[5, EOS], &[8, 9, 7, EOS], 1)]);
        assert_eq!(b.source_width, 3);
        assert_eq!(b.target_width, 4);
        assert_eq!(b.source, vec![5, 6, EOS, 5, EOS, PAD]);
        assert_eq!(b.target_input, vec![BOS, 7, PAD, PAD, BOS, 8, 9, 7]);
        assert_eq!(b.target_output, vec![7, EOS, PAD, PAD, 8, 9, 7, EOS]);
        assert_eq!(b.ntokens, 6);
        assert_eq!(b.ntokens, b.target_lengths.iter().sum::<usize>());
        assert_eq!(b.cost(), 8);
    }

    #[test]
    fn split_then_concat_roundtrips() {
        let pairs: Vec<_> = (0..5).map(|i| pair(&[4, EOS], &vec![4; i + 1], i)).collect();
        let b = MiniBatch::collate(&pairs);
        let parts = b.split(3);
        assert_eq!(parts.iter().map(MiniBatch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(MiniBatch::concat(&parts), b);
        let many = b.split(7);
        assert_eq!(many.len(), 7);
        assert!(many[6].is_empty());
        assert_eq!(many[6].ntokens, 0);
    }

    #[test]
    fn empty_side_rejected() {
        assert!(SequencePair::new(vec![], vec![EOS], 0).is_err());
    }
}
