use crate::data::BOS;
use crate::error::Result;
use crate::model::{EncoderOut, IncrementalState, Model};
use crate::numerics::{DType, Tensor};

/// Decoder rows with their prefixes, encoder states and (optionally) caches,
/// kept aligned: row `i` of every component belongs to hypothesis `i`.
pub struct RowDecoder<'a> {
    model: &'a dyn Model,
    params: &'a [f32],
    dtype: DType,
    enc: EncoderOut,
    state: Option<IncrementalState>,
    prefixes: Vec<Vec<u32>>,
}

impl<'a> RowDecoder<'a> {
    /// One row per encoder row, each starting from `<s>`.
    pub fn new(model: &'a dyn Model, params: &'a [f32], dtype: DType, enc: EncoderOut, use_cache: bool) -> Self {
        let rows = enc.rows();
        Self {
            model,
            params,
            dtype,
            state: use_cache.then(|| model.new_incremental_state(rows)),
            prefixes: vec![vec![BOS]; rows],
            enc,
        }
    }

    pub fn rows(&self) -> usize {
        self.prefixes.len()
    }

    pub fn prefix(&self, row: usize) -> &[u32] {
        &self.prefixes[row]
    }

    /// Logits `[rows, V]` for the position after every prefix.
    pub fn next_logits(&mut self) -> Result<Tensor> {
        match &mut self.state {
            Some(state) => {
                let last: Vec<u32> = self
                    .prefixes
                    .iter()
                    .map(|p| *p.last().expect("prefix starts with <s>"))
                    .collect();
                self.model
                    .forward_decoder_step(self.params, self.dtype, &last, &self.enc, state)
            }
            None => {
                let width = self.prefixes[0].len();
                let flat: Vec<u32> = self.prefixes.concat();
                let full = self
                    .model
                    .forward_decoder_full(self.params, self.dtype, &flat, width, &self.enc)?;
                let rows: Vec<usize> = (0..self.rows()).map(|r| r * width + width - 1).collect();
                full.select_rows(&rows)
            }
        }
    }

    /// New row `i` continues old row `order[i]` with `tokens[i]`.
    pub fn advance(&mut self, order: &[usize], tokens: &[u32]) -> Result<()> {
        if let Some(state) = &mut self.state {
            state.reorder(order)?;
        }
        self.enc = self.enc.select(order)?;
        self.prefixes = order
            .iter()
            .zip(tokens)
            .map(|(&i, &t)| {
                let mut p = self.prefixes[i].clone();
                p.push(t);
                p
            })
            .collect();
        Ok(())
    }
}
