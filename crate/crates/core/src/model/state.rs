use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encoder states `[rows * width, d]` plus the unpadded length of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOut {
    pub states: Tensor,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl EncoderOut {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    /// Row `i` of the result is row `order[i]` of `self`.
    pub fn select(&self, order: &[usize]) -> Result<EncoderOut> {
        let block = self.width * self.dim();
        let data = gather_blocks(self.states.data(), block, self.rows(), order)?;
        Ok(EncoderOut {
            states: Tensor::new(vec![order.len() * self.width, self.dim()], data)?.into_dtype(self.states.dtype()),
            width: self.width,
            lengths: order.iter().map(|&i| self.lengths[i]).collect(),
        })
    }
}

fn gather_blocks(data: &[f32], block: usize, rows: usize, order: &[usize]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(order.len() * block);
    for &i in order {
        if i >= rows {
            return Err(Error::Bounds { index: i, len: rows });
        }
        out.extend_from_slice(&data[i * block..(i + 1) * block]);
    }
    Ok(out)
}

/// Cached attention keys and values for step-wise decoding.
///
/// Self-attention caches hold `rows x step x d` per decoder layer; cross-attention
/// caches hold the projected encoder states `rows x src_width x d` and are filled
/// on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalState {
    pub(crate) rows: usize,
    pub(crate) step: usize,
    pub(crate) dim: usize,
    pub(crate) self_k: Vec<Vec<f32>>,
    pub(crate) self_v: Vec<Vec<f32>>,
    pub(crate) cross_k: Vec<Vec<f32>>,
    pub(crate) cross_v: Vec<Vec<f32>>,
    pub(crate) src_width: usize,
    pub(crate) src_lengths: Vec<usize>,
}

impl IncrementalState {
    pub fn new(rows: usize, layers: usize, dim: usize) -> Self {
        Self {
            rows,
            step: 0,
            dim,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            cross_k: vec![Vec::new(); layers],
            cross_v: vec![Vec::new(); layers],
            src_width: 0,
            src_lengths: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of tokens fed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn layers(&self) -> usize {
        self.self_k.len()
    }

    /// Cached positions per layer; always equals `step()`.
    pub fn cache_len(&self, layer: usize) -> usize {
        if self.rows == 0 || self.dim == 0 {
            return self.step;
        }
        self.self_k[layer].len() / (self.rows * self.dim)
    }

    pub fn self_keys(&self, layer: usize) -> &[f32] {
        &self.self_k[layer]
    }

    pub fn self_values(&self, layer: usize) -> &[f32] {
        &self.self_v[layer]
    }

    /// Row `i` of every cache becomes old row `order[i]`; duplicates allowed.
    pub fn reorder(&mut self, order: &[usize]) -> Result<()> {
        if let Some(&bad) = order.iter().find(|&&i| i >= self.rows) {
            return Err(Error::Bounds {
                index: bad,
                len: self.rows,
            });
        }
        let self_block = self.step * self.dim;
        let cross_block = self.src_width * self.dim;
        for l in 0..self.layers() {
            self.self_k[l] = gather_blocks(&self.self_k[l], self_block, self.rows, order)?;
            self.self_v[l] = gather_blocks(&self.self_v[l], self_block, self.rows, order)?;
            if !self.cross_k[l].is_empty() {
                self.cross_k[l] = gather_blocks(&self.cross_k[l], cross_block, self.rows, order)?;
                self.cross_v[l] = gather_blocks(&self.cross_v[l], cross_block, self.rows, order)?;
            }
        }
        if !self.src_lengths.is_empty() {
            self.src_lengths = order.iter().map(|&i| self.src_lengths[i]).collect();
        }
        self.rows = order.len();
        Ok(())
    }

    /// Appends one new position per row to a layer's self-attention cache.
    pub(crate) fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        let (d, step) = (self.dim, self.step);
        let grow = |old: &[f32], new: &[f32]| {
            let mut out = Vec::with_capacity(self.rows * (step + 1) * d);
            for r in 0..self.rows {
                out.extend_from_slice(&old[r * step * d..(r + 1) * step * d]);
                out.extend_from_slice(&new[r * d..(r + 1) * d]);
            }
            out
        };
        let nk = grow(&self.self_k[layer], k);
        let nv = grow(&self.self_v[layer], v);
        self.self_k[layer] = nk;
        self.self_v[layer] = nv;
    }
}
