//! Encoder-decoder models with full and step-wise decoding.

mod state;
pub mod transformer;

use std::fmt;
use std::ops::Range;

pub use state::{EncoderOut, IncrementalState};
pub use transformer::{Transformer, TransformerConfig};

use crate::data::MiniBatch;
use crate::error::{Error, Result};
use crate::numerics::{DType, Tape, Tensor, Var};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Canonical ordering of named parameter tensors inside one flat vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let spec = ParamSpec {
            name: name.into(),
            shape,
            offset: self.total,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, slot: usize) -> &ParamSpec {
        &self.specs[slot]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Element counts in canonical order.
    pub fn sizes(&self) -> Vec<usize> {
        self.specs.iter().map(ParamSpec::len).collect()
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// `name shape offset` per line; shape dims joined by `x`.
    pub fn manifest(&self) -> String {
        self.specs
            .iter()
            .map(|s| {
                let dims: Vec<String> = s.shape.iter().map(usize::to_string).collect();
                format!("{} {} {}\n", s.name, dims.join("x"), s.offset)
            })
            .collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut layout = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split(' ').collect();
            let bad = || Error::Integrity(format!("bad manifest line '{line}'"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let shape = parts[1]
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let offset: usize = parts[2].parse().map_err(|_| bad())?;
            if offset != layout.total {
                return Err(Error::Integrity(format!(
                    "manifest offset {offset} for '{}' does not follow {}",
                    parts[0], layout.total
                )));
            }
            layout.push(parts[0], shape);
        }
        Ok(layout)
    }
}

/// Per-call context for stochastic layers during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardCtx {
    pub seed: u64,
    pub step: u64,
    /// Distinguishes sub-batches within one step.
    pub shard: u64,
    pub train: bool,
}

/// A trainable encoder-decoder.
///
/// Parameters live outside the model as one flat vector in `layout()` order;
/// every method takes them explicitly so replicas can hold their own copies.
pub trait Model: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn layout(&self) -> &ParamLayout;
    fn src_vocab(&self) -> usize;
    fn tgt_vocab(&self) -> usize;
    fn max_positions(&self) -> usize;

    /// Deterministic initial parameters for `seed`.
    fn init_params(&self, seed: u64) -> Vec<f32>;

    /// Records teacher-forced decoding of `batch`; returns logits `[rows * T, V]`.
    fn forward_train(&self, params: &[f32], tape: &mut Tape, batch: &MiniBatch, ctx: &ForwardCtx) -> Result<Var>;

    /// Encodes a right-padded `rows x width` source matrix.
    fn forward_encoder(
        &self,
        params: &[f32],
        dtype: DType,
        source: &[u32],
        width: usize,
        lengths: &[usize],
    ) -> Result<EncoderOut>;

    /// Logits `[rows * width, V]` for a `rows x width` target prefix.
    fn forward_decoder_full(
        &self,
        params: &[f32],
        dtype: DType,
        prefix: &[u32],
        width: usize,
        enc: &EncoderOut,
    ) -> Result<Tensor>;

    fn new_incremental_state(&self, rows: usize) -> IncrementalState;

    /// Feeds one token per row; returns logits `[rows, V]` for the new position.
    fn forward_decoder_step(
        &self,
        params: &[f32],
        dtype: DType,
        tokens: &[u32],
        enc: &EncoderOut,
        state: &mut IncrementalState,
    ) -> Result<Tensor>;

    fn clone_box(&self) -> Box<dyn Model>;
}

impl Clone for Box<dyn Model> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Gathers parameter-leaf gradients into a flat vector in canonical order.
/// Parameters that did not influence the root get exact zeros.
pub fn flat_gradients(layout: &ParamLayout, tape: &Tape, root: Var, seed: f32) -> Result<Vec<f32>> {
    let loss = tape.value(root).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let grads = tape.backward(root, seed)?;
    let mut out = vec![0.0f32; layout.total()];
    for (slot, var) in tape.param_leaves() {
        if let Some(g) = grads.get(var) {
            let dst = &mut out[layout.spec(slot).range()];
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
    Ok(out)
}

pub fn register_builtins(registry: &mut Registry) -> Result<()> {
    transformer::register(registry)
}
