//! Search over step-wise decoder scores.

mod decoder;
mod sampling;
mod search;

use std::cmp::Ordering;

use crate::data::{EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{DType, Tensor};
use crate::registry::KeySpec;

pub use decoder::RowDecoder;
pub use sampling::top_k_sample;
pub use search::beam_search;

/// Search settings. `groups > 1` turns beam search into diverse beam search;
/// `sampling` switches to top-k sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub beam: usize,
    /// Length penalty exponent.
    pub lenpen: f64,
    /// Generated tokens including `</s>`; `None` means `2 * source length + 8`.
    pub max_len: Option<usize>,
    pub groups: usize,
    pub diversity: f64,
    pub sampling: bool,
    pub topk: usize,
    pub temperature: f64,
    /// Padded source tokens per inference batch.
    pub max_tokens: usize,
    pub nbest: usize,
    /// Off recomputes the full prefix every step instead of using the cache.
    pub use_cache: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            lenpen: 0.6,
            max_len: None,
            groups: 1,
            diversity: 0.0,
            sampling: false,
            topk: 1,
            temperature: 1.0,
            max_tokens: 4096,
            nbest: 1,
            use_cache: true,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::ConfigValue {
                key: key.into(),
                message,
            })
        };
        if self.beam < 1 {
            return bad("beam", "must be at least 1".into());
        }
        if self.groups < 1 || !self.beam.is_multiple_of(self.groups) {
            return bad(
                "diverse_groups",
                format!("{} groups do not divide beam {}", self.groups, self.beam),
            );
        }
        if self.topk < 1 {
            return bad("topk", "must be at least 1".into());
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature", format!("{} is not positive", self.temperature));
        }
        if self.max_len == Some(0) {
            return bad("max_len", "must be at least 1".into());
        }
        if self.max_tokens < 1 {
            return bad("max_tokens", "must be at least 1".into());
        }
        if self.nbest < 1 {
            return bad("nbest", "must be at least 1".into());
        }
        if !self.lenpen.is_finite() || !self.diversity.is_finite() {
            return bad("lenpen", "length penalty and diversity strength must be finite".into());
        }
        Ok(())
    }

    /// Generation keys with their defaults, for the run schema.
    pub fn keys() -> Vec<KeySpec> {
        let d = Self::default();
        vec![
            KeySpec::new("beam", d.beam as i64, "beam width"),
            KeySpec::new("lenpen", d.lenpen, "length penalty exponent"),
            KeySpec::new(
                "max_len",
                0i64,
                "maximum generated tokens including </s>; 0 means 2 * source + 8",
            ),
            KeySpec::new("diverse_groups", d.groups as i64, "diverse beam search groups"),
            KeySpec::new("diverse_strength", d.diversity, "diverse beam search penalty"),
            KeySpec::new("sampling", d.sampling, "top-k sampling instead of beam search"),
            KeySpec::new("topk", d.topk as i64, "candidates kept when sampling"),
            KeySpec::new("temperature", d.temperature, "sampling temperature"),
            KeySpec::new("nbest", d.nbest as i64, "hypotheses printed per input"),
        ]
    }

    fn max_len_for(&self, source_len: usize, model: &dyn Model) -> usize {
        self.max_len
            .unwrap_or(2 * source_len + 8)
            .min(model.max_positions())
            .max(1)
    }
}

/// A generated sequence. `tokens` ends with `</s>` once finished.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub step_logprobs: Vec<f32>,
    /// Left fold of `step_logprobs`.
    pub cum_logprob: f32,
    pub score: f64,
    /// Decoding step at which `</s>` was emitted.
    pub finish_step: usize,
}

impl Hypothesis {
    pub(crate) fn finished(tokens: Vec<u32>, step_logprobs: Vec<f32>, cum: f32, alpha: f64) -> Self {
        let len = tokens.len();
        Self {
            score: score_hypothesis(f64::from(cum), len, alpha),
            finish_step: len - 1,
            tokens,
            step_logprobs,
            cum_logprob: cum,
        }
    }

    /// Tokens without the trailing `</s>`.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// `cum_logprob / length^alpha`.
pub fn score_hypothesis(cum_logprob: f64, length: usize, alpha: f64) -> f64 {
    cum_logprob / (length.max(1) as f64).powf(alpha)
}

/// Best first: higher score, then earlier finish, then lexicographically smaller.
pub(crate) fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.finish_step.cmp(&b.finish_step))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Groups source indices for inference: longest first, packed while
/// `rows * longest <= max_tokens`.
pub fn batch_for_inference(sources: &[Vec<u32>], max_tokens: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, s)) = sources.iter().enumerate().find(|(_, s)| s.len() > max_tokens) {
        return Err(Error::Capacity(format!(
            "input {i} has {} tokens, more than max_tokens={max_tokens}",
            s.len()
        )));
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by(|&a, &b| sources[b].len().cmp(&sources[a].len()).then(a.cmp(&b)));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let width = current.first().map_or(sources[i].len(), |&f| sources[f].len()).max(1);
        if !current.is_empty() && (current.len() + 1) * width > max_tokens {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Decodes every source and returns hypotheses in input order, best first.
pub fn generate(
    model: &dyn Model,
    params: &[f32],
    dtype: DType,
    sources: &[Vec<u32>],
    cfg: &GenConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    let mut out: Vec<Option<Vec<Hypothesis>>> = vec![None; sources.len()];
    for batch in batch_for_inference(sources, cfg.max_tokens)? {
        let srcs: Vec<&[u32]> = batch.iter().map(|&i| sources[i].as_slice()).collect();
        let results = if cfg.sampling {
            top_k_sample(model, params, dtype, &srcs, &batch, cfg)?
        } else {
            beam_search(model, params, dtype, &srcs, cfg)?
        };
        for (i, r) in batch.into_iter().zip(results) {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every input batched")).collect())
}

/// `index \t score \t text` lines for the top `nbest` hypotheses of each input.
pub fn format_output(results: &[Vec<Hypothesis>], nbest: usize, detok: impl Fn(&[u32]) -> String) -> String {
    let mut out = String::new();
    for (i, hyps) in results.iter().enumerate() {
        for h in hyps.iter().take(nbest) {
            out.push_str(&format!("{i}\t{:.4}\t{}\n", h.score, detok(h.content())));
        }
    }
    out
}

/// A source counts as empty when it holds nothing but `</s>` and padding.
pub(crate) fn is_empty_source(src: &[u32]) -> bool {
    src.iter().all(|&t| t == EOS || t == PAD)
}

pub(crate) fn empty_result() -> Vec<Hypothesis> {
    vec![Hypothesis::finished(vec![EOS], vec![0.0], 0.0, 0.0)]
}

/// Row `r` of `logits` turned into masked next-token log-probabilities.
///
/// `<s>` and `<pad>` are never generated; on the last allowed step only `</s>` is.
pub(crate) fn masked_log_probs(logits: &Tensor, r: usize, force_eos: bool) -> Vec<f32> {
    let row = logits.row(r);
    let mut lp = vec![0.0f32; row.len()];
    crate::numerics::ops::log_softmax_row(row, &mut lp);
    for (v, x) in lp.iter_mut().enumerate() {
        let v = v as u32;
        if v == crate::data::BOS || v == PAD || (force_eos && v != EOS) {
            *x = f32::NEG_INFINITY;
        }
    }
    lp
}
