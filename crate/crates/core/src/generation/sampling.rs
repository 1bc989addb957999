use crate::data::EOS;
use crate::error::Result;
use crate::generation::search::encode_sources;
use crate::generation::{empty_result, is_empty_source, masked_log_probs, GenConfig, Hypothesis, RowDecoder};
use crate::model::Model;
use crate::numerics::rng::derive_stream_id;
use crate::numerics::{DType, RngStream};

const SAMPLING_STREAM: u64 = 0x5a4d;

/// Draws one token from the `k` most likely entries of `logprobs` after
/// dividing by `temperature`. Ties rank the smaller id first; `-inf` entries
/// are never drawn.
pub fn sample_top_k(logprobs: &[f32], k: usize, temperature: f64, rng: &mut RngStream) -> usize {
    let mut ids: Vec<usize> = (0..logprobs.len())
        .filter(|&v| logprobs[v] != f32::NEG_INFINITY)
        .collect();
    ids.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    ids.truncate(k.max(1));
    let top = f64::from(logprobs[ids[0]]);
    let weights: Vec<f64> = ids
        .iter()
        .map(|&v| ((f64::from(logprobs[v]) - top) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (&v, w) in ids.iter().zip(&weights) {
        if u < *w {
            return v;
        }
        u -= w;
    }
    *ids.last().expect("at least one candidate")
}

/// One sampled hypothesis per source. `indices` name the inputs so each draws
/// from its own stream regardless of how inputs are batched.
pub fn top_k_sample(
    model: &dyn Model,
    params: &[f32],
    dtype: DType,
    sources: &[&[u32]],
    indices: &[usize],
    cfg: &GenConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    let mut results: Vec<Vec<Hypothesis>> = vec![Vec::new(); sources.len()];
    let live: Vec<usize> = (0..sources.len()).filter(|&i| !is_empty_source(sources[i])).collect();
    for i in 0..sources.len() {
        if is_empty_source(sources[i]) {
            results[i] = empty_result();
        }
    }
    if live.is_empty() {
        return Ok(results);
    }
    let live_sources: Vec<&[u32]> = live.iter().map(|&i| sources[i]).collect();
    let enc = encode_sources(model, params, dtype, &live_sources)?;
    let mut decoder = RowDecoder::new(model, params, dtype, enc, cfg.use_cache);

    struct Row {
        input: usize,
        rng: RngStream,
        max_len: usize,
        tokens: Vec<u32>,
        logprobs: Vec<f32>,
        cum: f32,
    }
    let mut rows: Vec<Row> = live
        .iter()
        .map(|&i| Row {
            input: i,
            rng: RngStream::new(cfg.seed, derive_stream_id(&[SAMPLING_STREAM, indices[i] as u64])),
            max_len: cfg.max_len_for(sources[i].len(), model),
            tokens: Vec::new(),
            logprobs: Vec::new(),
            cum: 0.0,
        })
        .collect();

    while !rows.is_empty() {
        let logits = decoder.next_logits()?;
        let mut keep = Vec::new();
        let mut next_rows = Vec::new();
        let mut next_tokens = Vec::new();
        for (r, mut row) in rows.into_iter().enumerate() {
            let lp = masked_log_probs(&logits, r, row.tokens.len() + 1 >= row.max_len);
            let v = sample_top_k(&lp, cfg.topk, cfg.temperature, &mut row.rng);
            row.tokens.push(v as u32);
            row.logprobs.push(lp[v]);
            row.cum += lp[v];
            if v as u32 == EOS {
                let h = Hypothesis::finished(row.tokens, row.logprobs, row.cum, cfg.lenpen);
                results[row.input] = vec![h];
            } else {
                keep.push(r);
                next_tokens.push(v as u32);
                next_rows.push(row);
            }
        }
        rows = next_rows;
        if !rows.is_empty() {
            decoder.advance(&keep, &next_tokens)?;
        }
    }
    Ok(results)
}
