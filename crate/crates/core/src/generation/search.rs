use crate::data::{EOS, PAD};
use crate::error::Result;
use crate::generation::{
    empty_result, is_empty_source, masked_log_probs, rank, score_hypothesis, GenConfig, Hypothesis, RowDecoder,
};
use crate::model::{EncoderOut, Model};
use crate::numerics::DType;

/// Encodes right-padded sources in one call.
pub(crate) fn encode_sources(
    model: &dyn Model,
    params: &[f32],
    dtype: DType,
    sources: &[&[u32]],
) -> Result<EncoderOut> {
    let width = sources.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut flat = vec![PAD; sources.len() * width];
    for (r, s) in sources.iter().enumerate() {
        flat[r * width..r * width + s.len()].copy_from_slice(s);
    }
    let lengths: Vec<usize> = sources.iter().map(|s| s.len()).collect();
    model.forward_encoder(params, dtype, &flat, width, &lengths)
}

struct Active {
    row: usize,
    tokens: Vec<u32>,
    logprobs: Vec<f32>,
    cum: f32,
}

struct Group {
    active: Vec<Active>,
    pool: Vec<Hypothesis>,
    done: bool,
}

struct Sentence {
    groups: Vec<Group>,
    max_len: usize,
}

struct Candidate {
    key: f64,
    cum: f32,
    lp: f32,
    hyp: usize,
    token: u32,
}

/// Beam search, or diverse beam search when `cfg.groups > 1`.
///
/// Each group of `beam / groups` hypotheses expands every continuation, keeps
/// the best `2 * size` candidates by cumulative log-probability (minus the
/// diversity penalty), finalizes `</s>` candidates ranked within the first
/// `size`, and carries on with the best `size` unfinished ones. A group stops
/// when `size` finished hypotheses beat anything its unfinished ones could
/// still reach, or when nothing is left to extend.
pub fn beam_search(
    model: &dyn Model,
    params: &[f32],
    dtype: DType,
    sources: &[&[u32]],
    cfg: &GenConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    let size = cfg.beam / cfg.groups;
    let alpha = cfg.lenpen;
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
    let initial: Vec<usize> = (0..live.len())
        .flat_map(|j| std::iter::repeat_n(j, cfg.groups))
        .collect();
    let mut decoder = RowDecoder::new(model, params, dtype, enc.select(&initial)?, cfg.use_cache);
    let mut sentences: Vec<Sentence> = live
        .iter()
        .enumerate()
        .map(|(j, &i)| Sentence {
            max_len: cfg.max_len_for(sources[i].len(), model),
            groups: (0..cfg.groups)
                .map(|g| Group {
                    active: vec![Active {
                        row: j * cfg.groups + g,
                        tokens: Vec::new(),
                        logprobs: Vec::new(),
                        cum: 0.0,
                    }],
                    pool: Vec::new(),
                    done: false,
                })
                .collect(),
        })
        .collect();

    let vocab = model.tgt_vocab();
    let mut step = 0usize;
    while decoder.rows() > 0 {
        let logits = decoder.next_logits()?;
        for sent in &mut sentences {
            let force_eos = step + 1 >= sent.max_len;
            let mut counts = vec![0u32; vocab];
            for group in sent.groups.iter_mut().filter(|g| !g.done) {
                let mut cands: Vec<Candidate> = Vec::new();
                for (h, a) in group.active.iter().enumerate() {
                    let lp = masked_log_probs(&logits, a.row, force_eos);
                    for (v, &x) in lp.iter().enumerate() {
                        if x == f32::NEG_INFINITY {
                            continue;
                        }
                        let cum = a.cum + x;
                        let key = if counts[v] == 0 {
                            f64::from(cum)
                        } else {
                            f64::from(cum) - cfg.diversity * f64::from(counts[v])
                        };
                        cands.push(Candidate {
                            key,
                            cum,
                            lp: x,
                            hyp: h,
                            token: v as u32,
                        });
                    }
                }
                cands.sort_by(|a, b| {
                    b.key
                        .total_cmp(&a.key)
                        .then(a.hyp.cmp(&b.hyp))
                        .then(a.token.cmp(&b.token))
                });
                cands.truncate(2 * size);
                let mut next: Vec<Active> = Vec::with_capacity(size);
                for (r, c) in cands.iter().enumerate() {
                    let parent = &group.active[c.hyp];
                    let extend = |t: u32| {
                        let mut tokens = parent.tokens.clone();
                        tokens.push(t);
                        let mut logprobs = parent.logprobs.clone();
                        logprobs.push(c.lp);
                        (tokens, logprobs)
                    };
                    if c.token == EOS {
                        if r < size {
                            let (tokens, logprobs) = extend(EOS);
                            group.pool.push(Hypothesis::finished(tokens, logprobs, c.cum, alpha));
                            counts[EOS as usize] += 1;
                        }
                    } else if next.len() < size {
                        let (tokens, logprobs) = extend(c.token);
                        next.push(Active {
                            row: parent.row,
                            tokens,
                            logprobs,
                            cum: c.cum,
                        });
                        counts[c.token as usize] += 1;
                    }
                }
                group.active = next;
                group.pool.sort_by(rank);
                let bounded = alpha >= 0.0 && group.pool.len() >= size && {
                    let best = group.active.iter().map(|a| a.cum).fold(f32::NEG_INFINITY, f32::max);
                    group.pool[size - 1].score >= score_hypothesis(f64::from(best), sent.max_len, alpha)
                };
                if group.active.is_empty() || bounded {
                    group.done = true;
                    group.active.clear();
                }
            }
        }

        let mut order = Vec::new();
        let mut tokens = Vec::new();
        for a in sentences
            .iter_mut()
            .flat_map(|s| s.groups.iter_mut())
            .flat_map(|g| g.active.iter_mut())
        {
            order.push(a.row);
            tokens.push(*a.tokens.last().expect("active hypotheses are non-empty"));
            a.row = order.len() - 1;
        }
        if order.is_empty() {
            break;
        }
        decoder.advance(&order, &tokens)?;
        step += 1;
    }

    for (sent, &i) in sentences.into_iter().zip(&live) {
        let mut all: Vec<Hypothesis> = sent.groups.into_iter().flat_map(|g| g.pool).collect();
        all.sort_by(rank);
        results[i] = all;
    }
    Ok(results)
}
