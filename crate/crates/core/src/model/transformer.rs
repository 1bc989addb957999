//! Pre-norm transformer encoder-decoder.
//!
//! Every pass runs on a [`Tape`], including inference, so training, full
//! decoding and step-wise decoding share one set of row-wise kernels. Linear
//! layers, layer norms and attention compute each row with a fixed operation
//! order, which is what makes step-wise logits bitwise equal to the last row of
//! a full decoder pass.

use crate::data::{MiniBatch, PAD};
use crate::error::{Error, Result};
use crate::model::{EncoderOut, ForwardCtx, IncrementalState, Model, ParamLayout};
use crate::numerics::ops::{sinusoidal_positions, AttentionSpec};
use crate::numerics::rng::derive_stream_id;
use crate::numerics::{DType, RngStream, Tape, Tensor, Var};
use crate::registry::{ArchitectureDef, BuildContext, Config, KeySpec, Models, Plugin, Registry, Value};

const LN_EPS: f32 = 1e-5;
const INIT_TAG: u64 = 0x1417;
const DROPOUT_TAG: u64 = 0xd209;

/// Standard deviation of embedding init. Small enough that the tied output
/// projection starts close to uniform.
const EMBED_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Layers in each of the encoder and decoder.
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
    pub dropout: f32,
    /// Ties the output projection to the target embedding.
    pub share_embeddings: bool,
}

impl TransformerConfig {
    pub fn keys() -> Vec<KeySpec> {
        vec![
            KeySpec::new("d_model", 64i64, "embedding and hidden width"),
            KeySpec::new("n_heads", 4i64, "attention heads"),
            KeySpec::new("n_layers", 2i64, "layers in the encoder and in the decoder"),
            KeySpec::new("d_ffn", 128i64, "feed-forward inner width"),
            KeySpec::new("max_positions", 256i64, "longest supported sequence"),
            KeySpec::new("dropout", 0.0, "dropout rate"),
            KeySpec::new("share_embeddings", true, "tie target embedding and output projection"),
        ]
    }

    pub fn from_config(c: &Config, ctx: &BuildContext) -> Result<Self> {
        let cfg = Self {
            src_vocab: ctx.src_vocab,
            tgt_vocab: ctx.tgt_vocab,
            d_model: c.get_usize("d_model")?,
            n_heads: c.get_usize("n_heads")?,
            n_layers: c.get_usize("n_layers")?,
            d_ffn: c.get_usize("d_ffn")?,
            max_positions: c.get_usize("max_positions")?,
            dropout: c.get_real("dropout")? as f32,
            share_embeddings: c.get_bool("share_embeddings")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(Error::Construction {
                component: "transformer".into(),
                message,
            })
        };
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return fail(format!(
                "vocabularies must hold the 4 reserved symbols ({} / {})",
                self.src_vocab, self.tgt_vocab
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ffn == 0 || self.max_positions == 0 {
            return fail("d_ffn and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attn {
    wq: usize,
    bq: usize,
    /// Keys carry no bias: a shared key offset shifts every score of a query
    /// equally, so softmax is blind to it and its gradient is identically zero.
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncLayer {
    self_norm: Norm,
    self_attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_norm: Norm,
    self_attn: Attn,
    cross_norm: Norm,
    cross_attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Slots {
    src_embed: usize,
    tgt_embed: usize,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
    out_proj: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    layout: ParamLayout,
    inits: Vec<Init>,
    slots: Slots,
    positions: Vec<f32>,
}

struct Builder {
    layout: ParamLayout,
    inits: Vec<Init>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.inits.push(init);
        self.layout.push(name, shape)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{prefix}.gamma"), vec![d], Init::Ones),
            beta: self.push(format!("{prefix}.beta"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let weight = |b: &mut Self, p: &str| b.push(format!("{prefix}.{p}.weight"), vec![d, d], Init::Xavier);
        let bias = |b: &mut Self, p: &str| b.push(format!("{prefix}.{p}.bias"), vec![d], Init::Zeros);
        let (wq, bq) = (weight(self, "q"), bias(self, "q"));
        let wk = weight(self, "k");
        let (wv, bv) = (weight(self, "v"), bias(self, "v"));
        let (wo, bo) = (weight(self, "out"), bias(self, "out"));
        Attn {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            w1: self.push(format!("{prefix}.fc1.weight"), vec![d, f], Init::Xavier),
            b1: self.push(format!("{prefix}.fc1.bias"), vec![f], Init::Zeros),
            w2: self.push(format!("{prefix}.fc2.weight"), vec![f, d], Init::Xavier),
            b2: self.push(format!("{prefix}.fc2.bias"), vec![d], Init::Zeros),
        }
    }
}

/// Parameter leaves bound on one tape.
struct Bound(Vec<Var>);

impl Bound {
    fn get(&self, slot: usize) -> Var {
        self.0[slot]
    }
}

/// Where the keys and values of an attention call come from.
enum KvSource {
    /// Project these rows with the layer's key/value weights.
    Rows(Var),
    /// Already projected.
    Projected(Var, Var),
}

impl Transformer {
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let mut b = Builder {
            layout: ParamLayout::new(),
            inits: Vec::new(),
        };
        let src_embed = b.push("encoder.embed".into(), vec![cfg.src_vocab, d], Init::Embedding);
        let tgt_embed = b.push("decoder.embed".into(), vec![cfg.tgt_vocab, d], Init::Embedding);
        let enc = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                EncLayer {
                    self_norm: b.norm(&format!("{p}.self_attn_norm"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.norm", d);
        let dec = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecLayer {
                    self_norm: b.norm(&format!("{p}.self_attn_norm"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    cross_norm: b.norm(&format!("{p}.cross_attn_norm"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    ffn_norm: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.norm", d);
        let out_proj =
            (!cfg.share_embeddings).then(|| b.push("decoder.out_proj".into(), vec![cfg.tgt_vocab, d], Init::Embedding));
        let positions = sinusoidal_positions(0..cfg.max_positions, d);
        Ok(Self {
            slots: Slots {
                src_embed,
                tgt_embed,
                enc,
                enc_norm,
                dec,
                dec_norm,
                out_proj,
            },
            layout: b.layout,
            inits: b.inits,
            cfg,
            positions,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    fn bind(&self, tape: &mut Tape, params: &[f32]) -> Result<Bound> {
        if params.len() != self.layout.total() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.layout.total(),
                params.len()
            )));
        }
        let vars = self
            .layout
            .specs()
            .iter()
            .enumerate()
            .map(|(slot, spec)| {
                let t = Tensor::new(spec.shape.clone(), params[spec.range()].to_vec())?;
                Ok(tape.param(slot, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound(vars))
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width > self.cfg.max_positions {
            return Err(Error::Capacity(format!(
                "sequence length {width} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        Ok(())
    }

    fn position_rows(&self, positions: impl Iterator<Item = usize>) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in positions {
            self.check_width(p + 1)?;
            data.extend_from_slice(&self.positions[p * d..(p + 1) * d]);
            rows += 1;
        }
        Tensor::new(vec![rows, d], data)
    }

    fn embed(&self, tape: &mut Tape, table: Var, ids: &[u32], positions: Tensor) -> Result<Var> {
        let x = tape.embedding(table, ids.to_vec())?;
        let x = tape.scale(x, (self.cfg.d_model as f32).sqrt())?;
        let pos = tape.constant(positions);
        tape.add(x, pos)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, ctx: Option<&ForwardCtx>, site: &mut u64) -> Result<Var> {
        let Some(ctx) = ctx.filter(|c| c.train && self.cfg.dropout > 0.0) else {
            return Ok(x);
        };
        *site += 1;
        let p = self.cfg.dropout;
        let keep = 1.0 / (1.0 - p);
        let mut rng = RngStream::new(ctx.seed, derive_stream_id(&[DROPOUT_TAG, ctx.step, ctx.shard, *site]));
        let mask = (0..tape.value(x).len())
            .map(|_| if (rng.next_f64() as f32) < p { 0.0 } else { keep })
            .collect();
        tape.dropout(x, mask)
    }

    fn norm(&self, tape: &mut Tape, b: &Bound, x: Var, n: Norm) -> Result<Var> {
        tape.layer_norm(x, b.get(n.gamma), b.get(n.beta), LN_EPS)
    }

    fn project_kv(&self, tape: &mut Tape, b: &Bound, rows: Var, a: &Attn) -> Result<(Var, Var)> {
        let k = tape.linear(rows, b.get(a.wk), None)?;
        let v = tape.linear(rows, b.get(a.wv), Some(b.get(a.bv)))?;
        Ok((k, v))
    }

    fn attend(&self, tape: &mut Tape, b: &Bound, x: Var, kv: KvSource, a: &Attn, spec: AttentionSpec) -> Result<Var> {
        let q = tape.linear(x, b.get(a.wq), Some(b.get(a.bq)))?;
        let (k, v) = match kv {
            KvSource::Rows(rows) => self.project_kv(tape, b, rows, a)?,
            KvSource::Projected(k, v) => (k, v),
        };
        let o = tape.attention(q, k, v, spec)?;
        tape.linear(o, b.get(a.wo), Some(b.get(a.bo)))
    }

    fn feed_forward(&self, tape: &mut Tape, b: &Bound, x: Var, f: Ffn) -> Result<Var> {
        let h = tape.linear(x, b.get(f.w1), Some(b.get(f.b1)))?;
        let h = tape.gelu(h)?;
        tape.linear(h, b.get(f.w2), Some(b.get(f.b2)))
    }

    fn encode_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        source: &[u32],
        width: usize,
        lengths: &[usize],
        ctx: Option<&ForwardCtx>,
    ) -> Result<Var> {
        let rows = lengths.len();
        if source.len() != rows * width {
            return Err(Error::Shape(format!(
                "source has {} ids for {rows} x {width}",
                source.len()
            )));
        }
        self.check_width(width)?;
        let mut site = 0;
        let pos = self.position_rows((0..rows).flat_map(|_| 0..width))?;
        let mut x = self.embed(tape, b.get(self.slots.src_embed), source, pos)?;
        x = self.dropout(tape, x, ctx, &mut site)?;
        let spec = AttentionSpec {
            batch: rows,
            q_len: width,
            k_len: width,
            heads: self.cfg.n_heads,
            key_lens: lengths.to_vec(),
            causal: false,
            q_offset: 0,
        };
        for layer in &self.slots.enc {
            let h = self.norm(tape, b, x, layer.self_norm)?;
            let h = self.attend(tape, b, h, KvSource::Rows(h), &layer.self_attn, spec.clone())?;
            let h = self.dropout(tape, h, ctx, &mut site)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, b, x, layer.ffn_norm)?;
            let h = self.feed_forward(tape, b, h, layer.ffn)?;
            let h = self.dropout(tape, h, ctx, &mut site)?;
            x = tape.add(x, h)?;
        }
        self.norm(tape, b, x, self.slots.enc_norm)
    }

    fn output(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = self.norm(tape, b, x, self.slots.dec_norm)?;
        let table = b.get(self.slots.out_proj.unwrap_or(self.slots.tgt_embed));
        tape.matmul_nt(h, table)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &[u32],
        width: usize,
        enc: Var,
        enc_width: usize,
        enc_lengths: &[usize],
        ctx: Option<&ForwardCtx>,
    ) -> Result<Var> {
        let rows = enc_lengths.len();
        if prefix.len() != rows * width {
            return Err(Error::Shape(format!(
                "prefix has {} ids for {rows} x {width}",
                prefix.len()
            )));
        }
        self.check_width(width)?;
        let mut site = 1000;
        let pos = self.position_rows((0..rows).flat_map(|_| 0..width))?;
        let mut x = self.embed(tape, b.get(self.slots.tgt_embed), prefix, pos)?;
        x = self.dropout(tape, x, ctx, &mut site)?;
        let self_spec = AttentionSpec {
            batch: rows,
            q_len: width,
            k_len: width,
            heads: self.cfg.n_heads,
            key_lens: vec![width; rows],
            causal: true,
            q_offset: 0,
        };
        let cross_spec = AttentionSpec {
            batch: rows,
            q_len: width,
            k_len: enc_width,
            heads: self.cfg.n_heads,
            key_lens: enc_lengths.to_vec(),
            causal: false,
            q_offset: 0,
        };
        for layer in &self.slots.dec {
            let h = self.norm(tape, b, x, layer.self_norm)?;
            let h = self.attend(tape, b, h, KvSource::Rows(h), &layer.self_attn, self_spec.clone())?;
            let h = self.dropout(tape, h, ctx, &mut site)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, b, x, layer.cross_norm)?;
            let h = self.attend(tape, b, h, KvSource::Rows(enc), &layer.cross_attn, cross_spec.clone())?;
            let h = self.dropout(tape, h, ctx, &mut site)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, b, x, layer.ffn_norm)?;
            let h = self.feed_forward(tape, b, h, layer.ffn)?;
            let h = self.dropout(tape, h, ctx, &mut site)?;
            x = tape.add(x, h)?;
        }
        self.output(tape, b, x)
    }
}

impl Model for Transformer {
    fn name(&self) -> &str {
        "transformer"
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn src_vocab(&self) -> usize {
        self.cfg.src_vocab
    }

    fn tgt_vocab(&self) -> usize {
        self.cfg.tgt_vocab
    }

    fn max_positions(&self) -> usize {
        self.cfg.max_positions
    }

    fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut out = vec![0.0f32; self.layout.total()];
        for (slot, (spec, init)) in self.layout.specs().iter().zip(&self.inits).enumerate() {
            let dst = &mut out[spec.range()];
            let mut rng = RngStream::new(seed, derive_stream_id(&[INIT_TAG, slot as u64]));
            match init {
                Init::Zeros => {}
                Init::Ones => dst.fill(1.0),
                Init::Xavier => {
                    let a = (6.0 / (spec.shape[0] + spec.shape[1]) as f32).sqrt();
                    dst.iter_mut().for_each(|v| *v = rng.uniform(-a, a));
                }
                Init::Embedding => {
                    let d = spec.shape[1];
                    let a = 3f32.sqrt() * EMBED_STD;
                    dst.iter_mut().for_each(|v| *v = rng.uniform(-a, a));
                    let pad = PAD as usize;
                    dst[pad * d..(pad + 1) * d].fill(0.0);
                }
            }
        }
        out
    }

    fn forward_train(&self, params: &[f32], tape: &mut Tape, batch: &MiniBatch, ctx: &ForwardCtx) -> Result<Var> {
        let b = self.bind(tape, params)?;
        let enc = self.encode_on(
            tape,
            &b,
            &batch.source,
            batch.source_width,
            &batch.source_lengths,
            Some(ctx),
        )?;
        self.decode_on(
            tape,
            &b,
            &batch.target_input,
            batch.target_width,
            enc,
            batch.source_width,
            &batch.source_lengths,
            Some(ctx),
        )
    }

    fn forward_encoder(
        &self,
        params: &[f32],
        dtype: DType,
        source: &[u32],
        width: usize,
        lengths: &[usize],
    ) -> Result<EncoderOut> {
        let mut tape = Tape::new(dtype);
        let b = self.bind(&mut tape, params)?;
        let enc = self.encode_on(&mut tape, &b, source, width, lengths, None)?;
        Ok(EncoderOut {
            states: tape.value(enc).clone(),
            width,
            lengths: lengths.to_vec(),
        })
    }

    fn forward_decoder_full(
        &self,
        params: &[f32],
        dtype: DType,
        prefix: &[u32],
        width: usize,
        enc: &EncoderOut,
    ) -> Result<Tensor> {
        let mut tape = Tape::new(dtype);
        let b = self.bind(&mut tape, params)?;
        let enc_var = tape.constant(enc.states.clone());
        let logits = self.decode_on(&mut tape, &b, prefix, width, enc_var, enc.width, &enc.lengths, None)?;
        Ok(tape.value(logits).clone())
    }

    fn new_incremental_state(&self, rows: usize) -> IncrementalState {
        IncrementalState::new(rows, self.cfg.n_layers, self.cfg.d_model)
    }

    fn forward_decoder_step(
        &self,
        params: &[f32],
        dtype: DType,
        tokens: &[u32],
        enc: &EncoderOut,
        state: &mut IncrementalState,
    ) -> Result<Tensor> {
        let rows = state.rows;
        let d = self.cfg.d_model;
        if tokens.len() != rows {
            return Err(Error::Shape(format!("{} tokens for {rows} state rows", tokens.len())));
        }
        if state.layers() != self.cfg.n_layers || state.dim != d {
            return Err(Error::Shape("incremental state belongs to another model shape".into()));
        }
        let first = state.step == 0;
        if first && enc.rows() != rows {
            return Err(Error::Shape(format!(
                "encoder has {} rows, state has {rows}",
                enc.rows()
            )));
        }
        let pos = state.step;
        let mut tape = Tape::new(dtype);
        let b = self.bind(&mut tape, params)?;
        let positions = self.position_rows(std::iter::repeat_n(pos, rows))?;
        let mut x = self.embed(&mut tape, b.get(self.slots.tgt_embed), tokens, positions)?;
        let enc_var = first.then(|| tape.constant(enc.states.clone()));
        if first {
            state.src_width = enc.width;
            state.src_lengths = enc.lengths.clone();
        }
        let self_spec = AttentionSpec {
            batch: rows,
            q_len: 1,
            k_len: pos + 1,
            heads: self.cfg.n_heads,
            key_lens: vec![pos + 1; rows],
            causal: true,
            q_offset: pos,
        };
        let cross_spec = AttentionSpec {
            batch: rows,
            q_len: 1,
            k_len: state.src_width,
            heads: self.cfg.n_heads,
            key_lens: state.src_lengths.clone(),
            causal: false,
            q_offset: 0,
        };
        for (l, layer) in self.slots.dec.iter().enumerate() {
            let h = self.norm(&mut tape, &b, x, layer.self_norm)?;
            let (k_new, v_new) = self.project_kv(&mut tape, &b, h, &layer.self_attn)?;
            let (kd, vd) = (tape.value(k_new).data().to_vec(), tape.value(v_new).data().to_vec());
            state.append(l, &kd, &vd);
            let k = tape.constant(Tensor::new(vec![rows * (pos + 1), d], state.self_k[l].clone())?);
            let v = tape.constant(Tensor::new(vec![rows * (pos + 1), d], state.self_v[l].clone())?);
            let h = self.attend(
                &mut tape,
                &b,
                h,
                KvSource::Projected(k, v),
                &layer.self_attn,
                self_spec.clone(),
            )?;
            x = tape.add(x, h)?;

            let h = self.norm(&mut tape, &b, x, layer.cross_norm)?;
            if let Some(e) = enc_var {
                let (k, v) = self.project_kv(&mut tape, &b, e, &layer.cross_attn)?;
                state.cross_k[l] = tape.value(k).data().to_vec();
                state.cross_v[l] = tape.value(v).data().to_vec();
            }
            let cross_rows = rows * state.src_width;
            let k = tape.constant(Tensor::new(vec![cross_rows, d], state.cross_k[l].clone())?);
            let v = tape.constant(Tensor::new(vec![cross_rows, d], state.cross_v[l].clone())?);
            let h = self.attend(
                &mut tape,
                &b,
                h,
                KvSource::Projected(k, v),
                &layer.cross_attn,
                cross_spec.clone(),
            )?;
            x = tape.add(x, h)?;

            let h = self.norm(&mut tape, &b, x, layer.ffn_norm)?;
            let h = self.feed_forward(&mut tape, &b, h, layer.ffn)?;
            x = tape.add(x, h)?;
        }
        let logits = self.output(&mut tape, &b, x)?;
        state.step += 1;
        Ok(tape.value(logits).clone())
    }

    fn clone_box(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}

pub(crate) fn register(registry: &mut Registry) -> Result<()> {
    registry.register::<Models>(
        "transformer",
        Plugin::new("seqforge", TransformerConfig::keys(), |c, ctx| {
            Ok(Box::new(Transformer::new(TransformerConfig::from_config(c, ctx)?)?) as Box<dyn Model>)
        }),
    )?;
    registry.register_architecture(ArchitectureDef {
        name: "tiny_transformer".into(),
        base_model: "transformer".into(),
        overrides: vec![
            ("d_model".into(), Value::Int(16)),
            ("n_heads".into(), Value::Int(2)),
            ("n_layers".into(), Value::Int(1)),
            ("d_ffn".into(), Value::Int(32)),
            ("share_embeddings".into(), Value::Bool(true)),
            ("dropout".into(), Value::Real(0.0)),
        ],
        registrant: "seqforge".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SequencePair, BOS, EOS};
    use crate::model::flat_gradients;
    use crate::numerics::reduce::{grad_check_with, Stencil};
    use proptest::prelude::*;

    pub(crate) fn toy(d: usize, heads: usize, layers: usize, vocab: usize) -> Transformer {
        Transformer::new(TransformerConfig {
            src_vocab: vocab,
            tgt_vocab: vocab,
            d_model: d,
            n_heads: heads,
            n_layers: layers,
            d_ffn: 2 * d,
            max_positions: 32,
            dropout: 0.0,
            share_embeddings: true,
        })
        .unwrap()
    }

    fn random_ids(rng: &mut RngStream, n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|_| 4 + rng.below(vocab - 4) as u32).collect()
    }

    fn encode_one(m: &Transformer, p: &[f32], src: &[u32]) -> EncoderOut {
        m.forward_encoder(p, DType::F32, src, src.len(), &[src.len()]).unwrap()
    }

    #[test]
    fn step_matches_full_bitwise() {
        let m = toy(16, 2, 2, 12);
        let p = m.init_params(3);
        let mut rng = RngStream::new(1, 1);
        let src = random_ids(&mut rng, 5, 12);
        let enc = encode_one(&m, &p, &src);
        let mut prefix = vec![BOS];
        prefix.extend(random_ids(&mut rng, 6, 12));
        let mut state = m.new_incremental_state(1);
        for t in 0..prefix.len() {
            let step = m
                .forward_decoder_step(&p, DType::F32, &prefix[t..t + 1], &enc, &mut state)
                .unwrap();
            let full = m
                .forward_decoder_full(&p, DType::F32, &prefix[..t + 1], t + 1, &enc)
                .unwrap();
            let last = full.row(t);
            assert!(
                step.data().iter().zip(last).all(|(a, b)| a.to_bits() == b.to_bits()),
                "step {t}"
            );
            assert_eq!(state.step(), t + 1);
            assert_eq!(state.cache_len(0), t + 1);
        }
    }

    #[test]
    fn fp16_step_close_to_full() {
        let m = toy(16, 2, 1, 10);
        let p = m.init_params(4);
        let src = vec![5, 6, 7, EOS];
        let enc = m.forward_encoder(&p, DType::F16E, &src, 4, &[4]).unwrap();
        let prefix = [BOS, 5, 6, 7];
        let mut state = m.new_incremental_state(1);
        for t in 0..prefix.len() {
            let step = m
                .forward_decoder_step(&p, DType::F16E, &prefix[t..t + 1], &enc, &mut state)
                .unwrap();
            let full = m
                .forward_decoder_full(&p, DType::F16E, &prefix[..t + 1], t + 1, &enc)
                .unwrap();
            let diff = step
                .data()
                .iter()
                .zip(full.row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(diff <= 1e-2, "step {t}: {diff}");
        }
    }

    #[test]
    fn identical_rows_identical_outputs_and_pad_invariance() {
        let m = toy(8, 2, 1, 9);
        let p = m.init_params(0);
        let src = [5, 6, EOS, 5, 6, EOS];
        let enc = m.forward_encoder(&p, DType::F32, &src, 3, &[3, 3]).unwrap();
        assert!(enc.states.data()[..24]
            .iter()
            .zip(&enc.states.data()[24..])
            .all(|(a, b)| a == b));
        let padded = m
            .forward_encoder(&p, DType::F32, &[5, 6, EOS, PAD, PAD], 5, &[3])
            .unwrap();
        assert!(padded.states.data()[..24]
            .iter()
            .zip(&enc.states.data()[..24])
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let empty = m.forward_encoder(&p, DType::F32, &[], 0, &[]).unwrap();
        assert_eq!(empty.rows(), 0);
    }

    #[test]
    fn causal_perturbation_leaves_earlier_logits() {
        let m = toy(8, 2, 1, 9);
        let p = m.init_params(0);
        let enc = encode_one(&m, &p, &[5, 6, EOS]);
        let a = m
            .forward_decoder_full(&p, DType::F32, &[BOS, 5, 6, 7], 4, &enc)
            .unwrap();
        let b = m
            .forward_decoder_full(&p, DType::F32, &[BOS, 5, 8, 4], 4, &enc)
            .unwrap();
        for t in 0..2 {
            assert!(a.row(t).iter().zip(b.row(t)).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn reorder_duplicates_continue_identically() {
        let m = toy(8, 2, 1, 9);
        let p = m.init_params(2);
        let enc = m
            .forward_encoder(&p, DType::F32, &[5, 6, EOS, 7, EOS, PAD], 3, &[3, 2])
            .unwrap();
        let mut state = m.new_incremental_state(2);
        m.forward_decoder_step(&p, DType::F32, &[BOS, BOS], &enc, &mut state)
            .unwrap();
        m.forward_decoder_step(&p, DType::F32, &[5, 6], &enc, &mut state)
            .unwrap();
        state.reorder(&[1, 1]).unwrap();
        let out = m
            .forward_decoder_step(&p, DType::F32, &[7, 7], &enc, &mut state)
            .unwrap();
        assert_eq!(out.row(0), out.row(1));
        let solo_enc = m.forward_encoder(&p, DType::F32, &[7, EOS], 2, &[2]).unwrap();
        let full = m
            .forward_decoder_full(&p, DType::F32, &[BOS, 6, 7], 3, &solo_enc)
            .unwrap();
        assert!(full
            .row(2)
            .iter()
            .zip(out.row(0))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn state_row_mismatch_is_shape_error() {
        let m = toy(8, 2, 1, 9);
        let p = m.init_params(2);
        let enc = encode_one(&m, &p, &[5, EOS]);
        let mut state = m.new_incremental_state(2);
        assert!(matches!(
            m.forward_decoder_step(&p, DType::F32, &[BOS], &enc, &mut state),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn too_long_is_capacity_error() {
        let m = toy(8, 2, 1, 9);
        let p = m.init_params(2);
        let src = vec![5u32; 40];
        assert!(matches!(
            m.forward_encoder(&p, DType::F32, &src, 40, &[40]),
            Err(Error::Capacity(_))
        ));
    }

    fn toy_batch() -> MiniBatch {
        MiniBatch::collate(&[
            SequencePair::new(vec![5, 6, EOS], vec![6, 5, EOS], 0).unwrap(),
            SequencePair::new(vec![7, EOS], vec![7, EOS], 1).unwrap(),
        ])
    }

    fn loss_and_grad(m: &Transformer, params: &[f32], batch: &MiniBatch) -> (f32, Vec<f32>) {
        let mut tape = Tape::new(DType::F32);
        let logits = m
            .forward_train(params, &mut tape, batch, &ForwardCtx::default())
            .unwrap();
        let lp = tape.log_softmax(logits).unwrap();
        let v = m.tgt_vocab();
        let mut w = vec![0.0f32; batch.target_output.len() * v];
        for (i, &t) in batch.target_output.iter().enumerate() {
            if t != PAD {
                w[i * v + t as usize] = -1.0;
            }
        }
        let loss = tape.weighted_sum(lp, w).unwrap();
        let g = flat_gradients(m.layout(), &tape, loss, 1.0).unwrap();
        (tape.value(loss).data()[0], g)
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient_and_runs_repeat() {
        let m = toy(8, 2, 1, 12);
        let p = m.init_params(1);
        let batch = toy_batch();
        let (_, g) = loss_and_grad(&m, &p, &batch);
        let spec = m.layout().spec(m.layout().slot_of("encoder.embed").unwrap());
        let row = &g[spec.offset + 10 * 8..spec.offset + 11 * 8];
        assert!(row.iter().all(|&v| v == 0.0));
        let (_, g2) = loss_and_grad(&m, &p, &batch);
        assert!(g.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn finite_difference_agreement() {
        let m = toy(8, 2, 1, 8);
        let p = m.init_params(7);
        let batch = toy_batch();
        let theta: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let report = grad_check_with(
            |t| {
                let params: Vec<f32> = t.iter().map(|&v| v as f32).collect();
                let (l, g) = loss_and_grad(&m, &params, &batch);
                (l as f64, g.iter().map(|&v| v as f64).collect())
            },
            &theta,
            1e-2,
            Stencil::FivePoint,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }

    #[test]
    fn init_is_deterministic_and_pad_row_zero() {
        let m = toy(8, 2, 1, 9);
        assert_eq!(m.init_params(5), m.init_params(5));
        assert_ne!(m.init_params(5), m.init_params(6));
        let p = m.init_params(5);
        let spec = m.layout().spec(0);
        assert!(p[spec.offset + 8..spec.offset + 16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manifest_roundtrip() {
        let m = toy(8, 2, 2, 9);
        let text = m.layout().manifest();
        assert_eq!(&ParamLayout::from_manifest(&text).unwrap(), m.layout());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn incremental_equivalence(
            d in prop::sample::select(vec![8usize, 16]),
            heads in prop::sample::select(vec![1usize, 2]),
            layers in 1usize..=2,
            seed in 0u64..1000,
            len in 1usize..=8,
        ) {
            let m = toy(d, heads, layers, 11);
            let p = m.init_params(seed);
            let mut rng = RngStream::new(seed, 9);
            let src_len = 1 + rng.below(6);
            let src = random_ids(&mut rng, src_len, 11);
            let enc = encode_one(&m, &p, &src);
            let mut prefix = vec![BOS];
            prefix.extend(random_ids(&mut rng, len - 1, 11));
            let mut state = m.new_incremental_state(1);
            let mut last = None;
            for t in 0..len {
                last = Some(m.forward_decoder_step(&p, DType::F32, &prefix[t..t + 1], &enc, &mut state).unwrap());
            }
            let full = m.forward_decoder_full(&p, DType::F32, &prefix, len, &enc).unwrap();
            let step = last.unwrap();
            prop_assert!(step.data().iter().zip(full.row(len - 1)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
