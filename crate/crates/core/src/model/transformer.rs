//! Encoder-decoder forward passes on a [`Tape`].

use std::sync::Arc;

use super::config::{ModelConfig, ShortcutInput};
use super::params::{AttentionIndex, FfnIndex, KvIndex, Layout, NormIndex, ParamStore};
use crate::attention::{merge_heads, scaled_dot_attention, split_heads, AttentionMask};
use crate::data::vocab::{BOS, PAD};
use crate::error::{Error, Result};
use crate::rng::{SeedStream, StreamRng};
use crate::shortcuts::{key_values, shortcut_source, FusedParams, GateParams, KvProjection, LayerHistory, Side, Site};
use crate::tensor::{Real, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// Right-padded id matrix `[batch, len]` with per-row lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Self::with_len(seqs, len)
    }

    /// Pads every row to exactly `len`.
    pub fn with_len(seqs: &[Vec<usize>], len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("sentence {i} of the batch is empty")));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() > len) {
            return Err(Error::InvalidArgument(format!(
                "sentence of length {} exceeds padded length {len}",
                s.len()
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + len - s.len(), PAD);
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Teacher-forcing decoder input: `BOS` followed by each target minus its last token.
    pub fn shifted(targets: &[Vec<usize>], len: usize) -> Result<Self> {
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                std::iter::once(BOS)
                    .chain(t.iter().copied().take(t.len().saturating_sub(1)))
                    .collect()
            })
            .collect();
        if targets.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty target sentence".into()));
        }
        Self::with_len(&inputs, len)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..i * self.len + self.lengths[i]]
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Parallel sentences; targets are expected to end in `EOS`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sources but {} targets",
                src.len(),
                tgt.len()
            )));
        }
        Ok(Self { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(Vec::len).sum()
    }

    pub fn source_tokens(&self) -> usize {
        self.src.iter().map(Vec::len).sum()
    }

    pub fn concat(parts: &[Batch]) -> Batch {
        Batch {
            src: parts.iter().flat_map(|b| b.src.iter().cloned()).collect(),
            tgt: parts.iter().flat_map(|b| b.tgt.iter().cloned()).collect(),
        }
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)` for
/// positions `start..start + len`, row-major `[len, d]`.
pub fn positional_encoding(start: usize, len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..d / 2 {
            let angle = pos / 10_000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = angle.sin();
            out[p * d + 2 * i + 1] = angle.cos();
        }
    }
    out
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)] // one per forward pass
pub enum Mode {
    /// No dropout; parameters enter the tape as constants.
    Eval,
    /// Dropout on; parameters are differentiable leaves.
    Train(StreamRng),
}

/// Gate activations `(r_K, r_V)` produced by one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateRecord {
    pub side: Side,
    pub site: Site,
    pub layer: usize,
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `H_0 ..= H_N`, each `[b, t, d]`.
    pub states: Vec<Var>,
    /// Shortcut input `E` of the encoder.
    pub shortcut: Var,
    pub lengths: Vec<usize>,
}

impl EncoderOutput {
    pub fn top(&self) -> Var {
        *self.states.last().expect("H_0 always present")
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub states: Vec<Var>,
    pub shortcut: Var,
    /// `[b, t, vocab]`
    pub logits: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub tokens: usize,
}

/// Decoder self-attention keys/values of earlier positions, per head.
type PastKv = Option<(Var, Var)>;

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    layout: Arc<Layout>,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = ParamStore::initialize(&layout, &SeedStream::new(config.seed).split("init"));
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        params.check_layout(&layout)?;
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            params: self.params.cast(),
        }
    }

    pub fn forward<'a>(&'a self, tape: &'a mut Tape<T>, mode: Mode) -> Forward<'a, T> {
        let train = matches!(mode, Mode::Train(_));
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), train))
            .collect();
        Forward::with_vars(self, tape, vars, mode)
    }

    /// Sum of target-token log-probabilities under teacher forcing, per pair.
    pub fn sequence_log_probs(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut f = self.forward(&mut tape, Mode::Eval);
        let src = Padded::new(&batch.src)?;
        let len = batch.tgt.iter().map(Vec::len).max().unwrap_or(0);
        let input = Padded::shifted(&batch.tgt, len)?;
        let enc = f.encode(&src)?;
        let dec = f.decode(&input, &enc)?;
        let logits = tape.value(dec.logits);
        let v = self.config.vocab_size;
        Ok(batch
            .tgt
            .iter()
            .enumerate()
            .map(|(b, tgt)| {
                tgt.iter()
                    .enumerate()
                    .map(|(t, &y)| log_softmax_at(&logits.data()[(b * len + t) * v..(b * len + t + 1) * v], y))
                    .sum()
            })
            .collect())
    }
}

/// `log softmax(row)[index]` in 64-bit.
pub fn log_softmax_at<T: Real>(row: &[T], index: usize) -> f64 {
    let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.widen() - max).exp()).sum();
    row[index].widen() - max - z.ln()
}

/// One forward computation of a model on a tape.
pub struct Forward<'a, T: Real> {
    model: &'a Model<T>,
    pub tape: &'a mut Tape<T>,
    vars: Vec<Var>,
    rng: Option<StreamRng>,
    gates: Vec<GateRecord>,
}

impl<'a, T: Real> Forward<'a, T> {
    /// Uses caller-provided vars (in layout order) as the parameters.
    pub fn with_vars(model: &'a Model<T>, tape: &'a mut Tape<T>, vars: Vec<Var>, mode: Mode) -> Self {
        assert_eq!(vars.len(), model.params.len(), "one var per parameter");
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        };
        Self {
            model,
            tape,
            vars,
            rng,
            gates: Vec::new(),
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.vars
    }

    pub fn gates(&self) -> &[GateRecord] {
        &self.gates
    }

    fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    fn config(&self) -> &'a ModelConfig {
        &self.model.config
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => self.tape.dropout(x, self.model.config.dropout_rate, rng),
            None => Ok(x),
        }
    }

    fn layer_norm(&mut self, x: Var, n: NormIndex) -> Result<Var> {
        let z = self.tape.normalize(x, NORM_EPS)?;
        let g = self.tape.mul_row(z, self.var(n.gain))?;
        self.tape.add_row(g, self.var(n.bias))
    }

    fn feed_forward(&mut self, x: Var, f: FfnIndex) -> Result<Var> {
        let h = self.tape.matmul(x, self.var(f.w1))?;
        let h = self.tape.add_row(h, self.var(f.b1))?;
        let h = self.tape.relu(h)?;
        let o = self.tape.matmul(h, self.var(f.w2))?;
        self.tape.add_row(o, self.var(f.b2))
    }

    /// `LayerNorm(x + dropout(y))`
    fn residual(&mut self, x: Var, y: Var, n: NormIndex) -> Result<Var> {
        let y = self.dropout(y)?;
        let s = self.tape.add(x, y)?;
        self.layer_norm(s, n)
    }

    /// Embedding-layer output `H_0` and the shortcut input `E` for positions
    /// `offset..offset + tokens.len`.
    pub fn embed(&mut self, tokens: &Padded, offset: usize) -> Result<(Var, Var)> {
        let c = self.config();
        if offset + tokens.len > c.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                offset + tokens.len,
                c.max_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                c.vocab_size
            )));
        }
        let d = c.d_model;
        let table = self.var(self.model.layout.embed);
        let rows = self.tape.gather(table, &tokens.ids, &[tokens.batch, tokens.len])?;
        let scaled = self.tape.scale(rows, (d as f64).sqrt())?;
        let positioned = if c.positional_encoding {
            let pe = positional_encoding(offset, tokens.len, d);
            let full: Vec<f64> = (0..tokens.batch).flat_map(|_| pe.iter().copied()).collect();
            let pe = self
                .tape
                .constant(Tensor::from_f64(vec![tokens.batch, tokens.len, d], &full)?);
            self.tape.add(scaled, pe)?
        } else {
            scaled
        };
        let h0 = self.dropout(positioned)?;
        let e = match c.shortcut_input {
            ShortcutInput::Embedding => h0,
            ShortcutInput::Lookup => scaled,
        };
        Ok((h0, e))
    }

    fn projection(&self, kv: KvIndex) -> KvProjection {
        let v = |i| self.var(i);
        match kv {
            KvIndex::Plain { wk, wv } => KvProjection::Plain { w_k: v(wk), w_v: v(wv) },
            KvIndex::Gated {
                wk,
                wv,
                wk_sc,
                wv_sc,
                bk,
                bv,
            } => KvProjection::Gated {
                w_k: v(wk),
                w_v: v(wv),
                gate: GateParams {
                    w_k_sc: v(wk_sc),
                    w_v_sc: v(wv_sc),
                    b_k: v(bk),
                    b_v: v(bv),
                },
            },
            KvIndex::Fused { wk, wv, bk, bv } => KvProjection::Fused(FusedParams {
                w_k: v(wk),
                w_v: v(wv),
                b_k: v(bk),
                b_v: v(bv),
            }),
            KvIndex::Residual { wk, wv, wk_sc, wv_sc } => KvProjection::Residual {
                w_k: v(wk),
                w_v: v(wv),
                w_k_sc: v(wk_sc),
                w_v_sc: v(wv_sc),
            },
        }
    }

    /// Per-head keys and values of one attention block.
    fn keys_values(
        &mut self,
        (side, site, layer): (Side, Site, usize),
        kv: KvIndex,
        h: Var,
        source: Option<Var>,
    ) -> Result<(Var, Var)> {
        let projection = self.projection(kv);
        let out = key_values(self.tape, &projection, h, source)?;
        if let Some((key, value)) = out.gates {
            self.gates.push(GateRecord {
                side,
                site,
                layer,
                key,
                value,
            });
        }
        let heads = self.config().head_count;
        Ok((
            split_heads(self.tape, out.k, heads)?,
            split_heads(self.tape, out.v, heads)?,
        ))
    }

    fn attend(&mut self, idx: &AttentionIndex, h_q: Var, k: Var, v: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let q = self.tape.matmul(h_q, self.var(idx.wq))?;
        let q = split_heads(self.tape, q, self.config().head_count)?;
        let context = scaled_dot_attention(self.tape, q, k, v, mask)?;
        let merged = merge_heads(self.tape, context)?;
        self.tape.matmul(merged, self.var(idx.wo))
    }

    fn self_source(&self, side: Side, layer: usize, hidden: &[Var], e: Var) -> Result<Option<Var>> {
        let variant = self.config().variant;
        if !variant.self_shortcut(side) {
            return Ok(None);
        }
        let history = LayerHistory {
            hidden,
            embedding: e,
            source_embedding: None,
        };
        shortcut_source(variant.kind, Site::SelfAttention, layer, &history).map(Some)
    }

    pub fn encode(&mut self, src: &Padded) -> Result<EncoderOutput> {
        let (h0, e) = self.embed(src, 0)?;
        let mask = AttentionMask::padding(&src.lengths, src.len, src.len);
        let mut states = vec![h0];
        let layers = &self.model.layout.encoder;
        for (i, layer) in layers.iter().enumerate() {
            let l = i + 1;
            let h = states[i];
            let source = self.self_source(Side::Encoder, l, &states, e)?;
            let (k, v) = self.keys_values((Side::Encoder, Site::SelfAttention, l), layer.self_attn.kv, h, source)?;
            let a = self.attend(&layer.self_attn, h, k, v, Some(&mask))?;
            let x = self.residual(h, a, layer.norm1)?;
            let f = self.feed_forward(x, layer.ffn)?;
            states.push(self.residual(x, f, layer.norm2)?);
        }
        Ok(EncoderOutput {
            states,
            shortcut: e,
            lengths: src.lengths.clone(),
        })
    }

    /// Per-head cross-attention keys/values of decoder layer `layer` (1-based).
    pub fn cross_keys_values(&mut self, layer: usize, enc: &EncoderOutput) -> Result<(Var, Var)> {
        let variant = self.config().variant;
        let idx = self.model.layout.decoder[layer - 1].cross_attn.kv;
        let source = if variant.cross_shortcut() {
            let history = LayerHistory {
                hidden: &enc.states,
                embedding: enc.shortcut,
                source_embedding: Some(enc.shortcut),
            };
            Some(shortcut_source(variant.kind, Site::CrossAttention, layer, &history)?)
        } else {
            None
        };
        self.keys_values((Side::Decoder, Site::CrossAttention, layer), idx, enc.top(), source)
    }

    /// One decoder layer. With `past`, the new keys/values are appended to
    /// the cached ones; the returned pair is the full self-attention K/V.
    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &mut self,
        layer: usize,
        hidden: &[Var],
        e: Var,
        cross: (Var, Var),
        self_mask: Option<&AttentionMask>,
        cross_mask: &AttentionMask,
        past: PastKv,
    ) -> Result<(Var, Var, Var)> {
        let idx = self.model.layout.decoder[layer - 1].clone();
        let h = hidden[layer - 1];
        let source = self.self_source(Side::Decoder, layer, hidden, e)?;
        let (mut k, mut v) =
            self.keys_values((Side::Decoder, Site::SelfAttention, layer), idx.self_attn.kv, h, source)?;
        if let Some((pk, pv)) = past {
            k = self.tape.concat(&[pk, k], 2)?;
            v = self.tape.concat(&[pv, v], 2)?;
        }
        let a = self.attend(&idx.self_attn, h, k, v, self_mask)?;
        let x = self.residual(h, a, idx.norm1)?;
        let c = self.attend(&idx.cross_attn, x, cross.0, cross.1, Some(cross_mask))?;
        let y = self.residual(x, c, idx.norm2)?;
        let f = self.feed_forward(y, idx.ffn)?;
        Ok((self.residual(y, f, idx.norm3)?, k, v))
    }

    /// Teacher-forced decoder pass over `input` (already `BOS`-shifted).
    pub fn decode(&mut self, input: &Padded, enc: &EncoderOutput) -> Result<DecoderOutput> {
        if input.batch != enc.lengths.len() {
            return Err(Error::shape(
                "decode",
                format!("{} target rows for {} source rows", input.batch, enc.lengths.len()),
            ));
        }
        let src_len = self.tape.shape(enc.top())[1];
        let (h0, e) = self.embed(input, 0)?;
        let self_mask = AttentionMask::causal_padded(&input.lengths, input.len);
        let cross_mask = AttentionMask::padding(&enc.lengths, input.len, src_len);
        let mut states = vec![h0];
        for l in 1..=self.model.layout.decoder.len() {
            let cross = self.cross_keys_values(l, enc)?;
            let (h, _, _) = self.decoder_layer(l, &states, e, cross, Some(&self_mask), &cross_mask, None)?;
            states.push(h);
        }
        let logits = self.logits(*states.last().expect("H_0 present"))?;
        Ok(DecoderOutput {
            states,
            shortcut: e,
            logits,
        })
    }

    /// Pre-softmax projection; with tied embeddings this is `H · Embᵀ`.
    pub fn logits(&mut self, h: Var) -> Result<Var> {
        let w = self.var(self.model.layout.output_projection());
        self.tape.matmul_nt(h, w)
    }

    /// Token-level cross-entropy summed over non-padding targets, each
    /// position weighted by `scale`.
    pub fn scaled_loss(&mut self, batch: &Batch, scale: f64) -> Result<LossOutput> {
        let tokens = batch.target_tokens();
        if batch.is_empty() || tokens == 0 {
            return Err(Error::InvalidArgument("batch has no target tokens".into()));
        }
        let src = Padded::new(&batch.src)?;
        let len = batch.tgt.iter().map(Vec::len).max().unwrap_or(0);
        let input = Padded::shifted(&batch.tgt, len)?;
        let targets = Padded::with_len(&batch.tgt, len)?;
        let enc = self.encode(&src)?;
        let dec = self.decode(&input, &enc)?;
        let v = self.config().vocab_size;
        let flat = self.tape.reshape(dec.logits, &[input.batch * len, v])?;
        let weights: Vec<f64> = (0..input.batch)
            .flat_map(|b| (0..len).map(move |t| (b, t)))
            .map(|(b, t)| if t < targets.lengths[b] { scale } else { 0.0 })
            .collect();
        let smoothing = self.config().label_smoothing;
        let loss = self.tape.cross_entropy(flat, &targets.ids, &weights, smoothing)?;
        Ok(LossOutput { loss, tokens })
    }

    /// Mean cross-entropy over non-padding target positions.
    pub fn loss(&mut self, batch: &Batch) -> Result<LossOutput> {
        let tokens = batch.target_tokens();
        self.scaled_loss(batch, 1.0 / tokens.max(1) as f64)
    }
}

/// Cached state for step-by-step decoding of a fixed source batch.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    past: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    src_lengths: Vec<usize>,
    src_len: usize,
    position: usize,
}

fn select_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let batch = t.shape()[0];
    let block = t.numel() / batch;
    if let Some(&bad) = rows.iter().find(|&&r| r >= batch) {
        return Err(Error::InvalidArgument(format!(
            "row {bad} out of range for batch {batch}"
        )));
    }
    let mut data = Vec::with_capacity(rows.len() * block);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * block..(r + 1) * block]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

impl<T: Real> DecoderCache<T> {
    pub fn batch(&self) -> usize {
        self.src_lengths.len()
    }

    /// Number of target positions decoded so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Keeps (and possibly duplicates) batch rows in the order given.
    pub fn select(&mut self, rows: &[usize]) -> Result<()> {
        for (k, v) in &mut self.cross {
            *k = select_rows(k, rows)?;
            *v = select_rows(v, rows)?;
        }
        for (k, v) in self.past.iter_mut().flatten() {
            *k = select_rows(k, rows)?;
            *v = select_rows(v, rows)?;
        }
        self.src_lengths = rows.iter().map(|&r| self.src_lengths[r]).collect();
        Ok(())
    }
}

impl<T: Real> Model<T> {
    /// Encodes `src` and precomputes cross-attention keys/values.
    pub fn start_decoding(&self, src: &Padded) -> Result<DecoderCache<T>> {
        let mut tape = Tape::new();
        let mut f = self.forward(&mut tape, Mode::Eval);
        let enc = f.encode(src)?;
        let vars = (1..=self.layout.decoder.len())
            .map(|l| f.cross_keys_values(l, &enc))
            .collect::<Result<Vec<_>>>()?;
        let cross = vars
            .into_iter()
            .map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
            .collect();
        Ok(DecoderCache {
            cross,
            past: vec![None; self.layout.decoder.len()],
            src_lengths: src.lengths.clone(),
            src_len: src.len,
            position: 0,
        })
    }

    /// Feeds one token per row and returns next-token logits `[b, vocab]`.
    pub fn decode_step(&self, cache: &mut DecoderCache<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let b = cache.batch();
        if tokens.len() != b {
            return Err(Error::shape(
                "decode_step",
                format!("{} tokens for batch {b}", tokens.len()),
            ));
        }
        let input = Padded {
            ids: tokens.to_vec(),
            batch: b,
            len: 1,
            lengths: vec![1; b],
        };
        let mut tape = Tape::new();
        let mut f = self.forward(&mut tape, Mode::Eval);
        let (h0, e) = f.embed(&input, cache.position)?;
        let cross_mask = AttentionMask::padding(&cache.src_lengths, 1, cache.src_len);
        let mut states = vec![h0];
        let mut updated = Vec::with_capacity(cache.cross.len());
        for l in 1..=cache.cross.len() {
            let (ck, cv) = &cache.cross[l - 1];
            let cross = (f.tape.constant(ck.clone()), f.tape.constant(cv.clone()));
            let past = cache.past[l - 1]
                .as_ref()
                .map(|(k, v)| (f.tape.constant(k.clone()), f.tape.constant(v.clone())));
            let (h, k, v) = f.decoder_layer(l, &states, e, cross, None, &cross_mask, past)?;
            states.push(h);
            updated.push((k, v));
        }
        let logits = f.logits(*states.last().expect("H_0 present"))?;
        for (slot, (k, v)) in cache.past.iter_mut().zip(updated) {
            *slot = Some((tape.value(k).clone(), tape.value(v).clone()));
        }
        cache.position += 1;
        tape.value(logits).reshape(vec![b, self.config.vocab_size])
    }
}
