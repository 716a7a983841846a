//! Pre-norm transformer encoder-decoder over fused patch and word features.

mod search;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xpro_tensor::{nn, ParamId, ParamStore, Tape, Tensor, Var};

pub use search::{beam_search, greedy, Hypothesis};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::init;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Add sinusoidal positions to the encoder input.
    pub encoder_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            max_len: 48,
            dropout: 0.1,
            encoder_positions: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "model.d_model {} is not divisible by model.heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_len < 2 {
            return Err(Error::config(
                "model.layers and model.d_ff must be positive, model.max_len at least 2",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "model.dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros([len, width]);
    for pos in 0..len {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            t.data_mut()[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Dropout source; inactive in evaluation.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => Ok(nn::dropout(tape, x, self.rate, rng)?),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Dense,
    down: Dense,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

struct Builder<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    group: usize,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.store.add(
                format!("{name}.w"),
                init::xavier(self.rng, fan_in, fan_out),
                self.group,
            ),
            b: self
                .store
                .add(format!("{name}.b"), Tensor::zeros([fan_out]), self.group),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.store.add(
                format!("{name}.gain"),
                Tensor::full([width], 1.0),
                self.group,
            ),
            bias: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros([width]), self.group),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.dense(&format!("{name}.q"), d, d),
            k: self.dense(&format!("{name}.k"), d, d),
            v: self.dense(&format!("{name}.v"), d, d),
            o: self.dense(&format!("{name}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            up: self.dense(&format!("{name}.up"), d, ff),
            down: self.dense(&format!("{name}.down"), ff, d),
        }
    }
}

/// Encoder-decoder parameters and the forward passes over them.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    output: Dense,
    positions: Tensor,
}

impl Seq2Seq {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        group: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embedding = store.add("embedding", init::normal(rng, &[vocab_size, d], 1.0), group);
        let mut b = Builder { store, rng, group };
        let encoder = (0..cfg.layers)
            .map(|l| EncoderLayer {
                norm_attn: b.norm(&format!("enc{l}.norm_attn"), d),
                attn: b.attention(&format!("enc{l}.attn"), d),
                norm_ff: b.norm(&format!("enc{l}.norm_ff"), d),
                ff: b.feed_forward(&format!("enc{l}.ff"), d, cfg.d_ff),
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let decoder = (0..cfg.layers)
            .map(|l| DecoderLayer {
                norm_self: b.norm(&format!("dec{l}.norm_self"), d),
                self_attn: b.attention(&format!("dec{l}.self_attn"), d),
                norm_cross: b.norm(&format!("dec{l}.norm_cross"), d),
                cross_attn: b.attention(&format!("dec{l}.cross_attn"), d),
                norm_ff: b.norm(&format!("dec{l}.norm_ff"), d),
                ff: b.feed_forward(&format!("dec{l}.ff"), d, cfg.d_ff),
            })
            .collect();
        let decoder_norm = b.norm("dec.norm", d);
        // Small output weights keep the initial word distribution near uniform.
        let output = Dense {
            w: b.store.add(
                "output.w",
                init::normal(b.rng, &[d, vocab_size], 0.02),
                group,
            ),
            b: b.store.add("output.b", Tensor::zeros([vocab_size]), group),
        };
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            positions: sinusoidal_positions(cfg.max_len, d),
        })
    }

    fn position_rows(&self, len: usize) -> Result<Tensor> {
        if len > self.cfg.max_len {
            return Err(Error::contract(format!(
                "sequence of {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let d = self.cfg.d_model;
        Ok(Tensor::new(
            vec![len, d],
            self.positions.data()[..len * d].to_vec(),
        )?)
    }

    /// Word embeddings plus sinusoidal positions, `[T, d_model]`.
    pub fn embed_report(&self, tape: &mut Tape, vars: &[Var], tokens: &[TokenId]) -> Result<Var> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocab {
                id,
                size: self.vocab_size,
            });
        }
        let rows = tape.gather_rows(vars[self.embedding.index()], tokens)?;
        let pos = self.position_rows(tokens.len())?;
        Ok(tape.add_const(rows, &pos)?)
    }

    fn layer_norm(tape: &mut Tape, vars: &[Var], n: Norm, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, vars[n.gain.index()], vars[n.bias.index()])?)
    }

    fn dense(tape: &mut Tape, vars: &[Var], p: Dense, x: Var) -> Result<Var> {
        Ok(nn::linear(
            tape,
            x,
            vars[p.w.index()],
            Some(vars[p.b.index()]),
        )?)
    }

    /// Multi-head attention; head-averaged weights are pushed to `capture`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        p: &Attention,
        query: Var,
        source: Var,
        mask: Option<&Tensor>,
        capture: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let q = Self::dense(tape, vars, p.q, query)?;
        let k = Self::dense(tape, vars, p.k, source)?;
        let v = Self::dense(tape, vars, p.v, source)?;
        let joined = self.attend(tape, q, k, v, mask, capture)?;
        Self::dense(tape, vars, p.o, joined)
    }

    /// Per-head scaled dot-product attention over projected `q`, `k`, `v`.
    fn attend(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
        capture: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        let dh = self.cfg.d_model / heads;
        let mut outs = Vec::with_capacity(heads);
        let mut mean_weights: Option<Vec<f64>> = None;
        let mut weight_shape = Vec::new();
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = tape.add_const(scores, m)?;
            }
            let w = tape.softmax(scores, 1)?;
            if capture.is_some() {
                let wt = tape.value(w);
                weight_shape = wt.shape().to_vec();
                let acc = mean_weights.get_or_insert_with(|| vec![0.0; wt.numel()]);
                for (a, x) in acc.iter_mut().zip(wt.data()) {
                    *a += x / heads as f64;
                }
            }
            outs.push(tape.matmul(w, vh)?);
        }
        if let (Some(c), Some(w)) = (capture, mean_weights) {
            c.push(Tensor::new(weight_shape, w)?);
        }
        Ok(if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs)?
        })
    }

    fn feed_forward(tape: &mut Tape, vars: &[Var], p: FeedForward, x: Var) -> Result<Var> {
        let h = Self::dense(tape, vars, p.up, x)?;
        let h = tape.relu(h);
        Self::dense(tape, vars, p.down, h)
    }

    /// Encoder memory `[N^s, d_model]` for a fused patch sequence.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        source: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let mut x = source;
        if self.cfg.encoder_positions {
            let pos = self.position_rows(tape.shape(x)[0])?;
            x = tape.add_const(x, &pos)?;
        }
        x = drop.apply(tape, x)?;
        for layer in &self.encoder {
            let h = Self::layer_norm(tape, vars, layer.norm_attn, x)?;
            let a = self.attention(tape, vars, &layer.attn, h, h, None, None)?;
            let a = drop.apply(tape, a)?;
            x = tape.add(x, a)?;
            let h = Self::layer_norm(tape, vars, layer.norm_ff, x)?;
            let f = Self::feed_forward(tape, vars, layer.ff, h)?;
            let f = drop.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        Self::layer_norm(tape, vars, self.encoder_norm, x)
    }

    /// Next-word logits `[T, |V|]` for every prefix position of `target`.
    ///
    /// When `capture` is given, the head-averaged cross-attention weights of
    /// the last layer (`[T, N^s]`) are pushed to it.
    pub fn decode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        memory: Var,
        target: Var,
        drop: &mut Dropout,
        mut capture: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let t = tape.shape(target)[0];
        if t > self.cfg.max_len {
            return Err(Error::contract(format!(
                "prefix of {t} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let mask = nn::causal_mask(t);
        let mut x = drop.apply(tape, target)?;
        let last = self.decoder.len() - 1;
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = Self::layer_norm(tape, vars, layer.norm_self, x)?;
            let a = self.attention(tape, vars, &layer.self_attn, h, h, Some(&mask), None)?;
            let a = drop.apply(tape, a)?;
            x = tape.add(x, a)?;
            let h = Self::layer_norm(tape, vars, layer.norm_cross, x)?;
            let cap = if l == last {
                capture.as_deref_mut()
            } else {
                None
            };
            let c = self.attention(tape, vars, &layer.cross_attn, h, memory, None, cap)?;
            let c = drop.apply(tape, c)?;
            x = tape.add(x, c)?;
            let h = Self::layer_norm(tape, vars, layer.norm_ff, x)?;
            let f = Self::feed_forward(tape, vars, layer.ff, h)?;
            let f = drop.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        let x = Self::layer_norm(tape, vars, self.decoder_norm, x)?;
        Self::dense(tape, vars, self.output, x)
    }

    /// Word distribution after the last position of `target`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        memory: Var,
        target: Var,
    ) -> Result<Vec<f64>> {
        let t = tape.shape(target)[0];
        if t == 0 {
            return Err(Error::contract("decode_step needs a non-empty prefix"));
        }
        let logits = self.decode(tape, vars, memory, target, &mut Dropout::eval(), None)?;
        let row = tape.value(logits).row(t - 1).to_vec();
        Ok(softmax(&row))
    }
}

/// Cross-attention keys and values of every decoder layer for one memory.
#[derive(Debug, Clone)]
pub struct MemoryCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

/// Self-attention keys and values of the positions decoded so far.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

impl DecoderState {
    /// Number of positions already decoded.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn append_row(base: Option<&Tensor>, row: &Tensor) -> Result<Tensor> {
    let width = row.last_dim();
    let mut data = base.map_or_else(Vec::new, |b| b.data().to_vec());
    data.extend_from_slice(row.data());
    Ok(Tensor::new(vec![data.len() / width.max(1), width], data)?)
}

impl Seq2Seq {
    pub fn memory_cache(&self, tape: &mut Tape, vars: &[Var], memory: Var) -> Result<MemoryCache> {
        let mut keys = Vec::with_capacity(self.decoder.len());
        let mut values = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let k = Self::dense(tape, vars, layer.cross_attn.k, memory)?;
            let v = Self::dense(tape, vars, layer.cross_attn.v, memory)?;
            keys.push(tape.value(k).clone());
            values.push(tape.value(v).clone());
        }
        Ok(MemoryCache { keys, values })
    }

    /// Word embedding of `token` at `position`, `[1, d_model]`.
    pub fn embed_at(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        token: TokenId,
        position: usize,
    ) -> Result<Var> {
        if token >= self.vocab_size {
            return Err(Error::Vocab {
                id: token,
                size: self.vocab_size,
            });
        }
        if position >= self.cfg.max_len {
            return Err(Error::contract(format!(
                "position {position} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let d = self.cfg.d_model;
        let row = tape.gather_rows(vars[self.embedding.index()], &[token])?;
        let pos = Tensor::new(vec![1, d], self.positions.row(position).to_vec())?;
        Ok(tape.add_const(row, &pos)?)
    }

    /// Decodes one more position given the states of the earlier ones.
    ///
    /// Equivalent to [`Seq2Seq::decode_step`] on the whole prefix in
    /// evaluation mode, because causal masking keeps earlier positions
    /// independent of later ones.
    pub fn decode_next(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        memory: &MemoryCache,
        state: &DecoderState,
        input: Var,
    ) -> Result<(Vec<f64>, DecoderState)> {
        if state.len() + 1 > self.cfg.max_len {
            return Err(Error::contract(format!(
                "prefix of {} exceeds max_len {}",
                state.len() + 1,
                self.cfg.max_len
            )));
        }
        let mut next = DecoderState::default();
        let mut x = input;
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = Self::layer_norm(tape, vars, layer.norm_self, x)?;
            let q = Self::dense(tape, vars, layer.self_attn.q, h)?;
            let k_row = Self::dense(tape, vars, layer.self_attn.k, h)?;
            let v_row = Self::dense(tape, vars, layer.self_attn.v, h)?;
            let keys = append_row(state.keys.get(l), tape.value(k_row))?;
            let values = append_row(state.values.get(l), tape.value(v_row))?;
            let k = tape.leaf(keys.clone());
            let v = tape.leaf(values.clone());
            next.keys.push(keys);
            next.values.push(values);
            let a = self.attend(tape, q, k, v, None, None)?;
            let a = Self::dense(tape, vars, layer.self_attn.o, a)?;
            x = tape.add(x, a)?;

            let h = Self::layer_norm(tape, vars, layer.norm_cross, x)?;
            let q = Self::dense(tape, vars, layer.cross_attn.q, h)?;
            let k = tape.leaf(memory.keys[l].clone());
            let v = tape.leaf(memory.values[l].clone());
            let c = self.attend(tape, q, k, v, None, None)?;
            let c = Self::dense(tape, vars, layer.cross_attn.o, c)?;
            x = tape.add(x, c)?;

            let h = Self::layer_norm(tape, vars, layer.norm_ff, x)?;
            let f = Self::feed_forward(tape, vars, layer.ff, h)?;
            x = tape.add(x, f)?;
        }
        let x = Self::layer_norm(tape, vars, self.decoder_norm, x)?;
        let logits = Self::dense(tape, vars, self.output, x)?;
        Ok((softmax(tape.value(logits).data()), next))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}
