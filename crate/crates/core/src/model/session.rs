use rand_chacha::ChaCha8Rng;

use super::attention::attention;
use super::{Transformer, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Graph, Scalar, Tensor, Var};

/// Per-step token contents: real vectors or codebook class ids.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenValues<T> {
    /// `[batch, len, in_dim]`.
    Dense(Tensor<T>),
    /// Row-major `batch * len` class ids, one-hot encoded on embedding.
    Classes {
        batch: usize,
        len: usize,
        ids: Vec<usize>,
    },
}

impl<T: Scalar> TokenValues<T> {
    pub fn batch(&self) -> usize {
        match self {
            TokenValues::Dense(t) => t.shape()[0],
            TokenValues::Classes { batch, .. } => *batch,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TokenValues::Dense(t) => t.shape()[1],
            TokenValues::Classes { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        match self {
            TokenValues::Dense(t) if t.rank() != 3 => Err(Error::Shape {
                op: "token_values",
                lhs: t.shape().to_vec(),
                rhs: vec![3],
            }),
            TokenValues::Classes { batch, len, ids } if ids.len() != batch * len => Err(Error::Shape {
                op: "token_values",
                lhs: vec![*batch, *len],
                rhs: vec![ids.len()],
            }),
            _ => Ok(()),
        }
    }
}

fn check_timestamps(timestamps: &[usize], batch: usize, len: usize) -> Result<()> {
    if timestamps.len() != batch * len {
        return Err(Error::Shape {
            op: "timestamps",
            lhs: vec![batch, len],
            rhs: vec![timestamps.len()],
        });
    }
    for (b, row) in timestamps.chunks(len).enumerate() {
        if row.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "timestamps of sequence {b} are not strictly increasing: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Encoder input: token values, their true timestamps and a presence mask.
#[derive(Clone, Debug)]
pub struct SequenceBatch<T> {
    values: TokenValues<T>,
    timestamps: Vec<usize>,
    presence: Vec<bool>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn new(values: TokenValues<T>, timestamps: Vec<usize>, presence: Vec<bool>) -> Result<Self> {
        values.check()?;
        let (b, t) = (values.batch(), values.len());
        check_timestamps(&timestamps, b, t)?;
        if presence.len() != b * t {
            return Err(Error::Shape {
                op: "presence",
                lhs: vec![b, t],
                rhs: vec![presence.len()],
            });
        }
        Ok(Self {
            values,
            timestamps,
            presence,
        })
    }

    /// Every position present.
    pub fn dense(values: TokenValues<T>, timestamps: Vec<usize>) -> Result<Self> {
        let n = values.batch() * values.len();
        Self::new(values, timestamps, vec![true; n])
    }

    pub fn batch(&self) -> usize {
        self.values.batch()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &TokenValues<T> {
        &self.values
    }

    pub fn timestamps(&self) -> &[usize] {
        &self.timestamps
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    /// Attention mask in which every query sees exactly the present keys.
    pub fn attn_mask(&self) -> Result<AttnMask> {
        AttnMask::from_key_presence(self.batch(), self.len(), self.len(), &self.presence)
    }
}

/// Decoder input: the start token followed by `len - 1` previously produced
/// values. `timestamps` has one entry per decoder position, start included.
#[derive(Clone, Debug)]
pub struct DecoderInput<T> {
    values: Option<TokenValues<T>>,
    timestamps: Vec<usize>,
    batch: usize,
}

impl<T: Scalar> DecoderInput<T> {
    pub fn new(batch: usize, values: Option<TokenValues<T>>, timestamps: Vec<usize>) -> Result<Self> {
        let prev = match &values {
            Some(v) => {
                v.check()?;
                if v.batch() != batch {
                    return Err(Error::Shape {
                        op: "decoder_input",
                        lhs: vec![batch],
                        rhs: vec![v.batch()],
                    });
                }
                v.len()
            }
            None => 0,
        };
        check_timestamps(&timestamps, batch, prev + 1)?;
        Ok(Self {
            values,
            timestamps,
            batch,
        })
    }

    /// Decoder positions including the start token.
    pub fn len(&self) -> usize {
        self.values.as_ref().map_or(0, TokenValues::len) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Encoder output kept for encoder-decoder attention.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub presence: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// One forward (and optionally backward) pass over a [`Transformer`].
///
/// Parameters are registered as graph leaves on construction. A session
/// created with [`Session::train`] applies dropout from its own RNG stream;
/// [`Session::eval`] never does, so eval passes are bit-reproducible.
pub struct Session<'m, T: Scalar> {
    pub graph: Graph<T>,
    model: &'m Transformer<T>,
    vars: Vec<Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn eval(model: &'m Transformer<T>) -> Self {
        Self::build(model, None)
    }

    pub fn train(model: &'m Transformer<T>, rng: ChaCha8Rng) -> Self {
        Self::build(model, Some(rng))
    }

    fn build(model: &'m Transformer<T>, rng: Option<ChaCha8Rng>) -> Self {
        let mut graph = Graph::new();
        let vars = model.params.tensors().iter().map(|t| graph.param(t)).collect();
        Self {
            graph,
            model,
            vars,
            rng,
        }
    }

    /// Hand back the dropout stream so training can continue it.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.rng
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of each parameter, in parameter order; `None` where the loss
    /// does not depend on it.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| self.graph.grad(v)).collect()
    }

    fn p(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"));
        self.vars[i]
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.model.config.dropout;
        match self.rng.as_mut() {
            Some(rng) => self.graph.dropout(x, p, rng, true),
            None => x,
        }
    }

    /// Linear, bias-free projection of per-step inputs to `[B, T, D]`.
    pub fn embed_inputs(&mut self, values: &TokenValues<T>) -> Result<Var> {
        values.check()?;
        let w = self.p("embed.w");
        let cfg = &self.model.config;
        match values {
            TokenValues::Dense(t) => {
                if t.shape()[2] != cfg.in_dim {
                    return Err(Error::Shape {
                        op: "embed_inputs",
                        lhs: t.shape().to_vec(),
                        rhs: vec![cfg.in_dim, cfg.d_model],
                    });
                }
                let x = self.graph.constant(t.clone());
                self.graph.matmul(x, w)
            }
            TokenValues::Classes { batch, len, ids } => {
                if !cfg.mode.is_classification() {
                    return Err(Error::Shape {
                        op: "embed_inputs",
                        lhs: vec![*batch, *len, cfg.out_dim],
                        rhs: vec![cfg.in_dim, cfg.d_model],
                    });
                }
                let rows = self.graph.gather_rows(w, ids)?;
                self.graph.reshape(rows, &[*batch, *len, cfg.d_model])
            }
        }
    }

    /// Add the table row of each token's true timestamp.
    pub fn positional_encode(&mut self, emb: Var, timestamps: &[usize]) -> Result<Var> {
        let shape = self.graph.shape(emb).to_vec();
        let pe = self.model.positional();
        let d = pe.d_model();
        if shape.len() != 3 || shape[2] != d || timestamps.len() != shape[0] * shape[1] {
            return Err(Error::Shape {
                op: "positional_encode",
                lhs: shape,
                rhs: vec![timestamps.len()],
            });
        }
        let mut rows = Vec::with_capacity(timestamps.len() * d);
        for &t in timestamps {
            if t >= pe.max_len() {
                return Err(Error::Range {
                    what: "timestamp",
                    index: t,
                    limit: pe.max_len(),
                });
            }
            rows.extend_from_slice(pe.row(t));
        }
        let table = self.graph.constant(Tensor::new(shape, rows)?);
        self.graph.add(emb, table)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    /// `[B, T, D]` -> `[B, H, T, d_k]`
    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let h = self.model.config.n_heads;
        let r = self.graph.reshape(x, &[s[0], s[1], h, s[2] / h])?;
        self.graph.permute(r, &[0, 2, 1, 3])
    }

    fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let p = self.graph.permute(x, &[0, 2, 1, 3])?;
        self.graph.reshape(p, &[s[0], s[2], s[1] * s[3]])
    }

    fn multi_head(&mut self, prefix: &str, xq: Var, xkv: Var, mask: &AttnMask) -> Result<Var> {
        let q = self.linear(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let (q, k, v) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let att = attention(&mut self.graph, q, k, v, Some(mask))?;
        let merged = self.merge_heads(att.output)?;
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Residual connection, dropout on the sublayer, then layer norm.
    fn residual_norm(&mut self, x: Var, sub: Var, ln: &str) -> Result<Var> {
        let sub = self.dropout(sub);
        let s = self.graph.add(x, sub)?;
        let (g, b) = (self.p(&format!("{ln}.g")), self.p(&format!("{ln}.b")));
        self.graph.layer_norm(s, g, b, T::from_f64(LAYER_NORM_EPS))
    }

    fn encoder_stack(&mut self, mut x: Var, mask: &AttnMask) -> Result<Var> {
        for l in 0..self.model.config.n_layers {
            let a = self.multi_head(&format!("enc.{l}.attn"), x, x, mask)?;
            x = self.residual_norm(x, a, &format!("enc.{l}.ln1"))?;
            let f = self.feed_forward(&format!("enc.{l}.ff"), x)?;
            x = self.residual_norm(x, f, &format!("enc.{l}.ln2"))?;
        }
        Ok(x)
    }

    fn embed_with_time(&mut self, values: &TokenValues<T>, timestamps: &[usize]) -> Result<Var> {
        let e = self.embed_inputs(values)?;
        self.positional_encode(e, timestamps)
    }

    /// Encoder stack over the observed tokens. Absent tokens are excluded as
    /// keys for every query.
    pub fn encode(&mut self, obs: &SequenceBatch<T>) -> Result<Memory> {
        let x = self.embed_with_time(&obs.values, &obs.timestamps)?;
        let x = self.dropout(x);
        let mask = obs.attn_mask()?;
        let states = self.encoder_stack(x, &mask)?;
        Ok(Memory {
            states,
            presence: obs.presence.clone(),
            batch: obs.batch(),
            len: obs.len(),
        })
    }

    fn token(&mut self, name: &str, batch: usize, len: usize) -> Result<Var> {
        let d = self.model.config.d_model;
        let t = self.p(name);
        let r = self.graph.reshape(t, &[1, 1, d])?;
        self.graph.expand(r, &[batch, len, d])
    }

    /// Full decoder pass with causal self-attention; `[B, T_dec, out_dim]`.
    pub fn decode(&mut self, memory: &Memory, prefix: &DecoderInput<T>) -> Result<Var> {
        if !self.model.config.mode.has_decoder() {
            return Err(Error::contract("masked-encoder models have no decoder"));
        }
        if prefix.batch != memory.batch {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![memory.batch],
                rhs: vec![prefix.batch],
            });
        }
        let (b, t) = (prefix.batch, prefix.len());
        let start = self.token("start_token", b, 1)?;
        let tokens = match &prefix.values {
            Some(v) => {
                let e = self.embed_inputs(v)?;
                self.graph.concat(&[start, e], 1)?
            }
            None => start,
        };
        let x = self.positional_encode(tokens, &prefix.timestamps)?;
        let mut x = self.dropout(x);
        let causal = AttnMask::causal(t);
        let cross = AttnMask::from_key_presence(b, t, memory.len, &memory.presence)?;
        for l in 0..self.model.config.n_layers {
            let a = self.multi_head(&format!("dec.{l}.self"), x, x, &causal)?;
            x = self.residual_norm(x, a, &format!("dec.{l}.ln1"))?;
            let c = self.multi_head(&format!("dec.{l}.cross"), x, memory.states, &cross)?;
            x = self.residual_norm(x, c, &format!("dec.{l}.ln2"))?;
            let f = self.feed_forward(&format!("dec.{l}.ff"), x)?;
            x = self.residual_norm(x, f, &format!("dec.{l}.ln3"))?;
        }
        self.linear(x, "out.w", "out.b")
    }

    /// Output for the last decoder position only; `[B, out_dim]`.
    pub fn decode_step(&mut self, memory: &Memory, prefix: &DecoderInput<T>) -> Result<Var> {
        let out = self.decode(memory, prefix)?;
        let t = prefix.len();
        let last = self.graph.narrow(out, 1, t - 1, 1)?;
        let b = prefix.batch;
        self.graph.reshape(last, &[b, self.model.config.out_dim])
    }

    /// Encoder states over observed tokens followed by `horizon` mask-token
    /// slots at `future_timestamps` (`B × horizon`); `[B, T + horizon, D]`.
    pub fn masked_encode_states(&mut self, obs: &SequenceBatch<T>, future_timestamps: &[usize]) -> Result<Var> {
        let b = obs.batch();
        if future_timestamps.len() % b.max(1) != 0 {
            return Err(Error::Shape {
                op: "masked_encode",
                lhs: vec![b],
                rhs: vec![future_timestamps.len()],
            });
        }
        let h = future_timestamps.len() / b;
        let x = self.embed_with_time(&obs.values, &obs.timestamps)?;
        if h == 0 {
            let x = self.dropout(x);
            let mask = obs.attn_mask()?;
            return self.encoder_stack(x, &mask);
        }
        let t = obs.len();
        let mut timestamps = Vec::with_capacity(b * (t + h));
        let mut presence = Vec::with_capacity(b * (t + h));
        for i in 0..b {
            timestamps.extend_from_slice(&obs.timestamps[i * t..(i + 1) * t]);
            timestamps.extend_from_slice(&future_timestamps[i * h..(i + 1) * h]);
            presence.extend_from_slice(&obs.presence[i * t..(i + 1) * t]);
            presence.extend(std::iter::repeat_n(true, h));
        }
        check_timestamps(&timestamps, b, t + h)?;
        let masks = self.token("mask_token", b, h)?;
        let masks = self.positional_encode(masks, future_timestamps)?;
        let x = self.graph.concat(&[x, masks], 1)?;
        let x = self.dropout(x);
        let mask = AttnMask::from_key_presence(b, t + h, t + h, &presence)?;
        self.encoder_stack(x, &mask)
    }

    /// Non-autoregressive prediction for every masked future slot;
    /// `[B, horizon, out_dim]`.
    pub fn masked_encode(&mut self, obs: &SequenceBatch<T>, future_timestamps: &[usize]) -> Result<Var> {
        if self.model.config.mode.has_decoder() {
            return Err(Error::contract("masked prediction needs a masked-encoder model"));
        }
        let h = future_timestamps.len() / obs.batch().max(1);
        if h == 0 {
            return Err(Error::contract("masked prediction needs a horizon of at least 1"));
        }
        let states = self.masked_encode_states(obs, future_timestamps)?;
        let fut = self.graph.narrow(states, 1, obs.len(), h)?;
        self.linear(fut, "out.w", "out.b")
    }
}
