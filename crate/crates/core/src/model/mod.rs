//! Encoder-decoder transformer, masked-encoder variant and the quantized
//! classification variant, plus the parameter container they share.

mod attention;
pub(crate) mod checkpoint;
mod forecast;
mod positional;
mod session;

pub use attention::{attention, Attention};
pub use checkpoint::{load_forecaster, read_forecaster, save_forecaster, write_forecaster, CHECKPOINT_VERSION};
pub use forecast::{Forecaster, Sampler};
pub use positional::PositionalEncoding;
pub use session::{DecoderInput, Memory, SequenceBatch, Session, TokenValues};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which head and architecture the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Encoder-decoder, regresses normalized speeds.
    RegressionTf,
    /// Encoder only; future slots are mask tokens filled in one pass.
    RegressionMaskedEncoder,
    /// Encoder-decoder over one-hot codebook classes.
    ClassificationTfq,
}

impl Mode {
    pub fn is_classification(self) -> bool {
        matches!(self, Mode::ClassificationTfq)
    }

    pub fn has_decoder(self) -> bool {
        !matches!(self, Mode::RegressionMaskedEncoder)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub pe_base: f64,
    /// Rows of the positional-encoding table.
    pub max_len: usize,
    pub mode: Mode,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// d_model 512, 6 encoder and 6 decoder layers, 8 heads, d_ff 2048,
    /// dropout 0.1, base 10000.
    pub fn full(mode: Mode, codebook_size: usize) -> Self {
        Self::sized(mode, 512, 6, 8, 2048, codebook_size).with_dropout(0.1)
    }

    /// A config with the given widths and no dropout. `codebook_size` only
    /// matters in classification mode.
    pub fn sized(mode: Mode, d_model: usize, n_layers: usize, n_heads: usize, d_ff: usize, codebook_size: usize) -> Self {
        let (in_dim, out_dim) = if mode.is_classification() {
            (codebook_size, codebook_size)
        } else {
            (2, 2)
        };
        Self {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            dropout: 0.0,
            pe_base: 10000.0,
            max_len: 64,
            mode,
            in_dim,
            out_dim,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("model.{field}"), msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads", "d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers", "layer count and d_ff must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.pe_base.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return bad("pe_base", "must exceed 1");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive");
        }
        let expect_in = if self.mode.is_classification() { self.out_dim } else { 2 };
        if self.in_dim != expect_in || self.out_dim == 0 || (!self.mode.is_classification() && self.out_dim != 2) {
            return bad("in_dim", "regression uses 2 -> 2, classification uses k -> k");
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embed.w".to_string(), vec![self.in_dim, d])];
        if self.mode.has_decoder() {
            out.push(("start_token".into(), vec![d]));
        } else {
            out.push(("mask_token".into(), vec![d]));
        }
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{w}"), vec![d, d]));
                out.push((format!("{p}.b{w}"), vec![d]));
            }
        };
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, self.d_ff]));
            out.push((format!("{p}.b1"), vec![self.d_ff]));
            out.push((format!("{p}.w2"), vec![self.d_ff, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for l in 0..self.n_layers {
            attn(&mut out, &format!("enc.{l}.attn"));
            ln(&mut out, &format!("enc.{l}.ln1"));
            ff(&mut out, &format!("enc.{l}.ff"));
            ln(&mut out, &format!("enc.{l}.ln2"));
        }
        if self.mode.has_decoder() {
            for l in 0..self.n_layers {
                attn(&mut out, &format!("dec.{l}.self"));
                ln(&mut out, &format!("dec.{l}.ln1"));
                attn(&mut out, &format!("dec.{l}.cross"));
                ln(&mut out, &format!("dec.{l}.ln2"));
                ff(&mut out, &format!("dec.{l}.ff"));
                ln(&mut out, &format!("dec.{l}.ln3"));
            }
        }
        out.push(("out.w".into(), vec![d, self.out_dim]));
        out.push(("out.b".into(), vec![self.out_dim]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named learned tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for (name, shape) in config.layout() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-a..a)))
            } else if name.ends_with("_token") {
                let a = (3.0 / shape[0] as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::from_f64(rng.random_range(-a..a)))
            } else if leaf == "g" {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            pairs.push((name, t));
        }
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(pairs: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(pairs.len());
        let mut tensors = Vec::with_capacity(pairs.len());
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, (n, t)) in pairs.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate parameter `{n}`")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Check names and shapes against a config's layout.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.names.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.names.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.iter()) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected `{name}` {shape:?}, found `{n}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, i: usize, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Config, weights and the positional table derived from them.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pe: PositionalEncoding<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        let pe = PositionalEncoding::new(config.max_len, config.d_model, config.pe_base);
        Ok(Self { config, params, pe })
    }

    pub fn positional(&self) -> &PositionalEncoding<T> {
        &self.pe
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
            pe: PositionalEncoding::new(self.config.max_len, self.config.d_model, self.config.pe_base),
        }
    }
}
