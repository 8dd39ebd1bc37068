//! Windows in, world positions out.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DecoderInput, Mode, SequenceBatch, Session, TokenValues, Transformer};
use crate::data::{integrate, obs_speed_tokens, ForecastWindow, NormStats, Point};
use crate::error::{Error, Result};
use crate::quantizer::{argmax, sample_class, Codebook};
use crate::tensor::{Scalar, Tensor};

/// Windows decoded together in one graph.
const CHUNK: usize = 256;

/// How the classification head picks a class at each step. Regression
/// models ignore it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Greedy,
    /// One independent draw per window from a generator keyed by the seed and
    /// the window's scene, agent and start frame, so results do not depend on
    /// batching. `sample_index` selects the stream: the N samples of
    /// best-of-N never share randomness.
    Multinomial { seed: u64, sample_index: u64 },
}

/// A trained model with the speed statistics and (for the classification
/// head) the codebook it was trained with.
#[derive(Clone, Debug)]
pub struct Forecaster<T: Scalar> {
    pub model: Transformer<T>,
    pub norm: NormStats,
    pub codebook: Option<Codebook>,
}

/// FNV-1a over the window's identity.
fn window_key(w: &ForecastWindow) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = w.scene.bytes().chain(w.agent.to_le_bytes()).chain(w.t0.to_le_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Re-anchor the clock on the last present observation.
///
/// When the current frame and `shift - 1` slots before it are missing, every
/// observation moves `shift` slots later, so the last present one sits at the
/// current-frame slot and the decoder starts from the timestamp it was
/// trained on. The forecast then covers `shift + horizon` steps, of which the
/// last `horizon` are the requested ones.
fn align(w: &ForecastWindow, horizon: usize) -> Result<(ForecastWindow, Point, usize)> {
    w.validate()?;
    let (p, anchor) = w.last_present().expect("validated window has observations");
    let shift = w.t_obs() - 1 - p;
    let mut out = w.clone();
    for i in 0..w.t_obs() {
        let (pos, present) = if i >= shift { (w.obs[i - shift], w.mask[i - shift]) } else { (w.obs[0], false) };
        out.obs[i] = pos;
        out.mask[i] = present;
    }
    Ok((out, anchor, shift + horizon))
}

impl<T: Scalar> Forecaster<T> {
    pub fn new(model: Transformer<T>, norm: NormStats, codebook: Option<Codebook>) -> Result<Self> {
        norm.require_train()?;
        match (&codebook, model.config.mode.is_classification()) {
            (Some(cb), true) if cb.k() == model.config.out_dim => {}
            (Some(cb), true) => {
                return Err(Error::contract(format!(
                    "codebook has {} classes, model head has {}",
                    cb.k(),
                    model.config.out_dim
                )))
            }
            (None, true) => return Err(Error::contract("classification model needs a codebook")),
            (_, false) => {}
        }
        Ok(Self { model, norm, codebook })
    }

    pub fn mode(&self) -> Mode {
        self.model.config.mode
    }

    fn codebook(&self) -> &Codebook {
        self.codebook.as_ref().expect("checked on construction")
    }

    /// Token values for raw speeds: normalized vectors or codebook classes.
    pub fn tokens(&self, batch: usize, len: usize, speeds: &[Point]) -> Result<TokenValues<T>> {
        if self.mode().is_classification() {
            let cb = self.codebook();
            Ok(TokenValues::Classes {
                batch,
                len,
                ids: speeds.iter().map(|&v| cb.assign(v)).collect(),
            })
        } else {
            let flat: Vec<T> = speeds
                .iter()
                .flat_map(|&v| {
                    let n = self.norm.apply(v);
                    [T::from_f64(n[0]), T::from_f64(n[1])]
                })
                .collect();
            Ok(TokenValues::Dense(Tensor::new(vec![batch, len, 2], flat)?))
        }
    }

    /// Encoder input: one token per observation slot `1..T_obs`, absent
    /// where the slot or all its predecessors are missing.
    pub fn encoder_batch(&self, windows: &[&ForecastWindow]) -> Result<SequenceBatch<T>> {
        let t_obs = windows.first().map_or(0, |w| w.t_obs());
        if t_obs < 2 || windows.iter().any(|w| w.t_obs() != t_obs) {
            return Err(Error::contract("encoder batch needs a common observation length of at least 2"));
        }
        let len = t_obs - 1;
        let mut speeds = Vec::with_capacity(windows.len() * len);
        let mut presence = Vec::with_capacity(windows.len() * len);
        for w in windows {
            for tok in obs_speed_tokens(w) {
                speeds.push(tok.unwrap_or([0.0, 0.0]));
                presence.push(tok.is_some());
            }
        }
        let values = self.tokens(windows.len(), len, &speeds)?;
        let timestamps = windows.iter().flat_map(|_| 1..t_obs).collect();
        SequenceBatch::new(values, timestamps, presence)
    }

    /// Predicted world positions for the `horizon` slots after the current
    /// frame of every window, in input order.
    pub fn predict(&self, windows: &[ForecastWindow], horizon: usize, sampler: Sampler) -> Result<Vec<Vec<Point>>> {
        if horizon == 0 {
            return Err(Error::contract("forecast horizon must be at least 1"));
        }
        let aligned = windows.iter().map(|w| align(w, horizon)).collect::<Result<Vec<_>>>()?;
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, (w, _, steps)) in aligned.iter().enumerate() {
            groups.entry((w.t_obs(), *steps)).or_default().push(i);
        }
        let jobs: Vec<(usize, &[usize])> = groups
            .iter()
            .flat_map(|(&(_, steps), idx)| idx.chunks(CHUNK).map(move |c| (steps, c)))
            .collect();
        let done: Vec<Vec<(usize, Vec<Point>)>> = jobs
            .par_iter()
            .map(|&(steps, chunk)| {
                let ws: Vec<&ForecastWindow> = chunk.iter().map(|&i| &aligned[i].0).collect();
                let speeds = match self.mode() {
                    Mode::RegressionMaskedEncoder => self.masked_speeds(&ws, steps)?,
                    _ => self.autoregressive_speeds(&ws, steps, sampler)?,
                };
                let mut part = Vec::with_capacity(chunk.len());
                for (&i, v) in chunk.iter().zip(speeds) {
                    let path = integrate(aligned[i].1, &v);
                    part.push((i, path[steps - horizon..].to_vec()));
                }
                Ok(part)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::new(); windows.len()];
        for (i, p) in done.into_iter().flatten() {
            out[i] = p;
        }
        Ok(out)
    }

    fn autoregressive_speeds(
        &self,
        ws: &[&ForecastWindow],
        steps: usize,
        sampler: Sampler,
    ) -> Result<Vec<Vec<Point>>> {
        let b = ws.len();
        let start = ws[0].t_obs();
        let obs = self.encoder_batch(ws)?;
        let mut rngs: Vec<ChaCha8Rng> = match sampler {
            Sampler::Greedy => Vec::new(),
            Sampler::Multinomial { seed, sample_index } => ws
                .iter()
                .map(|w| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed ^ window_key(w));
                    r.set_stream(sample_index);
                    r
                })
                .collect(),
        };

        let mut s = Session::eval(&self.model);
        let memory = s.encode(&obs)?;
        let mut fed: Vec<Vec<Point>> = vec![Vec::new(); b];
        let mut classes: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut speeds: Vec<Vec<Point>> = vec![Vec::new(); b];
        let classification = self.mode().is_classification();
        for step in 0..steps {
            let timestamps: Vec<usize> = (0..b).flat_map(|_| start..start + step + 1).collect();
            let values = if step == 0 {
                None
            } else if classification {
                Some(TokenValues::Classes {
                    batch: b,
                    len: step,
                    ids: classes.concat(),
                })
            } else {
                let flat = fed.iter().flatten().flat_map(|v| [T::from_f64(v[0]), T::from_f64(v[1])]).collect();
                Some(TokenValues::Dense(Tensor::new(vec![b, step, 2], flat)?))
            };
            let prefix = DecoderInput::new(b, values, timestamps)?;
            let y = s.decode_step(&memory, &prefix)?;
            let y = s.graph.value(y).to_f64_vec();
            let k = self.model.config.out_dim;
            for i in 0..b {
                let row = &y[i * k..(i + 1) * k];
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite model output at decode step {step}")));
                }
                if classification {
                    let c = match sampler {
                        Sampler::Greedy => argmax(row),
                        Sampler::Multinomial { .. } => sample_class(row, &mut rngs[i]),
                    };
                    classes[i].push(c);
                    speeds[i].push(self.codebook().decode(c)?);
                } else {
                    let n = [row[0], row[1]];
                    fed[i].push(n);
                    speeds[i].push(self.norm.invert(n));
                }
            }
        }
        Ok(speeds)
    }

    fn masked_speeds(&self, ws: &[&ForecastWindow], steps: usize) -> Result<Vec<Vec<Point>>> {
        let b = ws.len();
        let start = ws[0].t_obs();
        let obs = self.encoder_batch(ws)?;
        let future: Vec<usize> = (0..b).flat_map(|_| start..start + steps).collect();
        let mut s = Session::eval(&self.model);
        let y = s.masked_encode(&obs, &future)?;
        let y = s.graph.value(y).to_f64_vec();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite masked-encoder output".into()));
        }
        Ok(y.chunks(steps * 2)
            .map(|row| row.chunks(2).map(|v| self.norm.invert([v[0], v[1]])).collect())
            .collect())
    }
}
