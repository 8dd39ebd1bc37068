//! Mini-batch training with Adam and a warmup / inverse-square-root schedule.
//!
//! All randomness is a pure function of the seed: epoch `e` shuffles with
//! stream `e` of one generator, and step `s` draws dropout masks and scale
//! augmentation from stream `s` of another. A checkpoint therefore only needs
//! the step counter to resume bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_scale, fit_norm, target_speeds, ForecastWindow, NormStats, Split};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{DecoderInput, Forecaster, ModelConfig, ModelParams, Session, TokenValues, Transformer};
use crate::quantizer::{augmented_speed_corpus, build_codebook, Codebook};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const STEP_TAG: u64 = 0x5354_4550;
const MAGIC: &[u8; 4] = b"TFTR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// May be fractional; converted to steps once the epoch size is known.
    pub warmup_epochs: f64,
    /// Learning rate reached at the end of warmup.
    pub peak_lr: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Decoder inputs are ground truth during training. Only `true` is
    /// supported.
    pub teacher_forcing: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            warmup_epochs: 5.0,
            peak_lr: 1e-3,
            seed: 0,
            loss: LossKind::L2,
            teacher_forcing: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return Err(Error::config("train.warmup_epochs", "must lie in [0, epochs]"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::config("train.peak_lr", "must be finite and non-negative"));
        }
        if !self.teacher_forcing {
            return Err(Error::config("train.teacher_forcing", "only teacher-forced training is supported"));
        }
        Ok(())
    }

    fn check_mode(&self, model: &ModelConfig) -> Result<()> {
        let want = if model.mode.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::L2
        };
        if self.loss != want {
            return Err(Error::config("train.loss", format!("{:?} models train with {want:?}", model.mode)));
        }
        Ok(())
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))`; a zero warmup behaves
/// like a warmup of one step.
pub fn lr_schedule(step: u64, warmup_steps: u64, peak: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One Adam update with bias correction. Parameters whose gradient is
    /// `None` keep their moments and values.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &params.tensors()[i];
            let n = p.numel();
            let (mut m, mut v, mut out) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for j in 0..n {
                let gj = g.data()[j].as_f64();
                let mj = BETA1 * self.m[i].data()[j].as_f64() + (1.0 - BETA1) * gj;
                let vj = BETA2 * self.v[i].data()[j].as_f64() + (1.0 - BETA2) * gj * gj;
                let step = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
                m.push(T::from_f64(mj));
                v.push(T::from_f64(vj));
                out.push(T::from_f64(p.data()[j].as_f64() - step));
            }
            let shape = p.shape().to_vec();
            self.m[i] = Tensor::new(shape.clone(), m)?;
            self.v[i] = Tensor::new(shape.clone(), v)?;
            params.set(i, Tensor::new(shape, out)?)?;
        }
        Ok(())
    }
}

/// Supervision for one batch.
#[derive(Clone, Debug)]
pub enum Targets<T> {
    /// `[B, T, 2]` normalized speeds.
    Speeds(Tensor<T>),
    /// `B * T` class ids, row-major.
    Classes(Vec<usize>),
}

/// Mean squared Euclidean error over batch and steps, or mean negative log
/// likelihood of the target classes.
pub fn loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Targets<T>) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    match target {
        Targets::Speeds(t) => {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "l2_loss",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            let rows = shape[..shape.len() - 1].iter().product::<usize>();
            let c = g.constant(t.clone());
            let d = g.sub(pred, c)?;
            let sq = g.mul(d, d)?;
            let s = g.sum(sq);
            Ok(g.scale(s, T::from_f64(1.0 / rows as f64)))
        }
        Targets::Classes(ids) => {
            let k = *shape.last().expect("logits have a class axis");
            let rows = shape.iter().product::<usize>() / k;
            if ids.len() != rows {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: shape,
                    rhs: vec![ids.len()],
                });
            }
            let mut onehot = vec![T::zero(); rows * k];
            for (r, &c) in ids.iter().enumerate() {
                if c >= k {
                    return Err(Error::Range {
                        what: "target class",
                        index: c,
                        limit: k,
                    });
                }
                onehot[r * k + c] = T::one();
            }
            let ls = g.log_softmax(pred)?;
            let oh = g.constant(Tensor::new(shape, onehot)?);
            let picked = g.mul(ls, oh)?;
            let s = g.sum(picked);
            Ok(g.scale(s, T::from_f64(-1.0 / rows as f64)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainerHeader {
    model: ModelConfig,
    norm: NormStats,
    codebook: Option<Codebook>,
    train: TrainConfig,
    rng: RngState,
    step: u64,
    epoch_loss_sum: f64,
    epoch_steps: u64,
    history: History,
}

/// Where the step generator stands: the next step draws from
/// `stream` of the generator seeded with `seed`, from word 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u64,
}

/// Owns the model being trained, its optimizer state and the training set.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub forecaster: Forecaster<T>,
    pub config: TrainConfig,
    pub opt: OptState<T>,
    pub history: History,
    windows: Vec<ForecastWindow>,
    epoch_loss_sum: f64,
    epoch_steps: u64,
}

impl<T: Scalar> Trainer<T> {
    /// Fit speed statistics (and the codebook, for the classification head)
    /// on `windows`, then initialize the model from `config.seed`.
    pub fn new(windows: Vec<ForecastWindow>, model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.check_mode(&model)?;
        check_windows(&windows)?;
        let norm = fit_norm(&windows, Split::Train)?;
        let codebook = if model.mode.is_classification() {
            let corpus = augmented_speed_corpus(&windows, config.seed);
            Some(build_codebook(&corpus, model.out_dim, config.seed)?)
        } else {
            None
        };
        let transformer = Transformer::new(model, config.seed)?;
        Self::from_forecaster(Forecaster::new(transformer, norm, codebook)?, windows, config)
    }

    /// Continue training an existing model with fresh optimizer state.
    pub fn from_forecaster(forecaster: Forecaster<T>, windows: Vec<ForecastWindow>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.check_mode(&forecaster.model.config)?;
        check_windows(&windows)?;
        let opt = OptState::new(&forecaster.model.params);
        Ok(Self {
            forecaster,
            config,
            opt,
            history: History::default(),
            windows,
            epoch_loss_sum: 0.0,
            epoch_steps: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.windows.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.config.warmup_epochs * self.steps_per_epoch() as f64).round() as u64
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.steps_per_epoch() * self.config.epochs as u64;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.opt.step >= self.total_steps()
    }

    /// Generator state the next step will draw from.
    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.seed ^ STEP_TAG,
            stream: self.opt.step,
            word_pos: 0,
        }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SHUFFLE_TAG);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..self.windows.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Window indices of the next batch.
    pub fn next_batch(&self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = (self.opt.step / spe) as usize;
        let k = (self.opt.step % spe) as usize;
        let order = self.epoch_order(epoch);
        let b = self.config.batch_size;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let spe = self.steps_per_epoch();
        let epoch = (self.opt.step / spe) as usize;
        let ids = self.next_batch();
        let s = self.rng_state();
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(s.stream);

        let windows: Vec<ForecastWindow> = if self.forecaster.mode().is_classification() {
            ids.iter().map(|&i| augment_scale(&self.windows[i], &mut rng).0).collect()
        } else {
            ids.iter().map(|&i| self.windows[i].clone()).collect()
        };
        let refs: Vec<&ForecastWindow> = windows.iter().collect();
        let (loss_value, grads) = batch_loss_and_grads(&self.forecaster, &refs, Some(rng))?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_value} at step {} (epoch {epoch}), batch windows {ids:?}",
                self.opt.step + 1
            )));
        }
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{}` at step {}, batch windows {ids:?}",
                self.forecaster.model.params.names()[i],
                self.opt.step + 1
            )));
        }
        let lr = lr_schedule(self.opt.step + 1, self.warmup_steps(), self.config.peak_lr);
        self.opt.update(&mut self.forecaster.model.params, &grads, lr)?;

        self.history.step_losses.push(loss_value);
        self.epoch_loss_sum += loss_value;
        self.epoch_steps += 1;
        if self.opt.step % spe == 0 || self.is_done() {
            self.history.epochs.push(EpochRecord {
                epoch,
                steps: self.epoch_steps,
                mean_loss: self.epoch_loss_sum / self.epoch_steps as f64,
                lr,
            });
            self.epoch_loss_sum = 0.0;
            self.epoch_steps = 0;
        }
        Ok(StepRecord {
            step: self.opt.step,
            epoch,
            lr,
            loss: loss_value,
        })
    }

    /// Train until the configured epochs (or step cap) are reached, writing
    /// one JSON line per step to `log` when given.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<&History> {
        while !self.is_done() {
            let rec = self.step()?;
            if let Some(out) = log.as_deref_mut() {
                serde_json::to_writer(&mut *out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(&self.history)
    }

    pub fn windows(&self) -> &[ForecastWindow] {
        &self.windows
    }

    pub fn into_forecaster(self) -> Forecaster<T> {
        self.forecaster
    }

    /// Model, optimizer moments, step counter and history in one container;
    /// the training windows are not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = TrainerHeader {
            model: self.forecaster.model.config.clone(),
            norm: self.forecaster.norm,
            codebook: self.forecaster.codebook.clone(),
            train: self.config.clone(),
            rng: self.rng_state(),
            step: self.opt.step,
            epoch_loss_sum: self.epoch_loss_sum,
            epoch_steps: self.epoch_steps,
            history: self.history.clone(),
        };
        let params = &self.forecaster.model.params;
        let mut tensors: Vec<(String, &Tensor<T>)> = params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (n, m) in params.names().iter().zip(&self.opt.m) {
            tensors.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in params.names().iter().zip(&self.opt.v) {
            tensors.push((format!("adam.v.{n}"), v));
        }
        let mut out = BufWriter::new(File::create(path).map_err(Error::file(path))?);
        write_container(&mut out, MAGIC, &header, &tensors)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, windows: Vec<ForecastWindow>) -> Result<Self> {
        let (h, mut tensors): (TrainerHeader, Vec<(String, Tensor<T>)>) =
            read_container(&mut BufReader::new(File::open(path).map_err(Error::file(path))?), MAGIC)?;
        let n = h.model.layout().len();
        if tensors.len() != 3 * n {
            return Err(Error::Format(format!("expected {} tensors, found {}", 3 * n, tensors.len())));
        }
        let v: Vec<Tensor<T>> = tensors.split_off(2 * n).into_iter().map(|(_, t)| t).collect();
        let m: Vec<Tensor<T>> = tensors.split_off(n).into_iter().map(|(_, t)| t).collect();
        let params = ModelParams::from_pairs(tensors)?;
        let model = Transformer::from_params(h.model, params)?;
        let mut trainer = Self::from_forecaster(Forecaster::new(model, h.norm, h.codebook)?, windows, h.train)?;
        if h.rng.stream != h.step || h.rng.seed != trainer.config.seed ^ STEP_TAG {
            return Err(Error::Format("generator state does not match the step counter".into()));
        }
        trainer.opt = OptState { step: h.step, m, v };
        trainer.history = h.history;
        trainer.epoch_loss_sum = h.epoch_loss_sum;
        trainer.epoch_steps = h.epoch_steps;
        Ok(trainer)
    }
}

fn check_windows(windows: &[ForecastWindow]) -> Result<()> {
    let first = windows.first().ok_or_else(|| Error::data("no training windows"))?;
    for w in windows {
        w.validate()?;
        if w.t_obs() != first.t_obs() || w.t_pred() != first.t_pred() {
            return Err(Error::data("training windows must share observation and prediction lengths"));
        }
        if !w.mask[w.t_obs() - 1] {
            return Err(Error::data("training windows need the current frame"));
        }
    }
    if first.t_obs() < 2 || first.t_pred() == 0 {
        return Err(Error::data("training windows need at least 2 observations and 1 future step"));
    }
    Ok(())
}

/// Teacher-forced forward pass, loss and parameter gradients for one batch.
/// `rng` enables dropout.
pub fn batch_loss_and_grads<T: Scalar>(
    f: &Forecaster<T>,
    windows: &[&ForecastWindow],
    rng: Option<ChaCha8Rng>,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut s = match rng {
        Some(r) => Session::train(&f.model, r),
        None => Session::eval(&f.model),
    };
    let l = batch_loss(f, &mut s, windows)?;
    let value = s.graph.value(l).item().as_f64();
    s.graph.backward(l)?;
    Ok((value, s.param_grads()))
}

/// Build the teacher-forced graph for `windows` in `s` and return the loss.
pub fn batch_loss<T: Scalar>(f: &Forecaster<T>, s: &mut Session<'_, T>, windows: &[&ForecastWindow]) -> Result<Var> {
    let b = windows.len();
    let t_obs = windows[0].t_obs();
    let t_pred = windows[0].t_pred();
    let obs = f.encoder_batch(windows)?;
    let mut speeds = Vec::with_capacity(b * t_pred);
    for w in windows {
        speeds.extend(target_speeds(w)?);
    }
    let future_ts: Vec<usize> = (0..b).flat_map(|_| t_obs..t_obs + t_pred).collect();
    let targets = match f.tokens(b, t_pred, &speeds)? {
        TokenValues::Dense(t) => Targets::Speeds(t),
        TokenValues::Classes { ids, .. } => Targets::Classes(ids),
    };
    let pred = if f.mode().has_decoder() {
        let memory = s.encode(&obs)?;
        let inputs = if t_pred > 1 {
            let shifted: Vec<_> = speeds
                .chunks(t_pred)
                .flat_map(|row| row[..t_pred - 1].iter().copied())
                .collect();
            Some(f.tokens(b, t_pred - 1, &shifted)?)
        } else {
            None
        };
        let prefix = DecoderInput::new(b, inputs, future_ts)?;
        s.decode(&memory, &prefix)?
    } else {
        s.masked_encode(&obs, &future_ts)?
    };
    loss(&mut s.graph, pred, &targets)
}

/// L2 norm of every parameter gradient for one batch (dropout off); `None`
/// where the loss has no path to the parameter.
pub fn gradient_norms<T: Scalar>(f: &Forecaster<T>, windows: &[&ForecastWindow]) -> Result<Vec<(String, Option<f64>)>> {
    let (_, grads) = batch_loss_and_grads(f, windows, None)?;
    Ok(f.model
        .params
        .names()
        .iter()
        .zip(grads)
        .map(|(n, g)| (n.clone(), g.map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(100, 100, 0.5), 0.5);
        assert_eq!(lr_schedule(50, 100, 0.5), 0.25);
        assert_eq!(lr_schedule(400, 100, 0.5), 0.25);
        assert!((lr_schedule(101, 100, 1.0) - lr_schedule(100, 100, 1.0)).abs() < 1e-2);
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_f64(&[1, 3, 2], &[0.5, 1.0, -1.0, 2.0, 0.0, 0.0]).unwrap();
        let p = g.constant(t.clone());
        let l = loss(&mut g, p, &Targets::Speeds(t.clone())).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let shifted = t.map(|v| v);
        let off = Tensor::from_fn(&[1, 3, 2], |i| shifted.data()[i] + if i % 2 == 0 { 1.0 } else { 0.0 });
        let p = g.constant(off);
        let l = loss(&mut g, p, &Targets::Speeds(t)).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);

        let k = 7;
        let p = g.constant(Tensor::full(&[2, 3, k], 0.25));
        let l = loss(&mut g, p, &Targets::Classes(vec![0, 1, 2, 3, 4, 6])).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);

        assert!(loss(&mut g, p, &Targets::Classes(vec![0; 5])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let bad = TrainConfig {
            warmup_epochs: 200.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
