#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajformer::data::{
    drop_observations, fit_norm, make_windows, synth_corpus, DropPolicy, ForecastWindow, Split, SynthKind, SynthSpec,
    WindowSpec,
};
use trajformer::model::{Forecaster, Mode, ModelConfig, Session, Transformer};
use trajformer::quantizer::build_codebook;
use trajformer::tensor::{Graph, Tensor, Var};
use trajformer::trainer::batch_loss;

pub const FD_STEP: f64 = 1e-6;

/// Relative error of an analytic against a numeric derivative, with the
/// denominator floored so entries that are zero up to rounding compare
/// on an absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in (-1, 1), kept at least 1e-2 away from zero so kinks are not
/// straddled by the finite-difference step.
pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = r.random_range(-1.0..1.0);
        if v.abs() > 1e-2 {
            break v;
        }
    })
}

/// Largest relative error between backprop and central differences for
/// `sum(f(inputs) * w)` with a fixed random `w`, over every input entry.
pub fn op_grad_error<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>], backward: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x)).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let w = g.constant(random_tensor(&mut rng(seed ^ 0x5eed), &shape));
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grads = if backward {
            g.backward(loss).unwrap();
            vars.iter()
                .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, grads) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let bumped = |d: f64| {
                let mut xs = inputs.to_vec();
                let mut data = x.to_vec();
                data[j] += d;
                xs[i] = Tensor::new(x.shape().to_vec(), data).unwrap();
                eval(&xs, false).0
            };
            let n = (bumped(FD_STEP) - bumped(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[i].data()[j], n));
        }
    }
    worst
}

pub fn tiny_config(mode: Mode, d: usize, k: usize) -> ModelConfig {
    ModelConfig::sized(mode, d, 1, 2, 2 * d, k)
}

/// Two short windows from a noisy linear corpus, the second with a gap,
/// and a forecaster fitted to them.
pub fn gradcheck_setup(mode: Mode, d: usize, seed: u64) -> (Forecaster<f64>, Vec<ForecastWindow>) {
    let trajs = synth_corpus(&SynthSpec::new(SynthKind::Circular, 2, 0.05, seed).with_len(8));
    let spec = WindowSpec {
        t_obs: 5,
        t_pred: 3,
        stride: 8,
    };
    let mut windows = make_windows(&trajs, spec);
    windows[1] = drop_observations(&windows[1], DropPolicy::SingleAt(2)).unwrap();
    let norm = fit_norm(&windows, Split::Train).unwrap();
    let k = 6;
    let codebook = mode.is_classification().then(|| {
        let speeds: Vec<_> = windows
            .iter()
            .flat_map(|w| w.obs.windows(2).chain(w.future.windows(2)).map(|p| [p[1][0] - p[0][0], p[1][1] - p[0][1]]))
            .collect();
        build_codebook(&speeds, k, seed).unwrap()
    });
    let model = Transformer::<f64>::new(tiny_config(mode, d, k), seed).unwrap();
    (Forecaster::new(model, norm, codebook).unwrap(), windows)
}

pub fn model_loss(f: &Forecaster<f64>, windows: &[ForecastWindow]) -> f64 {
    let refs: Vec<&ForecastWindow> = windows.iter().collect();
    let mut s = Session::eval(&f.model);
    let l = batch_loss(f, &mut s, &refs).unwrap();
    s.graph.value(l).item()
}

/// Per parameter tensor: (name, worst relative error, has gradient).
pub fn model_grad_errors(f: &Forecaster<f64>, windows: &[ForecastWindow]) -> Vec<(String, f64, bool)> {
    let refs: Vec<&ForecastWindow> = windows.iter().collect();
    let (_, grads) = trajformer::trainer::batch_loss_and_grads(f, &refs, None).unwrap();
    let mut out = Vec::new();
    for (i, name) in f.model.params.names().iter().enumerate() {
        let p = &f.model.params.tensors()[i];
        let mut worst: f64 = 0.0;
        for j in 0..p.numel() {
            let bumped = |d: f64| {
                let mut g = f.clone();
                let mut data = p.to_vec();
                data[j] += d;
                g.model.params.set(i, Tensor::new(p.shape().to_vec(), data).unwrap()).unwrap();
                model_loss(&g, windows)
            };
            let n = (bumped(FD_STEP) - bumped(-FD_STEP)) / (2.0 * FD_STEP);
            let a = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, n));
        }
        out.push((name.clone(), worst, grads[i].is_some()));
    }
    out
}

/// Noiseless or noisy synthetic windows at the standard 8/12 split.
pub fn synth_windows(kind: SynthKind, n: usize, noise: f64, seed: u64, len: usize, stride: usize) -> Vec<ForecastWindow> {
    let trajs = synth_corpus(&SynthSpec::new(kind, n, noise, seed).with_len(len));
    make_windows(
        &trajs,
        WindowSpec {
            stride,
            ..WindowSpec::default()
        },
    )
}
