mod common;

use proptest::prelude::*;

use trajformer::data::{ForecastWindow, SynthKind};
use trajformer::model::{Mode, ModelConfig, ModelParams};
use trajformer::tensor::{Graph, Tensor};
use trajformer::trainer::{
    loss, lr_schedule, LossKind, OptState, StepRecord, Targets, TrainConfig, Trainer, ADAM_EPS, BETA1, BETA2,
};
use trajformer::Error;

fn windows() -> Vec<ForecastWindow> {
    common::synth_windows(SynthKind::Crossing, 12, 0.02, 4, 22, 1)
}

fn setup(mode: Mode) -> (ModelConfig, TrainConfig) {
    let m = ModelConfig::sized(mode, 8, 1, 2, 16, 12).with_dropout(0.1);
    let t = TrainConfig {
        batch_size: 7,
        epochs: 3,
        warmup_epochs: 1.0,
        peak_lr: 2e-3,
        seed: 21,
        loss: if mode.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::L2
        },
        ..TrainConfig::default()
    };
    (m, t)
}

const MODES: [Mode; 3] = [Mode::RegressionTf, Mode::RegressionMaskedEncoder, Mode::ClassificationTfq];

#[test]
fn adam_matches_a_hand_stepped_oracle() {
    // f(x) = 0.5 * sum(a_i x_i^2), gradient a_i x_i.
    let a = [0.5, 2.0, -1.0, 3.0];
    let x0 = [1.0, -0.3, 0.7, 0.05];
    let mut params: ModelParams<f64> =
        ModelParams::from_pairs(vec![("x".to_string(), Tensor::from_f64(&[4], &x0).unwrap())]).unwrap();
    let mut opt = OptState::new(&params);

    let (mut x, mut m, mut v) = (x0.to_vec(), vec![0.0; 4], vec![0.0; 4]);
    let lrs = [0.1, 0.05, 0.2, 0.01];
    for (t, &lr) in lrs.iter().enumerate() {
        let cur = params.tensors()[0].to_f64_vec();
        let g: Vec<f64> = cur.iter().zip(&a).map(|(x, a)| a * x).collect();
        opt.update(&mut params, &[Some(Tensor::from_f64(&[4], &g).unwrap())], lr).unwrap();

        let n = (t + 1) as i32;
        for i in 0..4 {
            let gi = a[i] * x[i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.98 * v[i] + 0.02 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(n));
            let vh = v[i] / (1.0 - 0.98f64.powi(n));
            x[i] -= lr * mh / (vh.sqrt() + 1e-9);
        }
        for (got, want) in params.tensors()[0].to_f64_vec().iter().zip(&x) {
            assert!((got - want).abs() < 1e-12, "step {}: {got} vs {want}", t + 1);
        }
    }
    assert_eq!((BETA1, BETA2, ADAM_EPS), (0.9, 0.98, 1e-9));
    assert_eq!(opt.step, 4);
}

#[test]
fn missing_gradients_leave_parameters_alone() {
    let mut params = ModelParams::from_pairs(vec![
        ("a".to_string(), Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()),
        ("b".to_string(), Tensor::from_f64(&[1], &[3.0]).unwrap()),
    ])
    .unwrap();
    let mut opt = OptState::<f64>::new(&params);
    opt.update(&mut params, &[None, Some(Tensor::from_f64(&[1], &[1.0]).unwrap())], 0.1)
        .unwrap();
    assert_eq!(params.tensors()[0].to_f64_vec(), vec![1.0, 2.0]);
    assert_ne!(params.tensors()[1].to_f64_vec(), vec![3.0]);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    for mode in MODES {
        let (m, mut t) = setup(mode);
        t.peak_lr = 0.0;
        let mut tr = Trainer::<f32>::new(windows(), m, t).unwrap();
        let before = tr.forecaster.model.params.clone();
        tr.run(None).unwrap();
        assert_eq!(tr.forecaster.model.params, before, "{mode:?}");
        assert!(tr.step_count() > 0);
    }
}

#[test]
fn same_seed_same_history() {
    for mode in MODES {
        let (m, t) = setup(mode);
        let run = || {
            let mut tr = Trainer::<f32>::new(windows(), m.clone(), t.clone()).unwrap();
            tr.run(None).unwrap();
            (tr.history.clone(), tr.forecaster.model.params.clone())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2, "{mode:?}");
        assert_eq!(p1, p2, "{mode:?}");
        assert_eq!(h1.epochs.len(), 3);

        let mut other = t.clone();
        other.seed += 1;
        let mut tr = Trainer::<f32>::new(windows(), m.clone(), other).unwrap();
        tr.run(None).unwrap();
        assert_ne!(tr.history, h1);
    }
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for mode in MODES {
        let (m, t) = setup(mode);
        let mut straight = Trainer::<f32>::new(windows(), m.clone(), t.clone()).unwrap();
        let mut interrupted = Trainer::<f32>::new(windows(), m, t).unwrap();
        // Stop mid-epoch so the partial epoch sums travel too.
        for _ in 0..5 {
            straight.step().unwrap();
            interrupted.step().unwrap();
        }
        let path = dir.path().join(format!("{mode:?}.ckpt"));
        interrupted.save(&path).unwrap();
        let mut resumed = Trainer::<f32>::load(&path, windows()).unwrap();
        assert_eq!(resumed.rng_state(), straight.rng_state());
        assert_eq!(resumed.opt, straight.opt);

        let a: StepRecord = straight.step().unwrap();
        let b = resumed.step().unwrap();
        assert_eq!(a, b, "{mode:?}");
        assert_eq!(resumed.forecaster.model.params, straight.forecaster.model.params);
        straight.run(None).unwrap();
        resumed.run(None).unwrap();
        assert_eq!(resumed.history, straight.history, "{mode:?}");
    }
}

#[test]
fn every_epoch_visits_every_window_once() {
    let (m, t) = setup(Mode::RegressionTf);
    let mut tr = Trainer::<f32>::new(windows(), m, t).unwrap();
    let n = tr.windows().len();
    for _ in 0..3 {
        let mut seen = Vec::new();
        for _ in 0..tr.steps_per_epoch() {
            seen.extend(tr.next_batch());
            tr.step().unwrap();
        }
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let (m, t) = setup(Mode::RegressionTf);
    let mut tr = Trainer::<f32>::new(windows(), m, t).unwrap();
    let i = tr.forecaster.model.params.index_of("out.b").unwrap();
    tr.forecaster.model.params.set(i, Tensor::full(&[2], f32::NAN)).unwrap();
    match tr.step() {
        Err(e @ Error::Numeric(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("step 1") && msg.contains("batch windows"), "{msg}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn run_writes_one_log_line_per_step() {
    let (m, t) = setup(Mode::RegressionTf);
    let mut tr = Trainer::<f32>::new(windows(), m, t).unwrap();
    let mut log = Vec::new();
    tr.run(Some(&mut log)).unwrap();
    let lines: Vec<StepRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len() as u64, tr.total_steps());
    assert_eq!(lines.last().unwrap().step, tr.total_steps());
    for (r, &l) in lines.iter().zip(&tr.history.step_losses) {
        assert_eq!(r.loss, l);
    }
}

#[test]
fn max_steps_caps_training() {
    let (m, mut t) = setup(Mode::RegressionTf);
    t.max_steps = Some(4);
    let mut tr = Trainer::<f32>::new(windows(), m, t).unwrap();
    tr.run(None).unwrap();
    assert_eq!(tr.step_count(), 4);
    assert_eq!(tr.history.epochs.len(), 1);
    assert_eq!(tr.history.epochs[0].steps, 4);
}

#[test]
fn config_errors() {
    let (m, t) = setup(Mode::RegressionTf);
    let bad = |f: fn(&mut TrainConfig)| {
        let mut c = t.clone();
        f(&mut c);
        Trainer::<f32>::new(windows(), m.clone(), c).err()
    };
    assert!(matches!(bad(|c| c.batch_size = 0), Some(Error::Config { .. })));
    assert!(matches!(bad(|c| c.warmup_epochs = 4.0), Some(Error::Config { .. })));
    assert!(matches!(bad(|c| c.loss = LossKind::CrossEntropy), Some(Error::Config { .. })));
    assert!(matches!(bad(|c| c.teacher_forcing = false), Some(Error::Config { .. })));
    assert!(Trainer::<f32>::new(Vec::new(), m, t).is_err());
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_k() {
    for k in [2usize, 7, 1000] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, k]));
        let l = loss(&mut g, x, &Targets::Classes(vec![0, k - 1, k / 2])).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn schedule_shape(warmup in 1u64..500, peak in 1e-5f64..1.0) {
        prop_assert!((lr_schedule(warmup, warmup, peak) - peak).abs() < 1e-15 * peak.max(1.0));
        prop_assert!((lr_schedule(4 * warmup, warmup, peak) - peak / 2.0).abs() < 1e-12);
        for s in 1..warmup {
            prop_assert!(lr_schedule(s, warmup, peak) < lr_schedule(s + 1, warmup, peak));
        }
        for s in warmup..warmup + 200 {
            prop_assert!(lr_schedule(s + 1, warmup, peak) <= lr_schedule(s, warmup, peak));
        }
        // No jump at the boundary bigger than one ramp increment.
        let jump = (lr_schedule(warmup + 1, warmup, peak) - lr_schedule(warmup, warmup, peak)).abs();
        prop_assert!(jump <= peak / warmup as f64);
    }
}
