mod common;

use proptest::prelude::*;
use rand::Rng;

use trajformer::data::{NormStats, Split};
use trajformer::model::{
    DecoderInput, Forecaster, Mode, ModelConfig, PositionalEncoding, Sampler, SequenceBatch, Session, TokenValues,
    Transformer,
};
use trajformer::tensor::{Graph, Tensor};

fn model(mode: Mode, d: usize, layers: usize, heads: usize, seed: u64) -> Transformer<f64> {
    Transformer::new(ModelConfig::sized(mode, d, layers, heads, 2 * d, 5), seed).unwrap()
}

fn dense(batch: usize, len: usize, values: &[f64]) -> TokenValues<f64> {
    TokenValues::Dense(Tensor::from_f64(&[batch, len, 2], values).unwrap())
}

fn encode(m: &Transformer<f64>, values: &[f64], ts: &[usize], presence: &[bool]) -> Vec<f64> {
    let batch = SequenceBatch::new(dense(1, ts.len(), values), ts.to_vec(), presence.to_vec()).unwrap();
    let mut s = Session::eval(m);
    let mem = s.encode(&batch).unwrap();
    s.graph.value(mem.states).to_f64_vec()
}

fn increasing_timestamps(r: &mut impl Rng, len: usize) -> Vec<usize> {
    let mut t = r.random_range(0..3);
    (0..len)
        .map(|_| {
            let out = t;
            t += r.random_range(1..3);
            out
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn masking_a_token_equals_deleting_it(
        seed in 0u64..1_000_000,
        d in prop::sample::select(vec![8usize, 16]),
        heads in prop::sample::select(vec![1usize, 2]),
        layers in 1usize..3,
        len in 2usize..8,
    ) {
        let m = model(Mode::RegressionTf, d, layers, heads, seed);
        let mut r = common::rng(seed);
        let j = r.random_range(0..len);
        let values: Vec<f64> = (0..2 * len).map(|_| r.random_range(-2.0..2.0)).collect();
        let ts = increasing_timestamps(&mut r, len);
        let mut presence = vec![true; len];
        presence[j] = false;
        let masked = encode(&m, &values, &ts, &presence);

        let keep: Vec<usize> = (0..len).filter(|&i| i != j).collect();
        let short_values: Vec<f64> = keep.iter().flat_map(|&i| [values[2 * i], values[2 * i + 1]]).collect();
        let short_ts: Vec<usize> = keep.iter().map(|&i| ts[i]).collect();
        let short = encode(&m, &short_values, &short_ts, &vec![true; len - 1]);

        for (k, &i) in keep.iter().enumerate() {
            for c in 0..d {
                let diff = (masked[i * d + c] - short[k * d + c]).abs();
                prop_assert!(diff < 1e-5, "position {} dim {}: {}", i, c, diff);
            }
        }
    }

    #[test]
    fn decoder_is_causal(seed in 0u64..1_000_000, len in 2usize..7) {
        let m = model(Mode::RegressionTf, 8, 2, 2, seed);
        let mut r = common::rng(seed);
        let obs_len = 4;
        let obs_values: Vec<f64> = (0..2 * obs_len).map(|_| r.random_range(-1.0..1.0)).collect();
        let obs = SequenceBatch::dense(dense(1, obs_len, &obs_values), (1..=obs_len).collect()).unwrap();
        let prefix: Vec<f64> = (0..2 * (len - 1)).map(|_| r.random_range(-1.0..1.0)).collect();
        let ts: Vec<usize> = (5..5 + len).collect();

        let run = |values: &[f64], n: usize| {
            let mut s = Session::eval(&m);
            let mem = s.encode(&obs).unwrap();
            let v = (n > 1).then(|| dense(1, n - 1, &values[..2 * (n - 1)]));
            let y = s.decode(&mem, &DecoderInput::new(1, v, ts[..n].to_vec()).unwrap()).unwrap();
            s.graph.value(y).to_f64_vec()
        };
        let full = run(&prefix, len);

        // Perturbing input `v` (decoder position v + 1) leaves outputs
        // 0..=v untouched, bit for bit.
        let v = r.random_range(0..len - 1);
        let mut bumped = prefix.clone();
        bumped[2 * v] += 0.5;
        let after = run(&bumped, len);
        prop_assert_eq!(&after[..2 * (v + 1)], &full[..2 * (v + 1)]);
        prop_assert!(after[2 * (v + 1)..] != full[2 * (v + 1)..]);

        // Dropping the later steps altogether changes nothing either.
        let n = v + 1;
        let short = run(&prefix, n);
        prop_assert_eq!(&short[..], &full[..2 * n]);
    }

    #[test]
    fn batch_order_permutes_memory(seed in 0u64..1_000_000, b in 2usize..5, len in 2usize..6) {
        let m = model(Mode::RegressionTf, 8, 1, 2, seed);
        let mut r = common::rng(seed);
        let values: Vec<f64> = (0..b * len * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let presence: Vec<bool> = (0..b * len).map(|i| i % len == 0 || r.random_bool(0.8)).collect();
        let ts: Vec<usize> = (0..b).flat_map(|_| 1..=len).collect();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.rotate_left(1);

        let states = |order: &[usize]| {
            let v: Vec<f64> = order.iter().flat_map(|&i| values[i * len * 2..(i + 1) * len * 2].to_vec()).collect();
            let p: Vec<bool> = order.iter().flat_map(|&i| presence[i * len..(i + 1) * len].to_vec()).collect();
            let batch = SequenceBatch::new(dense(b, len, &v), ts.clone(), p).unwrap();
            let mut s = Session::eval(&m);
            let mem = s.encode(&batch).unwrap();
            s.graph.value(mem.states).to_f64_vec()
        };
        let base = states(&(0..b).collect::<Vec<_>>());
        let permuted = states(&perm);
        let row = len * 8;
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&permuted[k * row..(k + 1) * row], &base[i * row..(i + 1) * row]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..8), 1..5),
        shift in -100.0f64..100.0,
    ) {
        for row in rows {
            let n = row.len();
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_f64(&[1, n], &row).unwrap());
            let y = g.softmax(x, 1).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let xs = g.constant(Tensor::from_f64(&[1, n], &shifted).unwrap());
            let ys = g.softmax(xs, 1).unwrap();
            let a = g.value(y).to_f64_vec();
            let b = g.value(ys).to_f64_vec();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1_000_000) {
        let mut r = common::rng(seed);
        let (m, k, n, p) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let mut g = Graph::<f64>::new();
        let a = g.constant(common::random_tensor(&mut r, &[m, k]));
        let b = g.constant(common::random_tensor(&mut r, &[k, n]));
        let c = g.constant(common::random_tensor(&mut r, &[n, p]));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        let (l, rr) = (g.value(left).to_f64_vec(), g.value(right).to_f64_vec());
        let diff: f64 = l.iter().zip(&rr).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = l.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-6 * norm.max(1e-12));
    }
}

#[test]
fn positional_rows_are_distinct_over_ten_thousand_steps() {
    for d in [2, 64] {
        let pe = PositionalEncoding::<f64>::new(10_000, d, 10_000.0);
        let mut rows: Vec<Vec<u64>> = (0..10_000).map(|t| pe.row(t).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 10_000, "D = {d}");
    }
}

#[test]
fn positional_entry_one_zero_is_sin_one() {
    let pe = PositionalEncoding::<f64>::new(64, 512, 10_000.0);
    assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-9);
    assert!((pe.row(1)[0] - 0.841471).abs() < 1e-6);
}

#[test]
fn positional_encode_indexes_true_time() {
    let m = model(Mode::RegressionTf, 8, 1, 2, 0);
    let mut s = Session::eval(&m);
    let zero = s.graph.constant(Tensor::zeros(&[1, 3, 8]));
    let y = s.positional_encode(zero, &[0, 1, 3]).unwrap();
    let y = s.graph.value(y).to_f64_vec();
    let pe = m.positional();
    for (k, t) in [0usize, 1, 3].into_iter().enumerate() {
        assert_eq!(&y[k * 8..(k + 1) * 8], pe.row(t));
    }
    let zero = s.graph.constant(Tensor::zeros(&[1, 1, 8]));
    assert!(s.positional_encode(zero, &[64]).is_err());
}

#[test]
fn embedding_matches_a_dense_oracle() {
    let m = model(Mode::RegressionTf, 16, 1, 2, 9);
    let mut r = common::rng(4);
    let x: Vec<f64> = (0..3 * 5 * 2).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut s = Session::eval(&m);
    let e = s.embed_inputs(&dense(3, 5, &x)).unwrap();
    let e = s.graph.value(e).to_f64_vec();
    let w = m.params.get("embed.w").unwrap().to_f64_vec();
    for row in 0..15 {
        for c in 0..16 {
            let mut acc = 0.0;
            for i in 0..2 {
                acc += x[row * 2 + i] * w[i * 16 + c];
            }
            assert!((e[row * 16 + c] - acc).abs() < 1e-6);
        }
    }
}

fn norm() -> NormStats {
    NormStats {
        mean: [0.2, -0.1],
        std: [0.5, 0.25],
        split: Split::Train,
    }
}

#[test]
fn zero_speed_model_repeats_the_last_position() {
    for mode in [Mode::RegressionTf, Mode::RegressionMaskedEncoder] {
        let mut m = model(mode, 8, 1, 2, 1);
        let n = norm();
        let i = m.params.index_of("out.w").unwrap();
        m.params.set(i, Tensor::zeros(&[8, 2])).unwrap();
        let i = m.params.index_of("out.b").unwrap();
        let b = [-n.mean[0] / n.std[0], -n.mean[1] / n.std[1]];
        m.params.set(i, Tensor::from_f64(&[2], &b).unwrap()).unwrap();
        let f = Forecaster::new(m, n, None).unwrap();
        let windows = common::synth_windows(trajformer::data::SynthKind::Circular, 3, 0.0, 2, 20, 5);
        let pred = f.predict(&windows, 12, Sampler::Greedy).unwrap();
        for (w, p) in windows.iter().zip(&pred) {
            let last = w.obs[w.t_obs() - 1];
            assert_eq!(p.len(), 12);
            for q in p {
                assert!((q[0] - last[0]).abs() < 1e-12 && (q[1] - last[1]).abs() < 1e-12, "{mode:?}");
            }
        }
    }
}

#[test]
fn eval_forward_is_bit_reproducible() {
    let (f, windows) = common::gradcheck_setup(Mode::RegressionTf, 8, 3);
    let a = f.predict(&windows, 12, Sampler::Greedy).unwrap();
    let b = f.predict(&windows, 12, Sampler::Greedy).unwrap();
    assert_eq!(a, b);
    assert_eq!(common::model_loss(&f, &windows), common::model_loss(&f, &windows));
}

#[test]
fn identical_sequences_give_identical_outputs() {
    let (f, windows) = common::gradcheck_setup(Mode::RegressionTf, 8, 3);
    let twins = vec![windows[0].clone(), windows[0].clone()];
    let p = f.predict(&twins, 5, Sampler::Greedy).unwrap();
    assert_eq!(p[0], p[1]);
}

#[test]
fn classification_decoding() {
    let (f, windows) = common::gradcheck_setup(Mode::ClassificationTfq, 8, 3);
    let a = f.predict(&windows, 6, Sampler::Greedy).unwrap();
    assert_eq!(a, f.predict(&windows, 6, Sampler::Greedy).unwrap());
    let s = |i| Sampler::Multinomial {
        seed: 5,
        sample_index: i,
    };
    assert_eq!(f.predict(&windows, 6, s(0)).unwrap(), f.predict(&windows, 6, s(0)).unwrap());
    // A window's draw does not depend on what else is in the batch.
    let alone = f.predict(&windows[1..], 6, s(3)).unwrap();
    assert_eq!(alone[0], f.predict(&windows, 6, s(3)).unwrap()[1]);

    let refs: Vec<_> = windows.iter().collect();
    let obs = f.encoder_batch(&refs).unwrap();
    let mut sess = Session::eval(&f.model);
    let mem = sess.encode(&obs).unwrap();
    let prefix = DecoderInput::new(2, None, vec![5, 5]).unwrap();
    let logits = sess.decode_step(&mem, &prefix).unwrap();
    let p = sess.graph.softmax(logits, 1).unwrap();
    for row in sess.graph.value(p).to_f64_vec().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn masked_encoder_output_shape_for_every_horizon() {
    let (f, windows) = common::gradcheck_setup(Mode::RegressionMaskedEncoder, 8, 2);
    let max_h = f.model.config.max_len - windows[0].t_obs();
    for h in [1, 2, 12, max_h] {
        let p = f.predict(&windows, h, Sampler::Greedy).unwrap();
        assert!(p.iter().all(|x| x.len() == h));
    }
    assert!(f.predict(&windows, max_h + 1, Sampler::Greedy).is_err());
    assert!(f.predict(&windows, 0, Sampler::Greedy).is_err());
}

#[test]
fn fully_masked_query_is_rejected() {
    let m = model(Mode::RegressionTf, 8, 1, 2, 0);
    let batch = SequenceBatch::new(dense(1, 2, &[0.0; 4]), vec![1, 2], vec![false, false]);
    let err = batch.and_then(|b| Session::eval(&m).encode(&b).map(|_| ()));
    assert!(err.is_err());
}
