//! Train a small encoder-decoder on circular arcs and compare it with the
//! constant-velocity baseline.

use trajformer::data::{make_windows, synth_corpus, SynthKind, SynthSpec, WindowSpec};
use trajformer::evaluator::{evaluate, LinearBaseline, Protocol};
use trajformer::model::{Mode, ModelConfig};
use trajformer::trainer::{TrainConfig, Trainer};

fn main() -> trajformer::Result<()> {
    let train = synth_corpus(&SynthSpec::new(SynthKind::Circular, 100, 0.01, 1).with_len(30));
    let test = synth_corpus(&SynthSpec::new(SynthKind::Circular, 50, 0.01, 2));
    let windows = make_windows(&train, WindowSpec::default());
    let test_windows = make_windows(&test, WindowSpec::default());

    let model = ModelConfig::sized(Mode::RegressionTf, 32, 1, 2, 64, 0);
    let config = TrainConfig {
        batch_size: 32,
        epochs: 10,
        warmup_epochs: 1.0,
        peak_lr: 5e-4,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(windows, model, config)?;
    trainer.run(None)?;
    for e in &trainer.history.epochs {
        println!("epoch {:>2}  loss {:.5}  lr {:.2e}", e.epoch, e.mean_loss, e.lr);
    }
    let f = trainer.into_forecaster();

    let tf = evaluate(&f, &test_windows, Protocol::Deterministic, "arcs")?.report;
    let lin = evaluate(&LinearBaseline, &test_windows, Protocol::Deterministic, "arcs")?.report;
    println!("transformer MAD {:.3} FAD {:.3}", tf.mad, tf.fad);
    println!("linear      MAD {:.3} FAD {:.3}", lin.mad, lin.fad);
    Ok(())
}
