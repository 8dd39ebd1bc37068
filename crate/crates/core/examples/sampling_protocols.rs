//! The quantized-speed classifier on crossing pedestrians: greedy decoding
//! against best-of-N multinomial sampling.

use trajformer::data::{make_windows, synth_corpus, SynthKind, SynthSpec, WindowSpec};
use trajformer::evaluator::{evaluate, Protocol};
use trajformer::model::{Mode, ModelConfig};
use trajformer::trainer::{LossKind, TrainConfig, Trainer};

fn main() -> trajformer::Result<()> {
    let train = make_windows(&synth_corpus(&SynthSpec::new(SynthKind::Crossing, 300, 0.01, 1)), WindowSpec::default());
    let test = make_windows(&synth_corpus(&SynthSpec::new(SynthKind::Crossing, 60, 0.01, 2)), WindowSpec::default());

    let config = TrainConfig {
        batch_size: 32,
        epochs: 40,
        warmup_epochs: 1.0,
        peak_lr: 1e-3,
        seed: 1,
        loss: LossKind::CrossEntropy,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(train, ModelConfig::sized(Mode::ClassificationTfq, 32, 1, 2, 64, 64), config)?;
    trainer.run(None)?;
    let f = trainer.into_forecaster();

    let greedy = evaluate(&f, &test, Protocol::Deterministic, "crossing")?.report;
    println!("greedy       MAD {:.3}", greedy.mad);
    for samples in [1, 5, 20] {
        let p = Protocol::BestOfN { samples, seed: 3, greedy: false };
        let r = evaluate(&f, &test, p, "crossing")?.report;
        println!("best of {samples:<3}  MAD {:.3}", r.mad);
    }
    Ok(())
}
