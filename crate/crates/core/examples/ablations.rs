//! Horizon and missing-observation sweeps on a small trained model.

use trajformer::data::{make_windows, synth_corpus, DropPolicy, SynthKind, SynthSpec, WindowSpec};
use trajformer::evaluator::{ablate_horizon, ablate_missing};
use trajformer::model::{Mode, ModelConfig};
use trajformer::trainer::{TrainConfig, Trainer};

fn main() -> trajformer::Result<()> {
    let train = synth_corpus(&SynthSpec::new(SynthKind::Circular, 100, 0.01, 1).with_len(40));
    let test = synth_corpus(&SynthSpec::new(SynthKind::Circular, 40, 0.01, 2).with_len(40));
    let config = TrainConfig {
        batch_size: 32,
        epochs: 8,
        warmup_epochs: 1.0,
        peak_lr: 5e-4,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = ModelConfig::sized(Mode::RegressionTf, 32, 1, 2, 64, 0);
    let mut trainer = Trainer::<f32>::new(make_windows(&train, WindowSpec::default()), model, config)?;
    trainer.run(None)?;
    let f = trainer.into_forecaster();

    for r in ablate_horizon(&f, &test, 8, 10, &[12, 16, 20, 24, 28, 32], "arcs")? {
        println!("horizon {:>2}  MAD {:.3}  FAD {:.3}", r.horizon, r.mad, r.fad);
    }

    let windows = make_windows(&test, WindowSpec { stride: 10, ..WindowSpec::default() });
    let mut policies = Vec::new();
    for n in 1..=4 {
        policies.push(DropPolicy::MostRecentInclCurrent(n));
        policies.push(DropPolicy::MostRecentExclCurrent(n));
    }
    for r in ablate_missing(&f, &windows, &policies, true, "arcs")? {
        println!("{:<18} n {}  MAD {:.3}", r.policy, r.n, r.mad);
    }
    Ok(())
}
