//! Save a trainer mid-run, resume it and confirm the continuation matches an
//! uninterrupted run; then round-trip the final model.

use trajformer::data::{make_windows, synth_corpus, SynthKind, SynthSpec, WindowSpec};
use trajformer::model::{load_forecaster, save_forecaster, Forecaster, Mode, ModelConfig, Sampler};
use trajformer::trainer::{TrainConfig, Trainer};

fn main() -> trajformer::Result<()> {
    let trajs = synth_corpus(&SynthSpec::new(SynthKind::Linear, 20, 0.02, 3));
    let windows = make_windows(&trajs, WindowSpec::default());
    let model = ModelConfig::sized(Mode::RegressionTf, 16, 1, 2, 32, 0);
    let config = TrainConfig {
        batch_size: 8,
        epochs: 2,
        warmup_epochs: 1.0,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = std::env::temp_dir().join("trajformer_ckpt");
    std::fs::create_dir_all(&dir)?;

    let mut straight = Trainer::<f32>::new(windows.clone(), model.clone(), config.clone())?;
    let mut first = Trainer::<f32>::new(windows.clone(), model, config)?;
    for _ in 0..3 {
        straight.step()?;
        first.step()?;
    }
    first.save(&dir.join("trainer.ckpt"))?;
    let mut resumed = Trainer::<f32>::load(&dir.join("trainer.ckpt"), windows.clone())?;
    straight.run(None)?;
    resumed.run(None)?;
    println!("resumed history identical: {}", straight.history == resumed.history);

    let f = resumed.into_forecaster();
    save_forecaster(&f, &dir.join("model.ckpt"))?;
    let g: Forecaster<f32> = load_forecaster(&dir.join("model.ckpt"))?;
    let a = f.predict(&windows[..2], 12, Sampler::Greedy)?;
    let b = g.predict(&windows[..2], 12, Sampler::Greedy)?;
    println!("reloaded predictions identical: {}", a == b);
    Ok(())
}
