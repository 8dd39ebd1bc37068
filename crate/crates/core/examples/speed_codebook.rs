//! Cluster training speeds into codebooks of increasing size and report the
//! quantization error of each.

use trajformer::data::{make_windows, synth_corpus, SynthKind, SynthSpec, WindowSpec};
use trajformer::quantizer::{augmented_speed_corpus, build_codebook, Codebook};

fn main() -> trajformer::Result<()> {
    let trajs = synth_corpus(&SynthSpec::new(SynthKind::Crossing, 100, 0.05, 4));
    let windows = make_windows(&trajs, WindowSpec::default());
    let speeds = augmented_speed_corpus(&windows, 4);
    println!("{} speeds", speeds.len());

    for k in [10, 50, 200] {
        let cb = build_codebook(&speeds, k, 0)?;
        println!("k {k:>4}  mean error {:.4} m/step", cb.mean_quantization_error(&speeds));
    }

    let cb = build_codebook(&speeds, 16, 0)?;
    let path = std::env::temp_dir().join("trajformer_codebook.bin");
    cb.save(&path)?;
    let back = Codebook::load(&path)?;
    let v = [0.3, -0.1];
    let class = back.assign(v);
    println!("{v:?} -> class {class} -> centroid {:?}", back.decode(class)?);
    Ok(())
}
