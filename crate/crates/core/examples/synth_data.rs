//! Generate the synthetic corpora, write them as annotation files and cut
//! forecast windows from them.

use trajformer::data::{
    make_windows, parse_annotations, synth_corpus, write_annotations, AnnotationFormat, SynthKind, SynthSpec,
    WindowSpec,
};

fn main() -> trajformer::Result<()> {
    let dir = std::env::temp_dir().join("trajformer_synth");
    std::fs::create_dir_all(&dir)?;
    for kind in [SynthKind::Linear, SynthKind::Circular, SynthKind::Crossing] {
        let trajs = synth_corpus(&SynthSpec::new(kind, 50, 0.01, 0).with_len(24));
        let path = dir.join(format!("{kind:?}.txt").to_lowercase());
        write_annotations(&trajs, &path)?;
        let back = parse_annotations(&path, AnnotationFormat::TrajnetWorld)?;
        let windows = make_windows(&back, WindowSpec::default());
        let w = &windows[0];
        println!(
            "{kind:?}: {} trajectories, {} windows, first window observes {:?} .. {:?}",
            back.len(),
            windows.len(),
            w.obs[0],
            w.obs[w.t_obs() - 1]
        );
    }
    println!("files in {}", dir.display());
    Ok(())
}
