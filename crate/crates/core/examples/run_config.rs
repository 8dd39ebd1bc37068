//! A TOML run configuration with command-line style overrides, then the
//! same thing through the CLI entry point.

use trajformer::config::RunConfig;

fn main() -> trajformer::Result<()> {
    let text = r#"
out_dir = "runs/example"

[data]
train = ["train.txt"]
test = ["test.txt"]

[model]
d_model = 32
n_layers = 1
n_heads = 2
d_ff = 64

[train]
epochs = 5
warmup_epochs = 1
"#;
    let overrides = [("train.seed".to_string(), "7".to_string()), ("model.dropout".to_string(), "0.0".to_string())];
    let cfg = RunConfig::from_toml(text, &overrides)?;
    println!("{}", cfg.to_toml());

    match RunConfig::from_toml(text, &[("model.n_heads".into(), "5".into())]) {
        Err(e) => println!("rejected: {e} (exit code {})", e.exit_code()),
        Ok(_) => println!("unexpectedly accepted"),
    }

    let out = std::env::temp_dir().join("trajformer_cli").join("arcs.txt");
    let code = trajformer::cli::run([
        "trajformer",
        "synth",
        "--kind",
        "circular",
        "--n",
        "5",
        "--out",
        out.to_str().expect("utf-8 temp path"),
    ]);
    println!("synth exit code {code}, wrote {}", out.display());
    Ok(())
}
