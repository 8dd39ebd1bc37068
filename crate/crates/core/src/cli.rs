//! Command-line front end. The binary only forwards `std::env::args` here.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! error, 3 numeric failure during training or inference.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ProtocolName, RunConfig};
use crate::data::{synth_corpus, write_annotations, write_trajnet_submission, SynthKind, SynthSpec};
use crate::error::{Error, Result};
use crate::evaluator::{
    ablate_horizon, ablate_missing, emit_results, evaluate, write_trajectory_dump, LinearBaseline, MetricReport,
    Protocol,
};
use crate::model::{load_forecaster, save_forecaster, Forecaster, Sampler};
use crate::trainer::Trainer;

#[derive(Debug, Parser)]
#[command(name = "trajformer", version, about = "Transformer pedestrian trajectory forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set model.d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    Horizon,
    Missing,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model; writes model.ckpt, trainer.ckpt, train_log.jsonl,
    /// history.json and config.toml under the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a trainer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// deterministic, best_of_n or trajnet.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Horizon or missing-observation sweep.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Comma-separated horizons, e.g. `12,16,20`.
        #[arg(long)]
        horizons: Option<String>,
        /// Comma-separated numbers of dropped observations, e.g. `0,1,2`.
        #[arg(long)]
        drops: Option<String>,
    },
    /// Write a synthetic annotation file.
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 20)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict every test observation window and write TrajNet rows.
    ExportTrajnet {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn split_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("`{s}` is not KEY=VALUE")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_list(s: &str, field: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::config(field, format!("`{x}` is not a non-negative integer")))
        })
        .collect()
}

impl RunArgs {
    fn resolve(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let mut o = self
            .overrides
            .iter()
            .map(|s| split_override(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            o.push(("train.seed".into(), seed.to_string()));
        }
        if let Some(out) = &self.out {
            o.push(("out_dir".into(), format!("{:?}", out.display().to_string())));
        }
        o.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &o)
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_toml())?;
    Ok(())
}

fn print_reports(reports: &[MetricReport]) {
    for r in reports {
        println!(
            "{:<14} {:<10} h={:<3} {:<22} n={} MAD={:.4} FAD={:.4} AVG={:.4}",
            r.protocol, r.dataset, r.horizon, r.policy, r.n, r.mad, r.fad, r.avg
        );
    }
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Forecaster<f32>> {
    let dir = out_dir(cfg)?;
    write_config(cfg, &dir.join("config.toml"))?;
    let windows = cfg.train_windows()?;
    let mut trainer = match resume {
        Some(p) => {
            // Only the stopping point may change on resume.
            let mut t = Trainer::<f32>::load(p, windows)?;
            let mut want = cfg.train.clone();
            want.epochs = t.config.epochs;
            want.max_steps = t.config.max_steps;
            if t.config != want {
                return Err(Error::config("train", "differs from the configuration stored in the checkpoint"));
            }
            t.config = cfg.train.clone();
            t
        }
        None => Trainer::<f32>::new(windows, cfg.model.to_config(), cfg.train.clone())?,
    };
    eprintln!(
        "training {} windows, {} steps per epoch, {} steps",
        trainer.windows().len(),
        trainer.steps_per_epoch(),
        trainer.total_steps()
    );
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(dir.join("train_log.jsonl"))?,
    );
    let result = trainer.run(Some(&mut log)).map(|_| ());
    log.flush()?;
    // A numeric failure still leaves a resumable checkpoint behind.
    trainer.save(&dir.join("trainer.ckpt"))?;
    result?;
    fs::write(dir.join("history.json"), serde_json::to_string_pretty(&trainer.history)?)?;
    if let Some(e) = trainer.history.epochs.last() {
        println!("epoch {} mean_loss {:.6} lr {:.3e}", e.epoch, e.mean_loss, e.lr);
    }
    let f = trainer.into_forecaster();
    save_forecaster(&f, &dir.join("model.ckpt"))?;
    Ok(f)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<MetricReport>> {
    let f: Forecaster<f32> = load_forecaster(checkpoint)?;
    let dir = out_dir(cfg)?;
    write_config(cfg, &dir.join("config.evaluate.toml"))?;
    let windows = cfg.test_windows()?;
    let protocol = cfg.eval.protocol();
    let ds = &cfg.eval.dataset;
    let ev = evaluate(&f, &windows, protocol, ds)?;
    let mut reports = vec![ev.report.clone()];
    if cfg.eval.baseline {
        let base = evaluate(&LinearBaseline, &windows, Protocol::Deterministic, ds)?;
        reports.push(base.report.with_protocol("linear"));
    }
    write_trajectory_dump(&windows, &ev.samples, &dir.join("trajectories.jsonl"))?;
    if cfg.eval.protocol == ProtocolName::Trajnet {
        write_trajnet_submission(&windows, &ev.samples[0], &dir.join("submission.txt"))?;
    }
    emit_results(&reports, &dir)?;
    Ok(reports)
}

pub fn cmd_ablate(cfg: &RunConfig, checkpoint: &Path, kind: AblationKind) -> Result<Vec<MetricReport>> {
    let f: Forecaster<f32> = load_forecaster(checkpoint)?;
    let ds = &cfg.eval.dataset;
    let (reports, sub) = match kind {
        AblationKind::Horizon => {
            if cfg.eval.horizons.is_empty() || cfg.eval.horizons.contains(&0) {
                return Err(Error::config("eval.horizons", "need one or more positive horizons"));
            }
            let trajs = cfg.test_trajectories()?;
            let r = ablate_horizon(&f, &trajs, cfg.data.t_obs, cfg.data.stride, &cfg.eval.horizons, ds)?;
            (r, "ablate_horizon")
        }
        AblationKind::Missing => {
            let policies = cfg.eval.drop_policies(cfg.data.t_obs)?;
            let windows = cfg.test_windows()?;
            (ablate_missing(&f, &windows, &policies, cfg.eval.fill, ds)?, "ablate_missing")
        }
    };
    let dir = out_dir(cfg)?.join(sub);
    fs::create_dir_all(&dir)?;
    write_config(cfg, &dir.join("config.toml"))?;
    emit_results(&reports, &dir)?;
    Ok(reports)
}

pub fn cmd_synth(kind: SynthKind, n: usize, seed: u64, noise: f64, len: usize, out: &Path) -> Result<()> {
    if len < 2 {
        return Err(Error::config("--len", "trajectories need at least 2 samples"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("--noise", "must be finite and non-negative"));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let trajs = synth_corpus(&SynthSpec::new(kind, n, noise, seed).with_len(len));
    write_annotations(&trajs, out)
}

pub fn cmd_export_trajnet(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    let f: Forecaster<f32> = load_forecaster(checkpoint)?;
    let windows = cfg.observation_windows()?;
    let pred = f.predict(&windows, cfg.data.t_pred, Sampler::Greedy)?;
    let dir = out_dir(cfg)?;
    let path = dir.join("submission.txt");
    write_trajnet_submission(&windows, &pred, &path)?;
    Ok(path)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.resolve(&[])?;
            cmd_train(&cfg, resume.as_deref())?;
        }
        Command::Evaluate {
            run,
            checkpoint,
            protocol,
            samples,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = protocol {
                p.parse::<ProtocolName>()?;
                extra.push(("eval.protocol".to_string(), format!("{p:?}")));
            }
            if let Some(s) = samples {
                extra.push(("eval.samples".to_string(), s.to_string()));
            }
            let cfg = run.resolve(&extra)?;
            print_reports(&cmd_evaluate(&cfg, &checkpoint)?);
        }
        Command::Ablate {
            run,
            checkpoint,
            kind,
            horizons,
            drops,
        } => {
            let mut cfg = run.resolve(&[])?;
            if let Some(h) = horizons {
                cfg.eval.horizons = parse_list(&h, "--horizons")?;
            }
            if let Some(d) = drops {
                cfg.eval.drops = parse_list(&d, "--drops")?;
            }
            cfg.validate()?;
            print_reports(&cmd_ablate(&cfg, &checkpoint, kind)?);
        }
        Command::Synth {
            kind,
            n,
            seed,
            noise,
            len,
            out,
        } => cmd_synth(kind.parse()?, n, seed, noise, len, &out)?,
        Command::ExportTrajnet { run, checkpoint } => {
            let cfg = run.resolve(&[])?;
            println!("{}", cmd_export_trajnet(&cfg, &checkpoint)?.display());
        }
    }
    Ok(())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["trajformer"]), 1);
        assert_eq!(run(["trajformer", "fly"]), 1);
        assert_eq!(run(["trajformer", "synth", "--kind", "zigzag", "--n", "3", "--out", "x"]), 1);
        assert_eq!(run(["trajformer", "--help"]), 0);
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list("12, 16,20", "h").unwrap(), vec![12, 16, 20]);
        assert!(parse_list("12,x", "h").is_err());
        assert!(split_override("a.b").is_err());
        assert_eq!(split_override("a.b = 3").unwrap(), ("a.b".into(), "3".into()));
    }
}
