//! Displacement metrics, evaluation protocols, baselines and ablations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    drop_observations, interpolate_fill, make_windows, DropPolicy, ForecastWindow, Point, Trajectory, WindowSpec,
};
use crate::error::{Error, Result};
use crate::model::{Forecaster, Sampler};
use crate::tensor::Scalar;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Errors of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// Mean displacement over the predicted steps.
    pub ade: f64,
    /// Displacement at the last predicted step.
    pub fde: f64,
}

/// Aggregate MAD / FAD with the tags that identify the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub dataset: String,
    pub horizon: usize,
    pub policy: String,
    pub n: usize,
    pub mad: f64,
    pub fad: f64,
    pub avg: f64,
    pub n_trajectories: usize,
    pub per_trajectory: Vec<TrajectoryError>,
}

impl MetricReport {
    fn from_errors(per_trajectory: Vec<TrajectoryError>, horizon: usize) -> Self {
        let n = per_trajectory.len() as f64;
        // Every trajectory has the same length, so the mean of per-trajectory
        // means is the mean over all (i, t).
        let mad = per_trajectory.iter().map(|e| e.ade).sum::<f64>() / n;
        let fad = per_trajectory.iter().map(|e| e.fde).sum::<f64>() / n;
        Self {
            protocol: String::new(),
            dataset: String::new(),
            horizon,
            policy: "none".into(),
            n: 0,
            mad,
            fad,
            avg: (mad + fad) / 2.0,
            n_trajectories: per_trajectory.len(),
            per_trajectory,
        }
    }

    pub fn with_protocol(mut self, protocol: impl Into<String>) -> Self {
        self.protocol = protocol.into();
        self
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = dataset.into();
        self
    }

    pub fn with_policy(mut self, policy: impl Into<String>, n: usize) -> Self {
        self.policy = policy.into();
        self.n = n;
        self
    }
}

fn check_pair(pred: &[Vec<Point>], gt: &[Vec<Point>]) -> Result<usize> {
    let shape_err = || Error::Shape {
        op: "mad_fad",
        lhs: vec![pred.len(), pred.first().map_or(0, Vec::len)],
        rhs: vec![gt.len(), gt.first().map_or(0, Vec::len)],
    };
    let t = gt.first().map_or(0, Vec::len);
    if gt.is_empty() || t == 0 || pred.len() != gt.len() {
        return Err(shape_err());
    }
    if pred.iter().chain(gt).any(|r| r.len() != t) {
        return Err(shape_err());
    }
    Ok(t)
}

fn trajectory_error(pred: &[Point], gt: &[Point]) -> TrajectoryError {
    let d: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).collect();
    TrajectoryError {
        ade: d.iter().sum::<f64>() / d.len() as f64,
        fde: *d.last().expect("non-empty"),
    }
}

/// MAD: mean displacement over all trajectories and steps. FAD: mean
/// displacement at the final step.
pub fn mad_fad(pred: &[Vec<Point>], gt: &[Vec<Point>]) -> Result<MetricReport> {
    let t = check_pair(pred, gt)?;
    let errs = pred.iter().zip(gt).map(|(p, g)| trajectory_error(p, g)).collect();
    Ok(MetricReport::from_errors(errs, t))
}

/// Per trajectory, keep the sample with the lowest mean displacement (first
/// one on ties) and report MAD / FAD of the kept samples.
pub fn best_of_n(samples: &[Vec<Vec<Point>>], gt: &[Vec<Point>]) -> Result<MetricReport> {
    let first = samples.first().ok_or_else(|| Error::contract("best-of-N needs at least one sample"))?;
    let t = check_pair(first, gt)?;
    for s in samples {
        check_pair(s, gt)?;
    }
    let errs = (0..gt.len())
        .map(|i| {
            samples
                .iter()
                .map(|s| trajectory_error(&s[i], &gt[i]))
                .fold(None, |best: Option<TrajectoryError>, e| match best {
                    Some(b) if b.ade <= e.ade => Some(b),
                    _ => Some(e),
                })
                .expect("at least one sample")
        })
        .collect();
    Ok(MetricReport::from_errors(errs, t))
}

/// Constant-velocity extrapolation from the last present observation at the
/// mean observed speed.
pub fn linear_baseline(w: &ForecastWindow, horizon: usize) -> Result<Vec<Point>> {
    let present = w.present_slots();
    if present.len() < 2 {
        return Err(Error::data("linear baseline needs at least 2 present observations"));
    }
    let (a, b) = (present[0], *present.last().expect("non-empty"));
    let span = (b - a) as f64;
    let v = [(w.obs[b][0] - w.obs[a][0]) / span, (w.obs[b][1] - w.obs[a][1]) / span];
    Ok((0..horizon)
        .map(|j| {
            let dt = (w.t_obs() + j - b) as f64;
            [w.obs[b][0] + v[0] * dt, w.obs[b][1] + v[1] * dt]
        })
        .collect())
}

/// Anything that turns windows into predicted positions.
pub trait Predictor: Sync {
    fn name(&self) -> String;

    fn predict(&self, windows: &[ForecastWindow], horizon: usize, sampler: Sampler) -> Result<Vec<Vec<Point>>>;
}

impl<T: Scalar> Predictor for Forecaster<T> {
    fn name(&self) -> String {
        format!("{:?}", self.mode())
    }

    fn predict(&self, windows: &[ForecastWindow], horizon: usize, sampler: Sampler) -> Result<Vec<Vec<Point>>> {
        Forecaster::predict(self, windows, horizon, sampler)
    }
}

/// The constant-velocity baseline as a [`Predictor`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearBaseline;

impl Predictor for LinearBaseline {
    fn name(&self) -> String {
        "linear".into()
    }

    fn predict(&self, windows: &[ForecastWindow], horizon: usize, _: Sampler) -> Result<Vec<Vec<Point>>> {
        windows.iter().map(|w| linear_baseline(w, horizon)).collect()
    }
}

/// How a report's predictions are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    /// One greedy prediction per window.
    Deterministic,
    /// `samples` draws per window, best one kept. `greedy` replaces the
    /// multinomial draws with argmax decoding.
    BestOfN { samples: usize, seed: u64, greedy: bool },
}

impl Protocol {
    pub fn tag(&self) -> String {
        match self {
            Protocol::Deterministic => "deterministic".into(),
            Protocol::BestOfN { samples, .. } => format!("best_of_{samples}"),
        }
    }
}

/// Predictions behind a report: `samples[s][i]` is sample `s` for window `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub samples: Vec<Vec<Vec<Point>>>,
}

fn ground_truth(windows: &[ForecastWindow]) -> Result<(Vec<Vec<Point>>, usize)> {
    let h = windows.first().map_or(0, ForecastWindow::t_pred);
    if windows.is_empty() || windows.iter().any(|w| w.t_pred() != h) {
        return Err(Error::data("evaluation needs windows with one common horizon"));
    }
    Ok((windows.iter().map(|w| w.future.clone()).collect(), h))
}

/// Run `protocol` on `windows` and score against their futures.
pub fn evaluate(p: &dyn Predictor, windows: &[ForecastWindow], protocol: Protocol, dataset: &str) -> Result<Evaluation> {
    let (gt, h) = ground_truth(windows)?;
    let (report, samples) = match protocol {
        Protocol::Deterministic => {
            let pred = p.predict(windows, h, Sampler::Greedy)?;
            (mad_fad(&pred, &gt)?, vec![pred])
        }
        Protocol::BestOfN { samples, seed, greedy } => {
            if samples == 0 {
                return Err(Error::config("eval.samples", "must be at least 1"));
            }
            let all = (0..samples as u64)
                .map(|s| {
                    let sampler = if greedy {
                        Sampler::Greedy
                    } else {
                        Sampler::Multinomial { seed, sample_index: s }
                    };
                    p.predict(windows, h, sampler)
                })
                .collect::<Result<Vec<_>>>()?;
            (best_of_n(&all, &gt)?, all)
        }
    };
    Ok(Evaluation {
        report: report.with_protocol(protocol.tag()).with_dataset(dataset),
        samples,
    })
}

/// One report per horizon, windows re-cut from `trajs` for each.
pub fn ablate_horizon(
    p: &dyn Predictor,
    trajs: &[Trajectory],
    t_obs: usize,
    stride: usize,
    horizons: &[usize],
    dataset: &str,
) -> Result<Vec<MetricReport>> {
    horizons
        .iter()
        .map(|&h| {
            let windows = make_windows(trajs, WindowSpec { t_obs, t_pred: h, stride });
            if windows.is_empty() {
                return Err(Error::data(format!("no trajectory is long enough for horizon {h}")));
            }
            Ok(evaluate(p, &windows, Protocol::Deterministic, dataset)?.report)
        })
        .collect()
}

/// Deterministic reports after dropping observations per policy. Each policy
/// is scored with presence masks (`policy` tag as is) and, where both ends
/// of the observation survive, after linear interpolation (`+fill`).
pub fn ablate_missing(
    p: &dyn Predictor,
    windows: &[ForecastWindow],
    policies: &[DropPolicy],
    with_fill: bool,
    dataset: &str,
) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for &policy in policies {
        let dropped = windows
            .iter()
            .map(|w| drop_observations(w, policy))
            .collect::<Result<Vec<_>>>()?;
        let r = evaluate(p, &dropped, Protocol::Deterministic, dataset)?.report;
        out.push(r.with_policy(policy.name(), policy.n()));
        if with_fill {
            if let Ok(filled) = dropped.iter().map(interpolate_fill).collect::<Result<Vec<_>>>() {
                let r = evaluate(p, &filled, Protocol::Deterministic, dataset)?.report;
                out.push(r.with_policy(format!("{}+fill", policy.name()), policy.n()));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CsvRow<'a> {
    protocol: &'a str,
    dataset: &'a str,
    horizon: usize,
    policy: &'a str,
    n: usize,
    #[serde(rename = "MAD")]
    mad: f64,
    #[serde(rename = "FAD")]
    fad: f64,
    #[serde(rename = "AVG")]
    avg: f64,
}

pub const CSV_HEADER: [&str; 8] = ["protocol", "dataset", "horizon", "policy", "n", "MAD", "FAD", "AVG"];

/// Write `results.csv` and `results.jsonl` under `dir`.
pub fn emit_results(reports: &[MetricReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join("results.csv"))?;
    csv.write_record(CSV_HEADER)?;
    for r in reports {
        csv.serialize(CsvRow {
            protocol: &r.protocol,
            dataset: &r.dataset,
            horizon: r.horizon,
            policy: &r.policy,
            n: r.n,
            mad: r.mad,
            fad: r.fad,
            avg: r.avg,
        })?;
    }
    csv.flush()?;
    let mut jsonl = BufWriter::new(File::create(dir.join("results.jsonl"))?);
    for r in reports {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    Ok(())
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).map_err(Error::file(path))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct DumpRow<'a> {
    scene: &'a str,
    agent: i64,
    t0: i64,
    obs: &'a [Point],
    mask: &'a [bool],
    gt: &'a [Point],
    samples: Vec<&'a [Point]>,
}

/// One JSON line per window with observations, ground truth and every
/// predicted sample, for external plotting.
pub fn write_trajectory_dump(windows: &[ForecastWindow], samples: &[Vec<Vec<Point>>], path: &Path) -> Result<()> {
    if samples.iter().any(|s| s.len() != windows.len()) {
        return Err(Error::contract("every sample set must cover every window"));
    }
    let mut out = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    for (i, w) in windows.iter().enumerate() {
        let row = DumpRow {
            scene: &w.scene,
            agent: w.agent,
            t0: w.t0,
            obs: &w.obs,
            mask: &w.mask,
            gt: &w.future,
            samples: samples.iter().map(|s| s[i].as_slice()).collect(),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
