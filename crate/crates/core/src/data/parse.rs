use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Point, Trajectory};
use crate::error::{Error, Result};

/// Annotation dialects. Both use whitespace-delimited `frame agent x y` rows
/// in world meters, one scene per file; the tag records where a file came
/// from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    TrajnetWorld,
    EthucyWorld,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajnet_world" => Ok(Self::TrajnetWorld),
            "ethucy_world" => Ok(Self::EthucyWorld),
            other => Err(Error::config("data.format", format!("unknown annotation format `{other}`"))),
        }
    }
}

fn integral(field: &str) -> Option<i64> {
    let v: f64 = field.parse().ok()?;
    (v.fract() == 0.0 && v.is_finite()).then_some(v as i64)
}

/// Parse one annotation file into per-agent trajectories sorted by agent id.
///
/// Blank lines and `#` comments are skipped. Frame and agent ids may be
/// written as integral floats (`10.0`). Within an agent, rows must appear in
/// strictly increasing frame order; a repeated `(frame, agent)` pair or a
/// frame going backwards is a data error.
pub fn parse_annotations(path: &Path, _format: AnnotationFormat) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let scene = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut agents: BTreeMap<i64, (Vec<i64>, Vec<Point>)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields (frame agent x y), found {}", fields.len())));
        }
        let frame = integral(fields[0]).ok_or_else(|| parse_err(line, format!("bad frame `{}`", fields[0])))?;
        let agent = integral(fields[1]).ok_or_else(|| parse_err(line, format!("bad agent id `{}`", fields[1])))?;
        let mut xy = [0.0; 2];
        for (v, f) in xy.iter_mut().zip(&fields[2..]) {
            *v = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad coordinate `{f}`")))?;
        }
        let (frames, positions) = agents.entry(agent).or_default();
        if let Some(&last) = frames.last() {
            if frame == last {
                return Err(Error::data(format!(
                    "{}:{line}: duplicate row for frame {frame}, agent {agent}",
                    path.display()
                )));
            }
            if frame < last {
                return Err(Error::data(format!(
                    "{}:{line}: frame {frame} of agent {agent} follows frame {last}",
                    path.display()
                )));
            }
        }
        frames.push(frame);
        positions.push(xy);
    }

    // Scene frame step: smallest positive increment seen for any agent.
    let frame_step = agents
        .values()
        .flat_map(|(f, _)| f.windows(2).map(|w| w[1] - w[0]))
        .min()
        .unwrap_or(1);

    Ok(agents
        .into_iter()
        .map(|(agent, (frames, positions))| Trajectory {
            scene: scene.clone(),
            agent,
            frames,
            positions,
            frame_step,
        })
        .collect())
}

/// Write trajectories as `frame agent x y` rows ordered by frame then agent.
/// Coordinates use the shortest exact decimal form, so re-parsing is lossless.
pub fn write_annotations(trajs: &[Trajectory], path: &Path) -> Result<()> {
    let mut rows: Vec<(i64, i64, Point)> = trajs
        .iter()
        .flat_map(|t| t.frames.iter().zip(&t.positions).map(move |(&f, &p)| (f, t.agent, p)))
        .collect();
    rows.sort_by_key(|&(f, a, _)| (f, a));
    let mut out = String::new();
    for (f, a, [x, y]) in rows {
        writeln!(out, "{f}\t{a}\t{x:?}\t{y:?}").expect("write to string");
    }
    fs::write(path, out).map_err(Error::file(path))?;
    Ok(())
}
