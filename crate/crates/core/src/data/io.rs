use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ForecastWindow, Point};
use crate::error::{Error, Result};

/// One JSON object per line: `scene, agent, t0, frame_step, obs, fut, mask`.
pub fn write_windows_jsonl(windows: &[ForecastWindow], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    for w in windows {
        serde_json::to_writer(&mut out, w)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_windows_jsonl(path: &Path) -> Result<Vec<ForecastWindow>> {
    let reader = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: ForecastWindow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        w.validate()?;
        out.push(w);
    }
    Ok(out)
}

/// TrajNet-style prediction rows: for each window, in input order, one
/// `frame agent x y` row per predicted step. Frames continue the window's
/// clock after the last observation.
pub fn write_trajnet_submission(windows: &[ForecastWindow], predictions: &[Vec<Point>], path: &Path) -> Result<()> {
    if windows.len() != predictions.len() {
        return Err(Error::Shape {
            op: "trajnet_submission",
            lhs: vec![windows.len()],
            rhs: vec![predictions.len()],
        });
    }
    let mut out = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    for (w, pred) in windows.iter().zip(predictions) {
        for (j, [x, y]) in pred.iter().enumerate() {
            let frame = w.t0 + (w.t_obs() + j) as i64 * w.frame_step;
            writeln!(out, "{frame} {} {x:.6} {y:.6}", w.agent)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn submission_rows_continue_the_clock() {
        let w = ForecastWindow {
            scene: "s".into(),
            agent: 4,
            t0: 100,
            frame_step: 10,
            obs: vec![[0.0, 0.0]; 8],
            future: vec![[0.0, 0.0]; 2],
            mask: vec![true; 8],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub.txt");
        write_trajnet_submission(&[w], &[vec![[1.0, 2.0], [1.5, 2.5]]], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "180 4 1.000000 2.000000\n190 4 1.500000 2.500000\n");
    }
}
