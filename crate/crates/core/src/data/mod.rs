//! Trajectories, forecast windows and everything that turns annotation files
//! into model-ready speed sequences.
//!
//! Positions are world-plane meters. A window's observation slots are
//! numbered `0..T_obs` (slot `T_obs - 1` is the current frame) and its future
//! slots continue at `T_obs..T_obs + T_pred`; the model's timestamps use the
//! same numbering.

mod io;
mod parse;
mod synth;
mod window;

pub use io::{read_windows_jsonl, write_trajnet_submission, write_windows_jsonl};
pub use parse::{parse_annotations, write_annotations, AnnotationFormat};
pub use synth::{synth_corpus, SynthKind, SynthSpec};
pub use window::{
    augment_scale, drop_observations, fit_norm, integrate, interpolate_fill, make_windows, obs_speed_tokens,
    scale_window, target_speeds, to_speeds, DropPolicy, NormStats, Split, WindowSpec,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A world-plane point or displacement, `[x, y]`.
pub type Point = [f64; 2];

/// One agent's track within a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene: String,
    pub agent: i64,
    pub frames: Vec<i64>,
    pub positions: Vec<Point>,
    /// Frame-id increment between consecutive samples of the scene.
    pub frame_step: i64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.positions.len() {
            return Err(Error::data(format!(
                "agent {} in {}: {} frames but {} positions",
                self.agent,
                self.scene,
                self.frames.len(),
                self.positions.len()
            )));
        }
        if self.frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data(format!(
                "agent {} in {}: frames not strictly increasing",
                self.agent, self.scene
            )));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "agent {} in {}: non-finite position",
                self.agent, self.scene
            )));
        }
        Ok(())
    }
}

/// An observed track segment paired with its ground-truth continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastWindow {
    pub scene: String,
    pub agent: i64,
    /// Frame id of observation slot 0.
    pub t0: i64,
    pub frame_step: i64,
    pub obs: Vec<Point>,
    #[serde(rename = "fut")]
    pub future: Vec<Point>,
    /// Presence of each observation slot.
    pub mask: Vec<bool>,
}

impl ForecastWindow {
    pub fn t_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn t_pred(&self) -> usize {
        self.future.len()
    }

    /// Observation slot indices on the model clock.
    pub fn timestamps(&self) -> Vec<usize> {
        (0..self.obs.len()).collect()
    }

    /// Slots whose observation is present.
    pub fn present_slots(&self) -> Vec<usize> {
        (0..self.obs.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Last present observation slot and its position.
    pub fn last_present(&self) -> Option<(usize, Point)> {
        (0..self.obs.len()).rev().find(|&i| self.mask[i]).map(|i| (i, self.obs[i]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.obs.len() {
            return Err(Error::data("mask length differs from observation length"));
        }
        if self.mask.iter().filter(|&&m| m).count() < 2 {
            return Err(Error::data(format!(
                "window {}/{}@{} has fewer than 2 present observations",
                self.scene, self.agent, self.t0
            )));
        }
        Ok(())
    }
}

/// The five ETH/UCY scenes used for leave-one-out evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Eth,
    Hotel,
    UcyUniv,
    Zara1,
    Zara2,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [Dataset::Eth, Dataset::Hotel, Dataset::UcyUniv, Dataset::Zara1, Dataset::Zara2];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Eth => "eth",
            Dataset::Hotel => "hotel",
            Dataset::UcyUniv => "ucy_univ",
            Dataset::Zara1 => "zara1",
            Dataset::Zara2 => "zara2",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eth" => Ok(Dataset::Eth),
            "hotel" => Ok(Dataset::Hotel),
            "ucy_univ" | "univ" => Ok(Dataset::UcyUniv),
            "zara1" | "zara01" => Ok(Dataset::Zara1),
            "zara2" | "zara02" => Ok(Dataset::Zara2),
            other => Err(Error::config(
                "held_out",
                format!("unknown dataset `{other}` (expected eth, hotel, ucy_univ, zara1, zara2)"),
            )),
        }
    }
}

/// Train on four datasets, test on the held-out fifth.
pub fn loo_split(
    datasets: &BTreeMap<Dataset, Vec<Trajectory>>,
    held_out: &str,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let held: Dataset = held_out.parse()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&name, trajs) in datasets {
        if name == held {
            test.extend(trajs.iter().cloned());
        } else {
            train.extend(trajs.iter().cloned());
        }
    }
    Ok((train, test))
}
