use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ForecastWindow, Point, Trajectory};
use crate::error::{Error, Result};

/// Observation / prediction lengths and the start-to-start stride between
/// consecutive windows of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            stride: 1,
        }
    }
}

/// Cut every contiguous `t_obs + t_pred` slice whose frames advance by
/// exactly the scene frame step, starting every `stride` samples.
pub fn make_windows(trajs: &[Trajectory], spec: WindowSpec) -> Vec<ForecastWindow> {
    let stride = spec.stride.max(1);
    let len = spec.t_obs + spec.t_pred;
    let mut out = Vec::new();
    for t in trajs {
        if t.len() < len || len == 0 {
            continue;
        }
        let mut start = 0;
        while start + len <= t.len() {
            let frames = &t.frames[start..start + len];
            let contiguous = frames.windows(2).all(|w| w[1] - w[0] == t.frame_step);
            if contiguous {
                let pos = &t.positions[start..start + len];
                out.push(ForecastWindow {
                    scene: t.scene.clone(),
                    agent: t.agent,
                    t0: frames[0],
                    frame_step: t.frame_step,
                    obs: pos[..spec.t_obs].to_vec(),
                    future: pos[spec.t_obs..].to_vec(),
                    mask: vec![true; spec.t_obs],
                });
            }
            start += stride;
        }
    }
    out
}

/// Per-step displacements `p[t] - p[t-1]`; one shorter than the input.
pub fn to_speeds(positions: &[Point]) -> Vec<Point> {
    positions
        .windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .collect()
}

/// Cumulative sum of `speeds` starting from `anchor` (anchor excluded).
pub fn integrate(anchor: Point, speeds: &[Point]) -> Vec<Point> {
    let mut p = anchor;
    speeds
        .iter()
        .map(|v| {
            p = [p[0] + v[0], p[1] + v[1]];
            p
        })
        .collect()
}

/// Encoder speed tokens for observation slots `1..T_obs`.
///
/// A slot yields a token when its observation is present and some earlier
/// observation is present; the token is the mean per-step displacement since
/// that earlier observation, so gaps keep the true clock.
pub fn obs_speed_tokens(w: &ForecastWindow) -> Vec<Option<Point>> {
    let mut prev: Option<usize> = None;
    let mut out = Vec::with_capacity(w.t_obs().saturating_sub(1));
    for i in 0..w.t_obs() {
        let tok = match (w.mask[i], prev) {
            (true, Some(j)) => {
                let dt = (i - j) as f64;
                Some([(w.obs[i][0] - w.obs[j][0]) / dt, (w.obs[i][1] - w.obs[j][1]) / dt])
            }
            _ => None,
        };
        if i > 0 {
            out.push(tok);
        }
        if w.mask[i] {
            prev = Some(i);
        }
    }
    out
}

/// Ground-truth future speeds, starting from the current frame.
pub fn target_speeds(w: &ForecastWindow) -> Result<Vec<Point>> {
    let current = w.t_obs().checked_sub(1).filter(|&c| w.mask[c]).ok_or_else(|| {
        Error::contract("target speeds need the current frame to be present")
    })?;
    let mut path = Vec::with_capacity(w.t_pred() + 1);
    path.push(w.obs[current]);
    path.extend_from_slice(&w.future);
    Ok(to_speeds(&path))
}

/// Which split a statistic was computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Componentwise speed standardization (population standard deviation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Point,
    pub std: Point,
    pub split: Split,
}

impl NormStats {
    pub fn from_speeds(speeds: &[Point], split: Split) -> Result<Self> {
        if speeds.len() < 2 {
            return Err(Error::data("normalization needs at least 2 speed samples"));
        }
        let n = speeds.len() as f64;
        let mut mean = [0.0; 2];
        for v in speeds {
            mean[0] += v[0];
            mean[1] += v[1];
        }
        mean = [mean[0] / n, mean[1] / n];
        let mut var = [0.0; 2];
        for v in speeds {
            var[0] += (v[0] - mean[0]).powi(2);
            var[1] += (v[1] - mean[1]).powi(2);
        }
        let std = [(var[0] / n).sqrt(), (var[1] / n).sqrt()];
        if std.iter().any(|&s| !(s > 1e-12)) {
            return Err(Error::data(format!("zero standard deviation in speed statistics: {std:?}")));
        }
        Ok(Self { mean, std, split })
    }

    pub fn apply(&self, v: Point) -> Point {
        [(v[0] - self.mean[0]) / self.std[0], (v[1] - self.mean[1]) / self.std[1]]
    }

    pub fn invert(&self, v: Point) -> Point {
        [v[0] * self.std[0] + self.mean[0], v[1] * self.std[1] + self.mean[1]]
    }

    /// Refuse statistics that did not come from a training split.
    pub fn require_train(&self) -> Result<()> {
        match self.split {
            Split::Train => Ok(()),
            Split::Test => Err(Error::contract("normalization statistics computed on a test split")),
        }
    }
}

/// Fit statistics on all observed tokens and future speeds of `windows`.
pub fn fit_norm(windows: &[ForecastWindow], split: Split) -> Result<NormStats> {
    let mut speeds = Vec::new();
    for w in windows {
        speeds.extend(obs_speed_tokens(w).into_iter().flatten());
        if let Ok(t) = target_speeds(w) {
            speeds.extend(t);
        }
    }
    NormStats::from_speeds(&speeds, split)
}

/// Multiply every position (hence every speed) by `s`.
pub fn scale_window(w: &ForecastWindow, s: f64) -> ForecastWindow {
    let sc = |p: &Point| [p[0] * s, p[1] * s];
    ForecastWindow {
        obs: w.obs.iter().map(sc).collect(),
        future: w.future.iter().map(sc).collect(),
        ..w.clone()
    }
}

/// Scale by `s ~ U[0.5, 2]`; returns the scaled window and `s`.
pub fn augment_scale<R: Rng + ?Sized>(w: &ForecastWindow, rng: &mut R) -> (ForecastWindow, f64) {
    let s = rng.random_range(0.5..=2.0);
    (scale_window(w, s), s)
}

/// Observation-dropping schemes for the missing-data study. `n` counts
/// dropped samples; `SingleAt(k)` drops the sample `k` steps before the
/// current frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum DropPolicy {
    MostRecentInclCurrent(usize),
    MostRecentExclCurrent(usize),
    SingleAt(usize),
}

impl DropPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            DropPolicy::MostRecentInclCurrent(_) => "incl_current",
            DropPolicy::MostRecentExclCurrent(_) => "excl_current",
            DropPolicy::SingleAt(_) => "single_at",
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            DropPolicy::MostRecentInclCurrent(n) | DropPolicy::MostRecentExclCurrent(n) | DropPolicy::SingleAt(n) => n,
        }
    }

    /// Observation slots cleared for a window of `t_obs` slots.
    pub fn slots(&self, t_obs: usize) -> Result<Vec<usize>> {
        let cur = t_obs - 1;
        let bad = || Error::contract(format!("{self} does not fit {t_obs} observations"));
        match *self {
            DropPolicy::MostRecentInclCurrent(n) => {
                if n > t_obs {
                    return Err(bad());
                }
                Ok((t_obs - n..t_obs).collect())
            }
            DropPolicy::MostRecentExclCurrent(n) => {
                if n + 1 > t_obs {
                    return Err(bad());
                }
                Ok((cur - n..cur).collect())
            }
            DropPolicy::SingleAt(k) => {
                if k > cur {
                    return Err(bad());
                }
                Ok(vec![cur - k])
            }
        }
    }
}

impl fmt::Display for DropPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.n())
    }
}

/// Clear presence flags per `policy`; positions and timestamps are kept.
pub fn drop_observations(w: &ForecastWindow, policy: DropPolicy) -> Result<ForecastWindow> {
    let mut out = w.clone();
    for s in policy.slots(w.t_obs())? {
        out.mask[s] = false;
    }
    let present = out.mask.iter().filter(|&&m| m).count();
    if present < 2 {
        return Err(Error::contract(format!(
            "{policy} leaves {present} observation(s); at least 2 are required"
        )));
    }
    Ok(out)
}

/// Linearly interpolate absent observations between present neighbours.
pub fn interpolate_fill(w: &ForecastWindow) -> Result<ForecastWindow> {
    let n = w.t_obs();
    if n == 0 || !w.mask[0] || !w.mask[n - 1] {
        return Err(Error::data("interpolation needs the first and last observation present"));
    }
    let mut out = w.clone();
    let mut prev = 0;
    for i in 1..n {
        if !w.mask[i] {
            continue;
        }
        for j in prev + 1..i {
            let a = (j - prev) as f64 / (i - prev) as f64;
            out.obs[j] = [
                w.obs[prev][0] + a * (w.obs[i][0] - w.obs[prev][0]),
                w.obs[prev][1] + a * (w.obs[i][1] - w.obs[prev][1]),
            ];
        }
        prev = i;
    }
    out.mask = vec![true; n];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight(len: usize) -> Trajectory {
        Trajectory {
            scene: "s".into(),
            agent: 0,
            frames: (0..len as i64).map(|i| i * 10).collect(),
            positions: (0..len).map(|i| [i as f64, 0.0]).collect(),
            frame_step: 10,
        }
    }

    fn window(obs: Vec<Point>) -> ForecastWindow {
        ForecastWindow {
            scene: "s".into(),
            agent: 0,
            t0: 0,
            frame_step: 1,
            mask: vec![true; obs.len()],
            obs,
            future: vec![[9.0, 9.0]],
        }
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::default();
        assert_eq!(make_windows(&[straight(20)], spec).len(), 1);
        assert_eq!(make_windows(&[straight(19)], spec).len(), 0);
        assert_eq!(make_windows(&[straight(22)], spec).len(), 3);
        let strided = WindowSpec { stride: 2, ..spec };
        assert_eq!(make_windows(&[straight(22)], strided).len(), 2);
    }

    #[test]
    fn frame_gaps_break_windows() {
        let mut t = straight(21);
        for f in t.frames.iter_mut().skip(10) {
            *f += 10;
        }
        assert_eq!(make_windows(&[t], WindowSpec::default()).len(), 0);
    }

    #[test]
    fn speeds_examples() {
        assert_eq!(to_speeds(&[[3.0, 4.0]; 5]), vec![[0.0, 0.0]; 4]);
        assert_eq!(to_speeds(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), vec![[1.0, 0.0]; 2]);
    }

    #[test]
    fn gap_tokens_average_over_the_gap() {
        let mut w = window(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [5.0, 0.0]]);
        w.mask[2] = false;
        let toks = obs_speed_tokens(&w);
        assert_eq!(toks, vec![Some([1.0, 0.0]), None, Some([2.0, 0.0])]);
        w.mask[0] = false;
        assert_eq!(obs_speed_tokens(&w), vec![None, None, Some([2.0, 0.0])]);
    }

    #[test]
    fn norm_examples() {
        assert!(NormStats::from_speeds(&[[1.0, 1.0]; 4], Split::Train).is_err());
        assert!(NormStats::from_speeds(&[[1.0, 2.0]], Split::Train).is_err());
        let n = NormStats::from_speeds(&[[0.0, 0.0], [2.0, 2.0]], Split::Train).unwrap();
        assert_eq!(n.mean, [1.0, 1.0]);
        // population convention: sqrt(((0-1)^2 + (2-1)^2) / 2) = 1
        assert_eq!(n.std, [1.0, 1.0]);
        assert_eq!(n.apply([0.0, 0.0]), [-1.0, -1.0]);
        assert_eq!(n.apply([2.0, 2.0]), [1.0, 1.0]);
        assert!(NormStats { split: Split::Test, ..n }.require_train().is_err());
    }

    #[test]
    fn augment_scale_examples() {
        let w = window(vec![[0.0, 0.0], [1.0, 2.0]]);
        assert_eq!(scale_window(&w, 1.0), w);
        let d = scale_window(&w, 2.0);
        assert_eq!(to_speeds(&d.obs), vec![[2.0, 4.0]]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (a, s1) = augment_scale(&w, &mut r1);
        let (b, s2) = augment_scale(&w, &mut r2);
        assert_eq!(s1, s2);
        assert_eq!(a, b);
        assert!((0.5..=2.0).contains(&s1));
    }

    #[test]
    fn drop_policies_clear_the_documented_slots() {
        let w = window((0..8).map(|i| [i as f64, 0.0]).collect());
        let incl = drop_observations(&w, DropPolicy::MostRecentInclCurrent(3)).unwrap();
        assert_eq!(incl.mask, vec![true, true, true, true, true, false, false, false]);
        let excl = drop_observations(&w, DropPolicy::MostRecentExclCurrent(3)).unwrap();
        assert_eq!(excl.mask, vec![true, true, true, true, false, false, false, true]);
        let single = drop_observations(&w, DropPolicy::SingleAt(7)).unwrap();
        assert!(!single.mask[0]);
        assert_eq!(incl.timestamps(), w.timestamps());
        assert!(drop_observations(&w, DropPolicy::MostRecentInclCurrent(7)).is_err());
        assert!(drop_observations(&w, DropPolicy::MostRecentExclCurrent(6)).is_ok());
        assert_eq!(drop_observations(&w, DropPolicy::MostRecentInclCurrent(0)).unwrap(), w);
    }

    #[test]
    fn interpolate_examples() {
        let mut w = window(vec![[0.0, 0.0], [7.0, 7.0], [2.0, 0.0]]);
        w.mask[1] = false;
        assert_eq!(interpolate_fill(&w).unwrap().obs[1], [1.0, 0.0]);

        let full = window(vec![[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(interpolate_fill(&full).unwrap(), full);

        let mut two = window(vec![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [3.0, 3.0]]);
        two.mask[1] = false;
        two.mask[2] = false;
        let f = interpolate_fill(&two).unwrap();
        assert_eq!(&f.obs[1..3], &[[1.0, 1.0], [2.0, 2.0]]);

        let mut lead = full.clone();
        lead.mask[0] = false;
        assert!(interpolate_fill(&lead).is_err());
    }
}
