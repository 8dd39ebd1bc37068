use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::window::{integrate, to_speeds};
use super::{Point, Trajectory};

/// Families of synthetic pedestrian tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Constant velocity in a random direction.
    Linear,
    /// Constant speed along a circular arc of random radius and sense.
    Circular,
    /// Walk along a cardinal direction, then turn left or right (50/50)
    /// by 90 degrees at `turn_at`.
    Crossing,
}

impl std::str::FromStr for SynthKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "circular" => Ok(Self::Circular),
            "crossing" => Ok(Self::Crossing),
            other => Err(crate::Error::config("kind", format!("unknown synthetic kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    /// Samples per trajectory.
    pub len: usize,
    /// Standard deviation of Gaussian noise added to every per-step speed
    /// component.
    pub noise: f64,
    pub seed: u64,
    /// Index of the last sample before the turn of a crossing track.
    pub turn_at: usize,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind,
            n,
            len: 20,
            noise,
            seed,
            turn_at: 7,
        }
    }

    pub fn with_len(mut self, len: usize) -> Self {
        self.len = len;
        self
    }
}

/// Deterministic synthetic corpus; frame ids advance by 10 per sample.
pub fn synth_corpus(spec: &SynthSpec) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite sigma");
    let scene = match spec.kind {
        SynthKind::Linear => "synth_linear",
        SynthKind::Circular => "synth_circular",
        SynthKind::Crossing => "synth_crossing",
    };
    (0..spec.n)
        .map(|agent| {
            let clean = match spec.kind {
                SynthKind::Linear => linear(&mut rng, spec.len),
                SynthKind::Circular => circular(&mut rng, spec.len),
                SynthKind::Crossing => crossing(&mut rng, spec.len, spec.turn_at),
            };
            let positions = if spec.noise > 0.0 && clean.len() > 1 {
                let speeds: Vec<Point> = to_speeds(&clean)
                    .into_iter()
                    .map(|v| [v[0] + noise.sample(&mut rng), v[1] + noise.sample(&mut rng)])
                    .collect();
                let mut p = vec![clean[0]];
                p.extend(integrate(clean[0], &speeds));
                p
            } else {
                clean
            };
            Trajectory {
                scene: scene.into(),
                agent: agent as i64,
                frames: (0..spec.len as i64).map(|i| i * 10).collect(),
                positions,
                frame_step: 10,
            }
        })
        .collect()
}

fn linear(rng: &mut ChaCha8Rng, len: usize) -> Vec<Point> {
    let start = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    let heading = rng.random_range(0.0..2.0 * PI);
    let speed = rng.random_range(0.2..0.8);
    let v = [speed * heading.cos(), speed * heading.sin()];
    (0..len)
        .map(|i| [start[0] + v[0] * i as f64, start[1] + v[1] * i as f64])
        .collect()
}

fn circular(rng: &mut ChaCha8Rng, len: usize) -> Vec<Point> {
    let center = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    let radius = rng.random_range(2.0..5.0);
    let speed = rng.random_range(0.3..0.7);
    let sense = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let phase = rng.random_range(0.0..2.0 * PI);
    let omega = sense * speed / radius;
    (0..len)
        .map(|i| {
            let a = phase + omega * i as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn crossing(rng: &mut ChaCha8Rng, len: usize, turn_at: usize) -> Vec<Point> {
    let heading = FRAC_PI_2 * rng.random_range(0..4) as f64;
    let speed = rng.random_range(0.4..0.6);
    let turn = if rng.random::<bool>() { FRAC_PI_2 } else { -FRAC_PI_2 };
    let start = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let mut p = start;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        out.push(p);
        let h = if i < turn_at { heading } else { heading + turn };
        p = [p[0] + speed * h.cos(), p[1] + speed * h.sin()];
    }
    out
}
