//! Speed codebook for the classification model.
//!
//! Per-step speeds are clustered into `k` joint (x, y) bins with Lloyd's
//! algorithm seeded by k-means++. Class ids index the centroids; decoding a
//! class returns its centroid, and sampling draws a class from the softmax of
//! a logit row.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_scale, obs_speed_tokens, target_speeds, ForecastWindow, Point};
use crate::error::{Error, Result};

const MAX_ITERS: usize = 100;
const MOVE_TOL: f64 = 1e-6;
const MAGIC: &[u8; 4] = b"TFCB";
pub const CODEBOOK_VERSION: u32 = 1;

fn dist2(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(centroids: &[Point], p: Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<Point>,
    pub seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn assign(&self, speed: Point) -> usize {
        nearest(&self.centroids, speed).0
    }

    pub fn decode(&self, class: usize) -> Result<Point> {
        self.centroids.get(class).copied().ok_or(Error::Range {
            what: "codebook class",
            index: class,
            limit: self.k(),
        })
    }

    /// Mean Euclidean distance between each speed and its decoded class.
    pub fn mean_quantization_error(&self, speeds: &[Point]) -> f64 {
        if speeds.is_empty() {
            return 0.0;
        }
        speeds.iter().map(|&v| nearest(&self.centroids, v).1.sqrt()).sum::<f64>() / speeds.len() as f64
    }

    /// Sum of squared distances to the assigned centroids.
    pub fn within_cluster_ss(&self, speeds: &[Point]) -> f64 {
        speeds.iter().map(|&v| nearest(&self.centroids, v).1).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 16 * self.k());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for [x, y] in &self.centroids {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("codebook: {m}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CODEBOOK_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let k = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let body = &bytes[24..];
        if body.len() != k * 16 {
            return Err(bad(&format!("expected {} centroid bytes, found {}", k * 16, body.len())));
        }
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
        let centroids = body.chunks(16).map(|c| [f(&c[..8]), f(&c[8..])]).collect();
        Ok(Self { centroids, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Lloyd's algorithm with k-means++ seeding; deterministic for a fixed seed.
///
/// Stops after 100 iterations or once no centroid moves by 1e-6 or more. An
/// empty cluster is reseeded at the point farthest from its own centroid.
pub fn build_codebook(speeds: &[Point], k: usize, seed: u64) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::data("codebook size must be positive"));
    }
    let mut distinct: Vec<Point> = speeds.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite speeds"));
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::data(format!(
            "cannot build {k} clusters from {} distinct speeds",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(speeds, k, &mut rng);
    for _ in 0..MAX_ITERS {
        let assigned: Vec<(usize, f64)> = speeds.par_iter().map(|&p| nearest(&centroids, p)).collect();
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assigned.iter().enumerate() {
            sums[c][0] += speeds[i][0];
            sums[c][1] += speeds[i][1];
            counts[c] += 1;
        }
        let mut dists: Vec<f64> = assigned.iter().map(|&(_, d)| d).collect();
        let mut moved = 0.0f64;
        for c in 0..k {
            let next = if counts[c] > 0 {
                [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64]
            } else {
                let far = (0..speeds.len())
                    .fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                dists[far] = 0.0;
                speeds[far]
            };
            moved = moved.max(dist2(next, centroids[c]).sqrt());
            centroids[c] = next;
        }
        if moved < MOVE_TOL {
            break;
        }
    }

    let mut sorted = centroids.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite centroids"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Numeric("k-means produced coincident centroids".into()));
    }
    Ok(Codebook { centroids, seed })
}

fn kmeans_pp(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

/// Speeds of `windows` after independent U[0.5, 2] scale augmentation of
/// each window; the corpus the codebook is clustered on.
pub fn augmented_speed_corpus(windows: &[ForecastWindow], seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for w in windows {
        let (scaled, _) = augment_scale(w, &mut rng);
        out.extend(obs_speed_tokens(&scaled).into_iter().flatten());
        if let Ok(t) = target_speeds(&scaled) {
            out.extend(t);
        }
    }
    out
}

/// Draw one class from `softmax(logits)`.
pub fn sample_class<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Independent per-step draws for a sequence of logit rows.
pub fn sample_future<R: Rng + ?Sized>(logits: &[Vec<f64>], rng: &mut R) -> Vec<usize> {
    logits.iter().map(|row| sample_class(row, rng)).collect()
}

/// RNG stream for sample `sample_index` of a best-of-N draw.
pub fn sample_stream(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clusters() {
        let mut pts = vec![[0.0, 0.0]; 50];
        pts.extend(vec![[10.0, 10.0]; 50]);
        let mut cb = build_codebook(&pts, 2, 0).unwrap().centroids;
        cb.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(dist2(cb[0], [0.0, 0.0]) < 1e-18);
        assert!(dist2(cb[1], [10.0, 10.0]) < 1e-18);
    }

    #[test]
    fn k_equal_to_distinct_count_recovers_points() {
        let pts = vec![[0.0, 1.0], [2.0, 3.0], [5.0, -1.0], [2.0, 3.0], [0.0, 1.0]];
        let mut cb = build_codebook(&pts, 3, 4).unwrap().centroids;
        cb.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cb, vec![[0.0, 1.0], [2.0, 3.0], [5.0, -1.0]]);
        assert!(build_codebook(&pts, 4, 4).is_err());
    }

    #[test]
    fn assign_and_decode() {
        let cb = Codebook {
            centroids: (0..10).map(|i| [i as f64, 0.0]).collect(),
            seed: 0,
        };
        assert_eq!(cb.assign([7.0, 0.0]), 7);
        assert_eq!(cb.assign([7.0, 0.2]), 7);
        let tie = Codebook {
            centroids: vec![[9.0, 9.0], [9.0, 8.0], [0.0, 0.0], [9.0, 7.0], [9.0, 6.0], [2.0, 0.0]],
            seed: 0,
        };
        assert_eq!(tie.assign([1.0, 0.0]), 2);
        for c in 0..cb.k() {
            assert_eq!(cb.assign(cb.decode(c).unwrap()), c);
        }
        assert_eq!(cb.decode(3).unwrap(), [3.0, 0.0]);
        assert!(cb.decode(10).is_err());
    }

    #[test]
    fn byte_roundtrip_and_bad_header() {
        let cb = Codebook {
            centroids: vec![[0.1, -0.2], [1e-300, 3.5]],
            seed: 77,
        };
        assert_eq!(Codebook::from_bytes(&cb.to_bytes()).unwrap(), cb);
        let mut b = cb.to_bytes();
        b[0] = b'X';
        assert!(Codebook::from_bytes(&b).is_err());
        assert!(Codebook::from_bytes(&cb.to_bytes()[..30]).is_err());
    }

    #[test]
    fn saturated_logits_always_pick_the_hot_class() {
        let mut rng = sample_stream(5, 0);
        let row = vec![-50.0, 50.0, -50.0];
        for _ in 0..1000 {
            assert_eq!(sample_class(&row, &mut rng), 1);
        }
        assert_eq!(argmax(&row), 1);
    }

    #[test]
    fn uniform_logits_are_uniform() {
        let mut rng = sample_stream(11, 0);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_class(&[0.3; 4], &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn fixed_seed_fixed_samples() {
        let logits = vec![vec![0.0, 1.0, 0.5]; 30];
        let a = sample_future(&logits, &mut sample_stream(3, 2));
        let b = sample_future(&logits, &mut sample_stream(3, 2));
        let c = sample_future(&logits, &mut sample_stream(3, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
