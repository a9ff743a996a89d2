//! Lloyd's k-means over latent codes and the deep-clustering penalty.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Cluster centers plus the assignment of every point they were fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// `Σ_i ‖z_i − center(assign(i))‖²`.
    pub objective: f64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Centers as a `k×d` tensor.
    pub fn centers_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.centers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KmeansInit {
    /// Start from these centers.
    Centers(Vec<Vec<f64>>),
    /// Pick `k` distinct points by seeded sampling without replacement.
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub model: ClusterModel,
    /// Objective after the initial assignment and after every Lloyd iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center; ties go to the lowest index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &Tensor, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let n = points.shape()[0];
    (0..n).map(|i| nearest(points.row(i), centers)).unzip()
}

/// Lloyd's algorithm on the rows of an `n×d` tensor.
///
/// An empty cluster is re-seeded with the point farthest from its current
/// center. Stops when assignments no longer change or after `max_iters`
/// center updates.
pub fn kmeans_fit(points: &Tensor, k: usize, init: &KmeansInit, max_iters: usize) -> Result<KmeansFit> {
    let (n, d) = points
        .dims2()
        .ok_or_else(|| Error::Config(format!("k-means needs an n×d matrix, got {:?}", points.shape())))?;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means needs 1 ≤ K ≤ n, got K={k}, n={n}")));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }

    let mut centers: Vec<Vec<f64>> = match init {
        KmeansInit::Centers(c) => {
            if c.len() != k || c.iter().any(|c| c.len() != d) {
                return Err(Error::Config(format!(
                    "initial centers must be {k} vectors of length {d}"
                )));
            }
            c.clone()
        }
        KmeansInit::Seed(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            index::sample(&mut rng, n, k)
                .into_iter()
                .map(|i| points.row(i).to_vec())
                .collect()
        }
    };

    let (mut assignments, mut dist) = assign(points, &centers);
    let mut trace = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let previous = assignments.clone();

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Farthest point from its own (updated) center becomes a singleton.
                let far = (0..n)
                    .map(|i| (i, squared_distance(points.row(i), &centers[assignments[i]])))
                    .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
                centers[c] = points.row(far.0).to_vec();
                counts[assignments[far.0]] -= 1;
                assignments[far.0] = c;
                counts[c] = 1;
            }
        }

        let (next, next_dist) = assign(points, &centers);
        let changed = next != previous;
        assignments = next;
        dist = next_dist;
        trace.push(dist.iter().sum());
        if !changed {
            converged = true;
            break;
        }
    }

    let objective = *trace.last().expect("trace is never empty");
    Ok(KmeansFit {
        model: ClusterModel {
            centers,
            assignments,
            objective,
        },
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Nearest center to `z` and its index; ties go to the lowest index.
pub fn nearest_center<'m>(z: &[f64], model: &'m ClusterModel) -> Result<(&'m [f64], usize)> {
    if model.centers.is_empty() {
        return Err(Error::Contract("cluster model has no centers".into()));
    }
    if z.len() != model.dim() {
        return Err(Error::Shape {
            op: "nearest_center",
            left: vec![model.dim()],
            right: vec![z.len()],
        });
    }
    let (k, _) = nearest(z, &model.centers);
    Ok((&model.centers[k], k))
}

/// `½‖η* − z‖²` and its gradient with respect to `z`; `η*` is held constant.
pub fn dc_loss(z: &[f64], center: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != center.len() {
        return Err(Error::Shape {
            op: "dc_loss",
            left: vec![z.len()],
            right: vec![center.len()],
        });
    }
    let grad: Vec<f64> = z.iter().zip(center).map(|(a, b)| a - b).collect();
    let loss = 0.5 * grad.iter().map(|g| g * g).sum::<f64>();
    Ok((loss, grad))
}
