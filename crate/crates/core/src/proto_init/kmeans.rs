use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// Each centroid is the mean of the points assigned to it.
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after every centroid update.
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self
            .objective_history
            .last()
            .expect("at least one update runs")
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Within-cluster sum of squares of `assignments` under `centroids`.
pub fn wcss(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn cluster_means(
    points: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut sizes = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sizes[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&sizes) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, sizes)
}

/// Lloyd's algorithm from k-means++ seeds.
///
/// Stops once no centroid moves by `tol` or more (Euclidean), or after
/// `max_iter` updates. A cluster left empty takes over the point farthest from
/// its own centroid among clusters holding more than one point.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if k == 0 || points.is_empty() {
        return Err(Error::contract(format!(
            "kmeans needs k >= 1 and points, got k={k} with {} points",
            points.len()
        )));
    }
    if k > points.len() {
        return Err(Error::contract(format!(
            "kmeans with k={k} exceeds {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::contract("kmeans points differ in dimension"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    let mut converged = false;

    for it in 0..max_iter.max(1) {
        let (mut means, mut sizes) = cluster_means(points, &assignments, k);
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let mut donor: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                if sizes[assignments[i]] < 2 {
                    continue;
                }
                let d = sq_dist(p, &means[assignments[i]]);
                if donor.is_none_or(|(_, best)| d > best) {
                    donor = Some((i, d));
                }
            }
            let (donor, _) = donor.expect("k <= n leaves a cluster with more than one point");
            assignments[donor] = empty;
            (means, sizes) = cluster_means(points, &assignments, k);
        }
        history.push(wcss(points, &assignments, &means));
        let shift = means
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = means;
        if shift < tol {
            converged = true;
            break;
        }
        if it + 1 == max_iter {
            break;
        }
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        objective_history: history,
        converged,
    })
}
