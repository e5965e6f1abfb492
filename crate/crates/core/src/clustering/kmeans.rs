//! Lloyd's k-means with k-means++ seeding.
//!
//! Distances are squared Euclidean on the raw vectors. The assignment step may
//! run in parallel; centroid sums are always accumulated sequentially in
//! point order, so results are bit-identical across execution modes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ClusteringError;
use crate::exec::{self, Execution};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index per input vector.
    pub assignments: Vec<usize>,
    /// Mean of the members of each cluster.
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each centroid update.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of times an empty cluster was refilled.
    pub reseeds: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(vectors: &[Vec<f64>], centroids: &[Vec<f64>], mode: Execution) -> Vec<usize> {
    exec::map(mode, vectors, |v| nearest(v, centroids).0)
}

fn means(vectors: &[Vec<f64>], assignments: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = vectors[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for s in sum.iter_mut() {
                *s /= n as f64;
            }
        }
    }
    (sums, counts)
}

fn inertia(vectors: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .zip(assignments)
        .map(|(v, &a)| squared_distance(v, &centroids[a]))
        .sum()
}

fn plus_plus<R: Rng>(vectors: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| squared_distance(v, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                chosen = Some(i);
                if acc > target {
                    break;
                }
            }
            chosen.expect("total weight is positive")
        } else {
            rng.random_range(0..n)
        };
        let c = vectors[pick].clone();
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(squared_distance(v, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Moves the point farthest from its own centroid (taken from clusters with at
/// least two members, ties to the lowest point index) into each empty cluster.
fn reseed_empty(
    vectors: &[Vec<f64>],
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
    counts: &mut [usize],
) -> usize {
    let mut reseeds = 0;
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in vectors.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(v, &centroids[a]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((p, _)) = best else { break };
        let from = assignments[p];
        assignments[p] = c;
        counts[from] -= 1;
        counts[c] = 1;
        centroids[c] = vectors[p].clone();
        let dim = vectors[0].len();
        let mut sum = vec![0.0; dim];
        for (v, &a) in vectors.iter().zip(assignments.iter()) {
            if a == from {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
            }
        }
        for s in sum.iter_mut() {
            *s /= counts[from] as f64;
        }
        centroids[from] = sum;
        reseeds += 1;
    }
    reseeds
}

pub fn kmeans(
    vectors: &[Vec<f64>],
    config: &KMeansConfig,
) -> Result<KMeansResult, ClusteringError> {
    let k = config.k;
    if k == 0 {
        return Err(ClusteringError::Precondition("k must be at least 1".into()));
    }
    if k > vectors.len() {
        return Err(ClusteringError::Precondition(format!(
            "k = {k} exceeds the number of vectors ({})",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(ClusteringError::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    let mut rng = seeded_rng(config.seed);
    let mut centroids = plus_plus(vectors, k, &mut rng);
    let mut assignments = assign(vectors, &centroids, config.exec);
    let mut history = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (mut updated, mut counts) = means(vectors, &assignments, k);
        reseeds += reseed_empty(vectors, &mut assignments, &mut updated, &mut counts);
        centroids = updated;
        history.push(inertia(vectors, &assignments, &centroids));
        iterations += 1;
        let next = assign(vectors, &centroids, config.exec);
        if next == assignments {
            converged = true;
            break;
        }
        if iterations >= config.max_iter {
            break;
        }
        assignments = next;
    }
    log::debug!("kmeans: k={k} iterations={iterations} converged={converged} reseeds={reseeds}");
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia_history: history,
        iterations,
        converged,
        reseeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_point_its_own_cluster() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![5.0, 5.0]];
        let r = kmeans(&pts, &KMeansConfig::new(3, 1)).unwrap();
        assert_eq!(r.inertia(), 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn identical_points_reseed() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&pts, &KMeansConfig::new(2, 3)).unwrap();
        assert_eq!(r.inertia(), 0.0);
        assert!(r.reseeds >= 1);
        assert!(r.assignments.contains(&0) && r.assignments.contains(&1));
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let pts = vec![vec![0.0]; 2];
        assert!(matches!(
            kmeans(&pts, &KMeansConfig::new(3, 0)),
            Err(ClusteringError::Precondition(_))
        ));
        assert!(kmeans(&pts, &KMeansConfig::new(0, 0)).is_err());
    }

    #[test]
    fn modes_agree() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i * 37 % 101) as f64, (i * 11 % 53) as f64])
            .collect();
        let mut cfg = KMeansConfig::new(7, 9);
        cfg.exec = Execution::Sequential;
        let a = kmeans(&pts, &cfg).unwrap();
        cfg.exec = Execution::Parallel;
        let b = kmeans(&pts, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
