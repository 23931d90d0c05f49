//! K-means clustering, cluster-count selection, and the progressive
//! coarsening controller.
//!
//! Lloyd iterations with k-means++ seeding run in exact squared-Euclidean
//! arithmetic on f64 points. The recorded inertia trace is non-increasing by
//! construction: a floating-point uphill step is treated as convergence and
//! the previous state is kept.

use rand::Rng;

use crate::error::{Error, Result};

/// Outcome of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// Row per cluster, same dimension as the input points.
    pub centroids: Vec<Vec<f64>>,
    /// Final sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Inertia after each assignment pass, first entry included.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate_points(points: &[Vec<f64>], num_clusters: usize) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::invalid("points", "cannot cluster zero points"));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points", "points must share a nonzero dimension"));
    }
    if num_clusters == 0 || num_clusters > points.len() {
        return Err(Error::invalid(
            "num_clusters",
            format!("need 1..={} clusters, asked for {num_clusters}", points.len()),
        ));
    }
    Ok(dim)
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// centroid the squared-distance weights all vanish; the guard falls back to
/// a uniform draw instead of dividing by zero.
fn seed_centroids<R: Rng>(points: &[Vec<f64>], num_clusters: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.gen_range(0..n);
    let mut chosen = vec![points[first].clone()];
    let mut weights: Vec<f64> = points.iter().map(|p| dist2(p, &chosen[0])).collect();
    while chosen.len() < num_clusters {
        let total: f64 = weights.iter().sum();
        let idx = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(points[idx].clone());
        for (w, p) in weights.iter_mut().zip(points) {
            let d = dist2(p, chosen.last().unwrap());
            if d < *w {
                *w = d;
            }
        }
    }
    chosen
}

/// Nearest-centroid assignment; exact distance ties keep the lower cluster
/// index.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = dist2(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Gives every empty cluster the member point currently farthest from its
/// own centroid, stealing only from clusters that keep at least one member.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let mut counts = vec![0usize; centroids.len()];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..centroids.len() {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[assignments[i]] < 2 {
                continue;
            }
            let d = dist2(p, &centroids[assignments[i]]);
            if far.map_or(true, |(fd, _)| d > fd) {
                far = Some((d, i));
            }
        }
        let (_, donor) = far.expect("a cluster with at least two members always exists");
        counts[assignments[donor]] -= 1;
        centroids[empty] = points[donor].clone();
        assignments[donor] = empty;
        counts[empty] = 1;
    }
}

fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum()
}

fn mean_centroids(
    points: &[Vec<f64>],
    assignments: &[usize],
    old: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (c, (sum, &count)) in sums.iter_mut().zip(&counts).enumerate() {
        if count == 0 {
            *sum = old[c].clone();
        } else {
            for s in sum.iter_mut() {
                *s /= count as f64;
            }
        }
    }
    sums
}

/// Lloyd's algorithm with k-means++ seeding. Asking for exactly as many
/// clusters as points short-circuits to the identity partition.
pub fn kmeans<R: Rng>(
    points: &[Vec<f64>],
    num_clusters: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<KmeansResult> {
    validate_points(points, num_clusters)?;
    if num_clusters == points.len() {
        return Ok(KmeansResult {
            assignments: (0..points.len()).collect(),
            centroids: points.to_vec(),
            inertia: 0.0,
            inertia_trace: vec![0.0],
        });
    }

    let mut centroids = seed_centroids(points, num_clusters, rng);
    let mut assignments = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignments);
    let mut inertia = inertia_of(points, &centroids, &assignments);
    let mut trace = vec![inertia];

    for _ in 0..max_iters {
        let mut next_centroids = mean_centroids(points, &assignments, &centroids);
        let mut next_assignments = assign(points, &next_centroids);
        repair_empty(points, &mut next_centroids, &mut next_assignments);
        let next_inertia = inertia_of(points, &next_centroids, &next_assignments);
        if next_inertia > inertia {
            // Rounding pushed the objective uphill; keep the previous state.
            break;
        }
        let settled = next_assignments == assignments;
        centroids = next_centroids;
        assignments = next_assignments;
        inertia = next_inertia;
        trace.push(inertia);
        if settled {
            break;
        }
    }

    Ok(KmeansResult {
        assignments,
        centroids,
        inertia,
        inertia_trace: trace,
    })
}

/// Runs k-means `restarts` times on one RNG stream and keeps the lowest
/// final inertia.
pub fn kmeans_best_of<R: Rng>(
    points: &[Vec<f64>],
    num_clusters: usize,
    max_iters: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<KmeansResult> {
    if restarts == 0 {
        return Err(Error::invalid("restarts", "need at least one restart"));
    }
    let mut best: Option<KmeansResult> = None;
    for _ in 0..restarts {
        let run = kmeans(points, num_clusters, max_iters, rng)?;
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Picks the cluster count at the sharpest bend of an inertia curve: the
/// interior point maximizing the discrete second difference
/// `inertia[i-1] - 2 inertia[i] + inertia[i+1]`. Ties, including the fully
/// linear curve, resolve to the smallest candidate count.
pub fn elbow_estimate(cluster_counts: &[usize], inertias: &[f64]) -> Result<usize> {
    if cluster_counts.len() != inertias.len() {
        return Err(Error::invalid(
            "inertias",
            format!("{} inertias for {} counts", inertias.len(), cluster_counts.len()),
        ));
    }
    if cluster_counts.len() < 3 {
        return Err(Error::invalid(
            "cluster_counts",
            "elbow selection needs at least three candidate counts",
        ));
    }
    if cluster_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("cluster_counts", "counts must be strictly increasing"));
    }
    if inertias.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("elbow inertia curve"));
    }
    let mut best_idx = 1;
    let mut best_bend = f64::NEG_INFINITY;
    for i in 1..cluster_counts.len() - 1 {
        let bend = inertias[i - 1] - 2.0 * inertias[i] + inertias[i + 1];
        if bend > best_bend {
            best_bend = bend;
            best_idx = i;
        }
    }
    Ok(cluster_counts[best_idx])
}

/// What the coarsening controller decided after seeing one more validation
/// score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressiveAction {
    Keep,
    Halve { new_count: usize },
}

/// Schedules the cluster-count halvings. The count halves (rounding up,
/// never below `floor`) whenever `window` consecutive observations fail to
/// set a new strict best; each halving clears the best so the next one needs
/// a freshly stalled window at the new count.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProgressiveController {
    current_count: usize,
    floor: usize,
    window: usize,
    best_score: Option<f64>,
    stalled: usize,
}

impl ProgressiveController {
    pub fn new(initial_count: usize, floor: usize, window: usize) -> Result<Self> {
        if floor == 0 || initial_count < floor {
            return Err(Error::invalid(
                "initial_count",
                format!("need initial count >= floor >= 1, got {initial_count} and {floor}"),
            ));
        }
        if window == 0 {
            return Err(Error::invalid("window", "stall window must be nonzero"));
        }
        Ok(ProgressiveController {
            current_count: initial_count,
            floor,
            window,
            best_score: None,
            stalled: 0,
        })
    }

    pub fn current_count(&self) -> usize {
        self.current_count
    }

    /// Feeds one validation score (lower is better) and returns the decision
    /// for the next epoch.
    pub fn observe(&mut self, score: f64) -> Result<ProgressiveAction> {
        if !score.is_finite() {
            return Err(Error::non_finite("progressive controller score"));
        }
        if self.best_score.map_or(true, |b| score < b) {
            self.best_score = Some(score);
            self.stalled = 0;
            return Ok(ProgressiveAction::Keep);
        }
        self.stalled += 1;
        if self.stalled < self.window {
            return Ok(ProgressiveAction::Keep);
        }
        self.stalled = 0;
        self.best_score = None;
        let halved = self.current_count.div_ceil(2).max(self.floor);
        if halved == self.current_count {
            // Already at the floor; nothing left to coarsen.
            return Ok(ProgressiveAction::Keep);
        }
        self.current_count = halved;
        Ok(ProgressiveAction::Halve {
            new_count: halved,
        })
    }
}
