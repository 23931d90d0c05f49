//! View augmentation and positive-pair selection.
//!
//! Every selection strategy here reduces to the same shape: a per-clip list
//! of candidate positive clip ids, always non-empty (strategies that can
//! come up empty fall back to the anchor itself, which reproduces same-clip
//! pairing for that anchor). Batch construction then draws one positive per
//! anchor uniformly from its list. Keeping the strategies in this one
//! representation lets the diversity and accuracy reports treat them all
//! identically.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Stochastic view corruption: additive noise, a scalar gain jitter, and
/// coordinate dropout, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Standard deviation of additive per-coordinate noise.
    pub noise_std: f64,
    /// Gain is drawn from U[1 - delta, 1 + delta] once per call.
    pub gain_delta: f64,
    /// Each coordinate is zeroed independently with this probability.
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 0.1,
            gain_delta: 0.1,
            dropout_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.gain_delta) {
            return Err(Error::invalid("gain_delta", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid("dropout_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Produces one corrupted copy of a view: `dropout((view + noise) * gain)`.
/// Draw order is fixed (gain, noise vector, dropout mask) so a seeded stream
/// reproduces the same augmentation exactly.
pub fn augment_view<R: Rng>(view: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let gain = 1.0 + cfg.gain_delta * (rng.gen::<f64>() * 2.0 - 1.0);
    let mut out: Vec<f64> = view
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            (v + z * cfg.noise_std) * gain
        })
        .collect();
    if cfg.dropout_prob > 0.0 {
        for slot in &mut out {
            if rng.gen::<f64>() < cfg.dropout_prob {
                *slot = 0.0;
            }
        }
    }
    out
}

/// Two independent corruptions of the same view, the unit of self-supervised
/// pairing for the anchor modality.
pub fn two_augmented_views<R: Rng>(
    view: &[f64],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> [Vec<f64>; 2] {
    [augment_view(view, cfg, rng), augment_view(view, cfg, rng)]
}

/// Same-clip pairing: each anchor's only positive is itself.
pub fn ppp_positives(num_clips: usize) -> Vec<Vec<u32>> {
    (0..num_clips as u32).map(|i| vec![i]).collect()
}

/// Cluster pairing: an anchor's positives are every member of its cluster,
/// itself included, in ascending clip id order.
pub fn cluster_positives(assignments: &[usize]) -> Vec<Vec<u32>> {
    let num_clusters = assignments.iter().map(|&a| a + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); num_clusters];
    for (clip, &cluster) in assignments.iter().enumerate() {
        members[cluster].push(clip as u32);
    }
    assignments
        .iter()
        .map(|&cluster| members[cluster].clone())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Nearest-neighbor pairing: the `k` most cosine-similar other clips, ties
/// broken toward the lower clip id. The anchor never appears in its own
/// list; with a single clip the list falls back to the anchor.
pub fn knn_positives(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<Vec<u32>>> {
    if k == 0 {
        return Err(Error::invalid("k", "need at least one neighbor"));
    }
    let n = embeddings.len();
    let mut out = Vec::with_capacity(n);
    for (i, anchor) in embeddings.iter().enumerate() {
        let mut scored: Vec<(f64, u32)> = embeddings
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, e)| (-cosine(anchor, e), j as u32))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = k.min(scored.len());
        let ids: Vec<u32> = scored[..take].iter().map(|&(_, j)| j).collect();
        out.push(if ids.is_empty() { vec![i as u32] } else { ids });
    }
    Ok(out)
}

/// Similarity-threshold pairing: every other clip with cosine similarity at
/// least `threshold`. An empty set falls back to the anchor itself.
pub fn threshold_positives(embeddings: &[Vec<f64>], threshold: f64) -> Vec<Vec<u32>> {
    let n = embeddings.len();
    let mut out = Vec::with_capacity(n);
    for (i, anchor) in embeddings.iter().enumerate() {
        let ids: Vec<u32> = embeddings
            .iter()
            .enumerate()
            .filter(|&(j, e)| j != i && cosine(anchor, e) >= threshold)
            .map(|(j, _)| j as u32)
            .collect();
        out.push(if ids.is_empty() { vec![i as u32] } else { ids });
    }
    out
}

/// Ground-truth pairing used by reference strategies: all other clips of the
/// anchor's true speaker. A speaker with a single clip keeps the anchor.
pub fn same_speaker_positives(labels: &[usize]) -> Vec<Vec<u32>> {
    let num_speakers = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); num_speakers];
    for (clip, &label) in labels.iter().enumerate() {
        members[label].push(clip as u32);
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let others: Vec<u32> = members[label]
                .iter()
                .copied()
                .filter(|&j| j != i as u32)
                .collect();
            if others.is_empty() {
                vec![i as u32]
            } else {
                others
            }
        })
        .collect()
}

/// Ground-truth pairing pinned to a single clip per anchor: the same-speaker
/// clip at extreme Euclidean distance in the given embedding space, nearest
/// when `maximize` is false, farthest when true. Singleton speakers keep the
/// anchor itself. Ties break toward the lower clip id.
pub fn fixed_extreme_positives(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    maximize: bool,
) -> Result<Vec<Vec<u32>>> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} labels for {} embeddings", labels.len(), embeddings.len()),
        ));
    }
    let candidates = same_speaker_positives(labels);
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut out = Vec::with_capacity(labels.len());
    for (i, set) in candidates.iter().enumerate() {
        let mut best: Option<(f64, u32)> = None;
        for &j in set {
            let d = dist2(&embeddings[i], &embeddings[j as usize]);
            let better = match best {
                None => true,
                Some((bd, _)) => {
                    if maximize {
                        d > bd
                    } else {
                        d < bd
                    }
                }
            };
            if better {
                best = Some((d, j));
            }
        }
        out.push(vec![best.expect("candidate sets are never empty").1]);
    }
    Ok(out)
}

/// One training batch: paired anchor and positive clip ids, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<u32>,
    pub positives: Vec<u32>,
}

/// Draws one positive per anchor, uniformly from that anchor's candidate
/// list.
pub fn build_batch_for_anchors<R: Rng>(
    positives: &[Vec<u32>],
    anchors: &[u32],
    rng: &mut R,
) -> Result<PairBatch> {
    let mut chosen = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let set = positives
            .get(a as usize)
            .ok_or_else(|| Error::invalid("anchors", format!("clip {a} has no positive set")))?;
        if set.is_empty() {
            return Err(Error::invalid("positives", format!("empty set for clip {a}")));
        }
        chosen.push(set[rng.gen_range(0..set.len())]);
    }
    Ok(PairBatch {
        anchors: anchors.to_vec(),
        positives: chosen,
    })
}

/// Samples `batch_size` distinct anchors uniformly at random, then draws one
/// positive for each.
pub fn build_batch<R: Rng>(
    positives: &[Vec<u32>],
    batch_size: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    if batch_size == 0 || batch_size > positives.len() {
        return Err(Error::invalid(
            "batch_size",
            format!("need 1..={} anchors, asked for {batch_size}", positives.len()),
        ));
    }
    let anchors: Vec<u32> = index::sample(rng, positives.len(), batch_size)
        .iter()
        .map(|i| i as u32)
        .collect();
    build_batch_for_anchors(positives, &anchors, rng)
}
