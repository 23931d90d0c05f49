//! Verification trials, equal error rate, diversity metrics, and cluster
//! quality measures.
//!
//! Scores follow the accept-if-at-least-threshold convention: at threshold t
//! the false acceptance rate is the fraction of impostor scores >= t and the
//! false rejection rate the fraction of target scores < t. The EER sweep
//! visits every distinct score ascending plus a virtual top operating point
//! (FAR 0, FRR 1); between the two bracketing points the crossing is found
//! by linear interpolation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{self, ModelBundle};
use crate::sampling::{augment_view, AugmentConfig};

/// One verification trial between two distinct clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub clip_a: u32,
    pub clip_b: u32,
    /// True when both clips come from the same underlying speaker.
    pub is_target: bool,
}

/// Which similarity feeds the trial score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Cosine of the clean speaker embeddings, projectors not involved.
    Speech,
    /// Mean cosine over five augmented face draws per side (25 pairs).
    Face,
    /// Unweighted mean of the speech and face scores.
    Fused,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Euclidean distance between two reference embeddings: the diversity d of a
/// positive pair.
pub fn diversity(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Draws verification trials from a corpus: same-speaker pairs for targets,
/// cross-speaker pairs for impostors, distinct clips in every trial.
pub fn generate_trials<R: Rng>(
    corpus: &Corpus,
    num_target: usize,
    num_impostor: usize,
    rng: &mut R,
) -> Result<Vec<Trial>> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::invalid("corpus", "trials need at least two clips"));
    }
    let labels = corpus.speaker_labels();
    if num_target > 0 && !corpus.clips_by_speaker().iter().any(|g| g.len() >= 2) {
        return Err(Error::invalid(
            "corpus",
            "target trials need a speaker with two clips",
        ));
    }
    if num_impostor > 0 && corpus.num_speakers() < 2 {
        return Err(Error::invalid(
            "corpus",
            "impostor trials need two speakers",
        ));
    }
    let mut trials = Vec::with_capacity(num_target + num_impostor);
    let draw_pair = |rng: &mut R, want_target: bool| loop {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        if (labels[a] == labels[b]) == want_target {
            return Trial {
                clip_a: a as u32,
                clip_b: b as u32,
                is_target: want_target,
            };
        }
    };
    for _ in 0..num_target {
        let t = draw_pair(rng, true);
        trials.push(t);
    }
    for _ in 0..num_impostor {
        let t = draw_pair(rng, false);
        trials.push(t);
    }
    Ok(trials)
}

pub fn save_trials_csv(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut text = String::from("clip_a,clip_b,is_target\n");
    for t in trials {
        text.push_str(&format!(
            "{},{},{}\n",
            t.clip_a,
            t.clip_b,
            if t.is_target { 1 } else { 0 }
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing trials {}", path.display()), e))
}

pub fn load_trials_csv(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading trials {}", path.display()), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("clip_a,clip_b,is_target") => {}
        _ => return Err(Error::format("trial file must start with clip_a,clip_b,is_target")),
    }
    let mut trials = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = || {
            fields
                .next()
                .ok_or_else(|| Error::format(format!("trial line {} too short", ln + 2)))
        };
        let clip_a: u32 = next()?
            .parse()
            .map_err(|_| Error::format(format!("bad clip id on trial line {}", ln + 2)))?;
        let clip_b: u32 = next()?
            .parse()
            .map_err(|_| Error::format(format!("bad clip id on trial line {}", ln + 2)))?;
        let is_target = match next()? {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::format(format!(
                    "bad is_target value {other:?} on trial line {}",
                    ln + 2
                )))
            }
        };
        trials.push(Trial {
            clip_a,
            clip_b,
            is_target,
        });
    }
    Ok(trials)
}

/// Writes per-trial scores at full f64 precision.
pub fn save_scores_csv(path: &Path, trials: &[Trial], scores: &[f64]) -> Result<()> {
    if trials.len() != scores.len() {
        return Err(Error::invalid(
            "scores",
            format!("{} scores for {} trials", scores.len(), trials.len()),
        ));
    }
    let mut text = String::from("clip_a,clip_b,score\n");
    for (t, s) in trials.iter().zip(scores) {
        text.push_str(&format!("{},{},{s:.16e}\n", t.clip_a, t.clip_b));
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing scores {}", path.display()), e))
}

fn validate_trials(corpus: &Corpus, trials: &[Trial]) -> Result<()> {
    for t in trials {
        if t.clip_a == t.clip_b {
            return Err(Error::invalid(
                "trials",
                format!("trial pairs clip {} with itself", t.clip_a),
            ));
        }
        corpus.clip(t.clip_a)?;
        corpus.clip(t.clip_b)?;
    }
    Ok(())
}

fn distinct_clip_ids(trials: &[Trial]) -> Vec<u32> {
    let mut ids: Vec<u32> = trials
        .iter()
        .flat_map(|t| [t.clip_a, t.clip_b])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn speech_scores(bundle: &ModelBundle, corpus: &Corpus, trials: &[Trial]) -> Result<Vec<f64>> {
    let mut cache: HashMap<u32, Vec<f64>> = HashMap::new();
    for id in distinct_clip_ids(trials) {
        let clip = corpus.clip(id)?;
        cache.insert(id, model::encode(&bundle.speaker_encoder, &clip.speech_view)?);
    }
    Ok(trials
        .iter()
        .map(|t| cosine(&cache[&t.clip_a], &cache[&t.clip_b]))
        .collect())
}

const FACE_DRAWS: usize = 5;

/// Per-clip face embeddings for five independent augmentation draws. Clips
/// are processed in ascending id order on one seeded stream, so the result
/// does not depend on trial order.
fn face_scores(
    bundle: &ModelBundle,
    corpus: &Corpus,
    trials: &[Trial],
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    augment.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<u32, Vec<Vec<f64>>> = HashMap::new();
    for id in distinct_clip_ids(trials) {
        let clip = corpus.clip(id)?;
        let mut draws = Vec::with_capacity(FACE_DRAWS);
        for _ in 0..FACE_DRAWS {
            let view = augment_view(&clip.face_view, augment, &mut rng);
            draws.push(model::encode(&bundle.face_encoder, &view)?);
        }
        cache.insert(id, draws);
    }
    Ok(trials
        .iter()
        .map(|t| {
            let (a, b) = (&cache[&t.clip_a], &cache[&t.clip_b]);
            let mut sum = 0.0;
            for ea in a {
                for eb in b {
                    sum += cosine(ea, eb);
                }
            }
            sum / (FACE_DRAWS * FACE_DRAWS) as f64
        })
        .collect())
}

/// Scores every trial under the requested modality. The speech path uses
/// clean views and ignores the augmentation arguments; face draws are
/// deterministic in `seed`.
pub fn score_trials(
    bundle: &ModelBundle,
    corpus: &Corpus,
    trials: &[Trial],
    modality: Modality,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    validate_trials(corpus, trials)?;
    match modality {
        Modality::Speech => speech_scores(bundle, corpus, trials),
        Modality::Face => face_scores(bundle, corpus, trials, augment, seed),
        Modality::Fused => {
            let s = speech_scores(bundle, corpus, trials)?;
            let f = face_scores(bundle, corpus, trials, augment, seed)?;
            Ok(s.iter().zip(&f).map(|(a, b)| 0.5 * (a + b)).collect())
        }
    }
}

/// Splits a score vector by trial label into (target, impostor) sets.
pub fn split_scores(trials: &[Trial], scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut target = Vec::new();
    let mut impostor = Vec::new();
    for (t, &s) in trials.iter().zip(scores) {
        if t.is_target {
            target.push(s);
        } else {
            impostor.push(s);
        }
    }
    (target, impostor)
}

/// Equal error rate of a verification score set.
pub fn compute_eer(target: &[f64], impostor: &[f64]) -> Result<f64> {
    if target.is_empty() || impostor.is_empty() {
        return Err(Error::invalid("scores", "both trial sides must be non-empty"));
    }
    if target.iter().chain(impostor).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("trial scores"));
    }
    let mut thresholds: Vec<f64> = target.iter().chain(impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let far_at = |t: f64| impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
    let frr_at = |t: f64| target.iter().filter(|&&s| s < t).count() as f64 / target.len() as f64;

    // FAR starts at 1, FRR at 0; FAR-FRR decreases weakly to -1 at the
    // virtual top operating point, so a sign change is always found.
    let mut prev: Option<(f64, f64)> = None;
    let points = thresholds
        .iter()
        .map(|&t| (far_at(t), frr_at(t)))
        .chain(std::iter::once((0.0, 1.0)));
    for (far, frr) in points {
        if far == frr {
            return Ok(far);
        }
        if far < frr {
            let (far1, frr1) = prev.expect("first operating point has FAR 1, FRR 0");
            let alpha = (far1 - frr1) / ((far1 - frr1) + (frr - far));
            return Ok((1.0 - alpha) * far1 + alpha * far);
        }
        prev = Some((far, frr));
    }
    unreachable!("the virtual top operating point has FAR < FRR");
}

/// Per-anchor positive availability and mean pair diversity.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    /// Mean diversity D over all found pairs, zero terms for singleton
    /// anchors included.
    pub mean_diversity: f64,
    /// Mean number of available positives per anchor, the anchor's own clip
    /// counted.
    pub mean_positives: f64,
    /// Available-positive count per anchor (own clip counted).
    pub anchor_counts: Vec<usize>,
}

/// Measures a positive-pair source against fixed reference embeddings. Every
/// anchor whose candidate set holds only itself contributes one zero term,
/// so same-clip pairing reports D = 0 exactly.
pub fn diversity_report(
    positive_sets: &[Vec<u32>],
    reference: &[Vec<f64>],
) -> Result<DiversityReport> {
    if positive_sets.len() != reference.len() {
        return Err(Error::invalid(
            "reference",
            format!(
                "{} reference embeddings for {} anchors",
                reference.len(),
                positive_sets.len()
            ),
        ));
    }
    if positive_sets.is_empty() {
        return Err(Error::invalid("positive_sets", "no anchors"));
    }
    let mut sum = 0.0;
    let mut terms = 0usize;
    let mut counts = Vec::with_capacity(positive_sets.len());
    for (a, set) in positive_sets.iter().enumerate() {
        let anchor = a as u32;
        counts.push(set.len() + usize::from(!set.contains(&anchor)));
        let mut contributed = false;
        for &p in set {
            if p == anchor {
                continue;
            }
            let other = reference
                .get(p as usize)
                .ok_or_else(|| Error::invalid("positive_sets", format!("clip {p} out of range")))?;
            sum += diversity(&reference[a], other);
            terms += 1;
            contributed = true;
        }
        if !contributed {
            terms += 1;
        }
    }
    Ok(DiversityReport {
        mean_diversity: sum / terms as f64,
        mean_positives: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        anchor_counts: counts,
    })
}

/// Fraction of found (anchor, positive) pairs whose clips share the true
/// speaker; anchors with no positive other than themselves count as correct.
pub fn pair_accuracy(positive_sets: &[Vec<u32>], labels: &[usize]) -> Result<f64> {
    if positive_sets.len() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} labels for {} anchors", labels.len(), positive_sets.len()),
        ));
    }
    if positive_sets.is_empty() {
        return Err(Error::invalid("positive_sets", "no anchors"));
    }
    let mut correct = 0usize;
    let mut terms = 0usize;
    for (a, set) in positive_sets.iter().enumerate() {
        let anchor = a as u32;
        let mut contributed = false;
        for &p in set {
            if p == anchor {
                continue;
            }
            let other = *labels
                .get(p as usize)
                .ok_or_else(|| Error::invalid("positive_sets", format!("clip {p} out of range")))?;
            terms += 1;
            correct += usize::from(other == labels[a]);
            contributed = true;
        }
        if !contributed {
            terms += 1;
            correct += 1;
        }
    }
    Ok(correct as f64 / terms as f64)
}

/// Fraction of clips belonging to the majority true speaker of their
/// cluster, summed over clusters.
pub fn cluster_purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} labels for {} assignments", labels.len(), assignments.len()),
        ));
    }
    if assignments.is_empty() {
        return Err(Error::invalid("assignments", "no points"));
    }
    let num_clusters = assignments.iter().map(|&a| a + 1).max().unwrap();
    let num_speakers = labels.iter().map(|&l| l + 1).max().unwrap();
    let mut table = vec![vec![0usize; num_speakers]; num_clusters];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l] += 1;
    }
    let majority: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / assignments.len() as f64)
}

/// Full evaluation document emitted by the report pipeline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub eer_s: f64,
    pub eer_f: f64,
    pub eer_sf: f64,
    #[serde(rename = "D")]
    pub mean_diversity: f64,
    pub n_plus: f64,
    pub pair_accuracy: f64,
    pub purity: f64,
}

/// Validation EERs for one model: speech always, face and fused only when
/// the face pathway is in use.
pub fn validation_eers(
    bundle: &ModelBundle,
    corpus: &Corpus,
    trials: &[Trial],
    augment: &AugmentConfig,
    seed: u64,
    use_face: bool,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    validate_trials(corpus, trials)?;
    let s = speech_scores(bundle, corpus, trials)?;
    let (tgt, imp) = split_scores(trials, &s);
    let eer_s = compute_eer(&tgt, &imp)?;
    if !use_face {
        return Ok((eer_s, None, None));
    }
    let f = face_scores(bundle, corpus, trials, augment, seed)?;
    let (tgt_f, imp_f) = split_scores(trials, &f);
    let eer_f = compute_eer(&tgt_f, &imp_f)?;
    let fused: Vec<f64> = s.iter().zip(&f).map(|(a, b)| 0.5 * (a + b)).collect();
    let (tgt_sf, imp_sf) = split_scores(trials, &fused);
    let eer_sf = compute_eer(&tgt_sf, &imp_sf)?;
    Ok((eer_s, Some(eer_f), Some(eer_sf)))
}

/// Reference speaker embeddings of every clip under an explicit encoder
/// bundle, ascending clip id.
pub fn reference_embeddings_with(bundle: &ModelBundle, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    corpus
        .clips
        .iter()
        .map(|c| model::encode(&bundle.speaker_encoder, &c.speech_view))
        .collect()
}

static REFERENCE_ENCODER: OnceLock<std::result::Result<ModelBundle, String>> = OnceLock::new();

const REFERENCE_FIXTURE: &[u8] = include_bytes!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/reference_encoder.ckpt"
));

/// The held-aside diversity reference encoder, parsed once per process from
/// the embedded fixture checkpoint.
pub fn reference_encoder() -> Result<&'static ModelBundle> {
    let cached = REFERENCE_ENCODER.get_or_init(|| {
        model::read_checkpoint_bytes(REFERENCE_FIXTURE)
            .and_then(|entries| ModelBundle::from_entries(&entries))
            .map_err(|e| e.to_string())
    });
    match cached {
        Ok(bundle) => Ok(bundle),
        Err(msg) => Err(Error::format(format!("reference encoder fixture: {msg}"))),
    }
}

/// Reference embeddings of every clip under the fixture encoder.
pub fn reference_embeddings(corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    reference_embeddings_with(reference_encoder()?, corpus)
}
