//! Contrastive objectives over a batch of paired embeddings, plus the
//! angular-margin classification loss used in stage two.
//!
//! A batch holds M positive pairs per modality. Within one modality, pair i
//! contributes two anchors; each anchor's positive is its partner and its
//! negatives are the other 2(M-1) embeddings. The denominator excludes only
//! the anchor itself, so it runs over 2M-1 terms including the positive.
//! The cross-modal term couples each speech embedding to both face
//! embeddings of the same pair (and vice versa) against all 2M embeddings of
//! the other modality; nothing is excluded there.
//!
//! Losses are assembled in log space: each -log(num/den) becomes
//! logsumexp(den) - logsumexp(num), which keeps large similarity scales safe.

use crate::error::{Error, Result};
use crate::numerics::{GradTape, ValueId};

/// How a similarity score is derived from a cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SimilarityForm {
    /// exp(cos(a, b) / tau): the standard temperature-scaled form.
    ExpCosOverTau,
    /// exp(cos(a, b)) / tau: divides after exponentiation. The constant
    /// cancels inside every softmax ratio, making the loss
    /// temperature-independent; kept selectable for comparison runs.
    ExpCosDivTau,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub similarity_form: SimilarityForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            similarity_form: SimilarityForm::ExpCosOverTau,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Projected embeddings for one batch: element i is the (anchor, positive)
/// pair of tape values for that modality.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingBatch {
    pub speech: Vec<[ValueId; 2]>,
    pub face: Vec<[ValueId; 2]>,
}

impl EmbeddingBatch {
    fn require_pairs(pairs: &[[ValueId; 2]], arg: &'static str) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::invalid(arg, "batch has no pairs"));
        }
        Ok(())
    }
}

/// Log-similarity of one cosine node under the configured form.
///
/// For exp(cos)/tau the log is cos - ln(tau); the constant shift cancels in
/// every num/den ratio, so it is dropped rather than recorded on the tape.
fn log_similarity(tape: &mut GradTape, cos: ValueId, cfg: &LossConfig) -> Result<ValueId> {
    match cfg.similarity_form {
        SimilarityForm::ExpCosOverTau => tape.scale(cos, 1.0 / cfg.temperature),
        SimilarityForm::ExpCosDivTau => Ok(cos),
    }
}

/// Flattens pair-slot indexing: embedding j of pair i.
fn flat(i: usize, j: usize) -> usize {
    2 * i + j
}

/// NT-Xent over one modality's M pairs.
///
/// For every anchor (i, j): -log s(anchor, partner) / sum over the other
/// 2M-1 embeddings of s(anchor, .), averaged over all 2M anchors. With M = 1
/// the denominator is exactly the numerator and the loss is 0.
pub fn ntxent_pairs_loss(
    tape: &mut GradTape,
    pairs: &[[ValueId; 2]],
    cfg: &LossConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    EmbeddingBatch::require_pairs(pairs, "pairs")?;
    let m = pairs.len();
    let n = 2 * m;
    let embs: Vec<ValueId> = pairs.iter().flat_map(|p| p.iter().copied()).collect();

    // Symmetric cache of pairwise log-similarities, filled for a < b.
    let mut logsim = vec![None; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let c = tape.cosine(embs[a], embs[b])?;
            let u = log_similarity(tape, c, cfg)?;
            logsim[a * n + b] = Some(u);
            logsim[b * n + a] = Some(u);
        }
    }

    let mut terms = Vec::with_capacity(n);
    for i in 0..m {
        for j in 0..2 {
            let a = flat(i, j);
            let partner = flat(i, 1 - j);
            let denom: Vec<ValueId> = (0..n)
                .filter(|&b| b != a)
                .map(|b| logsim[a * n + b].expect("filled above"))
                .collect();
            let denom_vec = tape.stack(&denom)?;
            let lse = tape.log_sum_exp(denom_vec)?;
            let pos = logsim[a * n + partner].expect("filled above");
            terms.push(tape.sub(lse, pos)?);
        }
    }
    let total = tape.add_n(&terms)?;
    tape.scale(total, 1.0 / n as f64)
}

/// NT-Xent over the speech embeddings of a batch.
pub fn ntxent_loss(tape: &mut GradTape, batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<ValueId> {
    ntxent_pairs_loss(tape, &batch.speech, cfg)
}

/// NT-Xent over the face embeddings of a batch.
pub fn face_ntxent_loss(
    tape: &mut GradTape,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<ValueId> {
    ntxent_pairs_loss(tape, &batch.face, cfg)
}

/// Cross-modal contrast: every speech embedding against all 2M face
/// embeddings (numerator: the two of its own pair), and symmetrically for
/// face against speech, averaged over all 4M anchor terms. No exclusion is
/// applied; with M = 1 each term is exactly 0.
pub fn cross_modal_loss(
    tape: &mut GradTape,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<ValueId> {
    cfg.validate()?;
    EmbeddingBatch::require_pairs(&batch.speech, "batch.speech")?;
    EmbeddingBatch::require_pairs(&batch.face, "batch.face")?;
    if batch.speech.len() != batch.face.len() {
        return Err(Error::invalid(
            "batch",
            "speech and face pair counts differ",
        ));
    }
    let m = batch.speech.len();
    let n = 2 * m;
    let speech: Vec<ValueId> = batch.speech.iter().flat_map(|p| p.iter().copied()).collect();
    let face: Vec<ValueId> = batch.face.iter().flat_map(|p| p.iter().copied()).collect();

    // logsim[a * n + b] couples speech a with face b; reused transposed for
    // the face-anchored terms since cosine is symmetric.
    let mut logsim = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let c = tape.cosine(speech[a], face[b])?;
            logsim.push(log_similarity(tape, c, cfg)?);
        }
    }

    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..m {
        for j in 0..2 {
            let a = flat(i, j);
            // Speech anchor against all faces.
            let all: Vec<ValueId> = (0..n).map(|b| logsim[a * n + b]).collect();
            let all = tape.stack(&all)?;
            let den = tape.log_sum_exp(all)?;
            let pos = tape.stack(&[logsim[a * n + flat(i, 0)], logsim[a * n + flat(i, 1)]])?;
            let num = tape.log_sum_exp(pos)?;
            terms.push(tape.sub(den, num)?);

            // Face anchor against all speech embeddings.
            let all: Vec<ValueId> = (0..n).map(|b| logsim[b * n + a]).collect();
            let all = tape.stack(&all)?;
            let den = tape.log_sum_exp(all)?;
            let pos = tape.stack(&[logsim[flat(i, 0) * n + a], logsim[flat(i, 1) * n + a]])?;
            let num = tape.log_sum_exp(pos)?;
            terms.push(tape.sub(den, num)?);
        }
    }
    let total = tape.add_n(&terms)?;
    tape.scale(total, 1.0 / (2.0 * n as f64))
}

/// Unweighted sum of the speech, face, and cross-modal terms.
pub fn combined_mcl_loss(
    tape: &mut GradTape,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<ValueId> {
    let ls = ntxent_loss(tape, batch, cfg)?;
    let lf = face_ntxent_loss(tape, batch, cfg)?;
    let lc = cross_modal_loss(tape, batch, cfg)?;
    tape.add_n(&[ls, lf, lc])
}

/// Cross-entropy over margin-adjusted logits: logsumexp(logits) - logits[label].
pub fn aam_softmax_loss(tape: &mut GradTape, logits: ValueId, label: usize) -> Result<ValueId> {
    let n = tape.value(logits).numel();
    if label >= n {
        return Err(Error::invalid(
            "label",
            format!("label {label} outside {n} logits"),
        ));
    }
    let lse = tape.log_sum_exp(logits)?;
    let picked = tape.index(logits, label)?;
    tape.sub(lse, picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_l2_error, GradTape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ----- scalar oracle, written before the tape implementation -----
    //
    // Enumerates every term of each loss definition directly with f64
    // arithmetic: cosines from dots and norms, exp, plain sums, one log per
    // term. No shared code with the tape path.

    fn o_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }

    fn o_sim(a: &[f64], b: &[f64], cfg: &LossConfig) -> f64 {
        match cfg.similarity_form {
            SimilarityForm::ExpCosOverTau => (o_cos(a, b) / cfg.temperature).exp(),
            SimilarityForm::ExpCosDivTau => o_cos(a, b).exp() / cfg.temperature,
        }
    }

    fn oracle_ntxent(pairs: &[[Vec<f64>; 2]], cfg: &LossConfig) -> f64 {
        let m = pairs.len();
        let embs: Vec<&[f64]> = pairs.iter().flat_map(|p| [&p[0][..], &p[1][..]]).collect();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..2 {
                let a = 2 * i + j;
                let partner = 2 * i + (1 - j);
                let num = o_sim(embs[a], embs[partner], cfg);
                let mut den = 0.0;
                for b in 0..2 * m {
                    if b != a {
                        den += o_sim(embs[a], embs[b], cfg);
                    }
                }
                total += -(num / den).ln();
            }
        }
        total / (2.0 * m as f64)
    }

    fn oracle_cross_modal(
        speech: &[[Vec<f64>; 2]],
        face: &[[Vec<f64>; 2]],
        cfg: &LossConfig,
    ) -> f64 {
        let m = speech.len();
        let s: Vec<&[f64]> = speech.iter().flat_map(|p| [&p[0][..], &p[1][..]]).collect();
        let f: Vec<&[f64]> = face.iter().flat_map(|p| [&p[0][..], &p[1][..]]).collect();
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..2 {
                let a = 2 * i + j;
                let num_s = o_sim(s[a], f[2 * i], cfg) + o_sim(s[a], f[2 * i + 1], cfg);
                let den_s: f64 = (0..2 * m).map(|b| o_sim(s[a], f[b], cfg)).sum();
                total += -(num_s / den_s).ln();

                let num_f = o_sim(f[a], s[2 * i], cfg) + o_sim(f[a], s[2 * i + 1], cfg);
                let den_f: f64 = (0..2 * m).map(|b| o_sim(f[a], s[b], cfg)).sum();
                total += -(num_f / den_f).ln();
            }
        }
        total / (4.0 * m as f64)
    }

    // ----- helpers -----

    fn random_pairs(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Vec<[Vec<f64>; 2]> {
        (0..m)
            .map(|_| {
                [
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                ]
            })
            .collect()
    }

    fn load_batch(tape: &mut GradTape, pairs: &[[Vec<f64>; 2]]) -> Vec<[ValueId; 2]> {
        pairs
            .iter()
            .map(|p| {
                [
                    tape.leaf(Tensor::vector(p[0].clone()).unwrap()).unwrap(),
                    tape.leaf(Tensor::vector(p[1].clone()).unwrap()).unwrap(),
                ]
            })
            .collect()
    }

    fn uniform_pairs(m: usize, dim: usize) -> Vec<[Vec<f64>; 2]> {
        let v: Vec<f64> = (0..dim).map(|k| 0.3 + 0.05 * k as f64).collect();
        (0..m).map(|_| [v.clone(), v.clone()]).collect()
    }

    #[test]
    fn ntxent_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &m in &[2usize, 3, 5] {
            for form in [SimilarityForm::ExpCosOverTau, SimilarityForm::ExpCosDivTau] {
                let cfg = LossConfig {
                    temperature: 0.1,
                    similarity_form: form,
                };
                let pairs = random_pairs(&mut rng, m, 6);
                let expected = oracle_ntxent(&pairs, &cfg);

                let mut tape = GradTape::new();
                let ids = load_batch(&mut tape, &pairs);
                let loss = ntxent_pairs_loss(&mut tape, &ids, &cfg).unwrap();
                let got = tape.value(loss).scalar_value().unwrap();
                assert!(
                    (got - expected).abs() < 1e-12,
                    "M={m} {form:?}: {got} vs oracle {expected}"
                );
            }
        }
    }

    #[test]
    fn cross_modal_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for &m in &[1usize, 2, 4] {
            let cfg = LossConfig::default();
            let speech = random_pairs(&mut rng, m, 6);
            let face = random_pairs(&mut rng, m, 6);
            let expected = oracle_cross_modal(&speech, &face, &cfg);

            let mut tape = GradTape::new();
            let batch = EmbeddingBatch {
                speech: load_batch(&mut tape, &speech),
                face: load_batch(&mut tape, &face),
            };
            let loss = cross_modal_loss(&mut tape, &batch, &cfg).unwrap();
            let got = tape.value(loss).scalar_value().unwrap();
            assert!((got - expected).abs() < 1e-12, "M={m}: {got} vs {expected}");
        }
    }

    #[test]
    fn uniform_batch_hits_log_identities() {
        // Identical embeddings: every cosine is 1, so NT-Xent collapses to
        // log(2M - 1) and the cross-modal term to log M.
        for &m in &[2usize, 4, 8] {
            let cfg = LossConfig::default();
            let pairs = uniform_pairs(m, 5);
            let mut tape = GradTape::new();
            let ids = load_batch(&mut tape, &pairs);
            let loss = ntxent_pairs_loss(&mut tape, &ids, &cfg).unwrap();
            let got = tape.value(loss).scalar_value().unwrap();
            let expected = ((2 * m - 1) as f64).ln();
            assert!((got - expected).abs() < 1e-12, "M={m}: {got} vs {expected}");
        }

        for &m in &[2usize, 4, 8] {
            let cfg = LossConfig::default();
            let mut tape = GradTape::new();
            let batch = EmbeddingBatch {
                speech: load_batch(&mut tape, &uniform_pairs(m, 5)),
                face: load_batch(&mut tape, &uniform_pairs(m, 5)),
            };
            let loss = cross_modal_loss(&mut tape, &batch, &cfg).unwrap();
            let got = tape.value(loss).scalar_value().unwrap();
            let expected = (m as f64).ln();
            assert!((got - expected).abs() < 1e-12, "M={m}: {got} vs {expected}");
        }
    }

    #[test]
    fn combined_uniform_m4_is_log7_log7_log4() {
        let cfg = LossConfig::default();
        let mut tape = GradTape::new();
        let batch = EmbeddingBatch {
            speech: load_batch(&mut tape, &uniform_pairs(4, 5)),
            face: load_batch(&mut tape, &uniform_pairs(4, 5)),
        };
        let loss = combined_mcl_loss(&mut tape, &batch, &cfg).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        let expected = 7f64.ln() + 7f64.ln() + 4f64.ln();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn single_pair_losses_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cfg = LossConfig::default();
        let speech = random_pairs(&mut rng, 1, 6);
        let face = random_pairs(&mut rng, 1, 6);

        let mut tape = GradTape::new();
        let batch = EmbeddingBatch {
            speech: load_batch(&mut tape, &speech),
            face: load_batch(&mut tape, &face),
        };
        let lc = cross_modal_loss(&mut tape, &batch, &cfg).unwrap();
        assert_eq!(tape.value(lc).scalar_value().unwrap(), 0.0);
        let ls = ntxent_loss(&mut tape, &batch, &cfg).unwrap();
        assert_eq!(tape.value(ls).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn literal_form_is_temperature_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let pairs = random_pairs(&mut rng, 3, 6);
        let value_at = |tau: f64| {
            let cfg = LossConfig {
                temperature: tau,
                similarity_form: SimilarityForm::ExpCosDivTau,
            };
            let mut tape = GradTape::new();
            let ids = load_batch(&mut tape, &pairs);
            let loss = ntxent_pairs_loss(&mut tape, &ids, &cfg).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        assert_eq!(value_at(0.1), value_at(2.5));
    }

    #[test]
    fn aam_loss_decays_monotonically_with_dominant_logit() {
        // Loss shrinks monotonically as the true-class logit pulls ahead; at
        // gap 50 the remainder (~2e-22) underflows against the logsumexp
        // magnitude and the rounded loss is 0, well under the 1e-20 bound.
        let value_at_gap = |gap: f64| {
            let mut tape = GradTape::new();
            let logits = tape
                .leaf(Tensor::vector(vec![5.0 + gap, 5.0, 3.0]).unwrap())
                .unwrap();
            let loss = aam_softmax_loss(&mut tape, logits, 0).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        let gaps = [1.0, 5.0, 10.0, 20.0, 50.0];
        let losses: Vec<f64> = gaps.iter().map(|&g| value_at_gap(g)).collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0], "loss not monotone: {losses:?}");
        }
        assert!(losses[0] > 0.0);
        assert!(losses[4] < 1e-20, "gap-50 loss {} too large", losses[4]);

        let mut tape = GradTape::new();
        let logits = tape
            .leaf(Tensor::vector(vec![55.0, 5.0, 3.0]).unwrap())
            .unwrap();
        assert!(aam_softmax_loss(&mut tape, logits, 3).is_err());
    }

    #[test]
    fn combined_gradient_matches_finite_differences_on_embeddings() {
        // Differentiates through the full combined loss with respect to one
        // raw embedding vector.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let speech = random_pairs(&mut rng, 3, 5);
        let face = random_pairs(&mut rng, 3, 5);
        let cfg = LossConfig::default();

        let eval = |probe: &Tensor| -> crate::error::Result<f64> {
            let mut tape = GradTape::new();
            let mut speech_ids = load_batch(&mut tape, &speech);
            speech_ids[1][0] = tape.param(probe.clone())?;
            let batch = EmbeddingBatch {
                speech: speech_ids,
                face: load_batch(&mut tape, &face),
            };
            let loss = combined_mcl_loss(&mut tape, &batch, &cfg)?;
            tape.value(loss).scalar_value()
        };

        let probe = Tensor::vector(speech[1][0].clone()).unwrap();
        let fd = finite_difference_gradient(|t| eval(t), &probe, 1e-6).unwrap();

        let mut tape = GradTape::new();
        let mut speech_ids = load_batch(&mut tape, &speech);
        let probe_id = tape.param(probe).unwrap();
        speech_ids[1][0] = probe_id;
        let batch = EmbeddingBatch {
            speech: speech_ids,
            face: load_batch(&mut tape, &face),
        };
        let loss = combined_mcl_loss(&mut tape, &batch, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();
        let err = relative_l2_error(grads.get(probe_id).unwrap().data(), fd.data());
        assert!(err < 1e-5, "relative error {err:.3e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// NT-Xent stays positive (the positive term is one denominator
        /// summand, so each ratio is < 1) and is invariant to pair order.
        #[test]
        fn ntxent_positive_and_permutation_invariant(seed in 0u64..1000, m in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = random_pairs(&mut rng, m, 4);
            let cfg = LossConfig::default();

            let mut tape = GradTape::new();
            let ids = load_batch(&mut tape, &pairs);
            let loss = ntxent_pairs_loss(&mut tape, &ids, &cfg).unwrap();
            let v = tape.value(loss).scalar_value().unwrap();
            prop_assert!(v > 0.0);

            let mut reversed = pairs.clone();
            reversed.reverse();
            let mut tape2 = GradTape::new();
            let ids2 = load_batch(&mut tape2, &reversed);
            let loss2 = ntxent_pairs_loss(&mut tape2, &ids2, &cfg).unwrap();
            let v2 = tape2.value(loss2).scalar_value().unwrap();
            prop_assert!((v - v2).abs() < 1e-12);
        }
    }
}
