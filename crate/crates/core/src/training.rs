//! Optimizers and the training drivers.
//!
//! Every driver is a pure function of (corpus, config): all randomness flows
//! through streams derived from `(seed, tag, index)`, one fresh stream per
//! epoch and purpose. Because no RNG survives an epoch boundary, resuming
//! from a saved trainer state replays the remaining epochs bit-for-bit.

use std::fs;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{self, ProgressiveController};
use crate::data::{generate_corpus, generate_holdout_corpus, Corpus, GeneratorConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, Trial};
use crate::losses::{
    aam_softmax_loss, combined_mcl_loss, ntxent_loss, EmbeddingBatch, LossConfig,
};
use crate::model::{
    self, aam_logits, encoder_apply, projector_apply, ModelBundle, ModelConfig,
};
use crate::numerics::{GradTape, Tensor, ValueId};
use crate::sampling::{augment_view, build_batch_for_anchors, AugmentConfig};

/// Folds a purpose tag and index into a base seed (FNV-1a) so independent
/// random streams never alias.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in seed.to_le_bytes() {
        eat(b);
    }
    for b in tag.bytes() {
        eat(b);
    }
    for b in index.to_le_bytes() {
        eat(b);
    }
    h
}

fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and a stepped learning-rate decay of 5% every
/// five epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    learning_rate: f64,
}

impl AdamState {
    pub fn new(params: &[(String, &Tensor)], learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and positive"));
        }
        let names = params.iter().map(|(n, _)| n.clone()).collect();
        let zeros = |t: &&Tensor| Tensor::zeros(t.shape().to_vec());
        Ok(AdamState {
            names,
            first: params.iter().map(|(_, t)| zeros(t)).collect(),
            second: params.iter().map(|(_, t)| zeros(t)).collect(),
            step: 0,
            learning_rate,
        })
    }

    pub fn scheduled_lr(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.95f64.powi((epoch / 5) as i32)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters must arrive in construction
    /// order; a missing gradient leaves that parameter and its moments
    /// untouched.
    pub fn apply(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<Tensor>],
        epoch: usize,
    ) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::invalid(
                "params",
                format!(
                    "optimizer tracks {} parameters, got {} params and {} grads",
                    self.names.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.step += 1;
        let lr = self.scheduled_lr(epoch);
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, (name, param)) in params.iter_mut().enumerate() {
            if name != &self.names[i] {
                return Err(Error::invalid(
                    "params",
                    format!("parameter {i} is {name}, optimizer expects {}", self.names[i]),
                ));
            }
            let Some(grad) = &grads[i] else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    context: "adam gradient",
                    expected: param.shape().to_vec(),
                    found: grad.shape().to_vec(),
                });
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = param.data_mut();
            for ((slot, g), (mi, vi)) in
                p.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                *slot -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Held-out verification speakers: extra identities generated in the same
/// world as the training corpus (same mixing maps), never trained on.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidationConfig {
    pub num_speakers: usize,
    pub target_trials: usize,
    pub impostor_trials: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            num_speakers: 10,
            target_trials: 500,
            impostor_trials: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProgressiveConfig {
    /// Minimum cluster count the halvings may reach.
    pub floor: usize,
    /// Epochs without a new best validation EER before a halving.
    pub window: usize,
}

impl Default for ProgressiveConfig {
    fn default() -> Self {
        ProgressiveConfig { floor: 2, window: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterSettings {
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        ClusterSettings {
            max_iters: 50,
            restarts: 1,
        }
    }
}

/// Stage-one training configuration. The defaults are desk-scale: compact
/// model dims and a learning rate tuned for runs of minutes, not days.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// When false the face pathway is ignored end to end: speech-only loss,
    /// speech-only clustering, no face validation scores.
    pub use_face: bool,
    pub seed: u64,
    /// Save a resumable trainer state every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub validation: ValidationConfig,
    pub progressive: ProgressiveConfig,
    pub clustering: ClusterSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::compact(40, 64),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            batch_size: 32,
            epochs: 60,
            learning_rate: 1e-3,
            use_face: true,
            seed: 0,
            checkpoint_every: 0,
            validation: ValidationConfig::default(),
            progressive: ProgressiveConfig::default(),
            clustering: ClusterSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "contrastive batches need M >= 2"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "need at least one epoch"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and positive"));
        }
        self.augment.validate()?;
        let v = &self.validation;
        if v.num_speakers < 2 {
            return Err(Error::invalid("validation", "validation needs at least 2 speakers"));
        }
        if v.target_trials == 0 || v.impostor_trials == 0 {
            return Err(Error::invalid("validation", "both trial sides must be non-empty"));
        }
        if self.clustering.max_iters == 0 || self.clustering.restarts == 0 {
            return Err(Error::invalid("clustering", "max_iters and restarts must be nonzero"));
        }
        Ok(())
    }
}

/// Stage-two pseudo-label training configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage2Config {
    /// Fixed cluster count; `None` selects it by elbow estimation.
    pub num_clusters: Option<usize>,
    /// Cluster-then-train iterations R.
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub margin: f64,
    pub scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            num_clusters: None,
            iterations: 3,
            epochs_per_iteration: 10,
            margin: 0.2,
            scale: 30.0,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.num_clusters {
            if c < 2 {
                return Err(Error::invalid(
                    "num_clusters",
                    "classification needs at least 2 pseudo classes",
                ));
            }
        }
        if self.iterations == 0 || self.epochs_per_iteration == 0 {
            return Err(Error::invalid("iterations", "need at least one iteration and epoch"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::invalid("margin", "margin must lie in [0, pi/2)"));
        }
        if self.scale <= 0.0 || !self.scale.is_finite() {
            return Err(Error::invalid("scale", "scale must be finite and positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "need at least one sample per batch"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub stage: u32,
    pub epoch: usize,
    #[serde(rename = "C")]
    pub cluster_count: usize,
    pub train_loss: f64,
    pub val_eer_s: f64,
    pub val_eer_f: Option<f64>,
    pub val_eer_sf: Option<f64>,
    #[serde(rename = "D")]
    pub mean_diversity: f64,
    pub pair_accuracy: f64,
}

pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::format(format!("serializing metrics: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

/// How a contrastive driver picks the positive clip for each anchor.
#[derive(Debug, Clone)]
pub enum PairStrategy {
    /// Every anchor pairs with itself (two augmentations of one clip).
    SameClip,
    /// Fixed per-anchor candidate sets, drawn from uniformly every epoch.
    StaticSets(Vec<Vec<u32>>),
    /// Clusters of the current embeddings, count halved on validation
    /// stalls; starts at one cluster per clip.
    ProgressiveClusters,
    /// Progressive clustering from an explicit initial cluster count
    /// (clamped to the corpus size) instead of one per clip.
    ProgressiveFrom(usize),
}

impl PairStrategy {
    fn progressive(&self) -> bool {
        matches!(self, PairStrategy::ProgressiveClusters | PairStrategy::ProgressiveFrom(_))
    }
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub metrics: Vec<MetricsRecord>,
}

/// Resumable snapshot between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub bundle: ModelBundle,
    pub adam: AdamState,
    pub controller: Option<ProgressiveController>,
    pub completed_epochs: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainerMeta {
    completed_epochs: usize,
    adam_step: u64,
    learning_rate: f64,
    controller: Option<ProgressiveController>,
}

/// Writes `<stem>.ckpt` (parameters and optimizer moments) plus
/// `<stem>.json` (counters and controller state).
pub fn save_trainer_state(dir: &Path, stem: &str, state: &TrainerState) -> Result<()> {
    let named = state.bundle.named_parameters();
    if named.len() != state.adam.names.len() {
        return Err(Error::invalid("state", "optimizer does not match bundle parameters"));
    }
    let moment_names: Vec<(String, String)> = state
        .adam
        .names
        .iter()
        .map(|n| (format!("adam.m.{n}"), format!("adam.v.{n}")))
        .collect();
    let mut entries: Vec<(&str, &Tensor)> =
        named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    for (i, (mn, vn)) in moment_names.iter().enumerate() {
        entries.push((mn, &state.adam.first[i]));
        entries.push((vn, &state.adam.second[i]));
    }
    model::write_checkpoint(&dir.join(format!("{stem}.ckpt")), &entries)?;
    let meta = TrainerMeta {
        completed_epochs: state.completed_epochs,
        adam_step: state.adam.step,
        learning_rate: state.adam.learning_rate,
        controller: state.controller.clone(),
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::format(format!("serializing trainer meta: {e}")))?;
    fs::write(dir.join(format!("{stem}.json")), text)
        .map_err(|e| Error::io(format!("writing trainer meta {stem}.json"), e))
}

pub fn load_trainer_state(dir: &Path, stem: &str) -> Result<TrainerState> {
    let entries = model::read_checkpoint(&dir.join(format!("{stem}.ckpt")))?;
    let bundle = ModelBundle::from_entries(&entries)?;
    let find = |name: &str| -> Result<Tensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format(format!("trainer state misses tensor {name}")))
    };
    let text = fs::read_to_string(dir.join(format!("{stem}.json")))
        .map_err(|e| Error::io(format!("reading trainer meta {stem}.json"), e))?;
    let meta: TrainerMeta = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("trainer meta {stem}.json: {e}")))?;
    let names: Vec<String> = bundle
        .named_parameters()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut first = Vec::with_capacity(names.len());
    let mut second = Vec::with_capacity(names.len());
    for n in &names {
        first.push(find(&format!("adam.m.{n}"))?);
        second.push(find(&format!("adam.v.{n}"))?);
    }
    Ok(TrainerState {
        bundle,
        adam: AdamState {
            names,
            first,
            second,
            step: meta.adam_step,
            learning_rate: meta.learning_rate,
        },
        controller: meta.controller,
        completed_epochs: meta.completed_epochs,
    })
}

struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn append(&self, file: &str, line: &str) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let path = dir.join(file);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(format!("appending {}", path.display()), e))
    }

    fn metrics(&self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::format(format!("serializing metrics: {e}")))?;
        self.append("metrics.jsonl", &line)
    }

    fn inertia(&self, epoch: usize, c: usize, inertia: f64) -> Result<()> {
        self.append(
            "inertia.jsonl",
            &format!("{{\"epoch\":{epoch},\"C\":{c},\"inertia\":{inertia}}}"),
        )
    }
}

fn with_epoch(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("epoch {epoch}: {context}"),
        },
        other => other,
    }
}

/// Held-out corpus and trials for a run: extra speakers from the training
/// corpus's own world (same seed, same mixing maps, identities the training
/// set never saw), with a seeded trial list. This is exactly the validation
/// set the drivers score against, so external callers can evaluate
/// untrained or foreign bundles on equal footing.
pub fn validation_setup(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Corpus, Vec<Trial>)> {
    let val_corpus = generate_holdout_corpus(&corpus.config, cfg.validation.num_speakers)?;
    let mut rng = stream(cfg.seed, "validation-trials", 0);
    let trials = evaluation::generate_trials(
        &val_corpus,
        cfg.validation.target_trials,
        cfg.validation.impostor_trials,
        &mut rng,
    )?;
    Ok((val_corpus, trials))
}

/// Clean-view embedding of every clip in the space used for clustering:
/// both projected modalities concatenated, or projected speech alone when
/// the face pathway is off.
fn clustering_points(bundle: &ModelBundle, corpus: &Corpus, use_face: bool) -> Result<Vec<Vec<f64>>> {
    corpus
        .clips
        .iter()
        .map(|clip| {
            if use_face {
                model::multimodal_embed(bundle, &clip.speech_view, &clip.face_view)
            } else {
                model::encode_projected(
                    &bundle.speaker_encoder,
                    &bundle.speaker_projector,
                    &clip.speech_view,
                )
            }
        })
        .collect()
}

/// Flat parameter registration in [`ModelBundle::named_parameters`] order,
/// returning the per-component layer ids for the forward pass.
struct RegisteredBundle {
    flat: Vec<ValueId>,
    speaker_encoder: model::MlpIds,
    face_encoder: model::MlpIds,
    speaker_projector: model::MlpIds,
    face_projector: model::MlpIds,
}

fn register_bundle(tape: &mut GradTape, bundle: &ModelBundle) -> Result<RegisteredBundle> {
    let speaker_encoder = bundle.speaker_encoder.register(tape)?;
    let face_encoder = bundle.face_encoder.register(tape)?;
    let speaker_projector = bundle.speaker_projector.register(tape)?;
    let face_projector = bundle.face_projector.register(tape)?;
    let mut flat = Vec::new();
    for ids in [&speaker_encoder, &face_encoder, &speaker_projector, &face_projector] {
        for &(w, b) in ids.iter() {
            flat.push(w);
            flat.push(b);
        }
    }
    Ok(RegisteredBundle {
        flat,
        speaker_encoder,
        face_encoder,
        speaker_projector,
        face_projector,
    })
}

fn embed_pair(
    tape: &mut GradTape,
    enc: &model::MlpIds,
    proj: &model::MlpIds,
    view_a: Vec<f64>,
    view_b: Vec<f64>,
) -> Result<[ValueId; 2]> {
    let mut side = |view: Vec<f64>| -> Result<ValueId> {
        let x = tape.leaf(Tensor::vector(view)?)?;
        let e = encoder_apply(tape, enc, x)?;
        projector_apply(tape, proj, e)
    };
    Ok([side(view_a)?, side(view_b)?])
}

/// One optimizer step over one contrastive batch; returns the loss value.
fn contrastive_batch_step(
    bundle: &mut ModelBundle,
    adam: &mut AdamState,
    corpus: &Corpus,
    anchors: &[u32],
    positives: &[u32],
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let reg = register_bundle(&mut tape, bundle)?;
    let mut speech = Vec::with_capacity(anchors.len());
    let mut face = Vec::with_capacity(anchors.len());
    for (&a, &p) in anchors.iter().zip(positives) {
        let clip_a = corpus.clip(a)?;
        let clip_p = corpus.clip(p)?;
        let s1 = augment_view(&clip_a.speech_view, &cfg.augment, rng);
        let s2 = augment_view(&clip_p.speech_view, &cfg.augment, rng);
        speech.push(embed_pair(&mut tape, &reg.speaker_encoder, &reg.speaker_projector, s1, s2)?);
        if cfg.use_face {
            let f1 = augment_view(&clip_a.face_view, &cfg.augment, rng);
            let f2 = augment_view(&clip_p.face_view, &cfg.augment, rng);
            face.push(embed_pair(&mut tape, &reg.face_encoder, &reg.face_projector, f1, f2)?);
        }
    }
    let batch = EmbeddingBatch { speech, face };
    let loss = if cfg.use_face {
        combined_mcl_loss(&mut tape, &batch, &cfg.loss)?
    } else {
        ntxent_loss(&mut tape, &batch, &cfg.loss)?
    };
    let loss_value = tape.value(loss).scalar_value()?;
    if !loss_value.is_finite() {
        return Err(Error::non_finite("training loss"));
    }
    let grads = tape.backward(loss)?;
    let collected: Vec<Option<Tensor>> =
        reg.flat.iter().map(|&id| grads.get(id).cloned()).collect();
    let mut params = bundle.named_parameters_mut();
    adam.apply(&mut params, &collected, epoch)?;
    Ok(loss_value)
}

fn train_contrastive_inner(
    corpus: &Corpus,
    cfg: &TrainConfig,
    strategy: &PairStrategy,
    run_dir: Option<&Path>,
    resume: Option<TrainerState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.config.speech_dim != cfg.model.speech_dim
        || corpus.config.face_dim != cfg.model.face_dim
    {
        return Err(Error::invalid(
            "model",
            "model view dims disagree with the corpus",
        ));
    }
    let n = corpus.len();
    if n < cfg.batch_size {
        return Err(Error::invalid("batch_size", "batch larger than the corpus"));
    }
    if let PairStrategy::StaticSets(sets) = strategy {
        if sets.len() != n {
            return Err(Error::invalid(
                "strategy",
                format!("{} positive sets for {} clips", sets.len(), n),
            ));
        }
    }

    let (val_corpus, val_trials) = validation_setup(corpus, cfg)?;
    let reference = evaluation::reference_embeddings(corpus)?;
    let labels = corpus.speaker_labels();
    let sink = Sink { dir: run_dir };
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }

    let (mut bundle, mut adam, mut controller, start_epoch) = match resume {
        Some(state) => {
            let expects_controller = strategy.progressive();
            if expects_controller != state.controller.is_some() {
                return Err(Error::invalid(
                    "resume",
                    "trainer state does not match the pairing strategy",
                ));
            }
            (state.bundle, state.adam, state.controller, state.completed_epochs)
        }
        None => {
            let bundle = ModelBundle::init(&cfg.model, derive_seed(cfg.seed, "model-init", 0))?;
            let named = bundle.named_parameters();
            let adam = AdamState::new(&named, cfg.learning_rate)?;
            let controller = match strategy {
                PairStrategy::ProgressiveClusters => Some(ProgressiveController::new(
                    n,
                    cfg.progressive.floor,
                    cfg.progressive.window,
                )?),
                PairStrategy::ProgressiveFrom(count) => Some(ProgressiveController::new(
                    (*count).min(n),
                    cfg.progressive.floor,
                    cfg.progressive.window,
                )?),
                _ => None,
            };
            (bundle, adam, controller, 0)
        }
    };
    if start_epoch >= cfg.epochs {
        return Err(Error::invalid("resume", "trainer state already covers every epoch"));
    }

    let ppp_sets = crate::sampling::ppp_positives(n);
    let mut metrics = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        // Candidate positives for this epoch. Progressive runs recluster at
        // every epoch once the count has dropped below one-per-clip, so the
        // partition tracks the current embedding space.
        let (sets, cluster_count): (std::borrow::Cow<'_, [Vec<u32>]>, usize) = match strategy {
            PairStrategy::SameClip => (std::borrow::Cow::Borrowed(&ppp_sets), n),
            PairStrategy::StaticSets(s) => (std::borrow::Cow::Borrowed(s.as_slice()), n),
            PairStrategy::ProgressiveClusters | PairStrategy::ProgressiveFrom(_) => {
                let count = controller.as_ref().unwrap().current_count();
                if count == n {
                    (std::borrow::Cow::Borrowed(&ppp_sets), n)
                } else {
                    let points = clustering_points(&bundle, corpus, cfg.use_face)?;
                    let mut rng = stream(cfg.seed, "cluster", epoch as u64);
                    let result = clustering::kmeans_best_of(
                        &points,
                        count,
                        cfg.clustering.max_iters,
                        cfg.clustering.restarts,
                        &mut rng,
                    )?;
                    sink.inertia(epoch, count, result.inertia)?;
                    (
                        std::borrow::Cow::Owned(crate::sampling::cluster_positives(
                            &result.assignments,
                        )),
                        count,
                    )
                }
            }
        };

        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        let mut rng = stream(cfg.seed, "batch", epoch as u64);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = build_batch_for_anchors(&sets, chunk, &mut rng)?;
            let loss = contrastive_batch_step(
                &mut bundle,
                &mut adam,
                corpus,
                &batch.anchors,
                &batch.positives,
                cfg,
                epoch,
                &mut rng,
            )
            .map_err(|e| with_epoch(e, epoch))?;
            loss_sum += loss;
            batches += 1;
        }

        let (val_eer_s, val_eer_f, val_eer_sf) = evaluation::validation_eers(
            &bundle,
            &val_corpus,
            &val_trials,
            &cfg.augment,
            derive_seed(cfg.seed, "validation-faces", epoch as u64),
            cfg.use_face,
        )?;
        let report = evaluation::diversity_report(&sets, &reference)?;
        let accuracy = evaluation::pair_accuracy(&sets, &labels)?;
        let record = MetricsRecord {
            stage: 1,
            epoch,
            cluster_count,
            train_loss: loss_sum / batches.max(1) as f64,
            val_eer_s,
            val_eer_f,
            val_eer_sf,
            mean_diversity: report.mean_diversity,
            pair_accuracy: accuracy,
        };
        sink.metrics(&record)?;
        metrics.push(record);

        if let Some(ctl) = controller.as_mut() {
            ctl.observe(val_eer_s)?;
        }

        let finished = epoch + 1;
        if cfg.checkpoint_every > 0 && finished % cfg.checkpoint_every == 0 && finished < cfg.epochs
        {
            if let Some(dir) = run_dir {
                let state = TrainerState {
                    bundle: bundle.clone(),
                    adam: adam.clone(),
                    controller: controller.clone(),
                    completed_epochs: finished,
                };
                save_trainer_state(dir, &format!("state_epoch_{finished}"), &state)?;
            }
        }
    }

    if let Some(dir) = run_dir {
        bundle.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { bundle, metrics })
}

/// Self-supervised training with same-clip positive pairs.
pub fn train_mcl(corpus: &Corpus, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_contrastive_inner(corpus, cfg, &PairStrategy::SameClip, run_dir, None)
}

/// Self-supervised training with cluster-sourced diverse positive pairs and
/// progressive cluster-count halving.
pub fn train_mcl_dpp(
    corpus: &Corpus,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_contrastive_inner(corpus, cfg, &PairStrategy::ProgressiveClusters, run_dir, None)
}

/// Contrastive training under an explicit pairing strategy.
pub fn train_contrastive(
    corpus: &Corpus,
    cfg: &TrainConfig,
    strategy: &PairStrategy,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_contrastive_inner(corpus, cfg, strategy, run_dir, None)
}

/// Continues a checkpointed run to the configured epoch budget. The
/// continuation reproduces exactly what an uninterrupted run would have
/// logged for the remaining epochs.
pub fn resume_contrastive(
    corpus: &Corpus,
    cfg: &TrainConfig,
    strategy: &PairStrategy,
    state: TrainerState,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_contrastive_inner(corpus, cfg, strategy, run_dir, Some(state))
}

fn renormalize_head_rows(head: &mut Tensor) {
    let cols = head.shape()[1];
    for row in head.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

#[derive(Clone, Copy)]
enum HeadSide {
    Speaker,
    Face,
}

impl HeadSide {
    fn prefix(self) -> &'static str {
        match self {
            HeadSide::Speaker => "speaker_encoder.",
            HeadSide::Face => "face_encoder.",
        }
    }

    fn head_name(self) -> &'static str {
        match self {
            HeadSide::Speaker => "speaker_class_head",
            HeadSide::Face => "face_class_head",
        }
    }
}

fn side_params<'a>(
    bundle: &'a mut ModelBundle,
    side: HeadSide,
) -> Vec<(String, &'a mut Tensor)> {
    bundle
        .named_parameters_mut()
        .into_iter()
        .filter(|(n, _)| n.starts_with(side.prefix()) || n == side.head_name())
        .collect()
}

/// One classification epoch over one modality: encoder plus margin head,
/// head rows re-normalized to unit length after every step.
fn aam_epoch(
    bundle: &mut ModelBundle,
    side: HeadSide,
    corpus: &Corpus,
    labels: &[usize],
    adam: &mut AdamState,
    augment: &AugmentConfig,
    margin: f64,
    scale: f64,
    batch_size: usize,
    schedule_epoch: usize,
    shuffle_rng: &mut ChaCha8Rng,
    batch_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = corpus.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(shuffle_rng);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let mut tape = GradTape::new();
        let (enc_params, head_tensor) = match side {
            HeadSide::Speaker => (&bundle.speaker_encoder, bundle.speaker_class_head.as_ref()),
            HeadSide::Face => (&bundle.face_encoder, bundle.face_class_head.as_ref()),
        };
        let head_tensor = head_tensor
            .ok_or_else(|| Error::invalid("bundle", "classification head not initialized"))?;
        let enc_ids = enc_params.register(&mut tape)?;
        let head_id = tape.param(head_tensor.clone())?;
        let mut flat: Vec<ValueId> = Vec::new();
        for &(w, b) in enc_ids.iter() {
            flat.push(w);
            flat.push(b);
        }
        flat.push(head_id);

        let mut per_sample = Vec::with_capacity(chunk.len());
        for &id in chunk {
            let clip = corpus.clip(id)?;
            let view = match side {
                HeadSide::Speaker => augment_view(&clip.speech_view, augment, batch_rng),
                HeadSide::Face => augment_view(&clip.face_view, augment, batch_rng),
            };
            let x = tape.leaf(Tensor::vector(view)?)?;
            let emb = encoder_apply(&mut tape, &enc_ids, x)?;
            let logits = aam_logits(&mut tape, head_id, emb, labels[id as usize], margin, scale)?;
            per_sample.push(aam_softmax_loss(&mut tape, logits, labels[id as usize])?);
        }
        let total = tape.add_n(&per_sample)?;
        let loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
        let loss_value = tape.value(loss).scalar_value()?;
        if !loss_value.is_finite() {
            return Err(Error::non_finite("training loss"));
        }
        loss_sum += loss_value;
        batches += 1;
        let grads = tape.backward(loss)?;
        let collected: Vec<Option<Tensor>> = flat.iter().map(|&v| grads.get(v).cloned()).collect();
        let mut params = side_params(bundle, side);
        adam.apply(&mut params, &collected, schedule_epoch)?;
        let head = match side {
            HeadSide::Speaker => bundle.speaker_class_head.as_mut().unwrap(),
            HeadSide::Face => bundle.face_class_head.as_mut().unwrap(),
        };
        renormalize_head_rows(head);
    }
    Ok(loss_sum / batches.max(1) as f64)
}

const ELBOW_LADDER: [usize; 5] = [10, 25, 50, 100, 200];

/// Stage two: iterated clustering and margin-softmax training of both
/// encoders on pseudo labels. Projectors stay frozen; clustering reuses
/// their stage-one outputs around the refreshed encoders. Ground-truth
/// labels can be injected in place of clustering for topline comparisons.
pub fn train_stage2(
    corpus: &Corpus,
    stage1: &ModelBundle,
    cfg: &TrainConfig,
    s2: &Stage2Config,
    labels_override: Option<&[usize]>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    s2.validate()?;
    let n = corpus.len();
    if let Some(labels) = labels_override {
        if labels.len() != n {
            return Err(Error::invalid(
                "labels_override",
                format!("{} labels for {n} clips", labels.len()),
            ));
        }
    }
    let (val_corpus, val_trials) = validation_setup(corpus, cfg)?;
    let reference = evaluation::reference_embeddings(corpus)?;
    let truth = corpus.speaker_labels();
    let sink = Sink { dir: run_dir };
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }

    let mut bundle = stage1.clone();
    let num_classes = match labels_override {
        Some(labels) => {
            let classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
            if classes < 2 {
                return Err(Error::invalid("labels_override", "need at least 2 classes"));
            }
            classes
        }
        None => match s2.num_clusters {
            Some(c) => c,
            None => {
                // Elbow selection over a fixed count ladder on the stage-one
                // embedding space.
                let points = clustering_points(&bundle, corpus, cfg.use_face)?;
                let counts: Vec<usize> =
                    ELBOW_LADDER.iter().copied().filter(|&c| c >= 2 && c <= n).collect();
                let mut inertias = Vec::with_capacity(counts.len());
                for &c in &counts {
                    let mut rng = stream(cfg.seed, "stage2-elbow", c as u64);
                    let run = clustering::kmeans_best_of(
                        &points,
                        c,
                        cfg.clustering.max_iters,
                        cfg.clustering.restarts,
                        &mut rng,
                    )?;
                    inertias.push(run.inertia);
                }
                clustering::elbow_estimate(&counts, &inertias)?
            }
        },
    };
    if num_classes > n {
        return Err(Error::invalid("num_clusters", "more pseudo classes than clips"));
    }

    let mut metrics = Vec::new();
    for iteration in 0..s2.iterations {
        let pseudo: Vec<usize> = match labels_override {
            Some(labels) => labels.to_vec(),
            None => {
                let points = clustering_points(&bundle, corpus, cfg.use_face)?;
                let mut rng = stream(cfg.seed, "stage2-cluster", iteration as u64);
                let run = clustering::kmeans_best_of(
                    &points,
                    num_classes,
                    cfg.clustering.max_iters,
                    cfg.clustering.restarts,
                    &mut rng,
                )?;
                sink.inertia(iteration * s2.epochs_per_iteration, num_classes, run.inertia)?;
                run.assignments
            }
        };
        let pseudo_sets = crate::sampling::cluster_positives(&pseudo);

        bundle.init_class_heads(num_classes, derive_seed(cfg.seed, "stage2-heads", iteration as u64))?;
        let speaker_named: Vec<(String, &Tensor)> = bundle
            .named_parameters()
            .into_iter()
            .filter(|(name, _)| {
                name.starts_with(HeadSide::Speaker.prefix()) || name == HeadSide::Speaker.head_name()
            })
            .collect();
        let mut speaker_adam = AdamState::new(&speaker_named, s2.learning_rate)?;
        let face_named: Vec<(String, &Tensor)> = bundle
            .named_parameters()
            .into_iter()
            .filter(|(name, _)| {
                name.starts_with(HeadSide::Face.prefix()) || name == HeadSide::Face.head_name()
            })
            .collect();
        let mut face_adam = AdamState::new(&face_named, s2.learning_rate)?;

        for local_epoch in 0..s2.epochs_per_iteration {
            let epoch = iteration * s2.epochs_per_iteration + local_epoch;
            let mut shuffle_rng = stream(cfg.seed, "stage2-shuffle", epoch as u64);
            let mut batch_rng = stream(cfg.seed, "stage2-batch", epoch as u64);
            let speech_loss = aam_epoch(
                &mut bundle,
                HeadSide::Speaker,
                corpus,
                &pseudo,
                &mut speaker_adam,
                &cfg.augment,
                s2.margin,
                s2.scale,
                s2.batch_size,
                local_epoch,
                &mut shuffle_rng,
                &mut batch_rng,
            )
            .map_err(|e| with_epoch(e, epoch))?;
            let mut train_loss = speech_loss;
            if cfg.use_face {
                let mut face_shuffle = stream(cfg.seed, "stage2-face-shuffle", epoch as u64);
                let mut face_batch = stream(cfg.seed, "stage2-face-batch", epoch as u64);
                train_loss += aam_epoch(
                    &mut bundle,
                    HeadSide::Face,
                    corpus,
                    &pseudo,
                    &mut face_adam,
                    &cfg.augment,
                    s2.margin,
                    s2.scale,
                    s2.batch_size,
                    local_epoch,
                    &mut face_shuffle,
                    &mut face_batch,
                )
                .map_err(|e| with_epoch(e, epoch))?;
            }

            let (val_eer_s, val_eer_f, val_eer_sf) = evaluation::validation_eers(
                &bundle,
                &val_corpus,
                &val_trials,
                &cfg.augment,
                derive_seed(cfg.seed, "stage2-validation-faces", epoch as u64),
                cfg.use_face,
            )?;
            let report = evaluation::diversity_report(&pseudo_sets, &reference)?;
            let accuracy = evaluation::pair_accuracy(&pseudo_sets, &truth)?;
            let record = MetricsRecord {
                stage: 2,
                epoch,
                cluster_count: num_classes,
                train_loss,
                val_eer_s,
                val_eer_f,
                val_eer_sf,
                mean_diversity: report.mean_diversity,
                pair_accuracy: accuracy,
            };
            sink.metrics(&record)?;
            metrics.push(record);
        }
    }

    if let Some(dir) = run_dir {
        bundle.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { bundle, metrics })
}

const REFERENCE_SEED: u64 = 0x5eed_1e55_0b5e_55ed;
const REFERENCE_EPOCHS: usize = 20;

/// Trains the held-aside diversity reference encoder: supervised margin
/// softmax on the true labels of a corpus disjoint from every experiment
/// corpus (identical generator settings, its own fixed seed). Fully
/// self-contained and deterministic so the committed fixture can always be
/// regenerated and compared.
pub fn train_reference_encoder() -> Result<ModelBundle> {
    let gen = GeneratorConfig {
        seed: derive_seed(REFERENCE_SEED, "reference-corpus", 0),
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus(&gen)?;
    let labels = corpus.speaker_labels();
    let model_cfg = ModelConfig::compact(gen.speech_dim, gen.face_dim);
    let mut bundle = ModelBundle::init(&model_cfg, derive_seed(REFERENCE_SEED, "reference-model", 0))?;
    bundle.init_class_heads(corpus.num_speakers(), derive_seed(REFERENCE_SEED, "reference-heads", 0))?;
    let named: Vec<(String, &Tensor)> = bundle
        .named_parameters()
        .into_iter()
        .filter(|(name, _)| {
            name.starts_with(HeadSide::Speaker.prefix()) || name == HeadSide::Speaker.head_name()
        })
        .collect();
    let mut adam = AdamState::new(&named, 1e-3)?;
    let augment = AugmentConfig::default();
    for epoch in 0..REFERENCE_EPOCHS {
        let mut shuffle_rng = stream(REFERENCE_SEED, "reference-shuffle", epoch as u64);
        let mut batch_rng = stream(REFERENCE_SEED, "reference-batch", epoch as u64);
        aam_epoch(
            &mut bundle,
            HeadSide::Speaker,
            &corpus,
            &labels,
            &mut adam,
            &augment,
            0.2,
            30.0,
            32,
            epoch,
            &mut shuffle_rng,
            &mut batch_rng,
        )?;
    }
    // The fixture only ever embeds speech; drop the training heads.
    bundle.speaker_class_head = None;
    bundle.face_class_head = None;
    Ok(bundle)
}

/// Path helpers shared by the drivers and the command-line surface.
pub fn final_model_path(run_dir: &Path) -> PathBuf {
    run_dir.join("model.ckpt")
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}
