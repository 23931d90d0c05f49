//! Flat `key = value` run configuration.
//!
//! One file covers every configurable knob: corpus generation, model shape,
//! losses, augmentation, training, validation, progressive clustering, stage
//! two, and evaluation. Lines are `key = value`, `#` starts a comment,
//! unknown keys are hard errors so typos cannot silently fall back to
//! defaults. `--set key=value` flags apply on top of the file; later values
//! win within each source.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use dppssl::data::GeneratorConfig;
use dppssl::losses::SimilarityForm;
use dppssl::model::ModelConfig;
use dppssl::training::{Stage2Config, TrainConfig};

/// A malformed or rejected configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError {
    message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError { message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Every key the parser accepts, in echo order.
const KNOWN_KEYS: &[&str] = &[
    "augment.dropout_prob",
    "augment.gain_delta",
    "augment.noise_std",
    "clustering.max_iters",
    "clustering.restarts",
    "evaluate.clusters",
    "evaluate.impostor_trials",
    "evaluate.seed",
    "evaluate.target_trials",
    "generator.clips_max",
    "generator.clips_min",
    "generator.confounder_dim",
    "generator.confounder_strength",
    "generator.face_dim",
    "generator.identity_dim",
    "generator.noise_std",
    "generator.num_speakers",
    "generator.seed",
    "generator.speech_dim",
    "loss.similarity",
    "loss.temperature",
    "model.face_embed_dim",
    "model.face_hidden",
    "model.projector_widths",
    "model.speaker_embed_dim",
    "model.speaker_hidden",
    "progressive.floor",
    "progressive.window",
    "stage2.batch_size",
    "stage2.epochs_per_iteration",
    "stage2.iterations",
    "stage2.learning_rate",
    "stage2.margin",
    "stage2.num_clusters",
    "stage2.scale",
    "train.batch_size",
    "train.checkpoint_every",
    "train.epochs",
    "train.initial_clusters",
    "train.learning_rate",
    "train.seed",
    "train.use_face",
    "validation.impostor_trials",
    "validation.num_speakers",
    "validation.target_trials",
];

/// Parsed key-value overrides; defaults live in the typed config builders.
#[derive(Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

type Result<T> = std::result::Result<T, ConfigError>;

impl RunConfig {
    /// Loads the optional config file, then applies `--set key=value` pairs.
    pub fn from_sources(file: Option<&Path>, sets: &[String]) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig { values: BTreeMap::new() };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (i, pair) in sets.iter().enumerate() {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                ConfigError::new(format!("--set argument {} is not key=value: {pair:?}", i + 1))
            })?;
            cfg.insert(key.trim(), value.trim(), "--set")?;
        }
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(format!("{source}:{}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.insert(key.trim(), value.trim(), &format!("{source}:{}", lineno + 1))?;
        }
        Ok(())
    }

    fn insert(&mut self, key: &str, value: &str, source: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::new(format!("{source}: unknown config key {key:?}")));
        }
        if value.is_empty() {
            return Err(ConfigError::new(format!("{source}: key {key:?} has an empty value")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                ConfigError::new(format!("config key {key}: {raw:?} is not {kind}"))
            }),
        }
    }

    fn usize_key(&self, key: &str, into: &mut usize) -> Result<()> {
        if let Some(v) = self.parse::<usize>(key, "an unsigned integer")? {
            *into = v;
        }
        Ok(())
    }

    fn u64_key(&self, key: &str, into: &mut u64) -> Result<()> {
        if let Some(v) = self.parse::<u64>(key, "an unsigned integer")? {
            *into = v;
        }
        Ok(())
    }

    fn f64_key(&self, key: &str, into: &mut f64) -> Result<()> {
        if let Some(v) = self.parse::<f64>(key, "a number")? {
            *into = v;
        }
        Ok(())
    }

    fn bool_key(&self, key: &str, into: &mut bool) -> Result<()> {
        if let Some(v) = self.parse::<bool>(key, "true or false")? {
            *into = v;
        }
        Ok(())
    }

    fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let raw = match self.values.get(key) {
            None => return Ok(None),
            Some(raw) => raw,
        };
        raw.split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| {
                    ConfigError::new(format!(
                        "config key {key}: {raw:?} is not a comma-separated integer list"
                    ))
                })
            })
            .collect::<Result<Vec<usize>>>()
            .map(Some)
    }

    /// Corpus generator settings, seeded from the defaults.
    pub fn generator(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::default();
        self.usize_key("generator.num_speakers", &mut g.num_speakers)?;
        let (mut lo, mut hi) = g.clips_per_speaker;
        self.usize_key("generator.clips_min", &mut lo)?;
        self.usize_key("generator.clips_max", &mut hi)?;
        g.clips_per_speaker = (lo, hi);
        self.usize_key("generator.identity_dim", &mut g.identity_dim)?;
        self.usize_key("generator.confounder_dim", &mut g.confounder_dim)?;
        self.f64_key("generator.confounder_strength", &mut g.confounder_strength)?;
        self.usize_key("generator.speech_dim", &mut g.speech_dim)?;
        self.usize_key("generator.face_dim", &mut g.face_dim)?;
        self.f64_key("generator.noise_std", &mut g.noise_std)?;
        self.u64_key("generator.seed", &mut g.seed)?;
        Ok(g)
    }

    fn model(&self, speech_dim: usize, face_dim: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::compact(speech_dim, face_dim);
        if let Some(hidden) = self.usize_list("model.speaker_hidden")? {
            m.speaker_hidden = hidden;
        }
        self.usize_key("model.speaker_embed_dim", &mut m.speaker_embed_dim)?;
        if let Some(hidden) = self.usize_list("model.face_hidden")? {
            m.face_hidden = hidden;
        }
        self.usize_key("model.face_embed_dim", &mut m.face_embed_dim)?;
        if let Some(widths) = self.usize_list("model.projector_widths")? {
            m.projector_widths = widths.try_into().map_err(|widths: Vec<usize>| {
                ConfigError::new(format!(
                    "config key model.projector_widths: need exactly 4 widths, got {}",
                    widths.len()
                ))
            })?;
        }
        Ok(m)
    }

    /// Training settings for a corpus with the given view dimensions.
    pub fn train(&self, speech_dim: usize, face_dim: usize) -> Result<TrainConfig> {
        let mut t = TrainConfig { model: self.model(speech_dim, face_dim)?, ..TrainConfig::default() };
        self.f64_key("loss.temperature", &mut t.loss.temperature)?;
        if let Some(form) = self.values.get("loss.similarity") {
            t.loss.similarity_form = match form.as_str() {
                "exp-cos-over-tau" => SimilarityForm::ExpCosOverTau,
                "exp-cos-div-tau" => SimilarityForm::ExpCosDivTau,
                other => {
                    return Err(ConfigError::new(format!(
                        "config key loss.similarity: {other:?} is not exp-cos-over-tau or exp-cos-div-tau"
                    )))
                }
            };
        }
        self.f64_key("augment.noise_std", &mut t.augment.noise_std)?;
        self.f64_key("augment.gain_delta", &mut t.augment.gain_delta)?;
        self.f64_key("augment.dropout_prob", &mut t.augment.dropout_prob)?;
        self.usize_key("train.batch_size", &mut t.batch_size)?;
        self.usize_key("train.epochs", &mut t.epochs)?;
        self.f64_key("train.learning_rate", &mut t.learning_rate)?;
        self.bool_key("train.use_face", &mut t.use_face)?;
        self.u64_key("train.seed", &mut t.seed)?;
        self.usize_key("train.checkpoint_every", &mut t.checkpoint_every)?;
        self.usize_key("validation.num_speakers", &mut t.validation.num_speakers)?;
        self.usize_key("validation.target_trials", &mut t.validation.target_trials)?;
        self.usize_key("validation.impostor_trials", &mut t.validation.impostor_trials)?;
        self.usize_key("progressive.floor", &mut t.progressive.floor)?;
        self.usize_key("progressive.window", &mut t.progressive.window)?;
        self.usize_key("clustering.max_iters", &mut t.clustering.max_iters)?;
        self.usize_key("clustering.restarts", &mut t.clustering.restarts)?;
        Ok(t)
    }

    /// Initial cluster count for progressive runs; 0 or absent means one
    /// cluster per clip.
    pub fn initial_clusters(&self) -> Result<usize> {
        let mut c = 0;
        self.usize_key("train.initial_clusters", &mut c)?;
        Ok(c)
    }

    /// Stage-two settings; `stage2.num_clusters = 0` selects the elbow
    /// estimate.
    pub fn stage2(&self) -> Result<Stage2Config> {
        let mut s = Stage2Config::default();
        let mut clusters = s.num_clusters.unwrap_or(0);
        self.usize_key("stage2.num_clusters", &mut clusters)?;
        s.num_clusters = (clusters > 0).then_some(clusters);
        self.usize_key("stage2.iterations", &mut s.iterations)?;
        self.usize_key("stage2.epochs_per_iteration", &mut s.epochs_per_iteration)?;
        self.f64_key("stage2.margin", &mut s.margin)?;
        self.f64_key("stage2.scale", &mut s.scale)?;
        self.f64_key("stage2.learning_rate", &mut s.learning_rate)?;
        self.usize_key("stage2.batch_size", &mut s.batch_size)?;
        Ok(s)
    }

    /// Evaluation settings: (seed, target trials, impostor trials, clusters).
    /// Zero clusters means one per true speaker.
    pub fn evaluate(&self) -> Result<(u64, usize, usize, usize)> {
        let mut seed = 0u64;
        let mut target = 500usize;
        let mut impostor = 500usize;
        let mut clusters = 0usize;
        self.u64_key("evaluate.seed", &mut seed)?;
        self.usize_key("evaluate.target_trials", &mut target)?;
        self.usize_key("evaluate.impostor_trials", &mut impostor)?;
        self.usize_key("evaluate.clusters", &mut clusters)?;
        Ok((seed, target, impostor, clusters))
    }

    /// Renders the fully resolved key set for the run-directory echo.
    pub fn echo(
        &self,
        header: &[String],
        generator: Option<&GeneratorConfig>,
        train: Option<&TrainConfig>,
        initial_clusters: usize,
        stage2: Option<&Stage2Config>,
    ) -> String {
        let mut out = String::new();
        for line in header {
            out.push_str(&format!("# {line}\n"));
        }
        let mut lines: Vec<(String, String)> = Vec::new();
        if let Some(g) = generator {
            lines.push(("generator.num_speakers".into(), g.num_speakers.to_string()));
            lines.push(("generator.clips_min".into(), g.clips_per_speaker.0.to_string()));
            lines.push(("generator.clips_max".into(), g.clips_per_speaker.1.to_string()));
            lines.push(("generator.identity_dim".into(), g.identity_dim.to_string()));
            lines.push(("generator.confounder_dim".into(), g.confounder_dim.to_string()));
            lines.push(("generator.confounder_strength".into(), g.confounder_strength.to_string()));
            lines.push(("generator.speech_dim".into(), g.speech_dim.to_string()));
            lines.push(("generator.face_dim".into(), g.face_dim.to_string()));
            lines.push(("generator.noise_std".into(), g.noise_std.to_string()));
            lines.push(("generator.seed".into(), g.seed.to_string()));
        }
        if let Some(t) = train {
            let list = |v: &[usize]| {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            };
            lines.push(("model.speaker_hidden".into(), list(&t.model.speaker_hidden)));
            lines.push(("model.speaker_embed_dim".into(), t.model.speaker_embed_dim.to_string()));
            lines.push(("model.face_hidden".into(), list(&t.model.face_hidden)));
            lines.push(("model.face_embed_dim".into(), t.model.face_embed_dim.to_string()));
            lines.push(("model.projector_widths".into(), list(&t.model.projector_widths)));
            lines.push(("loss.temperature".into(), t.loss.temperature.to_string()));
            let form = match t.loss.similarity_form {
                SimilarityForm::ExpCosOverTau => "exp-cos-over-tau",
                SimilarityForm::ExpCosDivTau => "exp-cos-div-tau",
            };
            lines.push(("loss.similarity".into(), form.into()));
            lines.push(("augment.noise_std".into(), t.augment.noise_std.to_string()));
            lines.push(("augment.gain_delta".into(), t.augment.gain_delta.to_string()));
            lines.push(("augment.dropout_prob".into(), t.augment.dropout_prob.to_string()));
            lines.push(("train.batch_size".into(), t.batch_size.to_string()));
            lines.push(("train.epochs".into(), t.epochs.to_string()));
            lines.push(("train.learning_rate".into(), t.learning_rate.to_string()));
            lines.push(("train.use_face".into(), t.use_face.to_string()));
            lines.push(("train.seed".into(), t.seed.to_string()));
            lines.push(("train.checkpoint_every".into(), t.checkpoint_every.to_string()));
            lines.push(("train.initial_clusters".into(), initial_clusters.to_string()));
            lines.push(("validation.num_speakers".into(), t.validation.num_speakers.to_string()));
            lines.push(("validation.target_trials".into(), t.validation.target_trials.to_string()));
            lines.push(("validation.impostor_trials".into(), t.validation.impostor_trials.to_string()));
            lines.push(("progressive.floor".into(), t.progressive.floor.to_string()));
            lines.push(("progressive.window".into(), t.progressive.window.to_string()));
            lines.push(("clustering.max_iters".into(), t.clustering.max_iters.to_string()));
            lines.push(("clustering.restarts".into(), t.clustering.restarts.to_string()));
        }
        if let Some(s) = stage2 {
            lines.push(("stage2.num_clusters".into(), s.num_clusters.unwrap_or(0).to_string()));
            lines.push(("stage2.iterations".into(), s.iterations.to_string()));
            lines.push(("stage2.epochs_per_iteration".into(), s.epochs_per_iteration.to_string()));
            lines.push(("stage2.margin".into(), s.margin.to_string()));
            lines.push(("stage2.scale".into(), s.scale.to_string()));
            lines.push(("stage2.learning_rate".into(), s.learning_rate.to_string()));
            lines.push(("stage2.batch_size".into(), s.batch_size.to_string()));
        }
        for (key, value) in lines {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}
