//! Batch driver around the dppssl library: corpus generation, the three
//! training modes, checkpoint evaluation, and metrics-log analysis.
//!
//! Exit codes are fixed for scripting: 0 success, 2 configuration or usage
//! error, 3 I/O failure, 4 numerical failure (non-finite training loss,
//! message names the epoch), 5 malformed metrics or checkpoint data.

mod analyze;
mod config;
mod runs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{ConfigError, RunConfig};
use dppssl::data::{generate_corpus, load_corpus, save_corpus};
use dppssl::error::Error as CoreError;
use dppssl::evaluation::{
    cluster_purity, compute_eer, diversity_report, generate_trials, pair_accuracy,
    reference_embeddings, save_scores_csv, score_trials, split_scores, EvalSummary, Modality,
};
use dppssl::model::{multimodal_embed, ModelBundle};
use dppssl::sampling::cluster_positives;
use dppssl::training::{
    derive_seed, final_model_path, load_trainer_state, resume_contrastive, train_contrastive,
    train_stage2, PairStrategy, TrainOutcome,
};
use runs::RunLock;

#[derive(Parser)]
#[command(
    name = "dppssl",
    version,
    about = "Self-supervised speaker-embedding experiments on synthetic audio-visual data"
)]
struct Cli {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Single `key=value` override on top of the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the command's seed (generator.seed, train.seed, or
    /// evaluate.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory receiving lock, config echo, metrics, and checkpoints.
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual corpus file.
    Generate {
        /// Output corpus path.
        #[arg(long, default_value = "corpus.bin")]
        out: PathBuf,
    },
    /// Train a model on a corpus; requires --run-dir.
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Corpus file from `generate`.
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-one checkpoint for mcl-dpp-c.
        #[arg(long, value_name = "CKPT")]
        stage1: Option<PathBuf>,
        /// For mcl-dpp-c: train the MCL-DPP stage first, in this run dir.
        #[arg(long)]
        with_stage1: bool,
        /// Continue from the newest trainer state in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score verification trials with a trained model.
    Evaluate {
        /// Model checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Corpus the trials are drawn from.
        #[arg(long)]
        corpus: PathBuf,
        /// Which similarity the scores CSV uses (the report always carries
        /// all three).
        #[arg(long, value_enum, default_value_t = ModalityArg::Fused)]
        modality: ModalityArg,
        /// Per-trial scores CSV output path.
        #[arg(long, default_value = "scores.csv")]
        scores_out: PathBuf,
        /// Report JSON output path.
        #[arg(long, default_value = "report.json")]
        report_out: PathBuf,
    },
    /// Export plot-ready CSV curves from a run directory's metrics log.
    Analyze {
        /// Directory holding metrics.jsonl; defaults to --run-dir.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    /// Same-clip positives.
    Mcl,
    /// Progressive cluster positives.
    MclDpp,
    /// Stage two on pseudo labels from a stage-one model.
    MclDppC,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Speech,
    Face,
    Fused,
}

impl From<ModalityArg> for Modality {
    fn from(arg: ModalityArg) -> Modality {
        match arg {
            ModalityArg::Speech => Modality::Speech,
            ModalityArg::Face => Modality::Face,
            ModalityArg::Fused => Modality::Fused,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::InvalidArgument { .. } | CoreError::ShapeMismatch { .. } => 2,
            CoreError::Io { .. } => 3,
            CoreError::NonFinite { .. } | CoreError::TapeConsumed => 4,
            CoreError::Format { .. } => 5,
        };
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::from_sources(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Generate { ref out } => cmd_generate(&cfg, cli.seed, out),
        Command::Train { mode, ref corpus, ref stage1, with_stage1, resume } => {
            let run_dir = cli
                .run_dir
                .as_deref()
                .ok_or_else(|| ConfigError::new("train requires --run-dir"))?;
            cmd_train(TrainArgs {
                cfg: &cfg,
                seed: cli.seed,
                mode,
                corpus_path: corpus,
                stage1: stage1.as_deref(),
                with_stage1,
                resume,
                run_dir,
            })
        }
        Command::Evaluate { ref model, ref corpus, modality, ref scores_out, ref report_out } => {
            cmd_evaluate(&cfg, cli.seed, model, corpus, modality, scores_out, report_out)
        }
        Command::Analyze { ref dir } => {
            let dir = dir
                .as_deref()
                .or(cli.run_dir.as_deref())
                .ok_or_else(|| ConfigError::new("analyze requires --dir or --run-dir"))?;
            let _lock = RunLock::acquire(dir)?;
            analyze::run(dir)
        }
    }
}

fn cmd_generate(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut generator = cfg.generator()?;
    if let Some(seed) = seed {
        generator.seed = seed;
    }
    let corpus = generate_corpus(&generator)?;
    save_corpus(&corpus, out)?;
    println!(
        "wrote {}: {} clips, {} speakers, speech dim {}, face dim {}",
        out.display(),
        corpus.len(),
        corpus.num_speakers(),
        generator.speech_dim,
        generator.face_dim
    );
    Ok(())
}

struct TrainArgs<'a> {
    cfg: &'a RunConfig,
    seed: Option<u64>,
    mode: TrainMode,
    corpus_path: &'a Path,
    stage1: Option<&'a Path>,
    with_stage1: bool,
    resume: bool,
    run_dir: &'a Path,
}

fn cmd_train(args: TrainArgs<'_>) -> Result<()> {
    let corpus = load_corpus(args.corpus_path)?;
    let mut train = args.cfg.train(corpus.config.speech_dim, corpus.config.face_dim)?;
    if let Some(seed) = args.seed {
        train.seed = seed;
    }
    let initial_clusters = args.cfg.initial_clusters()?;
    let strategy = match args.mode {
        TrainMode::Mcl => PairStrategy::SameClip,
        TrainMode::MclDpp | TrainMode::MclDppC => {
            if initial_clusters == 0 {
                PairStrategy::ProgressiveClusters
            } else {
                PairStrategy::ProgressiveFrom(initial_clusters)
            }
        }
    };
    let stage2 = match args.mode {
        TrainMode::MclDppC => {
            if args.stage1.is_none() && !args.with_stage1 {
                bail!(ConfigError::new(
                    "mcl-dpp-c needs a stage-one model: pass --stage1 CKPT or --with-stage1"
                ));
            }
            Some(args.cfg.stage2()?)
        }
        _ => None,
    };
    if args.resume && matches!(args.mode, TrainMode::MclDppC) {
        bail!(ConfigError::new("--resume applies to mcl and mcl-dpp runs only"));
    }

    let lock = RunLock::acquire(args.run_dir)?;
    let header = vec![
        format!("resolved configuration: train --mode {}", mode_name(args.mode)),
        format!("corpus: {}", args.corpus_path.display()),
    ];
    let echo = args.cfg.echo(&header, None, Some(&train), initial_clusters, stage2.as_ref());
    let echo_path = args.run_dir.join("config.resolved");
    std::fs::write(&echo_path, echo).with_context(|| format!("writing {}", echo_path.display()))?;

    let outcome = match args.mode {
        TrainMode::Mcl | TrainMode::MclDpp => {
            if args.resume {
                let stem = runs::newest_state(args.run_dir)?.ok_or_else(|| {
                    ConfigError::new(format!(
                        "no trainer state found under {}",
                        args.run_dir.display()
                    ))
                })?;
                let state = load_trainer_state(args.run_dir, &stem)?;
                println!("resuming from {stem}");
                resume_contrastive(&corpus, &train, &strategy, state, Some(args.run_dir))?
            } else {
                train_contrastive(&corpus, &train, &strategy, Some(args.run_dir))?
            }
        }
        TrainMode::MclDppC => {
            let stage2 = stage2.as_ref().unwrap();
            let stage1_bundle = match args.stage1 {
                Some(path) => ModelBundle::load(path)?,
                None => {
                    println!("training the mcl-dpp stage first");
                    let first = train_contrastive(&corpus, &train, &strategy, Some(args.run_dir))?;
                    report_outcome("stage one", &first);
                    first.bundle
                }
            };
            train_stage2(&corpus, &stage1_bundle, &train, stage2, None, Some(args.run_dir))?
        }
    };
    report_outcome("final", &outcome);
    println!(
        "model: {}  metrics: {}",
        final_model_path(args.run_dir).display(),
        dppssl::training::metrics_path(args.run_dir).display()
    );
    drop(lock);
    Ok(())
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Mcl => "mcl",
        TrainMode::MclDpp => "mcl-dpp",
        TrainMode::MclDppC => "mcl-dpp-c",
    }
}

fn report_outcome(tag: &str, outcome: &TrainOutcome) {
    if let Some(last) = outcome.metrics.last() {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{tag}: epoch {}  C {}  eer_s {:.4}  eer_f {}  eer_sf {}",
            last.epoch,
            last.cluster_count,
            last.val_eer_s,
            opt(last.val_eer_f),
            opt(last.val_eer_sf)
        );
    }
}

fn cmd_evaluate(
    cfg: &RunConfig,
    seed_flag: Option<u64>,
    model_path: &Path,
    corpus_path: &Path,
    modality: ModalityArg,
    scores_out: &Path,
    report_out: &Path,
) -> Result<()> {
    let (mut seed, target, impostor, clusters) = cfg.evaluate()?;
    if let Some(seed_flag) = seed_flag {
        seed = seed_flag;
    }
    let bundle = ModelBundle::load(model_path)?;
    let corpus = load_corpus(corpus_path)?;

    let mut trial_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "evaluate-trials", 0));
    let trials = generate_trials(&corpus, target, impostor, &mut trial_rng)?;
    let train = cfg.train(corpus.config.speech_dim, corpus.config.face_dim)?;
    let augment = &train.augment;

    let eer_for = |m: Modality| -> Result<(f64, Vec<f64>)> {
        let scores = score_trials(&bundle, &corpus, &trials, m, augment, seed)?;
        let (tgt, imp) = split_scores(&trials, &scores);
        Ok((compute_eer(&tgt, &imp)?, scores))
    };
    let (eer_s, speech_scores) = eer_for(Modality::Speech)?;
    let (eer_f, face_scores) = eer_for(Modality::Face)?;
    let (eer_sf, fused_scores) = eer_for(Modality::Fused)?;

    let num_clusters = if clusters == 0 { corpus.num_speakers() } else { clusters };
    let points: Vec<Vec<f64>> = corpus
        .clips
        .iter()
        .map(|c| multimodal_embed(&bundle, &c.speech_view, &c.face_view))
        .collect::<dppssl::Result<_>>()?;
    let mut cluster_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "evaluate-cluster", 0));
    let assignment = dppssl::clustering::kmeans_best_of(
        &points,
        num_clusters,
        train.clustering.max_iters,
        train.clustering.restarts,
        &mut cluster_rng,
    )?;
    let sets = cluster_positives(&assignment.assignments);
    let reference = reference_embeddings(&corpus)?;
    let labels = corpus.speaker_labels();
    let diversity = diversity_report(&sets, &reference)?;
    let report = EvalSummary {
        eer_s,
        eer_f,
        eer_sf,
        mean_diversity: diversity.mean_diversity,
        n_plus: diversity.mean_positives,
        pair_accuracy: pair_accuracy(&sets, &labels)?,
        purity: cluster_purity(&assignment.assignments, &labels)?,
    };

    let scores = match modality {
        ModalityArg::Speech => &speech_scores,
        ModalityArg::Face => &face_scores,
        ModalityArg::Fused => &fused_scores,
    };
    save_scores_csv(scores_out, &trials, scores)?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    std::fs::write(report_out, json.as_bytes())
        .with_context(|| format!("writing {}", report_out.display()))?;
    println!(
        "eer_s {:.4}  eer_f {:.4}  eer_sf {:.4}  purity {:.4}  ({} trials; report {}, scores {})",
        report.eer_s,
        report.eer_f,
        report.eer_sf,
        report.purity,
        trials.len(),
        report_out.display(),
        scores_out.display()
    );
    Ok(())
}
