//! Prints a per-epoch training curve for a quick look at the dynamics.
//!
//! Usage: curve [mcl|mcl-dpp] [speech|both] [epochs] [lr] [rho] [noise] [speakers] [clips] [aug_noise] [aug_dropout]

use dppssl::data::{generate_corpus, GeneratorConfig};
use dppssl::evaluation::reference_embeddings;
use dppssl::sampling::{fixed_extreme_positives, same_speaker_positives};
use dppssl::training::{
    train_contrastive, train_mcl, train_mcl_dpp, train_stage2, PairStrategy, Stage2Config,
    TrainConfig, ValidationConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let driver = get(1, "mcl");
    let both = get(2, "speech") == "both";
    let epochs: usize = get(3, "20").parse().unwrap();
    let lr: f64 = get(4, "1e-3").parse().unwrap();
    let rho: f64 = get(5, "0.0").parse().unwrap();
    let noise: f64 = get(6, "1.0").parse().unwrap();
    let speakers: usize = get(7, "20").parse().unwrap();
    let clips: usize = get(8, "10").parse().unwrap();
    let aug_noise: f64 = get(9, "0.1").parse().unwrap();
    let aug_dropout: f64 = get(10, "0.1").parse().unwrap();
    let symmetric = get(11, "") == "sym";
    let seed: u64 = get(12, "5").parse().unwrap();

    let mut gen = GeneratorConfig {
        num_speakers: speakers,
        clips_per_speaker: (clips, clips),
        confounder_strength: rho,
        noise_std: noise,
        seed: 97,
        ..GeneratorConfig::default()
    };
    if symmetric {
        gen.face_dim = gen.speech_dim;
    }
    let corpus = generate_corpus(&gen).unwrap();
    let mut model = dppssl::model::ModelConfig::compact(gen.speech_dim, gen.face_dim);
    if symmetric {
        model.speaker_embed_dim = 28;
        model.face_embed_dim = 28;
    }
    let cfg = TrainConfig {
        model,
        batch_size: 16,
        epochs,
        learning_rate: lr,
        use_face: both,
        seed,
        augment: dppssl::sampling::AugmentConfig {
            noise_std: aug_noise,
            dropout_prob: aug_dropout,
            ..Default::default()
        },
        validation: ValidationConfig {
            num_speakers: 10,
            target_trials: 400,
            impostor_trials: 400,
        },
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = match driver.as_str() {
        "mcl-dpp" => train_mcl_dpp(&corpus, &cfg, None).unwrap(),
        "c2" | "c3" => {
            let reference = reference_embeddings(&corpus).unwrap();
            let sets = fixed_extreme_positives(
                &reference,
                &corpus.speaker_labels(),
                driver == "c3",
            )
            .unwrap();
            train_contrastive(&corpus, &cfg, &PairStrategy::StaticSets(sets), None).unwrap()
        }
        "c4" => {
            let sets = same_speaker_positives(&corpus.speaker_labels());
            train_contrastive(&corpus, &cfg, &PairStrategy::StaticSets(sets), None).unwrap()
        }
        d if d.starts_with("dpp") => {
            let init: usize = d[3..].parse().expect("dppN needs a cluster count");
            train_contrastive(&corpus, &cfg, &PairStrategy::ProgressiveFrom(init), None).unwrap()
        }
        "stage2" | "stage2-gt" => {
            let stage1 = train_mcl_dpp(&corpus, &cfg, None).unwrap();
            let labels = (driver == "stage2-gt").then(|| corpus.speaker_labels());
            let s2 = Stage2Config { learning_rate: lr, ..Stage2Config::default() };
            let outcome =
                train_stage2(&corpus, &stage1.bundle, &cfg, &s2, labels.as_deref(), None).unwrap();
            let last_s1 = stage1.metrics.last().unwrap();
            println!(
                "stage1 final: eer_s {:.4}  eer_f {}  eer_sf {}",
                last_s1.val_eer_s,
                last_s1.val_eer_f.map_or("-".into(), |v| format!("{v:.4}")),
                last_s1.val_eer_sf.map_or("-".into(), |v| format!("{v:.4}")),
            );
            outcome
        }
        _ => train_mcl(&corpus, &cfg, None).unwrap(),
    };
    for r in &outcome.metrics {
        println!(
            "epoch {:3}  C {:5}  loss {:8.4}  eer_s {:.4}  eer_f {}  eer_sf {}  D {:.4}  acc {:.4}",
            r.epoch,
            r.cluster_count,
            r.train_loss,
            r.val_eer_s,
            r.val_eer_f.map_or("  -   ".into(), |v| format!("{v:.4}")),
            r.val_eer_sf.map_or("  -   ".into(), |v| format!("{v:.4}")),
            r.mean_diversity,
            r.pair_accuracy
        );
    }
    eprintln!("took {:.1}s", t0.elapsed().as_secs_f64());
}
