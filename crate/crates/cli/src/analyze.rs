//! Turns a run's metrics log into plot-ready CSV files.
//!
//! Four fixed curves: validation EER per epoch, the cluster-count
//! trajectory, and mean diversity / mean pair accuracy per trajectory
//! level. Levels are consecutive log runs of equal (stage, C), so the
//! per-level files stay monotone-friendly even though per-epoch values
//! wobble inside a level.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dppssl::training::{metrics_path, parse_metrics_jsonl, MetricsRecord};

pub fn run(dir: &Path) -> Result<()> {
    let path = metrics_path(dir);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let records = parse_metrics_jsonl(&text)?;

    let mut eer = String::from("stage,epoch,eer_s,eer_f,eer_sf\n");
    let mut trajectory = String::from("stage,epoch,c\n");
    for r in &records {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
        eer.push_str(&format!(
            "{},{},{:.16e},{},{}\n",
            r.stage,
            r.epoch,
            r.val_eer_s,
            opt(r.val_eer_f),
            opt(r.val_eer_sf)
        ));
        trajectory.push_str(&format!("{},{},{}\n", r.stage, r.epoch, r.cluster_count));
    }

    let mut d_vs_c = String::from("stage,c,mean_d\n");
    let mut acc_vs_c = String::from("stage,c,mean_pair_accuracy\n");
    for level in levels(&records) {
        let mean = |f: fn(&MetricsRecord) -> f64| {
            level.iter().map(|r| f(r)).sum::<f64>() / level.len() as f64
        };
        let (stage, c) = (level[0].stage, level[0].cluster_count);
        d_vs_c.push_str(&format!("{stage},{c},{:.16e}\n", mean(|r| r.mean_diversity)));
        acc_vs_c.push_str(&format!("{stage},{c},{:.16e}\n", mean(|r| r.pair_accuracy)));
    }

    for (name, body) in [
        ("eer_vs_epoch.csv", &eer),
        ("c_trajectory.csv", &trajectory),
        ("d_vs_c.csv", &d_vs_c),
        ("accuracy_vs_c.csv", &acc_vs_c),
    ] {
        let out = dir.join(name);
        fs::write(&out, body).with_context(|| format!("writing {}", out.display()))?;
    }
    println!(
        "analyzed {} metric records into 4 csv files under {}",
        records.len(),
        dir.display()
    );
    Ok(())
}

/// Splits the log into consecutive runs of equal (stage, cluster count).
fn levels(records: &[MetricsRecord]) -> Vec<&[MetricsRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        let boundary = i == records.len()
            || records[i].stage != records[start].stage
            || records[i].cluster_count != records[start].cluster_count;
        if boundary {
            out.push(&records[start..i]);
            start = i;
        }
    }
    out
}
