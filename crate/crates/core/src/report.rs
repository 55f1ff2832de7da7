//! Report emission: turns a completed workspace's `metrics.json` into the
//! published data files. Reading back the metrics rather than recomputing
//! keeps `report` idempotent and byte-stable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{load_metrics, FinetuneOutcome, PipelineMetrics, CONFIG_SNAPSHOT};

/// Hex SHA-256 of the exact config bytes the pipeline ran with.
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

fn outcome<'a>(m: &'a PipelineMetrics, label: &str) -> Result<&'a FinetuneOutcome> {
    m.finetune
        .iter()
        .find(|o| o.label == label)
        .ok_or_else(|| Error::MissingArtifact(format!("finetune:{label}")))
}

fn table1(m: &PipelineMetrics) -> String {
    let mut s = String::from("category,fraction,utility,asr\n");
    let _ = writeln!(s, "none,0,{},{}", m.baseline_utility, m.baseline_asr);
    for p in &m.prune_eval {
        let _ = writeln!(s, "{},{},{},{}", p.category, p.fraction, p.utility, p.asr);
    }
    s
}

fn table2(m: &PipelineMetrics) -> Result<String> {
    let unfrozen = outcome(m, "unfrozen")?;
    let cu6 = outcome(m, "freeze_esu_cu6")?;
    let cuall = outcome(m, "freeze_esu_cuall")?;
    let mut s = String::from("bench,judge,initial,finetuned,freeze_esu_cu6,freeze_esu_cuall\n");
    let _ = writeln!(
        s,
        "harmful_requests,keyword,{},{},{},{}",
        m.baseline_asr, unfrozen.asr, cu6.asr, cuall.asr
    );
    let _ = writeln!(
        s,
        "utility_add,exact_match,{},{},{},{}",
        m.baseline_utility, unfrozen.utility, cu6.utility, cuall.utility
    );
    Ok(s)
}

fn table4(m: &PipelineMetrics) -> String {
    let mut s = String::from("method,trainable_units,utility,asr\n");
    for a in &m.alignment {
        let units = a
            .trainable_unit_count
            .map_or_else(|| "all".to_string(), |n| n.to_string());
        let _ = writeln!(s, "{},{},{},{}", a.method, units, a.utility, a.asr);
    }
    s
}

fn cu_sweep(m: &PipelineMetrics) -> String {
    let mut s = String::from("label,cu_top_fraction,frozen_units,epochs,final_loss,utility,asr\n");
    for o in &m.finetune {
        let frac = o
            .cu_top_fraction
            .map_or_else(String::new, |f| f.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            o.label, frac, o.frozen_unit_count, o.epochs, o.final_loss, o.utility, o.asr
        );
    }
    s
}

fn probe_summary_csv(m: &PipelineMetrics) -> String {
    let mut s =
        String::from("phase,block,mean_benign,mean_malicious,mean_abs_diff,ordering_fraction\n");
    for (phase, p) in [("aligned", &m.probe_aligned), ("unaligned", &m.probe_unaligned)] {
        for b in &p.summary.per_block {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                phase, b.block, b.mean_benign, b.mean_malicious, b.mean_abs_diff,
                b.ordering_fraction
            );
        }
    }
    s
}

/// Write summary.json and every table/trace CSV from the stored metrics.
/// Returns the emitted paths.
pub fn emit_report(workspace: &Path) -> Result<Vec<PathBuf>> {
    let m = load_metrics(workspace)?;
    let config_path = workspace.join(CONFIG_SNAPSHOT);
    if !config_path.exists() {
        return Err(Error::MissingArtifact("config".into()));
    }
    let hash = config_hash(&fs::read_to_string(config_path)?);

    let provenance = json!({
        "seed": m.seed,
        "config_hash": hash,
    });
    let summary = json!({
        "provenance": provenance,
        "gates": {
            "stage": "pipeline",
            "unaligned": m.unaligned_gates,
            "aligned": m.aligned_gates,
        },
        "categorization": {
            "stage": "categorize",
            "ratios": m.ratios,
            "category_counts": m.category_counts,
        },
        "prune_eval": {
            "stage": "prune-eval",
            "baseline_utility": m.baseline_utility,
            "baseline_asr": m.baseline_asr,
            "entries": m.prune_eval,
        },
        "finetune": {
            "stage": "finetune",
            "entries": m.finetune,
        },
        "alignment": {
            "stage": "train",
            "entries": m.alignment,
        },
        "probe": {
            "stage": "probe",
            "aligned": m.probe_aligned.summary,
            "unaligned": m.probe_unaligned.summary,
        },
        "transfer": {
            "stage": "transfer",
            "attack_unfrozen": m.transfer_attack_unfrozen,
            "attack_frozen": m.transfer_attack_frozen,
            "alignment": m.transfer_alignment,
        },
    });

    let files: Vec<(PathBuf, String)> = vec![
        (
            workspace.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        ),
        (workspace.join("table1.csv"), table1(&m)),
        (workspace.join("table2.csv"), table2(&m)?),
        (workspace.join("table4.csv"), table4(&m)),
        (workspace.join("cu_sweep.csv"), cu_sweep(&m)),
        (workspace.join("ablation_search.csv"), m.ablation.to_csv()),
        (
            workspace.join("transfer_attack_unfrozen.csv"),
            m.transfer_attack_unfrozen.to_csv(),
        ),
        (
            workspace.join("transfer_attack_frozen.csv"),
            m.transfer_attack_frozen.to_csv(),
        ),
        (
            workspace.join("transfer_alignment.csv"),
            m.transfer_alignment.to_csv(),
        ),
        (
            workspace.join("probe_aligned.csv"),
            m.probe_aligned.trace.to_csv(),
        ),
        (
            workspace.join("probe_unaligned.csv"),
            m.probe_unaligned.trace.to_csv(),
        ),
        (workspace.join("probe_summary.csv"), probe_summary_csv(&m)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (path, contents) in files {
        fs::write(&path, contents)?;
        paths.push(path);
    }
    Ok(paths)
}
