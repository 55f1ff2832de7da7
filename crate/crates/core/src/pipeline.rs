//! End-to-end orchestration: two-model construction, attribution,
//! category search, prune ablations, the fine-tune attack with and without
//! freezing, unit-budget alignment, transfer matrices, and probes.
//!
//! Every numeric result lands in `metrics.json` inside the workspace;
//! report emission reads that file back and never recomputes. Wall-clock
//! times are kept out of the metrics so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{probe_distances, probe_summary, transfer_matrix, ProbeSummary, ProbeTrace, TransferMatrix};
use crate::attribution::{
    attribute_pair, collect_activations, importance_scores, standardize, ScoreKind,
};
use crate::categorize::{
    build_freeze_mask, build_prune_mask, partition_pretrain, partition_with, ratio_search,
    AblationReport, AttributeMap, Category, EvalSets, FreezeSpec, RatioSpec,
};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{self, RequestRegime, UtilityKind};
use crate::error::{Error, Result};
use crate::model::{apply_prune_mask, Checkpoint};
use crate::train::{
    align_until_gates, alignment_dataset, build_pipeline, eval_asr, eval_utility, train,
    GateMetrics, PipelineSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEval {
    pub category: String,
    pub fraction: f64,
    pub utility: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub label: String,
    /// Frozen CU budget as a fraction of the unit universe; None for the
    /// unfrozen baseline.
    pub cu_top_fraction: Option<f64>,
    pub frozen_unit_count: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub utility: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOutcome {
    pub method: String,
    pub trainable_unit_count: Option<usize>,
    pub utility: f64,
    pub asr: f64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub trace: ProbeTrace,
    pub summary: ProbeSummary,
}

/// Everything the report stage needs, with no wall-clock contamination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub seed: u64,
    pub unaligned_gates: GateMetrics,
    pub aligned_gates: GateMetrics,
    pub ratios: RatioSpec,
    pub category_counts: BTreeMap<String, usize>,
    pub ablation: AblationReport,
    pub baseline_utility: f64,
    pub baseline_asr: f64,
    pub prune_eval: Vec<PruneEval>,
    pub finetune: Vec<FinetuneOutcome>,
    pub alignment: Vec<AlignmentOutcome>,
    pub transfer_attack_unfrozen: TransferMatrix,
    pub transfer_attack_frozen: TransferMatrix,
    pub transfer_alignment: TransferMatrix,
    pub probe_aligned: ProbeResult,
    pub probe_unaligned: ProbeResult,
}

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot";

fn save(workspace: &Path, name: &str, ckpt: &Checkpoint) -> Result<()> {
    save_checkpoint(ckpt, &workspace.join(name))
}

fn finetune_label(fraction: f64, all_cu: bool) -> String {
    if all_cu {
        "freeze_esu_cuall".to_string()
    } else {
        format!("freeze_esu_cu{}", (fraction * 100.0).round() as usize)
    }
}

pub struct PipelineRun {
    pub metrics: PipelineMetrics,
    pub workspace: PathBuf,
}

/// Run the whole experiment for one seed, writing artifacts under
/// `cfg.workspace` (checkpoints, importance tables, maps, metrics, logs).
pub fn run_pipeline(cfg: &RunConfig, seed: u64, config_text: &str) -> Result<PipelineRun> {
    let workspace = cfg.workspace.clone();
    fs::create_dir_all(&workspace)?;
    fs::write(workspace.join(CONFIG_SNAPSHOT), config_text)?;

    let spec = PipelineSpec {
        config: cfg.model,
        pretrain: cfg.pretrain,
        align: cfg.align,
        n_utility: cfg.n_utility,
        n_requests: cfg.n_requests,
        n_classify: cfg.n_classify,
        harmful_per_topic: cfg.harmful_per_topic,
        replay_ratio: cfg.replay_ratio,
        n_eval_utility: cfg.n_eval_utility,
    };
    let models = build_pipeline(seed, &spec)?;
    save(&workspace, "base.ckpt", &models.base)?;
    save(&workspace, "unaligned.ckpt", &models.unaligned)?;
    save(&workspace, "aligned.ckpt", &models.aligned)?;
    fs::write(workspace.join("pretrain_loss.csv"), models.pretrain_log.to_csv())?;
    fs::write(workspace.join("align_loss.csv"), models.align_log.to_csv())?;

    // Attribution on the aligned model and the pruning-ratio search.
    let (util_cal, safety_cal) = data::gen_calibration_sets(seed ^ 0xca1, cfg.n_calibration);
    let pair = attribute_pair(
        &models.aligned,
        &util_cal,
        &safety_cal,
        cfg.position_policy,
    )?;
    fs::write(workspace.join("importance_utility.csv"), pair.utility.to_csv())?;
    fs::write(workspace.join("importance_safety.csv"), pair.safety.to_csv())?;

    let sets = EvalSets {
        utility: data::gen_utility_set(seed ^ 0x5eed, cfg.n_eval_utility, UtilityKind::Add),
        harmful: data::harmful_eval_set(),
    };
    let (ratios, map_aligned, ablation) =
        ratio_search(&models.aligned, &pair, &cfg.grids, &cfg.thresholds, &sets)?;
    fs::write(
        workspace.join("map_aligned.json"),
        serde_json::to_string_pretty(&map_aligned)?,
    )?;

    let category_counts: BTreeMap<String, usize> = [
        Category::Esu,
        Category::Euu,
        Category::Cu,
        Category::Ru,
    ]
    .into_iter()
    .map(|c| (c.as_str().to_string(), map_aligned.count_of(c)))
    .collect();

    // Per-category prune ablation of the selected map.
    let n_units = map_aligned.assignment.len() as f64;
    let mut prune_eval = Vec::new();
    for c in [Category::Esu, Category::Euu, Category::Cu, Category::Ru] {
        let mask = build_prune_mask(&map_aligned, c);
        let pruned = apply_prune_mask(&models.aligned, &mask)?;
        prune_eval.push(PruneEval {
            category: c.as_str().to_string(),
            fraction: mask.units.len() as f64 / n_units,
            utility: eval_utility(&pruned, &sets.utility)?,
            asr: eval_asr(&pruned, &sets.harmful)?,
        });
    }

    // Pretrain-mode map on the unaligned model (utility-only attribution).
    let acc = collect_activations(&models.unaligned, &util_cal, cfg.position_policy)?;
    let table = standardize(&importance_scores(&acc, &models.unaligned, "utility")?);
    let map_pretrain = partition_pretrain(&table, cfg.ru_pretrain_fraction)?;
    fs::write(
        workspace.join("map_pretrain.json"),
        serde_json::to_string_pretty(&map_pretrain)?,
    )?;

    // Fine-tune attack on the aligned model, unfrozen and with graded
    // freezing budgets.
    let attack_seed = seed ^ 0xf7;
    let attack_data = data::gen_utility_set(attack_seed, 128, UtilityKind::Rev);
    let mut finetune = Vec::new();
    let mut frozen_ckpts: BTreeMap<String, Checkpoint> = BTreeMap::new();

    let (attacked, attack_log) = train(
        &models.aligned,
        &attack_data,
        &cfg.finetune.with_seed(attack_seed),
        None,
        None,
    )?;
    let attacked = attacked.with_phase("finetuned");
    save(&workspace, "finetune_unfrozen.ckpt", &attacked)?;
    finetune.push(FinetuneOutcome {
        label: "unfrozen".into(),
        cu_top_fraction: None,
        frozen_unit_count: 0,
        epochs: cfg.finetune.epochs,
        final_loss: attack_log.final_loss,
        utility: eval_utility(&attacked, &sets.utility)?,
        asr: eval_asr(&attacked, &sets.harmful)?,
    });

    let mut fractions = cfg.cu_fractions.clone();
    if !fractions.contains(&cfg.freeze.cu_top_fraction) {
        fractions.push(cfg.freeze.cu_top_fraction);
    }
    let frozen_epochs = cfg.finetune.epochs * cfg.frozen_epoch_multiplier;
    let run_frozen = |fraction: f64, all_cu: bool, finetune: &mut Vec<FinetuneOutcome>,
                          frozen_ckpts: &mut BTreeMap<String, Checkpoint>|
     -> Result<()> {
        let spec = FreezeSpec {
            esu_all: true,
            cu_top_fraction: fraction,
        };
        let mask = build_freeze_mask(&map_aligned, &spec, &pair)?;
        let label = finetune_label(fraction, all_cu);
        let (ckpt, log) = train(
            &models.aligned,
            &attack_data,
            &cfg.finetune.with_seed(attack_seed).with_epochs(frozen_epochs),
            Some(&mask),
            None,
        )?;
        let ckpt = ckpt.with_phase(&label);
        save(&workspace, &format!("finetune_{label}.ckpt"), &ckpt)?;
        finetune.push(FinetuneOutcome {
            label: label.clone(),
            cu_top_fraction: Some(fraction),
            frozen_unit_count: mask.frozen_units.len(),
            epochs: frozen_epochs,
            final_loss: log.final_loss,
            utility: eval_utility(&ckpt, &sets.utility)?,
            asr: eval_asr(&ckpt, &sets.harmful)?,
        });
        frozen_ckpts.insert(label, ckpt);
        Ok(())
    };
    for &f in &fractions {
        run_frozen(f, false, &mut finetune, &mut frozen_ckpts)?;
    }
    run_frozen(1.0, true, &mut finetune, &mut frozen_ckpts)?;

    // Re-attribute the attacked models and track category movement.
    let repartition = |ckpt: &Checkpoint| -> Result<AttributeMap> {
        let pair = attribute_pair(ckpt, &util_cal, &safety_cal, cfg.position_policy)?;
        partition_with(&pair, &ratios, ScoreKind::Standardized)
    };
    let map_attacked = repartition(&attacked)?;
    let frozen_label = finetune_label(cfg.freeze.cu_top_fraction, false);
    let map_frozen = repartition(&frozen_ckpts[&frozen_label])?;
    let transfer_attack_unfrozen = transfer_matrix(&map_aligned, &map_attacked)?;
    let transfer_attack_frozen = transfer_matrix(&map_aligned, &map_frozen)?;
    let transfer_alignment = transfer_matrix(&map_pretrain, &map_aligned)?;

    // Unit-budget alignment: repeat the alignment phase training only the
    // RU units from the pretrain-mode map.
    let align_seed = seed ^ 0xa11;
    let align_data = alignment_dataset(seed, &spec);
    let ru_units: std::collections::BTreeSet<_> =
        map_pretrain.units_of(Category::Ru).into_iter().collect();
    let ru_epochs = cfg.align.epochs * cfg.frozen_epoch_multiplier;
    let (ru_aligned, ru_log) = align_until_gates(
        &models.unaligned,
        &align_data,
        &cfg.align.with_seed(align_seed).with_epochs(ru_epochs),
        seed,
        cfg.n_eval_utility,
        Some(&ru_units),
    )?;
    let ru_aligned = ru_aligned.with_phase("ru_aligned");
    save(&workspace, "aligned_ru_only.ckpt", &ru_aligned)?;
    let alignment = vec![
        AlignmentOutcome {
            method: "pre_alignment".into(),
            trainable_unit_count: None,
            utility: models.unaligned_metrics.utility,
            asr: models.unaligned_metrics.asr,
            final_loss: None,
        },
        AlignmentOutcome {
            method: "full_alignment".into(),
            trainable_unit_count: None,
            utility: models.aligned_metrics.utility,
            asr: models.aligned_metrics.asr,
            final_loss: Some(models.align_log.final_loss),
        },
        AlignmentOutcome {
            method: "ru_only".into(),
            trainable_unit_count: Some(ru_units.len()),
            utility: eval_utility(&ru_aligned, &sets.utility)?,
            asr: eval_asr(&ru_aligned, &sets.harmful)?,
            final_loss: Some(ru_log.final_loss),
        },
    ];

    // Reasoning-direction probe on both models.
    let triples = data::gen_probe_triples(seed ^ 0x9b, cfg.probe_triples);
    let probe = |ckpt: &Checkpoint| -> Result<ProbeResult> {
        let trace = probe_distances(ckpt, &triples, cfg.probe_steps)?;
        let summary = probe_summary(&trace, cfg.probe_aligned_min, cfg.probe_unaligned_max)?;
        Ok(ProbeResult { trace, summary })
    };
    let probe_aligned = probe(&models.aligned)?;
    let probe_unaligned = probe(&models.unaligned)?;

    let metrics = PipelineMetrics {
        seed,
        unaligned_gates: models.unaligned_metrics,
        aligned_gates: models.aligned_metrics,
        ratios,
        category_counts,
        ablation,
        baseline_utility: eval_utility(&models.aligned, &sets.utility)?,
        baseline_asr: eval_asr(&models.aligned, &sets.harmful)?,
        prune_eval,
        finetune,
        alignment,
        transfer_attack_unfrozen,
        transfer_attack_frozen,
        transfer_alignment,
        probe_aligned,
        probe_unaligned,
    };
    fs::write(
        workspace.join(METRICS_FILE),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(PipelineRun { metrics, workspace })
}

pub fn load_metrics(workspace: &Path) -> Result<PipelineMetrics> {
    let path = workspace.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact("pipeline".into()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
