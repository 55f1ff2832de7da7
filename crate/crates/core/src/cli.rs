//! Command-line surface. Every subcommand is a thin wrapper over the
//! library; state flows through the workspace directory as files, so
//! stages can be rerun or inspected individually.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{probe_distances, probe_summary, transfer_matrix};
use crate::attribution::{attribute_pair, collect_activations, importance_scores, standardize};
use crate::categorize::{
    build_freeze_mask, build_prune_mask, partition_pretrain, ratio_search, AttributeMap,
    Category, EvalSets, FreezeSpec,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_config, RunConfig};
use crate::data::{self, RequestRegime, UtilityKind};
use crate::error::{Error, Result};
use crate::model::{apply_prune_mask, Checkpoint};
use crate::pipeline::run_pipeline;
use crate::report::emit_report;
use crate::train::{build_pipeline, eval_asr, eval_utility, train, PipelineSpec};

#[derive(Parser)]
#[command(name = "alignscope", about = "Neuron-level safety attribution toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (INI-style); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Artifact directory; overrides the config's workspace path.
    #[arg(long)]
    workspace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic datasets as JSONL files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Build the base, unaligned, and aligned checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score unit importance on calibration data for one checkpoint.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// Which checkpoint to attribute (file stem in the workspace).
        #[arg(long, default_value = "aligned")]
        phase: String,
    },
    /// Search pruning ratios and write the category map.
    Categorize {
        #[command(flatten)]
        common: Common,
    },
    /// Prune categories of the aligned model and report utility/ASR.
    PruneEval {
        #[command(flatten)]
        common: Common,
        /// Restrict to one category (esu, euu, cu, ru).
        #[arg(long)]
        category: Option<String>,
    },
    /// Fine-tune attack against the aligned model.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Freeze specification: "none", "esu", or "esu+cu:<fraction>".
        #[arg(long, default_value = "none")]
        freeze_spec: String,
    },
    /// Category-transfer matrices between stored maps and checkpoints.
    Transfer {
        #[command(flatten)]
        common: Common,
    },
    /// Hidden-state reasoning-direction probe for one checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "aligned")]
        phase: String,
        /// Generation steps per probe sequence.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Regenerate report files from a completed workspace.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Full sequence: train, attribute, categorize, ablate, attack,
    /// transfer, probe, report.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn load_run_config(common: &Common) -> Result<(RunConfig, String)> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path)?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(ws) = &common.workspace {
        cfg.workspace = ws.clone();
    }
    Ok((cfg, text))
}

fn load_ckpt(workspace: &Path, phase: &str) -> Result<Checkpoint> {
    let path = workspace.join(format!("{phase}.ckpt"));
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint:{phase}")));
    }
    load_checkpoint(&path)
}

fn load_map(workspace: &Path, name: &str) -> Result<AttributeMap> {
    let path = workspace.join(format!("{name}.json"));
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("map:{name}")));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn eval_sets(cfg: &RunConfig, seed: u64) -> EvalSets {
    EvalSets {
        utility: data::gen_utility_set(seed ^ 0x5eed, cfg.n_eval_utility, UtilityKind::Add),
        harmful: data::harmful_eval_set(),
    }
}

fn parse_category(s: &str) -> Result<Category> {
    match s.to_ascii_lowercase().as_str() {
        "esu" => Ok(Category::Esu),
        "euu" => Ok(Category::Euu),
        "cu" => Ok(Category::Cu),
        "ru" => Ok(Category::Ru),
        _ => Err(Error::Usage(format!("unknown category '{s}'"))),
    }
}

fn parse_freeze_spec(s: &str) -> Result<Option<FreezeSpec>> {
    match s {
        "none" => Ok(None),
        "esu" => Ok(Some(FreezeSpec {
            esu_all: true,
            cu_top_fraction: 0.0,
        })),
        _ => {
            let rest = s.strip_prefix("esu+cu:").ok_or_else(|| {
                Error::Usage(format!(
                    "freeze spec '{s}' is not 'none', 'esu', or 'esu+cu:<fraction>'"
                ))
            })?;
            let fraction: f64 = rest
                .parse()
                .map_err(|_| Error::Usage(format!("bad cu fraction '{rest}'")))?;
            Ok(Some(FreezeSpec {
                esu_all: true,
                cu_top_fraction: fraction,
            }))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { common } => {
            let (cfg, _) = load_run_config(&common)?;
            fs::create_dir_all(&cfg.workspace)?;
            let seed = common.seed;
            data::write_jsonl(
                &cfg.workspace.join("utility_add.jsonl"),
                &data::gen_utility_set(seed, cfg.n_utility, UtilityKind::Add),
            )?;
            data::write_jsonl(
                &cfg.workspace.join("requests_fulfill_all.jsonl"),
                &data::gen_request_set(seed, cfg.n_requests, RequestRegime::FulfillAll),
            )?;
            data::write_jsonl(
                &cfg.workspace.join("requests_aligned.jsonl"),
                &data::gen_request_set(seed ^ 0xa11, cfg.n_requests, RequestRegime::Aligned),
            )?;
            let (util_cal, safety_cal) =
                data::gen_calibration_sets(seed ^ 0xca1, cfg.n_calibration);
            data::write_jsonl(&cfg.workspace.join("calibration_utility.jsonl"), &util_cal)?;
            data::write_jsonl(&cfg.workspace.join("calibration_safety.jsonl"), &safety_cal)?;
            println!("wrote datasets to {}", cfg.workspace.display());
            Ok(())
        }
        Cmd::Train { common } => {
            let (cfg, _) = load_run_config(&common)?;
            fs::create_dir_all(&cfg.workspace)?;
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
            let models = build_pipeline(common.seed, &spec)?;
            save_checkpoint(&models.base, &cfg.workspace.join("base.ckpt"))?;
            save_checkpoint(&models.unaligned, &cfg.workspace.join("unaligned.ckpt"))?;
            save_checkpoint(&models.aligned, &cfg.workspace.join("aligned.ckpt"))?;
            println!(
                "{}",
                serde_json::json!({
                    "unaligned": models.unaligned_metrics,
                    "aligned": models.aligned_metrics,
                })
            );
            Ok(())
        }
        Cmd::Attribute { common, phase } => {
            let (cfg, _) = load_run_config(&common)?;
            let ckpt = load_ckpt(&cfg.workspace, &phase)?;
            let (util_cal, safety_cal) =
                data::gen_calibration_sets(common.seed ^ 0xca1, cfg.n_calibration);
            let pair = attribute_pair(&ckpt, &util_cal, &safety_cal, cfg.position_policy)?;
            fs::write(
                cfg.workspace.join("importance_utility.csv"),
                pair.utility.to_csv(),
            )?;
            fs::write(
                cfg.workspace.join("importance_safety.csv"),
                pair.safety.to_csv(),
            )?;
            println!("wrote importance tables for phase {phase}");
            Ok(())
        }
        Cmd::Categorize { common } => {
            let (cfg, _) = load_run_config(&common)?;
            let aligned = load_ckpt(&cfg.workspace, "aligned")?;
            let (util_cal, safety_cal) =
                data::gen_calibration_sets(common.seed ^ 0xca1, cfg.n_calibration);
            let pair = attribute_pair(&aligned, &util_cal, &safety_cal, cfg.position_policy)?;
            let sets = eval_sets(&cfg, common.seed);
            let (ratios, map, ablation) =
                ratio_search(&aligned, &pair, &cfg.grids, &cfg.thresholds, &sets)?;
            fs::write(
                cfg.workspace.join("map_aligned.json"),
                serde_json::to_string_pretty(&map)?,
            )?;
            fs::write(cfg.workspace.join("ablation_search.csv"), ablation.to_csv())?;
            // Two-category map for the unit-budget experiments.
            if let Ok(unaligned) = load_ckpt(&cfg.workspace, "unaligned") {
                let acc = collect_activations(&unaligned, &util_cal, cfg.position_policy)?;
                let table = standardize(&importance_scores(&acc, &unaligned, "utility")?);
                let pre = partition_pretrain(&table, cfg.ru_pretrain_fraction)?;
                fs::write(
                    cfg.workspace.join("map_pretrain.json"),
                    serde_json::to_string_pretty(&pre)?,
                )?;
            }
            println!("{}", serde_json::to_string(&ratios)?);
            Ok(())
        }
        Cmd::PruneEval { common, category } => {
            let (cfg, _) = load_run_config(&common)?;
            let aligned = load_ckpt(&cfg.workspace, "aligned")?;
            let map = load_map(&cfg.workspace, "map_aligned")?;
            let sets = eval_sets(&cfg, common.seed);
            let categories = match category {
                Some(c) => vec![parse_category(&c)?],
                None => vec![Category::Esu, Category::Euu, Category::Cu, Category::Ru],
            };
            let mut csv = String::from("category,utility,asr\n");
            csv.push_str(&format!(
                "none,{},{}\n",
                eval_utility(&aligned, &sets.utility)?,
                eval_asr(&aligned, &sets.harmful)?
            ));
            for c in categories {
                let pruned = apply_prune_mask(&aligned, &build_prune_mask(&map, c))?;
                csv.push_str(&format!(
                    "{},{},{}\n",
                    c.as_str(),
                    eval_utility(&pruned, &sets.utility)?,
                    eval_asr(&pruned, &sets.harmful)?
                ));
            }
            fs::write(cfg.workspace.join("prune_eval.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Cmd::Finetune { common, freeze_spec } => {
            let (cfg, _) = load_run_config(&common)?;
            let aligned = load_ckpt(&cfg.workspace, "aligned")?;
            let spec = parse_freeze_spec(&freeze_spec)?;
            let attack_seed = common.seed ^ 0xf7;
            let attack_data =
                data::gen_request_set(attack_seed, 128, RequestRegime::FulfillAll);
            let (hyper, mask) = match &spec {
                None => (cfg.finetune.with_seed(attack_seed), None),
                Some(fspec) => {
                    let map = load_map(&cfg.workspace, "map_aligned")?;
                    let (util_cal, safety_cal) =
                        data::gen_calibration_sets(common.seed ^ 0xca1, cfg.n_calibration);
                    let pair =
                        attribute_pair(&aligned, &util_cal, &safety_cal, cfg.position_policy)?;
                    let mask = build_freeze_mask(&map, fspec, &pair)?;
                    (
                        cfg.finetune
                            .with_seed(attack_seed)
                            .with_epochs(cfg.finetune.epochs * cfg.frozen_epoch_multiplier),
                        Some(mask),
                    )
                }
            };
            let (ckpt, log) = train(&aligned, &attack_data, &hyper, mask.as_ref(), None)?;
            let tag = if spec.is_some() { "frozen" } else { "unfrozen" };
            let ckpt = ckpt.with_phase("finetuned");
            save_checkpoint(&ckpt, &cfg.workspace.join(format!("finetune_{tag}.ckpt")))?;
            let sets = eval_sets(&cfg, common.seed);
            println!(
                "{}",
                serde_json::json!({
                    "freeze_spec": freeze_spec,
                    "final_loss": log.final_loss,
                    "utility": eval_utility(&ckpt, &sets.utility)?,
                    "asr": eval_asr(&ckpt, &sets.harmful)?,
                })
            );
            Ok(())
        }
        Cmd::Transfer { common } => {
            let (cfg, _) = load_run_config(&common)?;
            let map_pre = load_map(&cfg.workspace, "map_pretrain")?;
            let map_aligned = load_map(&cfg.workspace, "map_aligned")?;
            let m = transfer_matrix(&map_pre, &map_aligned)?;
            fs::write(cfg.workspace.join("transfer_alignment.csv"), m.to_csv())?;
            print!("{}", m.to_csv());
            Ok(())
        }
        Cmd::Probe { common, phase, steps } => {
            let (cfg, _) = load_run_config(&common)?;
            let ckpt = load_ckpt(&cfg.workspace, &phase)?;
            let triples = data::gen_probe_triples(common.seed ^ 0x9b, cfg.probe_triples);
            let trace =
                probe_distances(&ckpt, &triples, steps.unwrap_or(cfg.probe_steps))?;
            let summary =
                probe_summary(&trace, cfg.probe_aligned_min, cfg.probe_unaligned_max)?;
            fs::write(
                cfg.workspace.join(format!("probe_{phase}.csv")),
                trace.to_csv(),
            )?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Report { common } => {
            let (cfg, _) = load_run_config(&common)?;
            for path in emit_report(&cfg.workspace)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Cmd::Pipeline { common } => {
            let (cfg, text) = load_run_config(&common)?;
            let run = run_pipeline(&cfg, common.seed, &text)?;
            for path in emit_report(&run.workspace)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::Contract(_) => "contract",
        Error::InvalidInput(_) => "invalid_input",
        Error::IndexOutOfBounds(_) => "index_out_of_bounds",
        Error::InvalidConfig(_) => "invalid_config",
        Error::NonFinite(_) => "non_finite",
        Error::InsufficientData(_) => "insufficient_data",
        Error::PipelineGate { .. } => "pipeline_gate",
        Error::SearchFailure { .. } => "search_failure",
        Error::ConfigParse(_) => "config_parse",
        Error::CheckpointFormat(_) => "checkpoint_format",
        Error::UnsupportedVersion(_) => "unsupported_version",
        Error::TruncatedBlob { .. } => "truncated_blob",
        Error::MissingArtifact(_) => "missing_artifact",
        Error::Usage(_) => "usage",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Parse and execute. Returns the process exit code; errors go to stderr
/// as one-line JSON records.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": "usage", "message": e.to_string() })
                );
            }
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": error_kind(&e), "message": e.to_string() })
            );
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_ne!(run_command(["alignscope", "frobnicate"]), 0);
        assert_ne!(run_command(["alignscope"]), 0);
    }

    #[test]
    fn freeze_spec_parsing() {
        assert_eq!(parse_freeze_spec("none").unwrap(), None);
        let s = parse_freeze_spec("esu+cu:0.06").unwrap().unwrap();
        assert!(s.esu_all);
        assert_eq!(s.cu_top_fraction, 0.06);
        assert!(parse_freeze_spec("banana").is_err());
        assert!(parse_freeze_spec("esu+cu:x").is_err());
    }

    #[test]
    fn report_on_empty_workspace_fails() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_command([
            "alignscope",
            "report",
            "--workspace",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn gen_data_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_command([
            "alignscope",
            "gen-data",
            "--workspace",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(dir.path().join("utility_add.jsonl").exists());
        assert!(dir.path().join("requests_aligned.jsonl").exists());
    }

    #[test]
    fn category_parsing() {
        assert_eq!(parse_category("esu").unwrap(), Category::Esu);
        assert_eq!(parse_category("RU").unwrap(), Category::Ru);
        assert!(parse_category("zz").is_err());
    }
}
