//! Run configuration: an INI-style file merged over built-in defaults.
//!
//! Sections and keys:
//!
//! ```text
//! [model]       n_blocks d_model n_heads d_mlp vocab_size max_seq rms_eps
//! [pretrain]    lr epochs batch_size weight_decay grad_clip n_utility n_requests n_classify
//! [align]       lr epochs batch_size replay_ratio harmful_per_topic
//! [finetune]    lr epochs batch_size frozen_epoch_multiplier cu_fractions
//! [attribution] position_policy n_calibration
//! [categorizer] ru_grid esu_grid euu_grid eps_u eps_s tau_s tau_u ru_pretrain_fraction
//! [freeze]      esu_all cu_top_fraction
//! [probe]       triples steps aligned_min unaligned_max
//! [run]         seeds workspace n_eval_utility
//! ```
//!
//! List values are comma-separated. Unknown keys are rejected by name.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribution::PositionPolicy;
use crate::categorize::{FreezeSpec, SearchGrids, SearchThresholds};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainHyper,
    pub align: TrainHyper,
    pub finetune: TrainHyper,
    /// Frozen and unit-budget runs train this many times the baseline epochs.
    pub frozen_epoch_multiplier: usize,
    /// cu_top_fraction sweep for the freeze ablation.
    pub cu_fractions: Vec<f64>,
    pub n_utility: usize,
    pub n_requests: usize,
    pub n_classify: usize,
    pub harmful_per_topic: usize,
    pub replay_ratio: f64,
    pub n_eval_utility: usize,
    pub position_policy: PositionPolicy,
    /// Examples per calibration set (utility and safety each).
    pub n_calibration: usize,
    pub grids: SearchGrids,
    pub thresholds: SearchThresholds,
    /// RU fraction for the pretrain-mode (two-category) map.
    pub ru_pretrain_fraction: f64,
    pub freeze: FreezeSpec,
    pub probe_triples: usize,
    pub probe_steps: usize,
    pub probe_aligned_min: f64,
    pub probe_unaligned_max: f64,
    pub seeds: Vec<u64>,
    pub workspace: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainHyper {
                epochs: 40,
                lr: 3e-3,
                batch_size: 16,
                ..TrainHyper::default()
            },
            align: TrainHyper {
                epochs: 40,
                lr: 3e-4,
                batch_size: 16,
                ..TrainHyper::default()
            },
            finetune: TrainHyper {
                epochs: 6,
                lr: 1e-3,
                ..TrainHyper::default()
            },
            frozen_epoch_multiplier: 2,
            cu_fractions: vec![0.0, 0.03, 0.06, 0.09, 0.15],
            n_utility: 512,
            n_requests: 256,
            n_classify: 256,
            harmful_per_topic: 2,
            replay_ratio: 2.0,
            n_eval_utility: 200,
            position_policy: PositionPolicy::ResponseOnly,
            n_calibration: 64,
            grids: SearchGrids::default(),
            thresholds: SearchThresholds::default(),
            ru_pretrain_fraction: 0.20,
            freeze: FreezeSpec {
                esu_all: true,
                cu_top_fraction: 0.06,
            },
            probe_triples: 16,
            probe_steps: 3,
            probe_aligned_min: 0.8,
            probe_unaligned_max: 0.4,
            seeds: vec![0, 1, 2],
            workspace: PathBuf::from("workspace"),
        }
    }
}

fn bad_value(section: &str, key: &str, value: &str, want: &str) -> Error {
    Error::ConfigParse(format!(
        "[{section}] {key} = {value}: expected {want}"
    ))
}

fn parse_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| bad_value(section, key, v, "a number"))
}

fn parse_usize(section: &str, key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| bad_value(section, key, v, "a non-negative integer"))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad_value(section, key, v, "a boolean")),
    }
}

fn parse_f64_list(section: &str, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| parse_f64(section, key, s.trim()))
        .collect()
}

fn parse_u64_list(section: &str, key: &str, v: &str) -> Result<Vec<u64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| bad_value(section, key, s.trim(), "an integer list"))
        })
        .collect()
}

fn apply_hyper(h: &mut TrainHyper, section: &str, key: &str, v: &str) -> Result<bool> {
    match key {
        "lr" => h.lr = parse_f64(section, key, v)?,
        "epochs" => h.epochs = parse_usize(section, key, v)?,
        "batch_size" => h.batch_size = parse_usize(section, key, v)?,
        "weight_decay" => h.weight_decay = parse_f64(section, key, v)?,
        "grad_clip" => h.grad_clip = parse_f64(section, key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(Error::ConfigParse(format!(
                    "line {}: malformed section header '{raw}'",
                    lineno + 1
                )));
            }
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::ConfigParse(format!("line {}: expected key = value, got '{raw}'", lineno + 1))
        })?;
        let key = key.trim();
        let v = value.trim();
        let s = section.as_str();
        let known = match s {
            "model" => match key {
                "n_blocks" => {
                    cfg.model.n_blocks = parse_usize(s, key, v)?;
                    true
                }
                "d_model" => {
                    cfg.model.d_model = parse_usize(s, key, v)?;
                    true
                }
                "n_heads" => {
                    cfg.model.n_heads = parse_usize(s, key, v)?;
                    true
                }
                "d_mlp" => {
                    cfg.model.d_mlp = parse_usize(s, key, v)?;
                    true
                }
                "vocab_size" => {
                    cfg.model.vocab_size = parse_usize(s, key, v)?;
                    true
                }
                "max_seq" => {
                    cfg.model.max_seq = parse_usize(s, key, v)?;
                    true
                }
                "rms_eps" => {
                    cfg.model.rms_eps = parse_f64(s, key, v)?;
                    true
                }
                _ => false,
            },
            "pretrain" => {
                if apply_hyper(&mut cfg.pretrain, s, key, v)? {
                    true
                } else {
                    match key {
                        "n_utility" => {
                            cfg.n_utility = parse_usize(s, key, v)?;
                            true
                        }
                        "n_classify" => {
                            cfg.n_classify = parse_usize(s, key, v)?;
                            true
                        }
                        "n_requests" => {
                            cfg.n_requests = parse_usize(s, key, v)?;
                            true
                        }
                        _ => false,
                    }
                }
            }
            "align" => {
                if apply_hyper(&mut cfg.align, s, key, v)? {
                    true
                } else if key == "replay_ratio" {
                    cfg.replay_ratio = parse_f64(s, key, v)?;
                    true
                } else if key == "harmful_per_topic" {
                    cfg.harmful_per_topic = parse_usize(s, key, v)?;
                    true
                } else {
                    false
                }
            }
            "finetune" => {
                if apply_hyper(&mut cfg.finetune, s, key, v)? {
                    true
                } else {
                    match key {
                        "frozen_epoch_multiplier" => {
                            cfg.frozen_epoch_multiplier = parse_usize(s, key, v)?;
                            true
                        }
                        "cu_fractions" => {
                            cfg.cu_fractions = parse_f64_list(s, key, v)?;
                            true
                        }
                        _ => false,
                    }
                }
            }
            "attribution" => match key {
                "position_policy" => {
                    cfg.position_policy = match v {
                        "response_only" => PositionPolicy::ResponseOnly,
                        "all_positions" => PositionPolicy::AllPositions,
                        _ => {
                            return Err(bad_value(
                                s,
                                key,
                                v,
                                "response_only or all_positions",
                            ))
                        }
                    };
                    true
                }
                "n_calibration" => {
                    cfg.n_calibration = parse_usize(s, key, v)?;
                    true
                }
                _ => false,
            },
            "categorizer" => match key {
                "ru_grid" => {
                    cfg.grids.ru = parse_f64_list(s, key, v)?;
                    true
                }
                "esu_grid" => {
                    cfg.grids.esu = parse_f64_list(s, key, v)?;
                    true
                }
                "euu_grid" => {
                    cfg.grids.euu = parse_f64_list(s, key, v)?;
                    true
                }
                "eps_u" => {
                    cfg.thresholds.eps_u = parse_f64(s, key, v)?;
                    true
                }
                "eps_s" => {
                    cfg.thresholds.eps_s = parse_f64(s, key, v)?;
                    true
                }
                "tau_s" => {
                    cfg.thresholds.tau_s = parse_f64(s, key, v)?;
                    true
                }
                "tau_u" => {
                    cfg.thresholds.tau_u = parse_f64(s, key, v)?;
                    true
                }
                "ru_pretrain_fraction" => {
                    cfg.ru_pretrain_fraction = parse_f64(s, key, v)?;
                    true
                }
                _ => false,
            },
            "freeze" => match key {
                "esu_all" => {
                    cfg.freeze.esu_all = parse_bool(s, key, v)?;
                    true
                }
                "cu_top_fraction" => {
                    cfg.freeze.cu_top_fraction = parse_f64(s, key, v)?;
                    true
                }
                _ => false,
            },
            "probe" => match key {
                "triples" => {
                    cfg.probe_triples = parse_usize(s, key, v)?;
                    true
                }
                "steps" => {
                    cfg.probe_steps = parse_usize(s, key, v)?;
                    true
                }
                "aligned_min" => {
                    cfg.probe_aligned_min = parse_f64(s, key, v)?;
                    true
                }
                "unaligned_max" => {
                    cfg.probe_unaligned_max = parse_f64(s, key, v)?;
                    true
                }
                _ => false,
            },
            "run" => match key {
                "seeds" => {
                    cfg.seeds = parse_u64_list(s, key, v)?;
                    true
                }
                "workspace" => {
                    cfg.workspace = PathBuf::from(v);
                    true
                }
                "n_eval_utility" => {
                    cfg.n_eval_utility = parse_usize(s, key, v)?;
                    true
                }
                _ => false,
            },
            _ => {
                return Err(Error::ConfigParse(format!(
                    "unknown section [{s}] at line {}",
                    lineno + 1
                )))
            }
        };
        if !known {
            return Err(Error::ConfigParse(format!(
                "unknown key '{key}' in section [{s}]"
            )));
        }
    }
    cfg.model.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(
            parse_config("# just a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn overrides_merge_over_defaults() {
        let cfg = parse_config(
            "[freeze]\ncu_top_fraction = 0.06\n\
             [model]\nn_blocks = 2\n\
             [pretrain]\nepochs = 5\nlr = 0.001\n\
             [run]\nseeds = 3, 4\nworkspace = /tmp/w\n\
             [finetune]\ncu_fractions = 0.0, 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.freeze.cu_top_fraction, 0.06);
        assert_eq!(cfg.model.n_blocks, 2);
        assert_eq!(cfg.pretrain.epochs, 5);
        assert_eq!(cfg.pretrain.lr, 0.001);
        // Untouched fields keep defaults.
        assert_eq!(cfg.align.epochs, RunConfig::default().align.epochs);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.workspace, PathBuf::from("/tmp/w"));
        assert_eq!(cfg.cu_fractions, vec![0.0, 0.1]);
    }

    #[test]
    fn unknown_key_names_key_and_section() {
        let err = parse_config("[freeze]\nbanana = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("banana") && msg.contains("freeze"), "{msg}");
        let err = parse_config("[orchard]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("orchard"));
    }

    #[test]
    fn type_error_names_value() {
        let err = parse_config("[freeze]\ncu_top_fraction = banana\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("banana") && msg.contains("cu_top_fraction"), "{msg}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_config("[model\nn_blocks = 2\n").is_err());
        assert!(parse_config("[model]\nno equals sign here\n").is_err());
        // Invalid resulting model config is also rejected.
        assert!(parse_config("[model]\nd_model = 63\n").is_err());
    }
}
