//! Per-channel importance scores over a calibration dataset.
//!
//! The raw score of a unit is the sample variance of its inner activation
//! across all selected (example, position) observations, times the squared
//! Euclidean norm of the corresponding column of its module's B matrix.
//! Raw scores are standardized per (layer, module_kind) group to make ranks
//! comparable across layers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{
    forward, unit_universe, CaptureFlags, Checkpoint, ModelConfig, ModuleKind, UnitId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionPolicy {
    /// Positions that predict a response token, i.e. positions whose next
    /// token carries loss. This matches the training objective and includes
    /// the last prompt position, where the first response token is decided.
    ResponseOnly,
    AllPositions,
}

/// One-pass (Welford) variance state for a single channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct ChannelStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl ChannelStats {
    fn observe(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, other: &ChannelStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    fn sample_variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| self.m2 / (self.n - 1) as f64)
    }
}

/// Streaming activation statistics for every unit of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceAccumulator {
    pub config: ModelConfig,
    stats: Vec<ChannelStats>,
}

pub fn unit_index(config: &ModelConfig, unit: UnitId) -> usize {
    let per_block = config.d_model + config.d_mlp;
    unit.layer * per_block
        + match unit.kind {
            ModuleKind::Attn => unit.channel,
            ModuleKind::Mlp => config.d_model + unit.channel,
        }
}

impl ImportanceAccumulator {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config: *config,
            stats: vec![ChannelStats::default(); config.unit_count()],
        }
    }

    pub fn observe(&mut self, unit: UnitId, value: f64) {
        let i = unit_index(&self.config, unit);
        self.stats[i].observe(value);
    }

    pub fn n_obs(&self, unit: UnitId) -> u64 {
        self.stats[unit_index(&self.config, unit)].n
    }

    pub fn merge(&mut self, other: &ImportanceAccumulator) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Contract(
                "cannot merge accumulators from different configs".into(),
            ));
        }
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.merge(b);
        }
        Ok(())
    }
}

/// Raw and standardized importance scores for one calibration dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub config: ModelConfig,
    /// Indexed by [`unit_index`].
    pub raw: Vec<f64>,
    pub standardized: Vec<f64>,
    pub dataset_tag: String,
    pub source_phase: String,
    /// (layer, kind) groups whose raw scores were all equal.
    pub degenerate_groups: Vec<(usize, ModuleKind)>,
}

impl ImportanceTable {
    pub fn raw_of(&self, unit: UnitId) -> f64 {
        self.raw[unit_index(&self.config, unit)]
    }

    pub fn standardized_of(&self, unit: UnitId) -> f64 {
        self.standardized[unit_index(&self.config, unit)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,module_kind,channel,raw,standardized,dataset_tag\n");
        for unit in unit_universe(&self.config) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                unit.layer,
                unit.kind.as_str(),
                unit.channel,
                self.raw_of(unit),
                self.standardized_of(unit),
                self.dataset_tag
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Which score field drives downstream ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    Standardized,
    Raw,
}

/// Paired utility/safety tables from the same checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePair {
    pub utility: ImportanceTable,
    pub safety: ImportanceTable,
}

impl AttributePair {
    fn score(table: &ImportanceTable, unit: UnitId, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Standardized => table.standardized_of(unit),
            ScoreKind::Raw => table.raw_of(unit),
        }
    }

    /// Î_U + Î_S.
    pub fn sum_of(&self, unit: UnitId, kind: ScoreKind) -> f64 {
        Self::score(&self.utility, unit, kind) + Self::score(&self.safety, unit, kind)
    }

    /// Î_S − Î_U.
    pub fn diff_of(&self, unit: UnitId, kind: ScoreKind) -> f64 {
        Self::score(&self.safety, unit, kind) - Self::score(&self.utility, unit, kind)
    }
}

/// Fold the captured inner activations of every example into an accumulator.
pub fn collect_activations(
    ckpt: &Checkpoint,
    dataset: &[Example],
    policy: PositionPolicy,
) -> Result<ImportanceAccumulator> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty calibration dataset".into()));
    }
    let cfg = &ckpt.config;
    let mut acc = ImportanceAccumulator::new(cfg);
    let mut any = false;
    for ex in dataset {
        let tokens = ex.tokens();
        let mask = ex.loss_mask();
        let out = forward(ckpt, &tokens, CaptureFlags::activations())?;
        let caps = out.activations.expect("requested capture");
        for pos in 0..tokens.len() {
            let selected = match policy {
                PositionPolicy::ResponseOnly => pos + 1 < tokens.len() && mask[pos + 1],
                PositionPolicy::AllPositions => true,
            };
            if !selected {
                continue;
            }
            any = true;
            for b in 0..cfg.n_blocks {
                let attn = &caps.blocks[b].attn[pos * cfg.d_model..(pos + 1) * cfg.d_model];
                for (j, &v) in attn.iter().enumerate() {
                    acc.observe(UnitId::new(b, ModuleKind::Attn, j), v);
                }
                let mlp = &caps.blocks[b].mlp[pos * cfg.d_mlp..(pos + 1) * cfg.d_mlp];
                for (j, &v) in mlp.iter().enumerate() {
                    acc.observe(UnitId::new(b, ModuleKind::Mlp, j), v);
                }
            }
        }
    }
    if !any {
        return Err(Error::Contract(
            "position policy selected no observations".into(),
        ));
    }
    Ok(acc)
}

/// Squared L2 norm of column `j` of the unit's B matrix.
fn b_column_norm2(ckpt: &Checkpoint, unit: UnitId) -> f64 {
    let cfg = &ckpt.config;
    let (name, inner, out_dim) = match unit.kind {
        ModuleKind::Attn => (
            format!("blocks.{}.attn.w_o", unit.layer),
            cfg.d_model,
            cfg.d_model,
        ),
        ModuleKind::Mlp => (
            format!("blocks.{}.mlp.down", unit.layer),
            cfg.d_mlp,
            cfg.d_model,
        ),
    };
    let b = ckpt.param(&name);
    (0..out_dim)
        .map(|i| {
            let v = b[i * inner + unit.channel];
            v * v
        })
        .sum()
}

/// Raw importance: sample variance of the channel's activations times the
/// squared norm of the matching B column. Standardized scores are filled by
/// [`standardize`].
pub fn importance_scores(
    acc: &ImportanceAccumulator,
    ckpt: &Checkpoint,
    dataset_tag: &str,
) -> Result<ImportanceTable> {
    if acc.config != ckpt.config {
        return Err(Error::Contract(
            "accumulator config does not match checkpoint".into(),
        ));
    }
    let cfg = &ckpt.config;
    let mut raw = vec![0.0; cfg.unit_count()];
    for unit in unit_universe(cfg) {
        let i = unit_index(cfg, unit);
        let var = acc.stats[i].sample_variance().ok_or_else(|| {
            Error::InsufficientData(format!(
                "unit {:?} has {} observations, need >= 2",
                unit, acc.stats[i].n
            ))
        })?;
        raw[i] = var * b_column_norm2(ckpt, unit);
    }
    Ok(ImportanceTable {
        config: *cfg,
        raw,
        standardized: vec![0.0; cfg.unit_count()],
        dataset_tag: dataset_tag.to_string(),
        source_phase: ckpt.phase_tag.clone(),
        degenerate_groups: Vec::new(),
    })
}

/// Per-(layer, module_kind) standardization with population variance.
/// Zero-variance groups get all-zero scores and a degeneracy flag.
pub fn standardize(table: &ImportanceTable) -> ImportanceTable {
    let cfg = &table.config;
    let mut out = table.clone();
    out.degenerate_groups.clear();
    for layer in 0..cfg.n_blocks {
        for kind in [ModuleKind::Attn, ModuleKind::Mlp] {
            let channels = match kind {
                ModuleKind::Attn => cfg.d_model,
                ModuleKind::Mlp => cfg.d_mlp,
            };
            let idxs: Vec<usize> = (0..channels)
                .map(|j| unit_index(cfg, UnitId::new(layer, kind, j)))
                .collect();
            let n = idxs.len() as f64;
            let mean = idxs.iter().map(|&i| table.raw[i]).sum::<f64>() / n;
            let var = idxs
                .iter()
                .map(|&i| {
                    let d = table.raw[i] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            if var == 0.0 {
                for &i in &idxs {
                    out.standardized[i] = 0.0;
                }
                out.degenerate_groups.push((layer, kind));
            } else {
                let std = var.sqrt();
                for &i in &idxs {
                    out.standardized[i] = (table.raw[i] - mean) / std;
                }
            }
        }
    }
    out
}

/// Full collect → score → standardize for both calibration datasets.
pub fn attribute_pair(
    ckpt: &Checkpoint,
    utility_set: &[Example],
    safety_set: &[Example],
    policy: PositionPolicy,
) -> Result<AttributePair> {
    let acc_u = collect_activations(ckpt, utility_set, policy)?;
    let acc_s = collect_activations(ckpt, safety_set, policy)?;
    let utility = standardize(&importance_scores(&acc_u, ckpt, "utility")?);
    let safety = standardize(&importance_scores(&acc_s, ckpt, "safety")?);
    Ok(AttributePair { utility, safety })
}
