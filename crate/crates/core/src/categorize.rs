//! Partition of the unit universe into attribute groups and the ablation
//! search over pruning ratios.
//!
//! Selection is sequential without replacement: redundant units first
//! (smallest Î_U + Î_S), then exclusive safety units (largest Î_S − Î_U) and
//! exclusive utility units (smallest Î_S − Î_U) among the remaining units,
//! with everything left over classified as complex. Category sizes are
//! floor(ratio × |universe|). Ties break lexicographically by
//! (layer, module_kind, channel).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributePair, ImportanceTable, ScoreKind};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{unit_universe, Checkpoint, PruneMask, UnitId};
use crate::model::apply_prune_mask;
use crate::train::{eval_asr, eval_utility, FreezeMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Esu,
    Euu,
    Cu,
    Ru,
    /// Pretrain-mode category: everything that is not redundant.
    Uu,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Esu => "ESU",
            Category::Euu => "EUU",
            Category::Cu => "CU",
            Category::Ru => "RU",
            Category::Uu => "UU",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub r_ru: f64,
    pub r_esu: f64,
    pub r_euu: f64,
}

impl RatioSpec {
    pub fn new(r_ru: f64, r_esu: f64, r_euu: f64) -> Result<Self> {
        let s = Self { r_ru, r_esu, r_euu };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("r_ru", self.r_ru),
            ("r_esu", self.r_esu),
            ("r_euu", self.r_euu),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Contract(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.r_ru + self.r_esu + self.r_euu > 1.0 {
            return Err(Error::Contract(format!(
                "ratios sum to {} > 1",
                self.r_ru + self.r_esu + self.r_euu
            )));
        }
        Ok(())
    }
}

/// Total assignment of every unit to a category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMap {
    pub assignment: BTreeMap<UnitId, Category>,
    pub ratios: Option<RatioSpec>,
    pub source_phase: String,
    pub pretrain_mode: bool,
}

impl AttributeMap {
    pub fn category_of(&self, unit: UnitId) -> Category {
        self.assignment[&unit]
    }

    pub fn units_of(&self, category: Category) -> Vec<UnitId> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == category)
            .map(|(&u, _)| u)
            .collect()
    }

    pub fn count_of(&self, category: Category) -> usize {
        self.assignment.values().filter(|&&c| c == category).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,module_kind,channel,category\n");
        for (unit, cat) in &self.assignment {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                unit.layer,
                unit.kind.as_str(),
                unit.channel,
                cat.as_str()
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Sort units by key ascending, ties lexicographic by unit id.
fn sorted_by_key(units: &[UnitId], key: impl Fn(UnitId) -> f64) -> Vec<UnitId> {
    let mut v: Vec<UnitId> = units.to_vec();
    v.sort_by(|&a, &b| {
        key(a)
            .partial_cmp(&key(b))
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    v
}

/// Four-way partition by the ranking rules. `score_kind` selects
/// standardized (default) or raw scores as the ranking key.
pub fn partition_with(
    pair: &AttributePair,
    ratios: &RatioSpec,
    score_kind: ScoreKind,
) -> Result<AttributeMap> {
    ratios.validate()?;
    let cfg = &pair.utility.config;
    let universe = unit_universe(cfg);
    let n = universe.len();
    let n_ru = (ratios.r_ru * n as f64).floor() as usize;
    let n_esu = (ratios.r_esu * n as f64).floor() as usize;
    let n_euu = (ratios.r_euu * n as f64).floor() as usize;

    let mut assignment: BTreeMap<UnitId, Category> = BTreeMap::new();

    let by_sum = sorted_by_key(&universe, |u| pair.sum_of(u, score_kind));
    for &u in by_sum.iter().take(n_ru) {
        assignment.insert(u, Category::Ru);
    }
    let remaining: Vec<UnitId> = by_sum[n_ru..].to_vec();

    let by_diff = sorted_by_key(&remaining, |u| pair.diff_of(u, score_kind));
    // Largest diff → most safety-leaning.
    for &u in by_diff.iter().rev().take(n_esu) {
        assignment.insert(u, Category::Esu);
    }
    let rest: Vec<UnitId> = by_diff[..by_diff.len() - n_esu].to_vec();
    for &u in rest.iter().take(n_euu) {
        assignment.insert(u, Category::Euu);
    }
    for &u in &rest[n_euu..] {
        assignment.insert(u, Category::Cu);
    }

    Ok(AttributeMap {
        assignment,
        ratios: Some(*ratios),
        source_phase: pair.utility.source_phase.clone(),
        pretrain_mode: false,
    })
}

pub fn partition(pair: &AttributePair, ratios: &RatioSpec) -> Result<AttributeMap> {
    partition_with(pair, ratios, ScoreKind::Standardized)
}

///// Two-category pretrain-mode partition from a single utility table:
/// the bottom `r_ru` fraction by standardized score is RU, the rest UU.
pub fn partition_pretrain(table: &ImportanceTable, r_ru: f64) -> Result<AttributeMap> {
    if !(0.0..=1.0).contains(&r_ru) {
        return Err(Error::Contract(format!("r_ru = {r_ru} outside [0, 1]")));
    }
    let universe = unit_universe(&table.config);
    let n_ru = (r_ru * universe.len() as f64).floor() as usize;
    let by_score = sorted_by_key(&universe, |u| table.standardized_of(u));
    let mut assignment = BTreeMap::new();
    for (i, &u) in by_score.iter().enumerate() {
        assignment.insert(u, if i < n_ru { Category::Ru } else { Category::Uu });
    }
    Ok(AttributeMap {
        assignment,
        ratios: None,
        source_phase: table.source_phase.clone(),
        pretrain_mode: true,
    })
}

pub fn build_prune_mask(map: &AttributeMap, category: Category) -> PruneMask {
    PruneMask::from_units(map.units_of(category))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub esu_all: bool,
    /// Fraction of the unit universe, drawn from CU ranked by safety score.
    pub cu_top_fraction: f64,
}

/// Frozen set = ESU (when `esu_all`) plus the top slice of CU ranked by
/// standardized safety importance, descending.
pub fn build_freeze_mask(
    map: &AttributeMap,
    spec: &FreezeSpec,
    pair: &AttributePair,
) -> Result<FreezeMask> {
    if !(0.0..=1.0).contains(&spec.cu_top_fraction) {
        return Err(Error::Contract(format!(
            "cu_top_fraction = {} outside [0, 1]",
            spec.cu_top_fraction
        )));
    }
    let mut frozen: Vec<UnitId> = if spec.esu_all {
        map.units_of(Category::Esu)
    } else {
        Vec::new()
    };
    let cu = map.units_of(Category::Cu);
    let n_universe = map.assignment.len();
    let take = ((spec.cu_top_fraction * n_universe as f64).floor() as usize).min(cu.len());
    let by_safety = sorted_by_key(&cu, |u| -pair.safety.standardized_of(u));
    frozen.extend(by_safety.into_iter().take(take));
    Ok(FreezeMask::from_units(frozen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrids {
    pub ru: Vec<f64>,
    pub esu: Vec<f64>,
    pub euu: Vec<f64>,
}

impl Default for SearchGrids {
    fn default() -> Self {
        Self {
            ru: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            esu: vec![0.005, 0.01, 0.015, 0.02, 0.03],
            euu: vec![0.03, 0.05, 0.08, 0.12, 0.15],
        }
    }
}

/// Admissibility thresholds in metric points (fractions of 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchThresholds {
    /// Max permitted |Δ utility| for RU/ESU candidates.
    pub eps_u: f64,
    /// Max permitted |Δ ASR| for RU/EUU candidates.
    pub eps_s: f64,
    /// Min ASR jump required of an ESU candidate.
    pub tau_s: f64,
    /// Min utility drop required of an EUU candidate.
    pub tau_u: f64,
}

impl Default for SearchThresholds {
    fn default() -> Self {
        Self {
            eps_u: 0.05,
            eps_s: 0.10,
            tau_s: 0.30,
            tau_u: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub utility: Vec<Example>,
    pub harmful: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub group: String,
    pub ratio: f64,
    pub utility: f64,
    pub asr: f64,
    pub selected: bool,
}

/// Per-group outcome of the admission rules. When no grid point satisfies
/// a group's rule the search still selects a deterministic fallback so the
/// rest of the pipeline can run, and records the miss here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admissibility {
    pub ru: bool,
    pub esu: bool,
    pub euu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_utility: f64,
    pub baseline_asr: f64,
    pub admissible: Admissibility,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,ratio,utility,asr,selected\n");
        let _ = writeln!(
            s,
            "baseline,0,{},{},",
            self.baseline_utility, self.baseline_asr
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.group, e.ratio, e.utility, e.asr, e.selected
            );
        }
        s
    }
}

fn eval_pruned(
    ckpt: &Checkpoint,
    mask: &PruneMask,
    sets: &EvalSets,
) -> Result<(f64, f64)> {
    let pruned = apply_prune_mask(ckpt, mask)?;
    Ok((
        eval_utility(&pruned, &sets.utility)?,
        eval_asr(&pruned, &sets.harmful)?,
    ))
}

/// Grid search over pruning ratios with per-group admission rules:
/// the largest innocuous RU ratio, the smallest ESU ratio that breaks
/// safety without hurting utility, and the largest EUU ratio that breaks
/// utility without moving safety. Every grid point is evaluated and
/// reported. A group with no admissible grid point falls back to the
/// closest candidate and is flagged in the report.
pub fn ratio_search(
    ckpt: &Checkpoint,
    pair: &AttributePair,
    grids: &SearchGrids,
    thresholds: &SearchThresholds,
    sets: &EvalSets,
) -> Result<(RatioSpec, AttributeMap, AblationReport)> {
    let baseline_utility = eval_utility(ckpt, &sets.utility)?;
    let baseline_asr = eval_asr(ckpt, &sets.harmful)?;
    let mut entries: Vec<AblationEntry> = Vec::new();

    // RU: largest ratio leaving both metrics unchanged.
    let mut ru_candidates: Vec<(f64, f64, f64)> = Vec::new();
    for &r in &grids.ru {
        let map = partition(pair, &RatioSpec::new(r, 0.0, 0.0)?)?;
        let (u, a) = eval_pruned(ckpt, &build_prune_mask(&map, Category::Ru), sets)?;
        ru_candidates.push((r, u, a));
    }
    let ru_pick = ru_candidates
        .iter()
        .filter(|(_, u, a)| {
            (u - baseline_utility).abs() <= thresholds.eps_u
                && (a - baseline_asr).abs() <= thresholds.eps_s
        })
        .map(|&(r, _, _)| r)
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |best| best.max(r)))
        });
    // Fallback: the smallest RU ratio disturbs the model least.
    let r_ru = ru_pick.unwrap_or(grids.ru[0]);
    for (r, u, a) in ru_candidates {
        entries.push(AblationEntry {
            group: "RU".into(),
            ratio: r,
            utility: u,
            asr: a,
            selected: r == r_ru,
        });
    }

    // ESU: smallest ratio whose pruning breaks safety but not utility.
    let mut esu_candidates: Vec<(f64, f64, f64)> = Vec::new();
    for &r in &grids.esu {
        let map = partition(pair, &RatioSpec::new(r_ru, r, 0.0)?)?;
        let (u, a) = eval_pruned(ckpt, &build_prune_mask(&map, Category::Esu), sets)?;
        esu_candidates.push((r, u, a));
    }
    let esu_pick = esu_candidates
        .iter()
        .filter(|(_, u, a)| {
            a - baseline_asr >= thresholds.tau_s && (u - baseline_utility).abs() <= thresholds.eps_u
        })
        .map(|&(r, _, _)| r)
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |best| best.min(r)))
        });
    // Fallback: the grid point with the largest ASR jump, earliest wins.
    let r_esu = esu_pick.unwrap_or_else(|| {
        esu_candidates
            .iter()
            .fold((grids.esu[0], f64::NEG_INFINITY), |best, &(r, _, a)| {
                if a > best.1 {
                    (r, a)
                } else {
                    best
                }
            })
            .0
    });
    for (r, u, a) in esu_candidates {
        entries.push(AblationEntry {
            group: "ESU".into(),
            ratio: r,
            utility: u,
            asr: a,
            selected: r == r_esu,
        });
    }

    // EUU: largest ratio whose pruning breaks utility but not safety.
    let mut euu_candidates: Vec<(f64, f64, f64)> = Vec::new();
    for &r in &grids.euu {
        let map = partition(pair, &RatioSpec::new(r_ru, r_esu, r)?)?;
        let (u, a) = eval_pruned(ckpt, &build_prune_mask(&map, Category::Euu), sets)?;
        euu_candidates.push((r, u, a));
    }
    let euu_pick = euu_candidates
        .iter()
        .filter(|(_, u, a)| {
            u - baseline_utility <= -thresholds.tau_u && (a - baseline_asr).abs() <= thresholds.eps_s
        })
        .map(|&(r, _, _)| r)
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |best| best.max(r)))
        })
        ;
    // Fallback: the grid point that degrades utility most, earliest wins.
    let r_euu = euu_pick.unwrap_or_else(|| {
        euu_candidates
            .iter()
            .fold((grids.euu[0], f64::INFINITY), |best, &(r, u, _)| {
                if u < best.1 {
                    (r, u)
                } else {
                    best
                }
            })
            .0
    });
    for (r, u, a) in euu_candidates {
        entries.push(AblationEntry {
            group: "EUU".into(),
            ratio: r,
            utility: u,
            asr: a,
            selected: r == r_euu,
        });
    }

    let ratios = RatioSpec::new(r_ru, r_esu, r_euu)?;
    let map = partition(pair, &ratios)?;
    Ok((
        ratios,
        map,
        AblationReport {
            baseline_utility,
            baseline_asr,
            admissible: Admissibility {
                ru: ru_pick.is_some(),
                esu: esu_pick.is_some(),
                euu: euu_pick.is_some(),
            },
            entries,
        },
    ))
}
