//! Attribute-transfer matrices across training phases and the
//! reasoning-direction probe.
//!
//! The probe extends a harmful query three ways — unchanged, with a refusal
//! token, and with the topic's payload token — walks each sequence forward
//! by teacher-forcing its own greedy continuation, and records per-block
//! cosine distances between the base and each variant's last-position
//! hidden state.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::categorize::{AttributeMap, Category};
use crate::data::ProbeTriple;
use crate::error::{Error, Result};
use crate::model::{decode_tokens, forward, CaptureFlags, Checkpoint};

/// 1 − cos(u, v), with the degenerate zero-vs-nonzero case pinned to 1.
/// Returns (distance, degenerate_flag).
pub fn cosine_distance_flagged(u: &[f64], v: &[f64]) -> Result<(f64, bool)> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_distance",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 && nv == 0.0 {
        return Err(Error::Contract(
            "cosine_distance of two zero vectors".into(),
        ));
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok((1.0, true));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv), false))
}

pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    cosine_distance_flagged(u, v).map(|(d, _)| d)
}

/// Category transition counts between two maps over the same unit universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub source_categories: Vec<Category>,
    pub dest_categories: Vec<Category>,
    /// counts[s][d], indexed parallel to the category lists.
    pub counts: Vec<Vec<usize>>,
    /// counts normalized per source row; zero rows stay zero.
    pub fractions: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn count(&self, source: Category, dest: Category) -> usize {
        let s = self
            .source_categories
            .iter()
            .position(|&c| c == source)
            .unwrap_or(usize::MAX);
        let d = self
            .dest_categories
            .iter()
            .position(|&c| c == dest)
            .unwrap_or(usize::MAX);
        if s == usize::MAX || d == usize::MAX {
            0
        } else {
            self.counts[s][d]
        }
    }

    pub fn row_sum(&self, source: Category) -> usize {
        self.source_categories
            .iter()
            .position(|&c| c == source)
            .map(|s| self.counts[s].iter().sum())
            .unwrap_or(0)
    }

    /// Edge-list CSV (source, dest, count, fraction) for external plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,dest,count,fraction\n");
        for (si, &sc) in self.source_categories.iter().enumerate() {
            for (di, &dc) in self.dest_categories.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    sc.as_str(),
                    dc.as_str(),
                    self.counts[si][di],
                    self.fractions[si][di]
                );
            }
        }
        s
    }
}

fn categories_of(map: &AttributeMap) -> Vec<Category> {
    if map.pretrain_mode {
        vec![Category::Uu, Category::Ru]
    } else {
        vec![Category::Esu, Category::Euu, Category::Cu, Category::Ru]
    }
}

pub fn transfer_matrix(before: &AttributeMap, after: &AttributeMap) -> Result<TransferMatrix> {
    let units_before: Vec<_> = before.assignment.keys().collect();
    let units_after: Vec<_> = after.assignment.keys().collect();
    if units_before != units_after {
        return Err(Error::Contract(
            "transfer_matrix requires identical unit universes".into(),
        ));
    }
    let source_categories = categories_of(before);
    let dest_categories = categories_of(after);
    let s_index: BTreeMap<Category, usize> = source_categories
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let d_index: BTreeMap<Category, usize> = dest_categories
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut counts = vec![vec![0usize; dest_categories.len()]; source_categories.len()];
    for (unit, &sc) in &before.assignment {
        let dc = after.assignment[unit];
        counts[s_index[&sc]][d_index[&dc]] += 1;
    }
    let fractions = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| {
                    if total == 0 {
                        0.0
                    } else {
                        c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(TransferMatrix {
        source_categories,
        dest_categories,
        counts,
        fractions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub triple: usize,
    pub step: usize,
    pub block: usize,
    pub d_benign: f64,
    pub d_malicious: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub records: Vec<ProbeRecord>,
    pub steps: usize,
    pub n_blocks: usize,
    pub phase_tag: String,
    /// Cells where a degenerate (zero-vector) distance was pinned to 1.
    pub degenerate_cells: usize,
}

impl ProbeTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("triple,step,block,d_benign,d_malicious,abs_diff\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.triple, r.step, r.block, r.d_benign, r.d_malicious, r.abs_diff
            );
        }
        s
    }
}

/// Last-position hidden states per block for one sequence.
fn last_hidden(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
    let out = forward(ckpt, tokens, CaptureFlags::hidden())?;
    let hs = out.hidden_states.expect("requested capture");
    Ok((0..ckpt.config.n_blocks)
        .map(|b| hs.vector(b, tokens.len() - 1).to_vec())
        .collect())
}

/// Hidden-state distances for each (triple, step, block) cell. At step t the
/// three sequences are each extended by t tokens of their own greedy
/// continuation before measuring.
pub fn probe_distances(
    ckpt: &Checkpoint,
    triples: &[ProbeTriple],
    steps: usize,
) -> Result<ProbeTrace> {
    if steps == 0 {
        return Err(Error::Contract("probe steps must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(triples.len() * steps * ckpt.config.n_blocks);
    let mut degenerate_cells = 0usize;
    for (ti, triple) in triples.iter().enumerate() {
        let extend = |seq: &[usize]| -> Result<Vec<Vec<usize>>> {
            let cont = decode_tokens(ckpt, seq, steps - 1, false)?;
            Ok((0..steps)
                .map(|t| {
                    let mut s = seq.to_vec();
                    s.extend_from_slice(&cont[..t]);
                    s
                })
                .collect())
        };
        let base_seqs = extend(&triple.base)?;
        let benign_seqs = extend(&triple.benign_variant)?;
        let malicious_seqs = extend(&triple.malicious_variant)?;
        for t in 0..steps {
            let h_base = last_hidden(ckpt, &base_seqs[t])?;
            let h_benign = last_hidden(ckpt, &benign_seqs[t])?;
            let h_malicious = last_hidden(ckpt, &malicious_seqs[t])?;
            for b in 0..ckpt.config.n_blocks {
                let (d_benign, f1) = cosine_distance_flagged(&h_base[b], &h_benign[b])?;
                let (d_malicious, f2) = cosine_distance_flagged(&h_base[b], &h_malicious[b])?;
                if f1 || f2 {
                    degenerate_cells += 1;
                }
                records.push(ProbeRecord {
                    triple: ti,
                    step: t,
                    block: b,
                    d_benign,
                    d_malicious,
                    abs_diff: (d_benign - d_malicious).abs(),
                });
            }
        }
    }
    Ok(ProbeTrace {
        records,
        steps,
        n_blocks: ckpt.config.n_blocks,
        phase_tag: ckpt.phase_tag.clone(),
        degenerate_cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    AlignedLike,
    UnalignedLike,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub mean_benign: f64,
    pub mean_malicious: f64,
    pub mean_abs_diff: f64,
    pub ordering_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub per_block: Vec<BlockSummary>,
    pub mean_abs_diff: f64,
    /// Fraction of cells with d_benign strictly below d_malicious.
    pub ordering_fraction: f64,
    pub tie_cells: usize,
    pub verdict: Verdict,
    pub phase_tag: String,
}

/// Aggregate a trace. Ties count against the aligned ordering and are
/// flagged separately.
pub fn probe_summary(trace: &ProbeTrace, aligned_min: f64, unaligned_max: f64) -> Result<ProbeSummary> {
    if trace.records.is_empty() {
        return Err(Error::InvalidInput("empty probe trace".into()));
    }
    let mut per_block = Vec::with_capacity(trace.n_blocks);
    for b in 0..trace.n_blocks {
        let cells: Vec<&ProbeRecord> = trace.records.iter().filter(|r| r.block == b).collect();
        let n = cells.len() as f64;
        per_block.push(BlockSummary {
            block: b,
            mean_benign: cells.iter().map(|r| r.d_benign).sum::<f64>() / n,
            mean_malicious: cells.iter().map(|r| r.d_malicious).sum::<f64>() / n,
            mean_abs_diff: cells.iter().map(|r| r.abs_diff).sum::<f64>() / n,
            ordering_fraction: cells
                .iter()
                .filter(|r| r.d_benign < r.d_malicious)
                .count() as f64
                / n,
        });
    }
    let n = trace.records.len() as f64;
    let ordering_fraction = trace
        .records
        .iter()
        .filter(|r| r.d_benign < r.d_malicious)
        .count() as f64
        / n;
    let tie_cells = trace
        .records
        .iter()
        .filter(|r| r.d_benign == r.d_malicious)
        .count();
    let verdict = if ordering_fraction >= aligned_min {
        Verdict::AlignedLike
    } else if ordering_fraction <= unaligned_max {
        Verdict::UnalignedLike
    } else {
        Verdict::Inconclusive
    };
    Ok(ProbeSummary {
        per_block,
        mean_abs_diff: trace.records.iter().map(|r| r.abs_diff).sum::<f64>() / n,
        ordering_fraction,
        tie_cells,
        verdict,
        phase_tag: trace.phase_tag.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_probe_triples;
    use crate::model::{init_model, ModelConfig, ModuleKind, UnitId};

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() <= 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() <= 1e-15);
        let d = cosine_distance(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() <= 1e-12);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
        let (d, flag) = cosine_distance_flagged(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!((d, flag), (1.0, true));
        assert!(cosine_distance(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn cosine_distance_scale_invariant() {
        let u = [0.4, -1.2, 3.3];
        let v = [2.0, 0.5, -0.7];
        let d1 = cosine_distance(&u, &v).unwrap();
        let us: Vec<f64> = u.iter().map(|x| x * 7.5).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * 0.01).collect();
        let d2 = cosine_distance(&us, &vs).unwrap();
        assert!((d1 - d2).abs() <= 1e-12);
    }

    fn map_from(cats: &[(usize, Category)], pretrain: bool) -> AttributeMap {
        AttributeMap {
            assignment: cats
                .iter()
                .map(|&(i, c)| (UnitId::new(0, ModuleKind::Mlp, i), c))
                .collect(),
            ratios: None,
            source_phase: "test".into(),
            pretrain_mode: pretrain,
        }
    }

    #[test]
    fn transfer_matrix_counting() {
        let before = map_from(
            &[
                (0, Category::Esu),
                (1, Category::Esu),
                (2, Category::Cu),
            ],
            false,
        );
        let after = map_from(
            &[
                (0, Category::Cu),
                (1, Category::Esu),
                (2, Category::Euu),
            ],
            false,
        );
        let m = transfer_matrix(&before, &after).unwrap();
        assert_eq!(m.count(Category::Esu, Category::Cu), 1);
        assert_eq!(m.count(Category::Esu, Category::Esu), 1);
        assert_eq!(m.count(Category::Cu, Category::Euu), 1);
        assert_eq!(m.row_sum(Category::Esu), 2);
        assert_eq!(m.row_sum(Category::Cu), 1);
        // Identity map → diagonal.
        let diag = transfer_matrix(&before, &before).unwrap();
        assert_eq!(diag.count(Category::Esu, Category::Esu), 2);
        assert_eq!(diag.count(Category::Esu, Category::Cu), 0);
    }

    #[test]
    fn transfer_matrix_mixed_modes_and_errors() {
        let before = map_from(&[(0, Category::Uu), (1, Category::Ru)], true);
        let after = map_from(&[(0, Category::Esu), (1, Category::Ru)], false);
        let m = transfer_matrix(&before, &after).unwrap();
        assert_eq!(m.source_categories.len(), 2);
        assert_eq!(m.dest_categories.len(), 4);
        assert_eq!(m.count(Category::Uu, Category::Esu), 1);

        let other = map_from(&[(5, Category::Cu)], false);
        assert!(transfer_matrix(&before, &other).is_err());
    }

    #[test]
    fn probe_trace_shape_and_identity() {
        let cfg = ModelConfig {
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 64,
            max_seq: 16,
            rms_eps: 1e-6,
        };
        let ckpt = init_model(&cfg, 0).unwrap();
        let triples = gen_probe_triples(0, 3);
        let trace = probe_distances(&ckpt, &triples, 2).unwrap();
        assert_eq!(trace.records.len(), 3 * 2 * cfg.n_blocks);

        // Degenerate rig: variants equal to base → zero benign distance.
        let same = ProbeTriple {
            base: triples[0].base.clone(),
            benign_variant: triples[0].base.clone(),
            malicious_variant: triples[0].malicious_variant.clone(),
        };
        let t2 = probe_distances(&ckpt, &[same], 1).unwrap();
        for r in &t2.records {
            assert!(r.d_benign.abs() <= 1e-12);
            assert!((r.abs_diff - (r.d_benign - r.d_malicious).abs()).abs() <= 1e-12);
        }
    }

    #[test]
    fn probe_summary_verdicts() {
        let mk = |d_benign: f64, d_malicious: f64| ProbeTrace {
            records: vec![ProbeRecord {
                triple: 0,
                step: 0,
                block: 0,
                d_benign,
                d_malicious,
                abs_diff: (d_benign - d_malicious).abs(),
            }],
            steps: 1,
            n_blocks: 1,
            phase_tag: "test".into(),
            degenerate_cells: 0,
        };
        let s = probe_summary(&mk(0.1, 0.9), 0.8, 0.4).unwrap();
        assert_eq!(s.verdict, Verdict::AlignedLike);
        assert_eq!(s.ordering_fraction, 1.0);
        // Exact ties count against the aligned ordering and are flagged.
        let s = probe_summary(&mk(0.5, 0.5), 0.8, 0.4).unwrap();
        assert_eq!(s.verdict, Verdict::UnalignedLike);
        assert_eq!(s.tie_cells, 1);
    }
}
