//! Pruning scores, mask construction under the comparison groupings and
//! N:M patterns, and mask application.
//!
//! Every selection uses one strict total order: score ascending, then layer
//! order, row and column. The lowest `k` entries of a group are dropped, so
//! masks are reproducible and nested in `k`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alloc::{LayerShape, NmPlan, SparsityPlan};
use crate::calib::CalibrationStats;
use crate::error::{OwlError, Result};
use crate::model::{Checkpoint, LayerId};
use crate::numkernel::Matrix;
use crate::outlier::{outlier_scores, OutlierScores};

pub const MASKS_MAGIC: &[u8; 4] = b"OWLM";
pub const MASKS_VERSION: u32 = 1;

/// Keep/drop flag per weight of one layer, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layer: LayerId,
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl PruneMask {
    pub fn new(layer: LayerId, rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(OwlError::DimensionMismatch(format!(
                "mask of {} flags for a {rows}x{cols} layer",
                keep.len()
            )));
        }
        Ok(Self {
            layer,
            rows,
            cols,
            keep,
        })
    }

    /// Keeps everything.
    pub fn dense(layer: LayerId, rows: usize, cols: usize) -> Self {
        Self {
            layer,
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    /// Keeps exactly the non-zero entries of `w`.
    pub fn from_nonzero(layer: LayerId, w: &Matrix) -> Self {
        Self {
            layer,
            rows: w.rows(),
            cols: w.cols(),
            keep: w.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn dropped(&self) -> usize {
        self.keep.len() - self.kept()
    }

    pub fn sparsity(&self) -> f64 {
        self.dropped() as f64 / self.keep.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Magnitude,
    Wanda,
}

impl FromStr for Metric {
    type Err = OwlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Metric::Magnitude),
            "wanda" => Ok(Metric::Wanda),
            _ => Err(OwlError::Config(format!("unknown metric {s}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Magnitude => "magnitude",
            Metric::Wanda => "wanda",
        })
    }
}

/// Which weights are ranked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerOutput,
    PerLayer,
    PerBlock,
    Global,
}

impl FromStr for Grouping {
    type Err = OwlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-output" | "per_output" => Ok(Grouping::PerOutput),
            "per-layer" | "per_layer" => Ok(Grouping::PerLayer),
            "per-block" | "per_block" => Ok(Grouping::PerBlock),
            "global" => Ok(Grouping::Global),
            _ => Err(OwlError::Config(format!("unknown grouping {s}"))),
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::PerOutput => "per-output",
            Grouping::PerLayer => "per-layer",
            Grouping::PerBlock => "per-block",
            Grouping::Global => "global",
        })
    }
}

/// `|w|` for magnitude, `xnorms[j] · |w_ij|` for Wanda.
pub fn prune_scores(w: &Matrix, xnorms: &[f32], metric: Metric) -> Result<Matrix> {
    match metric {
        Metric::Magnitude => {
            if xnorms.len() != w.cols() {
                return Err(OwlError::DimensionMismatch(format!(
                    "{} input norms for a weight with {} columns",
                    xnorms.len(),
                    w.cols()
                )));
            }
            let mut a = w.clone();
            a.data_mut().iter_mut().for_each(|v| *v = v.abs());
            Ok(a)
        }
        Metric::Wanda => outlier_scores(w, xnorms),
    }
}

/// Scores of every prunable layer, in model order.
pub fn score_layers(ckpt: &Checkpoint, stats: &CalibrationStats, metric: Metric) -> Result<Vec<OutlierScores>> {
    ckpt.layer_ids()
        .into_iter()
        .map(|id| {
            let w = ckpt.weight(id)?;
            let norms = match metric {
                Metric::Wanda => stats.get(id)?.to_vec(),
                Metric::Magnitude => vec![1.0; w.cols()],
            };
            Ok(OutlierScores {
                layer: id,
                a: prune_scores(&w, &norms, metric)?,
            })
        })
        .collect()
}

/// `round(s · size)`, halves rounding up.
pub fn drop_count(s: f64, size: usize) -> usize {
    ((s * size as f64 + 0.5).floor() as usize).min(size)
}

/// Candidate in a pooled group: (score, layer position, flat index).
type Candidate = (f32, u32, u32);

fn cmp_candidate(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Clears the `k` smallest candidates in `keeps`.
fn drop_lowest(mut candidates: Vec<Candidate>, k: usize, keeps: &mut [Vec<bool>]) {
    if k == 0 {
        return;
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp_candidate);
    }
    for &(_, layer, idx) in &candidates[..k.min(candidates.len())] {
        keeps[layer as usize][idx as usize] = false;
    }
}

fn candidates(scores: &[OutlierScores], layers: impl Iterator<Item = usize>) -> Vec<Candidate> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(
            scores[l]
                .a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (v, l as u32, i as u32)),
        );
    }
    out
}

/// Builds one mask per scored layer.
pub fn build_mask(scores: &[OutlierScores], plan: &SparsityPlan, grouping: Grouping) -> Result<Vec<PruneMask>> {
    let mut keeps: Vec<Vec<bool>> = scores.iter().map(|s| vec![true; s.a.len()]).collect();
    let shapes: Vec<LayerShape> = scores
        .iter()
        .map(|s| LayerShape {
            id: s.layer,
            rows: s.a.rows(),
            cols: s.a.cols(),
        })
        .collect();
    match grouping {
        Grouping::PerOutput => {
            for (l, sc) in scores.iter().enumerate() {
                let s = plan.sparsity_for_layer(sc.layer)?;
                let cols = sc.a.cols();
                let k = drop_count(s, cols);
                for r in 0..sc.a.rows() {
                    let mut row: Vec<Candidate> = sc
                        .a
                        .row(r)
                        .iter()
                        .enumerate()
                        .map(|(c, &v)| (v, 0, c as u32))
                        .collect();
                    if k == 0 {
                        continue;
                    }
                    if k < row.len() {
                        row.select_nth_unstable_by(k - 1, cmp_candidate);
                    }
                    for &(_, _, c) in &row[..k] {
                        keeps[l][r * cols + c as usize] = false;
                    }
                }
            }
        }
        Grouping::PerLayer => {
            for (l, sc) in scores.iter().enumerate() {
                let s = plan.sparsity_for_layer(sc.layer)?;
                let k = drop_count(s, sc.a.len());
                drop_lowest(candidates(scores, std::iter::once(l)), k, &mut keeps);
            }
        }
        Grouping::PerBlock => {
            let mut blocks: Vec<usize> = scores.iter().map(|s| s.layer.block).collect();
            blocks.sort_unstable();
            blocks.dedup();
            for b in blocks {
                let members: Vec<usize> = (0..scores.len()).filter(|&l| scores[l].layer.block == b).collect();
                let size: usize = members.iter().map(|&l| scores[l].a.len()).sum();
                let s = plan.sparsity_for_block(b, &shapes)?;
                drop_lowest(candidates(scores, members.into_iter()), drop_count(s, size), &mut keeps);
            }
        }
        Grouping::Global => {
            let size: usize = scores.iter().map(|s| s.a.len()).sum();
            drop_lowest(candidates(scores, 0..scores.len()), drop_count(plan.global_s, size), &mut keeps);
        }
    }
    scores
        .iter()
        .zip(keeps)
        .map(|(sc, keep)| PruneMask::new(sc.layer, sc.a.rows(), sc.a.cols(), keep))
        .collect()
}

/// How many entries a group of `len` keeps when full groups of `m_group`
/// keep `n`.
pub fn nm_keep_count(n: usize, m_group: usize, len: usize) -> usize {
    if len == m_group {
        n
    } else {
        (n * len).div_ceil(m_group).min(len)
    }
}

/// Keeps the `n` highest-scoring entries in every run of `m_group`
/// consecutive inputs of each row.
pub fn build_nm_mask(scores: &[OutlierScores], plan: &NmPlan) -> Result<Vec<PruneMask>> {
    let m = plan.m_group;
    if m == 0 {
        return Err(OwlError::OutOfRange("N:M group size must be >= 1".into()));
    }
    scores
        .iter()
        .map(|sc| {
            let n = plan.n_for_layer(sc.layer)?;
            if n > m {
                return Err(OwlError::OutOfRange(format!("N = {n} exceeds group size {m}")));
            }
            let (rows, cols) = sc.a.shape();
            let mut keep = vec![true; rows * cols];
            for r in 0..rows {
                let row = sc.a.row(r);
                for start in (0..cols).step_by(m) {
                    let end = (start + m).min(cols);
                    let len = end - start;
                    let k = len - nm_keep_count(n, m, len);
                    if k == 0 {
                        continue;
                    }
                    let mut group: Vec<Candidate> =
                        (start..end).map(|c| (row[c], 0, c as u32)).collect();
                    if k < group.len() {
                        group.select_nth_unstable_by(k - 1, cmp_candidate);
                    }
                    for &(_, _, c) in &group[..k] {
                        keep[r * cols + c as usize] = false;
                    }
                }
            }
            PruneMask::new(sc.layer, rows, cols, keep)
        })
        .collect()
}

/// Zeroes dropped weights; other tensors are untouched.
pub fn apply_masks(ckpt: &Checkpoint, masks: &[PruneMask]) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    for mask in masks {
        let id = mask.layer();
        let mut w = ckpt.weight(id)?.into_owned();
        if w.shape() != mask.shape() {
            return Err(OwlError::DimensionMismatch(format!(
                "{id}: mask {:?} vs weight {:?}",
                mask.shape(),
                w.shape()
            )));
        }
        for (v, &k) in w.data_mut().iter_mut().zip(mask.keep()) {
            if !k {
                *v = 0.0;
            }
        }
        out.set_weight(id, w)?;
    }
    Ok(out)
}

/// Bit-packed mask file: `OWLM`, version, count, then per mask its name,
/// shape and LSB-first keep bits.
pub fn encode_masks(masks: &[PruneMask]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASKS_MAGIC);
    out.extend_from_slice(&MASKS_VERSION.to_le_bytes());
    out.extend_from_slice(&(masks.len() as u32).to_le_bytes());
    for m in masks {
        let name = m.layer.tensor_name();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols as u64).to_le_bytes());
        let mut packed = vec![0u8; m.keep.len().div_ceil(8)];
        for (i, &k) in m.keep.iter().enumerate() {
            if k {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    out
}

pub fn decode_masks(bytes: &[u8]) -> Result<Vec<PruneMask>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| OwlError::Truncated("mask file".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MASKS_MAGIC {
        return Err(OwlError::Format("bad mask file magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != MASKS_VERSION {
        return Err(OwlError::Format(format!("unsupported mask file version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| OwlError::Format("mask name is not utf-8".into()))?
            .to_string();
        let rows = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let packed = take((rows * cols).div_ceil(8))?;
        let keep = (0..rows * cols).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(PruneMask::new(name.parse()?, rows, cols, keep)?);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::{PlanEntry, Scheme};
    use crate::model::Projection;

    fn id(b: usize, p: Projection) -> LayerId {
        LayerId::new(b, p)
    }

    fn uniform_plan(s: f64, ids: &[LayerId]) -> SparsityPlan {
        SparsityPlan {
            scheme: Scheme::Uniform,
            global_s: s,
            lambda: 0.0,
            entries: ids
                .iter()
                .map(|i| PlanEntry {
                    id: i.tensor_name(),
                    s,
                    params: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn magnitude_ignores_norms() {
        let w = Matrix::from_rows(&[&[1.0, -2.0]]);
        assert_eq!(
            prune_scores(&w, &[5.0, 7.0], Metric::Magnitude).unwrap(),
            prune_scores(&w, &[1.0, 1.0], Metric::Wanda).unwrap()
        );
    }

    #[test]
    fn per_output_drops_one_per_row() {
        let q = id(0, Projection::QProj);
        let scores = vec![OutlierScores {
            layer: q,
            a: Matrix::from_rows(&[&[1.0, 2.0], &[4.0, 3.0]]),
        }];
        let masks = build_mask(&scores, &uniform_plan(0.5, &[q]), Grouping::PerOutput).unwrap();
        assert_eq!(masks[0].keep(), &[false, true, true, false]);
    }

    #[test]
    fn global_forced_example() {
        let (a, b) = (id(0, Projection::QProj), id(0, Projection::KProj));
        let scores = vec![
            OutlierScores {
                layer: a,
                a: Matrix::from_rows(&[&[1.0, 2.0]]),
            },
            OutlierScores {
                layer: b,
                a: Matrix::from_rows(&[&[3.0, 4.0]]),
            },
        ];
        let masks = build_mask(&scores, &uniform_plan(0.5, &[a, b]), Grouping::Global).unwrap();
        assert_eq!(masks[0].sparsity(), 1.0);
        assert_eq!(masks[1].sparsity(), 0.0);
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let q = id(0, Projection::QProj);
        let scores = vec![OutlierScores {
            layer: q,
            a: Matrix::from_rows(&[&[1.0, 1.0, 1.0, 1.0]]),
        }];
        let masks = build_mask(&scores, &uniform_plan(0.5, &[q]), Grouping::PerLayer).unwrap();
        assert_eq!(masks[0].keep(), &[false, false, true, true]);
    }

    #[test]
    fn plan_mismatch_is_reported() {
        let q = id(0, Projection::QProj);
        let scores = vec![OutlierScores {
            layer: id(1, Projection::QProj),
            a: Matrix::zeros(2, 2),
        }];
        let err = build_mask(&scores, &uniform_plan(0.5, &[q]), Grouping::PerLayer).unwrap_err();
        assert!(matches!(err, OwlError::PlanMismatch(_)));
    }

    #[test]
    fn nm_forced_example() {
        let q = id(0, Projection::QProj);
        let scores = vec![OutlierScores {
            layer: q,
            a: Matrix::from_rows(&[&[5.0, 1.0, 2.0, 9.0]]),
        }];
        let plan = NmPlan::uniform(&[(q.tensor_name(), 4)], 2, 4);
        let masks = build_nm_mask(&scores, &plan).unwrap();
        assert_eq!(masks[0].keep(), &[true, false, false, true]);
        let dense = NmPlan::uniform(&[(q.tensor_name(), 4)], 4, 4);
        assert_eq!(build_nm_mask(&scores, &dense).unwrap()[0].kept(), 4);
    }

    #[test]
    fn nm_short_tail_group() {
        assert_eq!(nm_keep_count(3, 8, 8), 3);
        assert_eq!(nm_keep_count(3, 8, 4), 2);
        assert_eq!(nm_keep_count(8, 8, 5), 5);
        let q = id(0, Projection::QProj);
        let scores = vec![OutlierScores {
            layer: q,
            a: Matrix::from_fn(1, 12, |_, c| c as f32),
        }];
        let plan = NmPlan::uniform(&[(q.tensor_name(), 12)], 2, 8);
        let m = &build_nm_mask(&scores, &plan).unwrap()[0];
        assert_eq!(m.row(0)[..8].iter().filter(|&&k| k).count(), 2);
        assert_eq!(m.row(0)[8..].iter().filter(|&&k| k).count(), 1);
    }

    #[test]
    fn mask_file_round_trip() {
        let q = id(2, Projection::UpProj);
        let m = PruneMask::new(q, 3, 3, vec![true, false, true, false, false, true, true, true, false]).unwrap();
        let bytes = encode_masks(std::slice::from_ref(&m));
        assert_eq!(decode_masks(&bytes).unwrap(), vec![m]);
        assert!(decode_masks(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(drop_count(0.5, 3), 2);
        assert_eq!(drop_count(0.7, 10), 7);
        assert_eq!(drop_count(0.0, 10), 0);
        assert_eq!(drop_count(1.0, 10), 10);
    }
}
