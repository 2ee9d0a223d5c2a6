//! Evaluation: perplexity, realized-vs-planned sparsity accounting, CSR
//! inference and the sparse matvec microbenchmark.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::SparsityPlan;
use crate::error::{OwlError, Result};
use crate::model::{block_unit_name, forward_with, Checkpoint, LayerId, LinearOp};
use crate::numkernel::{matvec, Matrix, SeededRng};
use crate::outlier::{layer_outlier_ratio, mean_score, outlier_scores, post_prune_outlier_ratio, OutlierProfile};
use crate::prune::{build_mask, Grouping, Metric, PruneMask};
use crate::prune::prune_scores;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl CsrMatrix {
    /// Stores the non-zero entries of `w`.
    pub fn from_dense(w: &Matrix) -> Self {
        let mut offsets = Vec::with_capacity(w.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for r in 0..w.rows() {
            for (c, &v) in w.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows: w.rows(),
            cols: w.cols(),
            offsets,
            indices,
            values,
        }
    }

    /// Stores the kept entries of `w` under `mask` (explicit zeros dropped).
    pub fn from_masked(w: &Matrix, mask: &PruneMask) -> Result<Self> {
        if w.shape() != mask.shape() {
            return Err(OwlError::DimensionMismatch(format!(
                "mask {:?} vs weight {:?}",
                mask.shape(),
                w.shape()
            )));
        }
        let mut masked = w.clone();
        for (v, &k) in masked.data_mut().iter_mut().zip(mask.keep()) {
            if !k {
                *v = 0.0;
            }
        }
        Ok(Self::from_dense(&masked))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.offsets[r]..self.offsets[r + 1] {
                m.set(r, self.indices[k] as usize, self.values[k]);
            }
        }
        m
    }

    #[inline]
    fn row_dot(&self, r: usize, x: &[f32]) -> f32 {
        let mut acc = 0.0f64;
        for k in self.offsets[r]..self.offsets[r + 1] {
            acc += f64::from(self.values[k]) * f64::from(x[self.indices[k] as usize]);
        }
        acc as f32
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(OwlError::DimensionMismatch(format!(
                "csr {}x{} by vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| self.row_dot(r, x)).collect())
    }

    /// `x · selfᵀ` for row activations.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.cols {
            return Err(OwlError::DimensionMismatch(format!(
                "activations with {} features for a csr layer with {} inputs",
                x.cols(),
                self.cols
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.rows);
        for t in 0..x.rows() {
            let xr = x.row(t);
            for (r, o) in out.row_mut(t).iter_mut().enumerate() {
                *o = self.row_dot(r, xr);
            }
        }
        Ok(out)
    }
}

/// Every projection of a checkpoint re-encoded as CSR.
#[derive(Debug, Clone)]
pub struct SparseModel {
    layers: BTreeMap<LayerId, CsrMatrix>,
}

impl SparseModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let layers = ckpt
            .layer_ids()
            .into_iter()
            .map(|id| Ok((id, CsrMatrix::from_dense(&*ckpt.weight(id)?))))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn nnz(&self) -> usize {
        self.layers.values().map(CsrMatrix::nnz).sum()
    }
}

impl LinearOp for SparseModel {
    fn apply(&self, id: LayerId, x: &Matrix) -> Result<Matrix> {
        self.layers
            .get(&id)
            .ok_or_else(|| OwlError::InvalidCheckpoint(format!("no sparse layer {id}")))?
            .apply_rows(x)
    }
}

/// Sum of next-token negative log-likelihoods for one window.
fn window_nll(ckpt: &Checkpoint, linears: &dyn LinearOp, window: &[u32]) -> Result<f64> {
    let logits = forward_with(ckpt, linears, window, None)?;
    let mut nll = 0.0;
    for t in 1..window.len() {
        let row = logits.row(t - 1);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let lse = f64::from(max)
            + row
                .iter()
                .map(|&v| (f64::from(v) - f64::from(max)).exp())
                .sum::<f64>()
                .ln();
        nll += lse - f64::from(row[window[t] as usize]);
    }
    Ok(nll)
}

/// `exp` of the mean next-token cross-entropy over non-overlapping windows.
pub fn perplexity(ckpt: &Checkpoint, tokens: &[u32], seq_len: usize) -> Result<f64> {
    perplexity_with(ckpt, ckpt, tokens, seq_len, None)
}

/// Perplexity with custom projections and an optional cap on windows.
pub fn perplexity_with(
    ckpt: &Checkpoint,
    linears: &dyn LinearOp,
    tokens: &[u32],
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<f64> {
    if seq_len < 2 {
        return Err(OwlError::OutOfRange("perplexity needs seq_len >= 2".into()));
    }
    if tokens.len() <= seq_len {
        return Err(OwlError::OutOfRange(format!(
            "{} evaluation tokens do not exceed seq_len {seq_len}",
            tokens.len()
        )));
    }
    let mut windows: Vec<&[u32]> = tokens.chunks_exact(seq_len).collect();
    if let Some(cap) = max_windows {
        windows.truncate(cap.max(1));
    }
    let nlls: Vec<f64> = windows
        .par_iter()
        .map(|w| window_nll(ckpt, linears, w))
        .collect::<Result<_>>()?;
    let count = windows.len() * (seq_len - 1);
    Ok((nlls.iter().sum::<f64>() / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSparsity {
    pub id: String,
    pub zeros: usize,
    pub total: usize,
    pub realized: f64,
    pub planned: Option<f64>,
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<UnitSparsity>,
    pub blocks: Vec<UnitSparsity>,
    pub overall: f64,
    pub planned_overall: Option<f64>,
}

impl SparsityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit,zeros,total,realized,planned\n");
        for u in self.layers.iter().chain(&self.blocks) {
            let planned = u.planned.map(|p| p.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", u.id, u.zeros, u.total, u.realized, planned));
        }
        s
    }
}

fn report_from_counts(counts: &[(LayerId, usize, usize)], plan: Option<&SparsityPlan>) -> SparsityReport {
    let planned_layer = |id: LayerId| plan.and_then(|p| p.sparsity_for_layer(id).ok());
    let unit = |id: String, zeros: usize, total: usize, planned: Option<f64>| {
        let realized = if total == 0 { 0.0 } else { zeros as f64 / total as f64 };
        UnitSparsity {
            id,
            zeros,
            total,
            realized,
            planned,
            deviation: planned.map(|p| realized - p),
        }
    };
    let layers: Vec<UnitSparsity> = counts
        .iter()
        .map(|&(id, z, t)| unit(id.tensor_name(), z, t, planned_layer(id)))
        .collect();
    let mut blocks = Vec::new();
    let mut block_ids: Vec<usize> = counts.iter().map(|c| c.0.block).collect();
    block_ids.dedup();
    for b in block_ids {
        let members: Vec<&(LayerId, usize, usize)> = counts.iter().filter(|c| c.0.block == b).collect();
        let zeros = members.iter().map(|c| c.1).sum();
        let total: usize = members.iter().map(|c| c.2).sum();
        let planned = members
            .iter()
            .map(|c| planned_layer(c.0).map(|s| s * c.2 as f64))
            .sum::<Option<f64>>()
            .map(|kept| kept / total as f64);
        blocks.push(unit(block_unit_name(b), zeros, total, planned));
    }
    let zeros: usize = counts.iter().map(|c| c.1).sum();
    let total: usize = counts.iter().map(|c| c.2).sum();
    let planned_overall = if layers.iter().all(|l| l.planned.is_some()) && plan.is_some() {
        Some(
            layers
                .iter()
                .map(|l| l.planned.unwrap_or(0.0) * l.total as f64)
                .sum::<f64>()
                / total as f64,
        )
    } else {
        None
    };
    SparsityReport {
        layers,
        blocks,
        overall: if total == 0 { 0.0 } else { zeros as f64 / total as f64 },
        planned_overall,
    }
}

/// Exact zero counts of every prunable layer, compared with `plan`.
pub fn sparsity_report(ckpt: &Checkpoint, plan: Option<&SparsityPlan>) -> Result<SparsityReport> {
    let counts = ckpt
        .layer_ids()
        .into_iter()
        .map(|id| {
            let w = ckpt.weight(id)?;
            Ok((id, w.count_zeros(), w.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_counts(&counts, plan))
}

/// Same accounting from masks instead of weights.
pub fn sparsity_report_masks(masks: &[PruneMask], plan: Option<&SparsityPlan>) -> SparsityReport {
    let counts: Vec<(LayerId, usize, usize)> = masks
        .iter()
        .map(|m| (m.layer(), m.dropped(), m.keep().len()))
        .collect();
    report_from_counts(&counts, plan)
}

/// Timings of dense vs CSR matvec on the same masked matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpmvBench {
    pub sparsity: f64,
    pub dense_secs: f64,
    pub sparse_secs: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

const WARMUP: usize = 2;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median-of-`repetitions` timing of dense vs CSR matvec. Runs on the
/// calling thread only.
pub fn spmv_bench(w: &Matrix, mask: &PruneMask, repetitions: usize, rng: &mut SeededRng) -> Result<SpmvBench> {
    if repetitions == 0 {
        return Err(OwlError::OutOfRange("repetitions must be >= 1".into()));
    }
    let csr = CsrMatrix::from_masked(w, mask)?;
    let dense = csr.to_dense();
    let x: Vec<f32> = (0..w.cols()).map(|_| rng.normal()).collect();

    let mut dense_times = Vec::with_capacity(repetitions);
    let mut sparse_times = Vec::with_capacity(repetitions);
    let mut yd = Vec::new();
    let mut ys = Vec::new();
    for i in 0..WARMUP + repetitions {
        let t0 = Instant::now();
        yd = black_box(matvec(black_box(&dense), black_box(&x))?);
        let t1 = Instant::now();
        ys = black_box(csr.matvec(black_box(&x))?);
        let t2 = Instant::now();
        if i >= WARMUP {
            dense_times.push((t1 - t0).as_secs_f64());
            sparse_times.push((t2 - t1).as_secs_f64());
        }
    }
    let scale = yd.iter().fold(0.0f64, |m, &v| m.max(f64::from(v.abs())));
    let max_abs = yd
        .iter()
        .zip(&ys)
        .fold(0.0f64, |m, (a, b)| m.max(f64::from((a - b).abs())));
    let dense_secs = median(dense_times);
    let sparse_secs = median(sparse_times);
    Ok(SpmvBench {
        sparsity: mask.sparsity(),
        dense_secs,
        sparse_secs,
        speedup: dense_secs / sparse_secs.max(1e-12),
        max_abs_diff: max_abs,
        max_rel_diff: if scale > 0.0 { max_abs / scale } else { max_abs },
    })
}

/// [`spmv_bench`] on the checkpoint's largest layer, masking its zeros.
pub fn spmv_bench_largest(ckpt: &Checkpoint, repetitions: usize, rng: &mut SeededRng) -> Result<SpmvBench> {
    let id = ckpt
        .layer_ids()
        .into_iter()
        .max_by_key(|&id| {
            let (r, c) = ckpt.layer_shape(id);
            r * c
        })
        .ok_or_else(|| OwlError::Empty("checkpoint layers".into()))?;
    let w = ckpt.weight(id)?;
    spmv_bench(&w, &PruneMask::from_nonzero(id, &w), repetitions, rng)
}

/// One outlier profile with its aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodSummary {
    pub lod_sum: f64,
    pub profile: OutlierProfile,
}

impl From<OutlierProfile> for LodSummary {
    fn from(profile: OutlierProfile) -> Self {
        Self {
            lod_sum: profile.lod_sum(),
            profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub sparsity: SparsityReport,
    pub lod_before: Option<LodSummary>,
    pub lod_after: Option<LodSummary>,
    /// Wall-clock figures; excluded from determinism comparisons.
    pub spmv: Option<SpmvBench>,
}

impl EvalReport {
    pub fn delta_lod(&self) -> Option<f64> {
        Some(self.lod_after.as_ref()?.lod_sum - self.lod_before.as_ref()?.lod_sum)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Synthetic layer on which magnitude and Wanda disagree about outliers.
///
/// One input column in 16 is "hot": its input norm is 100 and its weights
/// have magnitude in `[0.08, 0.12]`, so its scores (8–12) are the layer's
/// outliers. The remaining columns have norm 1 and magnitudes in
/// `[0.5, 1.5]`. Signs are random. With `M = 5` the threshold is about 7.8,
/// so exactly the hot entries are outliers. Magnitude pruning removes the
/// small hot weights first; Wanda removes them last.
pub fn adversarial_outlier_layer(rows: usize, cols: usize, rng: &mut SeededRng) -> (Matrix, Vec<f32>) {
    let hot = |c: usize| c.is_multiple_of(16);
    let norms: Vec<f32> = (0..cols).map(|c| if hot(c) { 100.0 } else { 1.0 }).collect();
    let w = Matrix::from_fn(rows, cols, |_, c| {
        let mag = if hot(c) {
            rng.uniform_range(0.08, 0.12)
        } else {
            rng.uniform_range(0.5, 1.5)
        };
        if rng.uniform() < 0.5 {
            -mag
        } else {
            mag
        }
    });
    (w, norms)
}

/// Outlier ratio of one layer before and after pruning it with `metric`
/// at sparsity `s` (per-layer grouping), using the dense mean throughout.
pub fn single_layer_delta_lod(w: &Matrix, norms: &[f32], metric: Metric, s: f64, m: f64) -> Result<(f64, f64)> {
    let id = LayerId::new(0, crate::model::Projection::QProj);
    let a = outlier_scores(w, norms)?;
    let before = layer_outlier_ratio(&a, m)?;
    let scores = vec![crate::outlier::OutlierScores {
        layer: id,
        a: prune_scores(w, norms, metric)?,
    }];
    let plan = SparsityPlan {
        scheme: crate::alloc::Scheme::Uniform,
        global_s: s,
        lambda: 0.0,
        entries: vec![crate::alloc::PlanEntry {
            id: id.tensor_name(),
            s,
            params: w.len(),
        }],
    };
    let mask = &build_mask(&scores, &plan, Grouping::PerLayer)?[0];
    let after = post_prune_outlier_ratio(&a, mask, mean_score(&a)?, m)?;
    Ok((before, after))
}
