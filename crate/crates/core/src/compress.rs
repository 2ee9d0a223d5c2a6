//! Executing rank plans (truncated SVD) and bit plans (per-row symmetric
//! absmax round-to-nearest) on a checkpoint.

use crate::alloc::{BitPlan, RankPlan};
use crate::error::{OwlError, Result};
use crate::model::{Checkpoint, LayerId};
use crate::numkernel::{truncated_svd, Matrix};

/// A layer stored as `p · q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLayer {
    pub layer: LayerId,
    pub p: Matrix,
    pub q: Matrix,
}

impl FactorizedLayer {
    pub fn rank(&self) -> usize {
        self.p.cols()
    }
}

/// Integer codes with one scale per output row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub layer: LayerId,
    pub bits: u32,
    pub rows: usize,
    pub cols: usize,
    pub q: Vec<i32>,
    pub scales: Vec<f32>,
}

impl QuantizedLayer {
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// Replaces every planned layer with its truncated SVD factors.
pub fn svd_compress(ckpt: &Checkpoint, plan: &RankPlan) -> Result<(Checkpoint, Vec<FactorizedLayer>)> {
    let mut out = ckpt.clone();
    let mut layers = Vec::new();
    for entry in &plan.entries {
        let id: LayerId = entry.id.parse()?;
        let w = ckpt.weight(id)?;
        let (p, q) = truncated_svd(&w, entry.keep_rank)?;
        out.set_factorized(id, p.clone(), q.clone())?;
        layers.push(FactorizedLayer { layer: id, p, q });
    }
    Ok((out, layers))
}

/// Per-row `scale = max|w| / (2^{bits−1} − 1)`, `q = round(w / scale)`.
pub fn quantize_rtn(layer: LayerId, w: &Matrix, bits: u32) -> Result<QuantizedLayer> {
    if !(2..=16).contains(&bits) {
        return Err(OwlError::OutOfRange(format!("bit width {bits} must lie in [2, 16]")));
    }
    let qm = qmax(bits);
    let mut q = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let row = w.row(r);
        let absmax = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = absmax / qm as f32;
        scales.push(scale);
        for &v in row {
            let code = if scale == 0.0 {
                0
            } else {
                ((f64::from(v) / f64::from(scale)).round() as i32).clamp(-qm, qm)
            };
            q.push(code);
        }
    }
    Ok(QuantizedLayer {
        layer,
        bits,
        rows: w.rows(),
        cols: w.cols(),
        q,
        scales,
    })
}

pub fn dequantize(ql: &QuantizedLayer) -> Matrix {
    Matrix::from_fn(ql.rows, ql.cols, |r, c| ql.q[r * ql.cols + c] as f32 * ql.scales[r])
}

/// Quantizes every layer covered by the plan and writes the dequantized
/// weights back; other tensors are untouched.
pub fn quantize_checkpoint(ckpt: &Checkpoint, plan: &BitPlan) -> Result<(Checkpoint, Vec<QuantizedLayer>)> {
    let mut out = ckpt.clone();
    let mut layers = Vec::new();
    for id in ckpt.layer_ids() {
        let Ok(bits) = plan.bits_for_layer(id) else {
            continue;
        };
        let ql = quantize_rtn(id, &*ckpt.weight(id)?, bits)?;
        out.set_weight(id, dequantize(&ql))?;
        layers.push(ql);
    }
    Ok((out, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Projection;
    use crate::numkernel::SeededRng;

    const L: LayerId = LayerId {
        block: 0,
        proj: Projection::QProj,
    };

    #[test]
    fn absmax_endpoints() {
        let w = Matrix::from_rows(&[&[-1.0, 0.0, 1.0]]);
        let ql = quantize_rtn(L, &w, 4).unwrap();
        assert_eq!(ql.q, vec![-7, 0, 7]);
        assert!((ql.scales[0] - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(dequantize(&ql), w);
    }

    #[test]
    fn zero_row() {
        let w = Matrix::zeros(2, 3);
        let ql = quantize_rtn(L, &w, 3).unwrap();
        assert_eq!(ql.scales, vec![0.0, 0.0]);
        assert!(ql.q.iter().all(|&c| c == 0));
        assert_eq!(dequantize(&ql), w);
    }

    #[test]
    fn rejects_one_bit() {
        assert!(quantize_rtn(L, &Matrix::zeros(1, 1), 1).is_err());
    }

    #[test]
    fn error_bound_and_idempotence() {
        let mut rng = SeededRng::new(17);
        let w = Matrix::random_normal(4, 64, 1.0, &mut rng);
        for bits in 2..=4 {
            let ql = quantize_rtn(L, &w, bits).unwrap();
            let deq = dequantize(&ql);
            for r in 0..4 {
                let bound = ql.scales[r] / 2.0 * (1.0 + 1e-5);
                for c in 0..64 {
                    assert!((w.get(r, c) - deq.get(r, c)).abs() <= bound);
                }
            }
            let again = quantize_rtn(L, &deq, bits).unwrap();
            assert_eq!(again.q, ql.q);
        }
    }
}
