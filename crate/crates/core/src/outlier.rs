//! Outlier scores `A_ij = ‖X_j‖₂ · |W_ij|` and the layerwise outlier
//! distribution: the fraction of scores above `M` times the mean score of
//! the unit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationStats;
use crate::error::{OwlError, Result};
use crate::model::{block_unit_name, Checkpoint, LayerId};
use crate::numkernel::Matrix;
use crate::prune::PruneMask;

/// Score matrix of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierScores {
    pub layer: LayerId,
    pub a: Matrix,
}

/// `a_ij = xnorms[j] · |w_ij|`
pub fn outlier_scores(w: &Matrix, xnorms: &[f32]) -> Result<Matrix> {
    if xnorms.len() != w.cols() {
        return Err(OwlError::DimensionMismatch(format!(
            "{} input norms for a weight with {} columns",
            xnorms.len(),
            w.cols()
        )));
    }
    if xnorms.iter().any(|&n| !(n >= 0.0 && n.is_finite())) {
        return Err(OwlError::OutOfRange("input norms must be finite and >= 0".into()));
    }
    let mut a = Matrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for ((dst, &wv), &n) in a.row_mut(r).iter_mut().zip(w.row(r)).zip(xnorms) {
            *dst = n * wv.abs();
        }
    }
    Ok(a)
}

/// Layerwise outlier statistics before pooling: how many scores exceed the
/// threshold and how many scores there are.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tally {
    outliers: usize,
    total: usize,
}

fn score_sum(a: &Matrix) -> f64 {
    a.data().iter().map(|&v| f64::from(v)).sum()
}

fn count_above(values: &[f32], threshold: f64) -> usize {
    values.iter().filter(|&&v| f64::from(v) > threshold).count()
}

fn count_kept_above(a: &Matrix, mask: &PruneMask, threshold: f64) -> usize {
    a.data()
        .iter()
        .zip(mask.keep())
        .filter(|&(&v, &k)| k && f64::from(v) > threshold)
        .count()
}

fn check_multiplier(m: f64) -> Result<()> {
    if !(m > 1.0 && m.is_finite()) {
        return Err(OwlError::OutOfRange(format!("outlier multiplier M = {m} must exceed 1")));
    }
    Ok(())
}

/// Mean score, accumulated in `f64`.
pub fn mean_score(a: &Matrix) -> Result<f64> {
    if a.is_empty() {
        return Err(OwlError::Empty("score matrix".into()));
    }
    Ok(score_sum(a) / a.len() as f64)
}

/// Fraction of entries strictly above `m · mean(a)`.
pub fn layer_outlier_ratio(a: &Matrix, m: f64) -> Result<f64> {
    check_multiplier(m)?;
    let mean = mean_score(a)?;
    Ok(count_above(a.data(), m * mean) as f64 / a.len() as f64)
}

/// Outlier ratio after pruning, measured against the dense (pre-prune) mean.
/// Pruned entries count in the denominator.
pub fn post_prune_outlier_ratio(a: &Matrix, mask: &PruneMask, frozen_mean: f64, m: f64) -> Result<f64> {
    check_multiplier(m)?;
    if mask.shape() != a.shape() {
        return Err(OwlError::DimensionMismatch(format!(
            "mask {:?} vs scores {:?}",
            mask.shape(),
            a.shape()
        )));
    }
    if a.is_empty() {
        return Err(OwlError::Empty("score matrix".into()));
    }
    Ok(count_kept_above(a, mask, m * frozen_mean) as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    PerBlock,
}

impl FromStr for Granularity {
    type Err = OwlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" | "per_layer" | "per-layer" => Ok(Granularity::PerLayer),
            "block" | "per_block" | "per-block" => Ok(Granularity::PerBlock),
            _ => Err(OwlError::Config(format!("unknown granularity {s}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerLayer => "per_layer",
            Granularity::PerBlock => "per_block",
        })
    }
}

/// How a block's seven score matrices are pooled into one ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPooling {
    /// One threshold from the mean over all of the block's scores.
    #[default]
    Joint,
    /// Unweighted mean of the per-layer ratios.
    LayerMean,
    /// Parameter-weighted mean of the per-layer ratios.
    ParamWeighted,
}

impl FromStr for BlockPooling {
    type Err = OwlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(BlockPooling::Joint),
            "layer-mean" | "layer_mean" => Ok(BlockPooling::LayerMean),
            "param-weighted" | "param_weighted" => Ok(BlockPooling::ParamWeighted),
            _ => Err(OwlError::Config(format!("unknown block pooling {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileUnit {
    pub id: String,
    pub d: f64,
    pub params: usize,
}

/// Outlier ratio of every unit (layer or block), in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierProfile {
    pub granularity: Granularity,
    pub m: f64,
    pub units: Vec<ProfileUnit>,
}

impl OutlierProfile {
    pub fn ratios(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.d).collect()
    }

    pub fn params(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.params).collect()
    }

    /// Sum of unit ratios, the aggregate LOD figure.
    pub fn lod_sum(&self) -> f64 {
        self.units.iter().map(|u| u.d).sum()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit,d\n");
        for u in &self.units {
            s.push_str(&format!("{},{}\n", u.id, u.d));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.units.iter().any(|u| !(0.0..=1.0).contains(&u.d) || u.params == 0) {
            return Err(OwlError::Format("profile unit out of range".into()));
        }
        Ok(p)
    }
}

fn pool(
    granularity: Granularity,
    pooling: BlockPooling,
    ckpt: &Checkpoint,
    mut tally_of: impl FnMut(LayerId) -> Result<Tally>,
    m: f64,
) -> Result<OutlierProfile> {
    let mut units = Vec::new();
    match granularity {
        Granularity::PerLayer => {
            for id in ckpt.layer_ids() {
                let t = tally_of(id)?;
                units.push(ProfileUnit {
                    id: id.tensor_name(),
                    d: t.outliers as f64 / t.total as f64,
                    params: t.total,
                });
            }
        }
        Granularity::PerBlock => {
            for b in 0..ckpt.config.n_layers {
                let tallies: Vec<Tally> = ckpt
                    .layer_ids()
                    .into_iter()
                    .filter(|id| id.block == b)
                    .map(&mut tally_of)
                    .collect::<Result<_>>()?;
                let total: usize = tallies.iter().map(|t| t.total).sum();
                let d = match pooling {
                    BlockPooling::Joint => {
                        tallies.iter().map(|t| t.outliers).sum::<usize>() as f64 / total as f64
                    }
                    BlockPooling::LayerMean => {
                        tallies
                            .iter()
                            .map(|t| t.outliers as f64 / t.total as f64)
                            .sum::<f64>()
                            / tallies.len() as f64
                    }
                    BlockPooling::ParamWeighted => {
                        tallies.iter().map(|t| t.outliers as f64).sum::<f64>() / total as f64
                    }
                };
                units.push(ProfileUnit {
                    id: block_unit_name(b),
                    d,
                    params: total,
                });
            }
        }
    }
    Ok(OutlierProfile {
        granularity,
        m,
        units,
    })
}

fn layer_scores(ckpt: &Checkpoint, stats: &CalibrationStats, id: LayerId) -> Result<Matrix> {
    outlier_scores(&*ckpt.weight(id)?, stats.get(id)?)
}

/// Profile with the default (joint) block pooling.
pub fn build_profile(
    ckpt: &Checkpoint,
    stats: &CalibrationStats,
    m: f64,
    granularity: Granularity,
) -> Result<OutlierProfile> {
    build_profile_with(ckpt, stats, m, granularity, BlockPooling::Joint)
}

pub fn build_profile_with(
    ckpt: &Checkpoint,
    stats: &CalibrationStats,
    m: f64,
    granularity: Granularity,
    pooling: BlockPooling,
) -> Result<OutlierProfile> {
    check_multiplier(m)?;
    // Joint block pooling thresholds against the block-wide mean, so the
    // per-layer counts depend on it.
    let block_means = if granularity == Granularity::PerBlock && pooling == BlockPooling::Joint {
        block_means(ckpt, stats)?
    } else {
        Vec::new()
    };
    pool(
        granularity,
        pooling,
        ckpt,
        |id| {
            let a = layer_scores(ckpt, stats, id)?;
            let mean = if granularity == Granularity::PerBlock && pooling == BlockPooling::Joint {
                block_means[id.block]
            } else {
                score_sum(&a) / a.len() as f64
            };
            Ok(Tally {
                outliers: count_above(a.data(), m * mean),
                total: a.len(),
            })
        },
        m,
    )
}

fn block_means(ckpt: &Checkpoint, stats: &CalibrationStats) -> Result<Vec<f64>> {
    let mut sums = vec![0.0f64; ckpt.config.n_layers];
    let mut counts = vec![0usize; ckpt.config.n_layers];
    for id in ckpt.layer_ids() {
        let a = layer_scores(ckpt, stats, id)?;
        sums[id.block] += score_sum(&a);
        counts[id.block] += a.len();
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// Outlier profile of `pruned` where scores come from the dense weights,
/// thresholds from the dense means, and only weights still non-zero in
/// `pruned` count as surviving.
pub fn post_prune_profile(
    dense: &Checkpoint,
    pruned: &Checkpoint,
    stats: &CalibrationStats,
    m: f64,
    granularity: Granularity,
    pooling: BlockPooling,
) -> Result<OutlierProfile> {
    check_multiplier(m)?;
    let block_means = if granularity == Granularity::PerBlock && pooling == BlockPooling::Joint {
        block_means(dense, stats)?
    } else {
        Vec::new()
    };
    pool(
        granularity,
        pooling,
        dense,
        |id| {
            let a = layer_scores(dense, stats, id)?;
            let mean = if granularity == Granularity::PerBlock && pooling == BlockPooling::Joint {
                block_means[id.block]
            } else {
                score_sum(&a) / a.len() as f64
            };
            let mask = PruneMask::from_nonzero(id, &*pruned.weight(id)?);
            if mask.shape() != a.shape() {
                return Err(OwlError::DimensionMismatch(format!("pruned {id} changed shape")));
            }
            Ok(Tally {
                outliers: count_kept_above(&a, &mask, m * mean),
                total: a.len(),
            })
        },
        m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Projection};
    use crate::numkernel::SeededRng;

    #[test]
    fn scores_from_definition() {
        let w = Matrix::from_rows(&[&[1.0, -2.0]]);
        assert_eq!(outlier_scores(&w, &[3.0, 4.0]).unwrap(), Matrix::from_rows(&[&[3.0, 8.0]]));
        assert!(outlier_scores(&w, &[1.0]).is_err());
    }

    #[test]
    fn unit_norms_give_magnitudes() {
        let mut rng = SeededRng::new(3);
        let w = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let a = outlier_scores(&w, &[1.0; 5]).unwrap();
        assert!(a.data().iter().zip(w.data()).all(|(x, y)| *x == y.abs()));
    }

    #[test]
    fn ratio_examples() {
        let flat = Matrix::from_fn(3, 3, |_, _| 2.0);
        assert_eq!(layer_outlier_ratio(&flat, 2.0).unwrap(), 0.0);
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 9.0]]);
        assert_eq!(layer_outlier_ratio(&a, 2.0).unwrap(), 0.25);
        assert!(layer_outlier_ratio(&a, 1.0).is_err());
        assert!(layer_outlier_ratio(&Matrix::zeros(0, 0), 2.0).is_err());
    }

    #[test]
    fn post_prune_examples() {
        let id = LayerId::new(0, Projection::QProj);
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 9.0]]);
        let mean = mean_score(&a).unwrap();
        let all = PruneMask::dense(id, 2, 2);
        let none = PruneMask::new(id, 2, 2, vec![false; 4]).unwrap();
        assert_eq!(post_prune_outlier_ratio(&a, &none, mean, 2.0).unwrap(), 0.0);
        assert_eq!(
            post_prune_outlier_ratio(&a, &all, mean, 2.0).unwrap(),
            layer_outlier_ratio(&a, 2.0).unwrap()
        );
        let sub = PruneMask::new(id, 2, 2, vec![false, false, true, true]).unwrap();
        assert_eq!(post_prune_outlier_ratio(&a, &sub, mean, 2.0).unwrap(), 0.25);
        let wrong = PruneMask::dense(id, 1, 4);
        assert!(post_prune_outlier_ratio(&a, &wrong, mean, 2.0).is_err());
    }

    #[test]
    fn profile_unit_counts() {
        let mut rng = SeededRng::new(8);
        let ckpt = Checkpoint::random(ModelConfig::new(8, 1, 2, 16, 10), 0.2, &mut rng).unwrap();
        let stats = CalibrationStats::unit(&ckpt);
        let block = build_profile(&ckpt, &stats, 5.0, Granularity::PerBlock).unwrap();
        let layer = build_profile(&ckpt, &stats, 5.0, Granularity::PerLayer).unwrap();
        assert_eq!(block.len(), 1);
        assert_eq!(layer.len(), 7);
        assert_eq!(block.units[0].params, ckpt.num_prunable_params());
        let json = block.to_json().unwrap();
        assert_eq!(OutlierProfile::from_json(&json).unwrap(), block);
    }

    #[test]
    fn missing_stats_reported() {
        let mut rng = SeededRng::new(8);
        let ckpt = Checkpoint::random(ModelConfig::new(8, 1, 2, 16, 10), 0.2, &mut rng).unwrap();
        let mut stats = CalibrationStats::unit(&ckpt);
        stats.norms.remove(&LayerId::new(0, Projection::UpProj));
        assert!(matches!(
            build_profile(&ckpt, &stats, 5.0, Granularity::PerLayer),
            Err(OwlError::MissingStats(_))
        ));
    }
}
