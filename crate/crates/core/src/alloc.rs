//! Turning an outlier profile into per-unit budgets: sparsity plans (OWL,
//! OWL-inverse, uniform, ER, ER-plus), mixed N:M plans, SVD rank plans and
//! mixed-precision bit plans.
//!
//! Units with more outliers get smaller sparsity. OWL maps each unit's
//! outlier ratio linearly onto `[S − λ, S + λ]` by min–max normalisation,
//! then shifts all units by a common offset so that the parameter-weighted
//! mean is exactly `S`, clipping to the band and re-spreading what the
//! clipped units could not absorb.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OwlError, Result};
use crate::model::{block_unit_name, Checkpoint, LayerId};
use crate::numkernel::SeededRng;
use crate::outlier::OutlierProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Owl,
    OwlInverse,
    Uniform,
    Er,
    ErPlus,
}

impl Scheme {
    pub fn uses_band(self) -> bool {
        matches!(self, Scheme::Owl | Scheme::OwlInverse)
    }
}

impl FromStr for Scheme {
    type Err = OwlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "owl" => Ok(Scheme::Owl),
            "owl-inverse" | "owl_inverse" => Ok(Scheme::OwlInverse),
            "uniform" => Ok(Scheme::Uniform),
            "er" => Ok(Scheme::Er),
            "er-plus" | "er_plus" => Ok(Scheme::ErPlus),
            _ => Err(OwlError::Config(format!("unknown scheme {s}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Owl => "owl",
            Scheme::OwlInverse => "owl-inverse",
            Scheme::Uniform => "uniform",
            Scheme::Er => "er",
            Scheme::ErPlus => "er-plus",
        })
    }
}

/// `(C_out, C_in)` of a prunable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub id: LayerId,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn params(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn layer_shapes(ckpt: &Checkpoint) -> Vec<LayerShape> {
    ckpt.layer_ids()
        .into_iter()
        .map(|id| {
            let (rows, cols) = ckpt.layer_shape(id);
            LayerShape { id, rows, cols }
        })
        .collect()
}

/// Looks up the unit a layer belongs to: its own entry if present, else
/// its block's.
fn unit_index<'a>(ids: impl Iterator<Item = &'a str> + Clone, layer: LayerId) -> Option<usize> {
    let name = layer.tensor_name();
    let block = layer.block_name();
    ids.clone()
        .position(|u| u == name)
        .or_else(|| ids.clone().position(|u| u == block))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub s: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub scheme: Scheme,
    pub global_s: f64,
    pub lambda: f64,
    pub entries: Vec<PlanEntry>,
}

impl SparsityPlan {
    pub fn sparsities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.s).collect()
    }

    pub fn weighted_mean(&self) -> f64 {
        weighted_mean(
            &self.sparsities(),
            &self.entries.iter().map(|e| e.params).collect::<Vec<_>>(),
        )
    }

    pub fn sparsity_for_layer(&self, layer: LayerId) -> Result<f64> {
        unit_index(self.entries.iter().map(|e| e.id.as_str()), layer)
            .map(|i| self.entries[i].s)
            .ok_or_else(|| OwlError::PlanMismatch(format!("no plan entry covers {layer}")))
    }

    /// Target of a whole block: its own entry, or the parameter-weighted
    /// mean of its layer entries.
    pub fn sparsity_for_block(&self, block: usize, layers: &[LayerShape]) -> Result<f64> {
        let name = block_unit_name(block);
        if let Some(e) = self.entries.iter().find(|e| e.id == name) {
            return Ok(e.s);
        }
        let mut kept = 0.0;
        let mut total = 0usize;
        for l in layers.iter().filter(|l| l.id.block == block) {
            kept += self.sparsity_for_layer(l.id)? * l.params() as f64;
            total += l.params();
        }
        if total == 0 {
            return Err(OwlError::PlanMismatch(format!("no plan entry covers {name}")));
        }
        Ok(kept / total as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        if plan.entries.is_empty() {
            return Err(OwlError::Format("plan has no entries".into()));
        }
        if plan.entries.iter().any(|e| !(0.0..=1.0).contains(&e.s)) {
            return Err(OwlError::Format("plan sparsity outside [0, 1]".into()));
        }
        Ok(plan)
    }
}

pub fn weighted_mean(values: &[f64], params: &[usize]) -> f64 {
    let total: f64 = params.iter().map(|&p| p as f64).sum();
    values
        .iter()
        .zip(params)
        .map(|(v, &p)| v * p as f64)
        .sum::<f64>()
        / total
}

fn check_band(target: f64, lambda: f64, what: &str) -> Result<()> {
    if !(target > 0.0 && target < 1.0) {
        return Err(OwlError::OutOfRange(format!("{what} {target} must lie in (0, 1)")));
    }
    // Slack absorbs the rounding in `1 − target`.
    if !(lambda >= 0.0 && lambda < target.min(1.0 - target) - 1e-12) {
        return Err(OwlError::OutOfRange(format!(
            "lambda {lambda} must lie in [0, {}) for {what} {target}",
            target.min(1.0 - target)
        )));
    }
    Ok(())
}

/// Shifts `values` by a common offset, constrained to `[lo, hi]`, until the
/// parameter-weighted mean equals `target`. Shifting is one-directional, so
/// units that hit a bound stay there.
fn water_fill(values: &mut [f64], params: &[usize], target: f64, lo: f64, hi: f64) {
    let weights: Vec<f64> = params.iter().map(|&p| p as f64).collect();
    let total: f64 = weights.iter().sum();
    for _ in 0..=values.len() {
        let current: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        let residual = target * total - current;
        if residual.abs() <= 1e-13 * total {
            return;
        }
        let free: f64 = values
            .iter()
            .zip(&weights)
            .filter(|&(&v, _)| if residual > 0.0 { v < hi } else { v > lo })
            .map(|(_, w)| w)
            .sum();
        if free == 0.0 {
            return;
        }
        let shift = residual / free;
        for v in values.iter_mut() {
            let movable = if residual > 0.0 { *v < hi } else { *v > lo };
            if movable {
                *v = (*v + shift).clamp(lo, hi);
            }
        }
    }
}

/// OWL band mapping: larger ratio ⇒ smaller value, all values within
/// `target ± lambda`, weighted mean `target`.
pub fn band_allocation(ratios: &[f64], params: &[usize], target: f64, lambda: f64) -> Vec<f64> {
    let (min, max) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if lambda == 0.0 || max <= min {
        return vec![target; ratios.len()];
    }
    let mut values: Vec<f64> = ratios
        .iter()
        .map(|&d| {
            let t = (d - min) / (max - min);
            target + lambda * (1.0 - 2.0 * t)
        })
        .collect();
    water_fill(&mut values, params, target, target - lambda, target + lambda);
    values
}

/// Raw Erdős–Rényi sparsity `1 − (n_in + n_out) / (n_in · n_out)`.
pub fn er_raw_sparsity(n_in: usize, n_out: usize) -> f64 {
    1.0 - (n_in + n_out) as f64 / (n_in * n_out) as f64
}

/// Replaces `dens` by `min(1, k·dens)` with the common factor `k` chosen so
/// that `Σ dens·w = budget`.
fn scale_saturating(dens: &mut [f64], weights: &[f64], budget: f64) {
    let raw = dens.to_vec();
    let mut saturated = vec![false; raw.len()];
    let mut k = 0.0;
    for _ in 0..=raw.len() {
        let fixed: f64 = weights.iter().zip(&saturated).filter(|p| *p.1).map(|p| p.0).sum();
        let free: f64 = raw
            .iter()
            .zip(weights)
            .zip(&saturated)
            .filter(|p| !*p.1)
            .map(|((r, w), _)| r * w)
            .sum();
        if free == 0.0 {
            break;
        }
        k = (budget - fixed) / free;
        let next: Vec<bool> = raw.iter().map(|r| k * r >= 1.0).collect();
        if next == saturated {
            break;
        }
        saturated = next;
    }
    for (d, (&r, &sat)) in dens.iter_mut().zip(raw.iter().zip(&saturated)) {
        *d = if sat { 1.0 } else { (k * r).min(1.0) };
    }
}

/// ER densities scaled so the weighted sparsity is `s`; clipped at 1.
fn er_densities(shapes: &[LayerShape], s: f64) -> Vec<f64> {
    let mut dens: Vec<f64> = shapes
        .iter()
        .map(|l| (l.cols + l.rows) as f64 / (l.cols * l.rows) as f64)
        .collect();
    let weights: Vec<f64> = shapes.iter().map(|l| l.params() as f64).collect();
    let total: f64 = weights.iter().sum();
    scale_saturating(&mut dens, &weights, (1.0 - s) * total);
    dens
}

/// Builds a sparsity plan. `shapes` is needed for ER and ER-plus, which
/// always plan per layer; the other schemes plan per profile unit.
pub fn allocate_sparsity(
    profile: &OutlierProfile,
    scheme: Scheme,
    s: f64,
    lambda: f64,
    shapes: &[LayerShape],
) -> Result<SparsityPlan> {
    if profile.is_empty() {
        return Err(OwlError::Empty("outlier profile".into()));
    }
    if scheme.uses_band() {
        check_band(s, lambda, "sparsity")?;
    } else if !(0.0..1.0).contains(&s) {
        return Err(OwlError::OutOfRange(format!("sparsity {s} must lie in [0, 1)")));
    }
    let unit_entries = |values: Vec<f64>| -> Vec<PlanEntry> {
        profile
            .units
            .iter()
            .zip(values)
            .map(|(u, s)| PlanEntry {
                id: u.id.clone(),
                s,
                params: u.params,
            })
            .collect()
    };
    let params = profile.params();
    let entries = match scheme {
        Scheme::Uniform => unit_entries(vec![s; profile.len()]),
        Scheme::Owl => unit_entries(band_allocation(&profile.ratios(), &params, s, lambda)),
        Scheme::OwlInverse => {
            let inverted: Vec<f64> = profile.ratios().iter().map(|d| 1.0 - d).collect();
            unit_entries(band_allocation(&inverted, &params, s, lambda))
        }
        Scheme::Er | Scheme::ErPlus => {
            if shapes.is_empty() {
                return Err(OwlError::Empty("layer shapes for ER allocation".into()));
            }
            let mut dens = er_densities(shapes, s);
            if scheme == Scheme::ErPlus {
                force_last_dense(&mut dens, shapes, s)?;
            }
            shapes
                .iter()
                .zip(dens)
                .map(|(l, d)| PlanEntry {
                    id: l.id.tensor_name(),
                    s: (1.0 - d).clamp(0.0, 1.0),
                    params: l.params(),
                })
                .collect()
        }
    };
    Ok(SparsityPlan {
        scheme,
        global_s: s,
        lambda: if scheme.uses_band() { lambda } else { 0.0 },
        entries,
    })
}

/// Makes the last layer dense and takes the extra kept weights
/// proportionally from all the others.
fn force_last_dense(dens: &mut [f64], shapes: &[LayerShape], s: f64) -> Result<()> {
    let n = dens.len();
    let weights: Vec<f64> = shapes.iter().map(|l| l.params() as f64).collect();
    let total: f64 = weights.iter().sum();
    let budget = (1.0 - s) * total - weights[n - 1];
    if budget < 0.0 {
        return Err(OwlError::OutOfRange(format!(
            "sparsity {s} leaves too few weights to keep the last layer dense"
        )));
    }
    dens[n - 1] = 1.0;
    scale_saturating(&mut dens[..n - 1], &weights[..n - 1], budget);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmEntry {
    pub id: String,
    pub n: usize,
    pub params: usize,
}

/// Mixed N:M plan with a common group size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmPlan {
    pub m_group: usize,
    pub target_n: f64,
    pub entries: Vec<NmEntry>,
}

impl NmPlan {
    pub fn uniform(ids: &[(String, usize)], n: usize, m_group: usize) -> Self {
        Self {
            m_group,
            target_n: n as f64,
            entries: ids
                .iter()
                .map(|(id, params)| NmEntry {
                    id: id.clone(),
                    n,
                    params: *params,
                })
                .collect(),
        }
    }

    pub fn n_for_layer(&self, layer: LayerId) -> Result<usize> {
        unit_index(self.entries.iter().map(|e| e.id.as_str()), layer)
            .map(|i| self.entries[i].n)
            .ok_or_else(|| OwlError::PlanMismatch(format!("no N:M entry covers {layer}")))
    }

    pub fn weighted_mean(&self) -> f64 {
        weighted_mean(
            &self.entries.iter().map(|e| e.n as f64).collect::<Vec<_>>(),
            &self.entries.iter().map(|e| e.params).collect::<Vec<_>>(),
        )
    }
}

/// Indices ordered by ratio descending; ties keep unit order.
fn descending_order(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    order
}

/// Starts every unit at `floor(n_avg)` and hands out the remaining budget
/// one N-step at a time, highest outlier ratio first.
pub fn allocate_nm(profile: &OutlierProfile, m_group: usize, n_avg: f64) -> Result<NmPlan> {
    if profile.is_empty() {
        return Err(OwlError::Empty("outlier profile".into()));
    }
    if m_group == 0 || !(n_avg > 0.0 && n_avg <= m_group as f64) {
        return Err(OwlError::OutOfRange(format!(
            "average N {n_avg} must lie in (0, {m_group}]"
        )));
    }
    let base = n_avg.floor() as usize;
    let params = profile.params();
    let mut ns = vec![base; profile.len()];
    let total: f64 = params.iter().map(|&p| p as f64).sum();
    let mut remaining = (n_avg - base as f64) * total;
    let order = descending_order(&profile.ratios());
    loop {
        let mut progressed = false;
        for &i in &order {
            let p = params[i] as f64;
            if ns[i] < m_group && 2.0 * remaining >= p && remaining > 0.0 {
                ns[i] += 1;
                remaining -= p;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(NmPlan {
        m_group,
        target_n: n_avg,
        entries: profile
            .units
            .iter()
            .zip(ns)
            .map(|(u, n)| NmEntry {
                id: u.id.clone(),
                n,
                params: u.params,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub keep_rank: usize,
    pub d_min: usize,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub r_target: f64,
    pub lambda: f64,
    pub entries: Vec<RankEntry>,
}

impl RankPlan {
    pub fn rank_for_layer(&self, layer: LayerId) -> Option<usize> {
        let name = layer.tensor_name();
        self.entries
            .iter()
            .find(|e| e.id == name)
            .map(|e| e.keep_rank)
    }
}

/// Per-layer keep ranks: each unit's rank reduction comes from the same
/// band mapping as OWL (more outliers ⇒ less reduction).
pub fn allocate_ranks(
    profile: &OutlierProfile,
    r_target: f64,
    lambda: f64,
    shapes: &[LayerShape],
) -> Result<RankPlan> {
    if profile.is_empty() {
        return Err(OwlError::Empty("outlier profile".into()));
    }
    check_band(r_target, lambda, "rank reduction")?;
    let reductions = band_allocation(&profile.ratios(), &profile.params(), r_target, lambda);
    let mut entries = Vec::new();
    for l in shapes {
        let Some(u) = unit_index(profile.units.iter().map(|u| u.id.as_str()), l.id) else {
            continue;
        };
        let d_min = l.rows.min(l.cols);
        let reduction = reductions[u];
        let keep = ((1.0 - reduction) * d_min as f64).round() as usize;
        entries.push(RankEntry {
            id: l.id.tensor_name(),
            keep_rank: keep.clamp(1, d_min),
            d_min,
            reduction,
        });
    }
    if entries.is_empty() {
        return Err(OwlError::PlanMismatch("profile units match no layer".into()));
    }
    Ok(RankPlan {
        r_target,
        lambda,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitSelector {
    Owl,
    L1Norm,
    Random,
}

impl FromStr for BitSelector {
    type Err = OwlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "owl" => Ok(BitSelector::Owl),
            "l1" | "l1_norm" | "l1-norm" => Ok(BitSelector::L1Norm),
            "random" => Ok(BitSelector::Random),
            _ => Err(OwlError::Config(format!("unknown bit selector {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitEntry {
    pub id: String,
    pub bits: u32,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitPlan {
    pub menu: Vec<u32>,
    pub budget: f64,
    pub selector: BitSelector,
    pub entries: Vec<BitEntry>,
}

impl BitPlan {
    pub fn bits_for_layer(&self, layer: LayerId) -> Result<u32> {
        unit_index(self.entries.iter().map(|e| e.id.as_str()), layer)
            .map(|i| self.entries[i].bits)
            .ok_or_else(|| OwlError::PlanMismatch(format!("no bit entry covers {layer}")))
    }

    pub fn weighted_mean(&self) -> f64 {
        weighted_mean(
            &self.entries.iter().map(|e| f64::from(e.bits)).collect::<Vec<_>>(),
            &self.entries.iter().map(|e| e.params).collect::<Vec<_>>(),
        )
    }
}

/// Mean `|W|` of every profile unit, the key of the L1 selector.
pub fn unit_l1_norms(ckpt: &Checkpoint, profile: &OutlierProfile) -> Result<Vec<f64>> {
    let mut sums = vec![0.0f64; profile.len()];
    let mut counts = vec![0usize; profile.len()];
    for id in ckpt.layer_ids() {
        if let Some(u) = unit_index(profile.units.iter().map(|u| u.id.as_str()), id) {
            let w = ckpt.weight(id)?;
            sums[u] += w.data().iter().map(|v| f64::from(v.abs())).sum::<f64>();
            counts[u] += w.len();
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Ranks units by the selector and gives the top of the ranking the
/// widest bits. Tier boundaries are chosen to bring the weighted mean as
/// close to `b_avg` as possible; exact ties prefer more units on higher
/// tiers.
pub fn allocate_bits(
    profile: &OutlierProfile,
    menu: &[u32],
    b_avg: f64,
    selector: BitSelector,
    l1_norms: Option<&[f64]>,
    rng: &mut SeededRng,
) -> Result<BitPlan> {
    if profile.is_empty() {
        return Err(OwlError::Empty("outlier profile".into()));
    }
    let mut tiers: Vec<u32> = menu.to_vec();
    tiers.sort_unstable_by(|a, b| b.cmp(a));
    tiers.dedup();
    if tiers.is_empty() {
        return Err(OwlError::Empty("bit menu".into()));
    }
    if tiers.iter().any(|&b| b < 2) {
        return Err(OwlError::OutOfRange("bit widths must be >= 2".into()));
    }
    let (lo, hi) = (f64::from(*tiers.last().unwrap()), f64::from(tiers[0]));
    if !(b_avg >= lo && b_avg <= hi) {
        return Err(OwlError::OutOfRange(format!(
            "budget of {b_avg} bits is unreachable with menu {menu:?}"
        )));
    }
    let order: Vec<usize> = match selector {
        BitSelector::Owl => descending_order(&profile.ratios()),
        BitSelector::L1Norm => {
            let keys = l1_norms
                .ok_or_else(|| OwlError::Config("L1 selector needs per-unit weight norms".into()))?;
            if keys.len() != profile.len() {
                return Err(OwlError::DimensionMismatch(format!(
                    "{} L1 keys for {} units",
                    keys.len(),
                    profile.len()
                )));
            }
            descending_order(keys)
        }
        BitSelector::Random => {
            let mut o: Vec<usize> = (0..profile.len()).collect();
            rng.shuffle(&mut o);
            o
        }
    };
    let ranked_params: Vec<f64> = order.iter().map(|&i| profile.units[i].params as f64).collect();
    let counts = best_tier_counts(&ranked_params, &tiers, b_avg);
    let mut bits = vec![0u32; profile.len()];
    let mut pos = 0;
    for (tier, &count) in tiers.iter().zip(&counts) {
        for &unit in &order[pos..pos + count] {
            bits[unit] = *tier;
        }
        pos += count;
    }
    Ok(BitPlan {
        menu: tiers.iter().rev().copied().collect(),
        budget: b_avg,
        selector,
        entries: profile
            .units
            .iter()
            .zip(bits)
            .map(|(u, bits)| BitEntry {
                id: u.id.clone(),
                bits,
                params: u.params,
            })
            .collect(),
    })
}

/// Exhaustive search over contiguous tier splits of the ranking.
fn best_tier_counts(ranked_params: &[f64], tiers: &[u32], b_avg: f64) -> Vec<usize> {
    let n = ranked_params.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, p) in ranked_params.iter().enumerate() {
        prefix[i + 1] = prefix[i] + p;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let last = tiers.len();
    let mut bounds = vec![0usize; last + 1];
    bounds[last] = n;
    // bounds[t]..bounds[t + 1] is the slice of the ranking on tier t
    fn recurse(
        k: usize,
        bounds: &mut [usize],
        tiers: &[u32],
        prefix: &[f64],
        b_avg: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let last = tiers.len();
        let n = prefix.len() - 1;
        if k == last {
            let weighted: f64 = (0..last)
                .map(|t| f64::from(tiers[t]) * (prefix[bounds[t + 1]] - prefix[bounds[t]]))
                .sum();
            let err = (weighted / prefix[n] - b_avg).abs();
            let counts: Vec<usize> = (0..last).map(|t| bounds[t + 1] - bounds[t]).collect();
            let better = match best {
                None => true,
                Some((e, c)) => err < *e - 1e-12 || ((err - *e).abs() <= 1e-12 && counts > *c),
            };
            if better {
                *best = Some((err, counts));
            }
            return;
        }
        for b in bounds[k - 1]..=n {
            bounds[k] = b;
            recurse(k + 1, bounds, tiers, prefix, b_avg, best);
        }
    }
    recurse(1, &mut bounds, tiers, &prefix, b_avg, &mut best);
    best.map(|(_, c)| c).unwrap_or_default()
}
