//! Statistical radiation error model: single-bit upsets (SEU) and
//! spatially correlated multi-cell upsets (MCU).

use crate::dram::{CellCoord, DramConfig};
use crate::rng::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported cluster size.
pub const MAX_MULTIPLICITY: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("multiplicity pmf must have 1..=8 entries, got {0}")]
    PmfLength(usize),
    #[error("multiplicity pmf has a negative or non-finite mass")]
    PmfMass,
    #[error("multiplicity pmf sums to {0}, expected 1")]
    PmfSum(f64),
    #[error("wordline_prob + bitline_prob = {0}, expected 1")]
    DirectionSum(f64),
    #[error("extent box must be at least 1x1")]
    EmptyBox,
    #[error("cannot place {multiplicity} cells: only {available} cells of the extent box are on the device")]
    Unreachable { multiplicity: usize, available: usize },
    #[error("multiplicity must be >= 1")]
    ZeroMultiplicity,
}

fn default_pmf() -> Vec<f64> {
    vec![0.85, 0.12, 0.02, 0.002, 0.002, 0.002, 0.002, 0.002]
}
fn default_wordline() -> f64 {
    0.8
}
fn default_bitline() -> f64 {
    0.2
}
fn default_rows() -> u64 {
    2
}
fn default_cols() -> u64 {
    5
}

/// `error_model.json`. `multiplicity_pmf[k]` is the probability of a
/// (k+1)-cell event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelConfig {
    #[serde(default = "default_pmf")]
    pub multiplicity_pmf: Vec<f64>,
    #[serde(default = "default_wordline")]
    pub wordline_prob: f64,
    #[serde(default = "default_bitline")]
    pub bitline_prob: f64,
    #[serde(default = "default_rows")]
    pub max_row_extent: u64,
    #[serde(default = "default_cols")]
    pub max_col_extent: u64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for ErrorModelConfig {
    /// 12% two-bit, 2% three-bit, 1% spread evenly over four to eight bits.
    fn default() -> Self {
        ErrorModelConfig {
            multiplicity_pmf: default_pmf(),
            wordline_prob: default_wordline(),
            bitline_prob: default_bitline(),
            max_row_extent: default_rows(),
            max_col_extent: default_cols(),
            rng_seed: 0,
        }
    }
}

impl ErrorModelConfig {
    /// Model whose every event has exactly `size` cells.
    pub fn fixed(size: usize) -> Self {
        let mut pmf = vec![0.0; MAX_MULTIPLICITY];
        pmf[size.clamp(1, MAX_MULTIPLICITY) - 1] = 1.0;
        ErrorModelConfig { multiplicity_pmf: pmf, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.multiplicity_pmf.len();
        if n == 0 || n > MAX_MULTIPLICITY {
            return Err(ModelError::PmfLength(n));
        }
        if self.multiplicity_pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ModelError::PmfMass);
        }
        let sum: f64 = self.multiplicity_pmf.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::PmfSum(sum));
        }
        let dir = self.wordline_prob + self.bitline_prob;
        if !(0.0..=1.0).contains(&self.wordline_prob) || (dir - 1.0).abs() > 1e-9 {
            return Err(ModelError::DirectionSum(dir));
        }
        if self.max_row_extent == 0 || self.max_col_extent == 0 {
            return Err(ModelError::EmptyBox);
        }
        Ok(())
    }

    /// Distribution conditioned on at least `min` cells, for MCU-only studies.
    pub fn conditioned_min(&self, min: usize) -> Result<Self, ModelError> {
        let mut pmf = self.multiplicity_pmf.clone();
        for p in pmf.iter_mut().take(min.saturating_sub(1)) {
            *p = 0.0;
        }
        let sum: f64 = pmf.iter().sum();
        if sum <= 0.0 {
            return Err(ModelError::PmfSum(0.0));
        }
        pmf.iter_mut().for_each(|p| *p /= sum);
        Ok(ErrorModelConfig { multiplicity_pmf: pmf, ..self.clone() })
    }
}

/// One upset event: a connected set of cells in the same array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCluster {
    pub reference: CellCoord,
    /// Sorted, distinct.
    pub cells: Vec<CellCoord>,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMix {
    pub cluster_sizes: Vec<usize>,
}

impl EventMix {
    pub fn total_bits(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    /// `counts[k]` = number of (k+1)-cell events.
    pub fn histogram(&self) -> [usize; MAX_MULTIPLICITY] {
        let mut h = [0; MAX_MULTIPLICITY];
        for &s in &self.cluster_sizes {
            h[s - 1] += 1;
        }
        h
    }
}

/// Pre-built sampler; avoids rebuilding the weighted table per draw.
#[derive(Debug, Clone)]
pub struct MultiplicitySampler {
    dist: WeightedIndex<f64>,
}

impl MultiplicitySampler {
    pub fn new(model: &ErrorModelConfig) -> Result<Self, ModelError> {
        model.validate()?;
        let dist = WeightedIndex::new(&model.multiplicity_pmf).map_err(|_| ModelError::PmfMass)?;
        Ok(MultiplicitySampler { dist })
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        self.dist.sample(rng) + 1
    }
}

pub fn sample_multiplicity(model: &ErrorModelConfig, rng: &mut Rng) -> Result<usize, ModelError> {
    Ok(MultiplicitySampler::new(model)?.sample(rng))
}

/// Grows a cluster of `multiplicity` cells from `reference`.
///
/// The cluster stays inside the box of `max_row_extent` rows and
/// `max_col_extent` columns whose top-left corner is the reference, clipped to
/// the device. Each step first picks a direction: with `wordline_prob` a
/// same-row neighbour of an existing cell, otherwise a neighbour in an
/// adjacent row (straight down/up or diagonal). A direction with no free
/// neighbour falls back to the other one.
pub fn sample_cluster(
    reference: CellCoord,
    multiplicity: usize,
    model: &ErrorModelConfig,
    cfg: &DramConfig,
    rng: &mut Rng,
) -> Result<FlipCluster, ModelError> {
    if multiplicity == 0 {
        return Err(ModelError::ZeroMultiplicity);
    }
    if model.max_row_extent == 0 || model.max_col_extent == 0 {
        return Err(ModelError::EmptyBox);
    }
    let row_end = (reference.row + model.max_row_extent).min(cfg.rows);
    let col_end = (reference.column + model.max_col_extent).min(cfg.columns);
    let available = (row_end.saturating_sub(reference.row) * col_end.saturating_sub(reference.column)) as usize;
    if multiplicity > available {
        return Err(ModelError::Unreachable { multiplicity, available });
    }

    let mut cells: Vec<(u64, u64)> = vec![(reference.row, reference.column)];
    let in_box = |r: u64, c: u64| r >= reference.row && r < row_end && c >= reference.column && c < col_end;
    let mut same_row: Vec<(u64, u64)> = Vec::new();
    let mut other_row: Vec<(u64, u64)> = Vec::new();
    while cells.len() < multiplicity {
        same_row.clear();
        other_row.clear();
        for &(r, c) in &cells {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 {
                        continue;
                    }
                    let n = (nr as u64, nc as u64);
                    if !in_box(n.0, n.1) || cells.contains(&n) {
                        continue;
                    }
                    let list = if dr == 0 { &mut same_row } else { &mut other_row };
                    if !list.contains(&n) {
                        list.push(n);
                    }
                }
            }
        }
        let wordline = rng.random::<f64>() < model.wordline_prob;
        let pool = match (wordline, same_row.is_empty(), other_row.is_empty()) {
            (true, false, _) | (false, _, true) => &same_row,
            _ => &other_row,
        };
        // Box cells are 8-connected, so a non-full box always has a free neighbour.
        let pick = pool[rng.random_range(0..pool.len())];
        cells.push(pick);
    }

    let mut out: Vec<CellCoord> = cells
        .into_iter()
        .map(|(row, column)| CellCoord { row, column, ..reference })
        .collect();
    out.sort();
    Ok(FlipCluster { reference, cells: out, multiplicity })
}

/// Greedily draws event sizes until `total_bits` is used up. A draw larger
/// than the remaining budget is replaced by single-bit events.
pub fn compose_event_mix(total_bits: usize, model: &ErrorModelConfig, rng: &mut Rng) -> Result<EventMix, ModelError> {
    let sampler = MultiplicitySampler::new(model)?;
    let mut sizes = Vec::new();
    let mut remaining = total_bits;
    while remaining > 0 {
        let s = sampler.sample(rng);
        if s <= remaining {
            sizes.push(s);
            remaining -= s;
        } else {
            sizes.extend(std::iter::repeat_n(1, remaining));
            remaining = 0;
        }
    }
    Ok(EventMix { cluster_sizes: sizes })
}

/// Expected bit errors per day for a memory footprint (in bits) at a
/// per-bit daily upset rate.
pub fn expected_daily_errors(footprint_bits: f64, rate: f64) -> f64 {
    footprint_bits * rate
}

/// Per-bit daily upset rate measured in low Earth orbit.
pub const LEO_RATE_PER_BIT_DAY: f64 = 4.76e-7;
