//! Plans radiation events inside a virtual region and flips them in a live
//! buffer.
//!
//! A plan is built in three steps: the physical extremes of the target region
//! bound the DRAM index ranges worth sampling from; an event mix splits the
//! bit budget into SEU/MCU events; each event draws a reference cell in those
//! ranges, grows a cluster around it, and maps every cell back through the
//! DRAM scheme and the block map. An event with any cell outside the region
//! (or on an already planned bit) is thrown away and redrawn as a whole.

use crate::addrspace::{AddrError, BlockMap, Roi};
use crate::dram::{CellCoord, DramError, DramMap, Level, LevelSpan};
use crate::radiation::{compose_event_mix, sample_cluster, ErrorModelConfig, FlipCluster, ModelError};
use crate::rng::{rng_from_seed, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Redraws allowed per event before planning gives up.
pub const DEFAULT_RETRY_BUDGET: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InjectError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Addr(#[from] AddrError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "retry budget exhausted on a {event_size}-bit event: placed {placed} of {total} bits ({:.1}% achievable)",
        100.0 * *placed as f64 / *total as f64
    )]
    BudgetExhausted { placed: usize, total: usize, event_size: usize },
    #[error("target region {start:#x}+{size} is not inside the mapped ROI")]
    RegionOutsideRoi { start: u64, size: u64 },
    #[error("region holds {available} bits, cannot place {requested}")]
    RegionTooSmall { available: u64, requested: usize },
    #[error("buffer is {buffer} bytes but the plan targets a {roi}-byte ROI")]
    SizeMismatch { buffer: usize, roi: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlannedFlip {
    pub pa: u64,
    pub va: u64,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedEvent {
    pub cluster: FlipCluster,
    /// One entry per cluster cell, in cell order.
    pub flips: Vec<PlannedFlip>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPlan {
    /// The whole mapped buffer.
    pub roi: Roi,
    /// Where flips were allowed to land.
    pub region: Roi,
    pub events: Vec<PlannedEvent>,
    pub total_bits: usize,
    pub seed: u64,
    /// Event draws including rejected ones.
    pub attempts: u64,
}

impl InjectionPlan {
    pub fn empty(roi: Roi, seed: u64) -> Self {
        InjectionPlan { roi, region: roi, events: Vec::new(), total_bits: 0, seed, attempts: 0 }
    }

    pub fn flips(&self) -> impl Iterator<Item = &PlannedFlip> {
        self.events.iter().flat_map(|e| e.flips.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub plan: InjectionPlan,
    /// Bit value before the flip, in `plan.flips()` order.
    pub pre_flip_bits: Vec<bool>,
}

/// Knobs beyond the model and budget.
#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    pub retry_budget: u64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { retry_budget: DEFAULT_RETRY_BUDGET }
    }
}

fn draw_reference(span: &LevelSpan, block_bits: u64, rng: &mut Rng) -> CellCoord {
    let mut cell = CellCoord { bit_in_block: rng.random_range(0..block_bits) as u32, ..Default::default() };
    for level in Level::ALL {
        let r = span.get(level);
        cell.set_level(level, rng.random_range(r.min..=r.max));
    }
    cell
}

/// Plans exactly `total_bits` distinct flips, all inside `region`.
pub fn plan_injection(
    region: Roi,
    map: &BlockMap,
    dram: &DramMap,
    model: &ErrorModelConfig,
    total_bits: usize,
    seed: u64,
) -> Result<InjectionPlan, InjectError> {
    plan_injection_with(region, map, dram, model, total_bits, seed, PlanOptions::default())
}

pub fn plan_injection_with(
    region: Roi,
    map: &BlockMap,
    dram: &DramMap,
    model: &ErrorModelConfig,
    total_bits: usize,
    seed: u64,
    opts: PlanOptions,
) -> Result<InjectionPlan, InjectError> {
    if !map.roi.contains_roi(&region) {
        return Err(InjectError::RegionOutsideRoi { start: region.start, size: region.size });
    }
    if region.size.saturating_mul(8) < total_bits as u64 {
        return Err(InjectError::RegionTooSmall { available: region.size * 8, requested: total_bits });
    }
    let mut rng = rng_from_seed(seed);
    let (lo, hi) = map.physical_extremes(&region)?;
    let span = dram.level_span(lo, hi)?;
    let mix = compose_event_mix(total_bits, model, &mut rng)?;
    let block_bits = dram.config().block_bits();

    let mut used: HashSet<(u64, u8)> = HashSet::with_capacity(total_bits);
    let mut events = Vec::with_capacity(mix.cluster_sizes.len());
    let mut attempts = 0u64;
    let mut placed = 0usize;
    for &size in &mix.cluster_sizes {
        let mut tries = 0u64;
        let event = loop {
            if tries == opts.retry_budget {
                return Err(InjectError::BudgetExhausted { placed, total: total_bits, event_size: size });
            }
            tries += 1;
            attempts += 1;
            let reference = draw_reference(&span, block_bits, &mut rng);
            let cluster = match sample_cluster(reference, size, model, dram.config(), &mut rng) {
                Ok(c) => c,
                Err(ModelError::Unreachable { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            if let Some(flips) = locate(&cluster, map, dram, &region, &used)? {
                break PlannedEvent { cluster, flips };
            }
        };
        for f in &event.flips {
            used.insert((f.va, f.bit));
        }
        placed += size;
        events.push(event);
    }
    Ok(InjectionPlan { roi: map.roi, region, events, total_bits, seed, attempts })
}

/// Virtual positions of every cluster cell, or `None` if any falls outside
/// `region` or collides with `used`.
fn locate(
    cluster: &FlipCluster,
    map: &BlockMap,
    dram: &DramMap,
    region: &Roi,
    used: &HashSet<(u64, u8)>,
) -> Result<Option<Vec<PlannedFlip>>, InjectError> {
    let mut flips = Vec::with_capacity(cluster.cells.len());
    for cell in &cluster.cells {
        let (pa, bit) = dram.encode_bit(cell)?;
        let Some(va) = map.phys_to_virt(pa) else { return Ok(None) };
        if !region.contains(va) || used.contains(&(va, bit)) {
            return Ok(None);
        }
        flips.push(PlannedFlip { pa, va, bit });
    }
    Ok(Some(flips))
}

/// Baseline without spatial correlation: `total_bits` distinct bits chosen
/// uniformly over `region`, each recorded as a one-cell event.
pub fn plan_uniform(
    region: Roi,
    map: &BlockMap,
    dram: &DramMap,
    total_bits: usize,
    seed: u64,
) -> Result<InjectionPlan, InjectError> {
    if !map.roi.contains_roi(&region) {
        return Err(InjectError::RegionOutsideRoi { start: region.start, size: region.size });
    }
    if region.size.saturating_mul(8) < total_bits as u64 {
        return Err(InjectError::RegionTooSmall { available: region.size * 8, requested: total_bits });
    }
    let mut rng = rng_from_seed(seed);
    let mut used = HashSet::with_capacity(total_bits);
    let mut events = Vec::with_capacity(total_bits);
    let mut attempts = 0;
    while events.len() < total_bits {
        attempts += 1;
        let va = region.start + rng.random_range(0..region.size);
        let bit = rng.random_range(0..8u8);
        if !used.insert((va, bit)) {
            continue;
        }
        let pa = map.virt_to_phys(va)?;
        let cell = dram.decode_bit(pa, bit)?;
        events.push(PlannedEvent {
            cluster: FlipCluster { reference: cell, cells: vec![cell], multiplicity: 1 },
            flips: vec![PlannedFlip { pa, va, bit }],
        });
    }
    Ok(InjectionPlan { roi: map.roi, region, events, total_bits, seed, attempts })
}

/// Inverts every planned bit of `buffer`, which holds the plan's ROI.
pub fn apply_flips(buffer: &mut [u8], plan: &InjectionPlan) -> Result<InjectionRecord, InjectError> {
    if buffer.len() as u64 != plan.roi.size {
        return Err(InjectError::SizeMismatch { buffer: buffer.len(), roi: plan.roi.size });
    }
    let mut pre = Vec::with_capacity(plan.total_bits);
    for f in plan.flips() {
        let byte = &mut buffer[(f.va - plan.roi.start) as usize];
        pre.push(*byte >> f.bit & 1 == 1);
        *byte ^= 1 << f.bit;
    }
    Ok(InjectionRecord { plan: plan.clone(), pre_flip_bits: pre })
}

/// XORs the recorded flips back out. Calling it twice re-applies them.
pub fn revert(buffer: &mut [u8], record: &InjectionRecord) {
    for f in record.plan.flips() {
        buffer[(f.va - record.plan.roi.start) as usize] ^= 1 << f.bit;
    }
}

/// Share of MCU events that land entirely inside `region`.
///
/// Each trial draws a size from `model` conditioned on two or more cells,
/// anchors it at the cell holding a uniformly chosen bit of the region, grows
/// the cluster and checks every cell's virtual address. Anchors whose box
/// does not fit on the device are redrawn.
pub fn mcu_validity(
    region: Roi,
    map: &BlockMap,
    dram: &DramMap,
    model: &ErrorModelConfig,
    trials: usize,
    seed: u64,
) -> Result<f64, InjectError> {
    let mcu = model.conditioned_min(2)?;
    let sampler = crate::radiation::MultiplicitySampler::new(&mcu)?;
    let mut rng = rng_from_seed(seed);
    let mut valid = 0usize;
    let mut done = 0usize;
    while done < trials {
        let va = region.start + rng.random_range(0..region.size);
        let bit = rng.random_range(0..8u8);
        let reference = dram.decode_bit(map.virt_to_phys(va)?, bit)?;
        let size = sampler.sample(&mut rng);
        let cluster = match sample_cluster(reference, size, &mcu, dram.config(), &mut rng) {
            Ok(c) => c,
            Err(ModelError::Unreachable { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        done += 1;
        if locate(&cluster, map, dram, &region, &HashSet::new())?.is_some() {
            valid += 1;
        }
    }
    Ok(valid as f64 / trials.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::{DramConfig, SchemeId};

    fn setup() -> (BlockMap, DramMap) {
        let roi = Roi::new(0x7000_0000, 4 * 4096).unwrap();
        let map = BlockMap::contiguous(roi, 0x3_0000, 4096).unwrap();
        (map, DramMap::standard(&DramConfig::compact_rows(), SchemeId::S1).unwrap())
    }

    #[test]
    fn single_bit_in_one_page() {
        let (map, dram) = setup();
        let page = Roi::new(map.roi.start + 4096, 4096).unwrap();
        let plan = plan_injection(page, &map, &dram, &ErrorModelConfig::default(), 1, 3).unwrap();
        assert_eq!(plan.flips().count(), 1);
        assert!(page.contains(plan.flips().next().unwrap().va));
    }

    #[test]
    fn empty_plan_leaves_buffer() {
        let (map, _) = setup();
        let mut buf = vec![0xA5u8; map.roi.size as usize];
        let rec = apply_flips(&mut buf, &InjectionPlan::empty(map.roi, 0)).unwrap();
        assert!(rec.pre_flip_bits.is_empty());
        assert!(buf.iter().all(|&b| b == 0xA5));
    }

    #[test]
    fn apply_revert_roundtrip() {
        let (map, dram) = setup();
        let plan = plan_injection(map.roi, &map, &dram, &ErrorModelConfig::default(), 200, 11).unwrap();
        let mut buf: Vec<u8> = (0..map.roi.size).map(|i| (i * 31) as u8).collect();
        let orig = buf.clone();
        let rec = apply_flips(&mut buf, &plan).unwrap();
        let pop: u32 = buf.iter().zip(&orig).map(|(a, b)| (a ^ b).count_ones()).sum();
        assert_eq!(pop, 200);
        revert(&mut buf, &rec);
        assert_eq!(buf, orig);
        revert(&mut buf, &rec);
        let pop: u32 = buf.iter().zip(&orig).map(|(a, b)| (a ^ b).count_ones()).sum();
        assert_eq!(pop, 200);
    }

    #[test]
    fn size_mismatch_rejected() {
        let (map, _) = setup();
        let mut buf = vec![0u8; 10];
        assert!(matches!(
            apply_flips(&mut buf, &InjectionPlan::empty(map.roi, 0)),
            Err(InjectError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn tiny_budget_reports_fraction() {
        let (map, dram) = setup();
        let region = Roi::new(map.roi.start, 16).unwrap();
        let opts = PlanOptions { retry_budget: 1 };
        let err = plan_injection_with(region, &map, &dram, &ErrorModelConfig::fixed(8), 64, 1, opts).unwrap_err();
        assert!(matches!(err, InjectError::BudgetExhausted { .. }));
        assert!(err.to_string().contains("achievable"));
    }

    #[test]
    fn uniform_plan_is_distinct_and_in_region() {
        let (map, dram) = setup();
        let plan = plan_uniform(map.roi, &map, &dram, 500, 2).unwrap();
        let set: HashSet<_> = plan.flips().map(|f| (f.va, f.bit)).collect();
        assert_eq!(set.len(), 500);
        assert!(plan.flips().all(|f| map.roi.contains(f.va)));
    }
}
