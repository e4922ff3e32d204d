//! Virtual region of interest and its mapping onto physical blocks.

use crate::rng::{rng_from_seed, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrError {
    #[error("region of interest must be non-empty")]
    EmptyRoi,
    #[error("region of interest {start:#x}+{size} overflows the address width")]
    Overflow { start: u64, size: u64 },
    #[error("virtual address {0:#x} is outside the region of interest")]
    OutsideRoi(u64),
    #[error("page translation failed for {va:#x}: {reason}")]
    Translation { va: u64, reason: String },
    #[error("physical blocks overlap at {0:#x}")]
    Overlap(u64),
    #[error("synthetic allocator out of free frames")]
    OutOfFrames,
    #[error("invalid allocator config: {0}")]
    InvalidConfig(String),
    #[error("{0} is not supported on this platform")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub start: u64,
    pub size: u64,
}

impl Roi {
    pub fn new(start: u64, size: u64) -> Result<Self, AddrError> {
        if size == 0 {
            return Err(AddrError::EmptyRoi);
        }
        if start.checked_add(size).is_none() {
            return Err(AddrError::Overflow { start, size });
        }
        Ok(Roi { start, size })
    }

    /// One past the last byte.
    pub fn end(&self) -> u64 {
        self.start + self.size
    }

    pub fn contains(&self, va: u64) -> bool {
        va >= self.start && va < self.end()
    }

    pub fn contains_roi(&self, other: &Roi) -> bool {
        other.start >= self.start && other.end() <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPair {
    pub virtual_base: u64,
    pub physical_base: u64,
    pub length: u64,
}

/// Answers which physical page backs a virtual page.
pub trait PageMapProvider {
    fn page_size(&self) -> u64;

    /// Physical base address of the frame backing the page that contains `va`.
    fn frame_of(&mut self, va: u64) -> Result<u64, AddrError>;
}

/// Virtually ordered, physically disjoint blocks tiling a ROI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBlockMap")]
pub struct BlockMap {
    pub roi: Roi,
    pub page_size: u64,
    pub pairs: Vec<BlockPair>,
    #[serde(skip)]
    by_phys: Vec<usize>,
}

#[derive(Deserialize)]
struct RawBlockMap {
    roi: Roi,
    page_size: u64,
    pairs: Vec<BlockPair>,
}

impl TryFrom<RawBlockMap> for BlockMap {
    type Error = AddrError;

    fn try_from(r: RawBlockMap) -> Result<Self, AddrError> {
        BlockMap::from_pairs(r.roi, r.page_size, r.pairs)
    }
}

impl BlockMap {
    /// Validates and indexes an explicit list of pairs.
    pub fn from_pairs(roi: Roi, page_size: u64, pairs: Vec<BlockPair>) -> Result<Self, AddrError> {
        let mut next = roi.start;
        for p in &pairs {
            if p.virtual_base != next || p.length == 0 {
                return Err(AddrError::Translation {
                    va: next,
                    reason: "block pairs do not tile the region".into(),
                });
            }
            if p.physical_base.checked_add(p.length).is_none() {
                return Err(AddrError::Overflow { start: p.physical_base, size: p.length });
            }
            next += p.length;
        }
        if next != roi.end() {
            return Err(AddrError::Translation { va: next, reason: "block pairs do not tile the region".into() });
        }
        let mut by_phys: Vec<usize> = (0..pairs.len()).collect();
        by_phys.sort_by_key(|&i| pairs[i].physical_base);
        for w in by_phys.windows(2) {
            let (a, b) = (&pairs[w[0]], &pairs[w[1]]);
            if a.physical_base + a.length > b.physical_base {
                return Err(AddrError::Overlap(b.physical_base));
            }
        }
        Ok(BlockMap { roi, page_size, pairs, by_phys })
    }

    /// The whole ROI backed by one physically contiguous block.
    pub fn contiguous(roi: Roi, physical_base: u64, page_size: u64) -> Result<Self, AddrError> {
        Self::from_pairs(roi, page_size, vec![BlockPair { virtual_base: roi.start, physical_base, length: roi.size }])
    }

    fn pair_of_va(&self, va: u64) -> Option<&BlockPair> {
        let i = self.pairs.partition_point(|p| p.virtual_base <= va);
        let p = self.pairs.get(i.checked_sub(1)?)?;
        (va < p.virtual_base + p.length).then_some(p)
    }

    pub fn virt_to_phys(&self, va: u64) -> Result<u64, AddrError> {
        if !self.roi.contains(va) {
            return Err(AddrError::OutsideRoi(va));
        }
        let p = self.pair_of_va(va).ok_or(AddrError::OutsideRoi(va))?;
        Ok(p.physical_base + (va - p.virtual_base))
    }

    pub fn phys_to_virt(&self, pa: u64) -> Option<u64> {
        let i = self.by_phys.partition_point(|&k| self.pairs[k].physical_base <= pa);
        let p = &self.pairs[self.by_phys[i.checked_sub(1)?]];
        (pa < p.physical_base + p.length).then(|| p.virtual_base + (pa - p.physical_base))
    }

    /// Lowest and highest physical byte backing `region` (a sub-range of the ROI).
    pub fn physical_extremes(&self, region: &Roi) -> Result<(u64, u64), AddrError> {
        if !self.roi.contains_roi(region) {
            return Err(AddrError::OutsideRoi(region.start));
        }
        let mut lo = u64::MAX;
        let mut hi = 0;
        for p in &self.pairs {
            let s = p.virtual_base.max(region.start);
            let e = (p.virtual_base + p.length).min(region.end());
            if s < e {
                lo = lo.min(p.physical_base + (s - p.virtual_base));
                hi = hi.max(p.physical_base + (e - 1 - p.virtual_base));
            }
        }
        Ok((lo, hi))
    }
}

/// Walks every page of `roi`, asks `provider` for its frame and coalesces
/// physically consecutive pages into blocks.
pub fn build_block_map(roi: Roi, provider: &mut dyn PageMapProvider) -> Result<BlockMap, AddrError> {
    let ps = provider.page_size();
    let mut pairs: Vec<BlockPair> = Vec::new();
    let mut va = roi.start;
    while va < roi.end() {
        let page_end = (va / ps + 1).saturating_mul(ps).min(roi.end());
        let pa = provider.frame_of(va)? + va % ps;
        let len = page_end - va;
        match pairs.last_mut() {
            Some(last) if last.physical_base + last.length == pa => last.length += len,
            _ => pairs.push(BlockPair { virtual_base: va, physical_base: pa, length: len }),
        }
        va = page_end;
    }
    BlockMap::from_pairs(roi, ps, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAllocatorConfig {
    pub fragmentation_prob: f64,
    pub physical_space: u64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_page")]
    pub page_size: u64,
}

fn default_page() -> u64 {
    4096
}

/// Deterministic stand-in for a kernel frame allocator.
///
/// Pages are allocated in the order they are first asked for. The first frame
/// is uniform over the physical space. Each later page takes the frame right
/// after the previous one with probability `1 - fragmentation_prob` (if free);
/// otherwise it takes a uniformly chosen free frame none of whose neighbours
/// is in use, so it is never adjacent to any earlier allocation.
#[derive(Debug, Clone)]
pub struct SyntheticAllocator {
    cfg: SyntheticAllocatorConfig,
    frames: u64,
    rng: Rng,
    used: HashSet<u64>,
    assigned: HashMap<u64, u64>,
    last: Option<u64>,
}

impl SyntheticAllocator {
    pub fn new(cfg: SyntheticAllocatorConfig) -> Result<Self, AddrError> {
        if !(0.0..=1.0).contains(&cfg.fragmentation_prob) {
            return Err(AddrError::InvalidConfig(format!(
                "fragmentation_prob {} outside [0, 1]",
                cfg.fragmentation_prob
            )));
        }
        if cfg.page_size == 0 || cfg.physical_space < cfg.page_size {
            return Err(AddrError::InvalidConfig("physical space smaller than one page".into()));
        }
        Ok(SyntheticAllocator {
            frames: cfg.physical_space / cfg.page_size,
            rng: rng_from_seed(cfg.rng_seed),
            cfg,
            used: HashSet::new(),
            assigned: HashMap::new(),
            last: None,
        })
    }

    fn isolated(&self, f: u64) -> bool {
        !self.used.contains(&f)
            && (f == 0 || !self.used.contains(&(f - 1)))
            && !self.used.contains(&(f + 1))
    }

    fn random_isolated(&mut self) -> Option<u64> {
        for _ in 0..64 {
            let f = self.rng.random_range(0..self.frames);
            if self.isolated(f) {
                return Some(f);
            }
        }
        let start = self.rng.random_range(0..self.frames);
        (0..self.frames)
            .map(|k| (start + k) % self.frames)
            .find(|&f| self.isolated(f))
            .or_else(|| (0..self.frames).map(|k| (start + k) % self.frames).find(|f| !self.used.contains(f)))
    }

    fn allocate(&mut self) -> Result<u64, AddrError> {
        let follow = self.rng.random::<f64>() >= self.cfg.fragmentation_prob;
        let f = match self.last {
            Some(prev) if follow && prev + 1 < self.frames && !self.used.contains(&(prev + 1)) => prev + 1,
            _ => self.random_isolated().ok_or(AddrError::OutOfFrames)?,
        };
        self.used.insert(f);
        self.last = Some(f);
        Ok(f)
    }
}

impl PageMapProvider for SyntheticAllocator {
    fn page_size(&self) -> u64 {
        self.cfg.page_size
    }

    fn frame_of(&mut self, va: u64) -> Result<u64, AddrError> {
        let vpn = va / self.cfg.page_size;
        if let Some(&f) = self.assigned.get(&vpn) {
            return Ok(f * self.cfg.page_size);
        }
        let f = self.allocate()?;
        self.assigned.insert(vpn, f);
        Ok(f * self.cfg.page_size)
    }
}

/// Reads this process's own page table through `/proc/self/pagemap`.
///
/// Frame numbers are only visible with `CAP_SYS_ADMIN`; without it the
/// kernel reports frame 0, which is treated as a translation error.
#[cfg(target_os = "linux")]
pub struct OsPagemapProvider {
    file: std::fs::File,
    page_size: u64,
}

#[cfg(target_os = "linux")]
impl OsPagemapProvider {
    pub fn open() -> Result<Self, AddrError> {
        let file = std::fs::File::open("/proc/self/pagemap").map_err(|e| AddrError::Translation {
            va: 0,
            reason: format!("open /proc/self/pagemap: {e}"),
        })?;
        // SAFETY: sysconf has no preconditions.
        let ps = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if ps <= 0 {
            return Err(AddrError::Unsupported("querying the page size"));
        }
        Ok(OsPagemapProvider { file, page_size: ps as u64 })
    }
}

#[cfg(target_os = "linux")]
impl PageMapProvider for OsPagemapProvider {
    fn page_size(&self) -> u64 {
        self.page_size
    }

    fn frame_of(&mut self, va: u64) -> Result<u64, AddrError> {
        use std::os::unix::fs::FileExt;
        let mut entry = [0u8; 8];
        self.file
            .read_exact_at(&mut entry, (va / self.page_size) * 8)
            .map_err(|e| AddrError::Translation { va, reason: e.to_string() })?;
        let e = u64::from_le_bytes(entry);
        if e >> 63 == 0 {
            return Err(AddrError::Translation { va, reason: "page not present".into() });
        }
        let pfn = e & ((1u64 << 55) - 1);
        if pfn == 0 {
            return Err(AddrError::Translation { va, reason: "frame number hidden (needs CAP_SYS_ADMIN)".into() });
        }
        Ok(pfn * self.page_size)
    }
}

/// Placeholder on platforms without a pagemap interface.
#[cfg(not(target_os = "linux"))]
pub struct OsPagemapProvider;

#[cfg(not(target_os = "linux"))]
impl OsPagemapProvider {
    pub fn open() -> Result<Self, AddrError> {
        Err(AddrError::Unsupported("the OS pagemap provider"))
    }
}

#[cfg(not(target_os = "linux"))]
impl PageMapProvider for OsPagemapProvider {
    fn page_size(&self) -> u64 {
        4096
    }

    fn frame_of(&mut self, _va: u64) -> Result<u64, AddrError> {
        Err(AddrError::Unsupported("the OS pagemap provider"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alloc(p: f64, seed: u64) -> SyntheticAllocator {
        SyntheticAllocator::new(SyntheticAllocatorConfig {
            fragmentation_prob: p,
            physical_space: 1 << 24,
            rng_seed: seed,
            page_size: 4096,
        })
        .unwrap()
    }

    #[test]
    fn one_page_roi_is_one_block() {
        let roi = Roi::new(0x10000, 4096).unwrap();
        let m = build_block_map(roi, &mut alloc(0.5, 1)).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].length, 4096);
    }

    #[test]
    fn unfragmented_is_single_block() {
        let roi = Roi::new(0x40000, 8 * 4096).unwrap();
        let m = build_block_map(roi, &mut alloc(0.0, 2)).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].length, 8 * 4096);
    }

    #[test]
    fn fully_fragmented_frames_are_non_adjacent() {
        let roi = Roi::new(0x40000, 8 * 4096).unwrap();
        let m = build_block_map(roi, &mut alloc(1.0, 3)).unwrap();
        assert_eq!(m.pairs.len(), 8);
        let frames: Vec<u64> = m.pairs.iter().map(|p| p.physical_base / 4096).collect();
        for (i, a) in frames.iter().enumerate() {
            for b in &frames[i + 1..] {
                assert!(a.abs_diff(*b) > 1, "{frames:?}");
            }
        }
    }

    #[test]
    fn unaligned_roi_keeps_offsets() {
        let roi = Roi::new(0x1000 + 100, 3 * 4096).unwrap();
        let m = build_block_map(roi, &mut alloc(1.0, 4)).unwrap();
        assert_eq!(m.pairs.first().unwrap().physical_base % 4096, 100);
        for va in [roi.start, roi.start + 5000, roi.end() - 1] {
            assert_eq!(m.virt_to_phys(va).unwrap() % 4096, va % 4096);
        }
    }

    #[test]
    fn lookup_edges() {
        let roi = Roi::new(0x8000, 2 * 4096).unwrap();
        let m = build_block_map(roi, &mut alloc(1.0, 5)).unwrap();
        let p0 = m.pairs[0];
        assert_eq!(m.virt_to_phys(roi.start).unwrap(), p0.physical_base);
        assert_eq!(m.phys_to_virt(p0.physical_base + p0.length - 1), Some(p0.virtual_base + p0.length - 1));
        assert_eq!(m.phys_to_virt(u64::MAX), None);
        assert!(matches!(m.virt_to_phys(roi.end()), Err(AddrError::OutsideRoi(_))));
    }

    #[test]
    fn overlapping_pairs_rejected() {
        let roi = Roi::new(0, 8192).unwrap();
        let pairs = vec![
            BlockPair { virtual_base: 0, physical_base: 4096, length: 4096 },
            BlockPair { virtual_base: 4096, physical_base: 6000, length: 4096 },
        ];
        assert!(matches!(BlockMap::from_pairs(roi, 4096, pairs), Err(AddrError::Overlap(_))));
    }

    #[test]
    fn allocator_is_deterministic() {
        let roi = Roi::new(0, 16 * 4096).unwrap();
        let a = build_block_map(roi, &mut alloc(0.3, 9)).unwrap();
        let b = build_block_map(roi, &mut alloc(0.3, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_roi() {
        assert_eq!(Roi::new(5, 0), Err(AddrError::EmptyRoi));
        assert!(Roi::new(u64::MAX, 2).is_err());
    }
}
