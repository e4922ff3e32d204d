//! DRAM geometry and physical-address ↔ cell-coordinate mapping.
//!
//! A physical byte address is split into a data-block offset (the bits below
//! the lowest addressing bit) and per-level index fields. Interleaving schemes
//! additionally XOR some field bits with low column bits. Both directions are
//! expressed as a square matrix over GF(2): decoding multiplies the address
//! bit-vector by the matrix, encoding by its inverse. A layout that is not
//! invertible is rejected when the map is built.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DramError {
    #[error("{field} must be a power of two >= 1, got {value}")]
    NotPowerOfTwo { field: &'static str, value: u64 },
    #[error("device capacity exceeds a 64-bit byte address space")]
    CapacityOverflow,
    #[error("physical address {pa:#x} outside device of {capacity_bytes} bytes")]
    AddressOutOfRange { pa: u64, capacity_bytes: u64 },
    #[error("cell coordinate out of bounds: {0}")]
    CellOutOfBounds(String),
    #[error("invalid address layout: {0}")]
    InvalidLayout(String),
    #[error("address mapping is not invertible")]
    SingularMapping,
    #[error("inverted address range: min {min:#x} > max {max:#x}")]
    InvertedRange { min: u64, max: u64 },
    #[error("unknown addressing scheme {0:?}")]
    UnknownScheme(String),
}

/// One level of the DRAM hierarchy that owns address bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Channel,
    Rank,
    Bank,
    Row,
    Column,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::Channel, Level::Rank, Level::Bank, Level::Row, Level::Column];

    fn idx(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::Channel => "channel",
            Level::Rank => "rank",
            Level::Bank => "bank",
            Level::Row => "row",
            Level::Column => "column",
        };
        f.write_str(s)
    }
}

fn default_page_size() -> u64 {
    4096
}

/// Device geometry (the "DRAM standard").
///
/// In this model one column location holds a whole burst data block of
/// `burst_length × channel_width` bits, so address layouts only validate when
/// `dq_width` equals that product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramConfig {
    pub channels: u64,
    pub ranks: u64,
    pub banks: u64,
    pub rows: u64,
    pub columns: u64,
    /// Bits stored per (channel, rank, bank, row, column) location.
    pub dq_width: u64,
    pub channel_width: u64,
    pub burst_length: u64,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
}

impl DramConfig {
    /// Scaled-down device small enough for exhaustive sweeps (2 MiB).
    pub fn scaled() -> Self {
        DramConfig {
            channels: 2,
            ranks: 1,
            banks: 4,
            rows: 1 << 7,
            columns: 1 << 7,
            dq_width: 128,
            channel_width: 8,
            burst_length: 16,
            page_size: 4096,
        }
    }

    /// Short-row device used by default for campaigns (1 MiB). A 4 KiB page
    /// holds two full rows, so two-row upsets can land inside a small ROI.
    pub fn compact_rows() -> Self {
        DramConfig {
            rows: 1 << 9,
            columns: 1 << 4,
            ..Self::scaled()
        }
    }

    /// 8 GiB, 128-bit LPDDR4-like part with BL16 data blocks.
    pub fn lpddr4_8gb() -> Self {
        DramConfig {
            channels: 8,
            ranks: 1,
            banks: 8,
            rows: 1 << 16,
            columns: 1 << 7,
            dq_width: 128,
            channel_width: 8,
            burst_length: 16,
            page_size: 4096,
        }
    }

    pub fn count(&self, level: Level) -> u64 {
        match level {
            Level::Channel => self.channels,
            Level::Rank => self.ranks,
            Level::Bank => self.banks,
            Level::Row => self.rows,
            Level::Column => self.columns,
        }
    }

    pub fn validate(&self) -> Result<(), DramError> {
        let fields: [(&'static str, u64); 9] = [
            ("channels", self.channels),
            ("ranks", self.ranks),
            ("banks", self.banks),
            ("rows", self.rows),
            ("columns", self.columns),
            ("dq_width", self.dq_width),
            ("channel_width", self.channel_width),
            ("burst_length", self.burst_length),
            ("page_size", self.page_size),
        ];
        for (field, value) in fields {
            if value == 0 || !value.is_power_of_two() {
                return Err(DramError::NotPowerOfTwo { field, value });
            }
        }
        if self.block_bits() < 8 {
            return Err(DramError::InvalidLayout(
                "burst_length x channel_width must cover at least one byte".into(),
            ));
        }
        if capacity(self) / 8 > u128::from(u64::MAX) {
            return Err(DramError::CapacityOverflow);
        }
        Ok(())
    }

    /// Bits in one burst data block (`burst_length × channel_width`).
    pub fn block_bits(&self) -> u64 {
        self.burst_length * self.channel_width
    }

    pub fn block_bytes(&self) -> u64 {
        self.block_bits() / 8
    }

    pub fn capacity_bytes(&self) -> u64 {
        (capacity(self) / 8) as u64
    }
}

/// Total device capacity in bits.
pub fn capacity(cfg: &DramConfig) -> u128 {
    [cfg.channels, cfg.ranks, cfg.banks, cfg.rows, cfg.columns, cfg.dq_width]
        .iter()
        .map(|&c| u128::from(c))
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    S1,
    S2,
    S3,
}

impl SchemeId {
    pub const ALL: [SchemeId; 3] = [SchemeId::S1, SchemeId::S2, SchemeId::S3];
}

impl FromStr for SchemeId {
    type Err = DramError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(SchemeId::S1),
            "s2" => Ok(SchemeId::S2),
            "s3" => Ok(SchemeId::S3),
            _ => Err(DramError::UnknownScheme(s.to_string())),
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Inclusive range of physical-address bits owned by `level`. Several ranges
/// for the same level concatenate, least significant first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldRange {
    pub level: Level,
    pub low: u32,
    pub high: u32,
}

/// `addr[target_low..=target_high] ^= addr[source_low..=source_high]` when
/// forming the `target` level index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct XorFunction {
    pub target: Level,
    pub source_low: u32,
    pub source_high: u32,
    pub target_low: u32,
    pub target_high: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressScheme {
    pub scheme_id: SchemeId,
    pub field_layout: Vec<FieldRange>,
    #[serde(default)]
    pub xor_functions: Vec<XorFunction>,
}

impl AddressScheme {
    /// The documented default layouts.
    ///
    /// Fields are stacked upward from the lowest addressing bit in the order
    /// column, bank, channel, rank, row. S2 XORs the bank field with the low
    /// column bits; S3 does the same to the channel field. The XOR width is
    /// the target field width, capped at three bits and at the column width.
    pub fn standard(id: SchemeId, cfg: &DramConfig) -> Result<Self, DramError> {
        cfg.validate()?;
        let mut pos = cfg.block_bytes().trailing_zeros();
        let mut field_layout = Vec::new();
        let mut low_of = [0u32; 5];
        let mut width_of = [0u32; 5];
        for level in [Level::Column, Level::Bank, Level::Channel, Level::Rank, Level::Row] {
            let width = cfg.count(level).trailing_zeros();
            low_of[level.idx()] = pos;
            width_of[level.idx()] = width;
            if width > 0 {
                field_layout.push(FieldRange { level, low: pos, high: pos + width - 1 });
            }
            pos += width;
        }
        let target = match id {
            SchemeId::S1 => None,
            SchemeId::S2 => Some(Level::Bank),
            SchemeId::S3 => Some(Level::Channel),
        };
        let mut xor_functions = Vec::new();
        if let Some(target) = target {
            let width = width_of[target.idx()].min(width_of[Level::Column.idx()]).min(3);
            if width > 0 {
                let src = low_of[Level::Column.idx()];
                let dst = low_of[target.idx()];
                xor_functions.push(XorFunction {
                    target,
                    source_low: src,
                    source_high: src + width - 1,
                    target_low: dst,
                    target_high: dst + width - 1,
                });
            }
        }
        Ok(AddressScheme { scheme_id: id, field_layout, xor_functions })
    }
}

/// On-disk form of `dram_mapping.json`. When `field_layout` is omitted the
/// standard layout for `scheme_id` is generated from the device geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub scheme_id: SchemeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_layout: Option<Vec<FieldRange>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xor_functions: Option<Vec<XorFunction>>,
}

impl MappingConfig {
    pub fn resolve(&self, cfg: &DramConfig) -> Result<AddressScheme, DramError> {
        match &self.field_layout {
            None => {
                let mut scheme = AddressScheme::standard(self.scheme_id, cfg)?;
                if let Some(x) = &self.xor_functions {
                    scheme.xor_functions = x.clone();
                }
                Ok(scheme)
            }
            Some(layout) => Ok(AddressScheme {
                scheme_id: self.scheme_id,
                field_layout: layout.clone(),
                xor_functions: self.xor_functions.clone().unwrap_or_default(),
            }),
        }
    }
}

/// A single DRAM cell, down to the bit inside its burst data block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellCoord {
    pub channel: u64,
    pub rank: u64,
    pub bank: u64,
    pub row: u64,
    pub column: u64,
    pub bit_in_block: u32,
}

impl CellCoord {
    pub fn level(&self, level: Level) -> u64 {
        match level {
            Level::Channel => self.channel,
            Level::Rank => self.rank,
            Level::Bank => self.bank,
            Level::Row => self.row,
            Level::Column => self.column,
        }
    }

    pub fn set_level(&mut self, level: Level, value: u64) {
        match level {
            Level::Channel => self.channel = value,
            Level::Rank => self.rank = value,
            Level::Bank => self.bank = value,
            Level::Row => self.row = value,
            Level::Column => self.column = value,
        }
    }

    /// Same channel, rank and bank.
    pub fn same_array(&self, other: &CellCoord) -> bool {
        self.channel == other.channel && self.rank == other.rank && self.bank == other.bank
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub min: u64,
    pub max: u64,
}

impl IndexRange {
    pub fn contains(&self, v: u64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn len(&self) -> u64 {
        self.max - self.min + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_singleton(&self) -> bool {
        self.min == self.max
    }
}

/// Per-level index ranges reachable from a physical address interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpan {
    pub channel: IndexRange,
    pub rank: IndexRange,
    pub bank: IndexRange,
    pub row: IndexRange,
    pub column: IndexRange,
}

impl LevelSpan {
    pub fn get(&self, level: Level) -> IndexRange {
        match level {
            Level::Channel => self.channel,
            Level::Rank => self.rank,
            Level::Bank => self.bank,
            Level::Row => self.row,
            Level::Column => self.column,
        }
    }

    pub fn contains(&self, cell: &CellCoord) -> bool {
        Level::ALL.iter().all(|&l| self.get(l).contains(cell.level(l)))
    }
}

/// A validated (geometry, scheme) pair with precomputed GF(2) matrices.
#[derive(Debug, Clone)]
pub struct DramMap {
    cfg: DramConfig,
    scheme: AddressScheme,
    offset_bits: u32,
    capacity_bytes: u64,
    /// Raw address bit positions per level, least significant first.
    positions: [Vec<u32>; 5],
    /// Decode row (mask over address bits) per level bit.
    decode_rows: [Vec<u64>; 5],
    /// Inverse matrix: address bit `i` = parity(encode_rows[i] & raw).
    encode_rows: Vec<u64>,
}

fn parity(x: u64) -> u64 {
    u64::from(x.count_ones() & 1)
}

impl DramMap {
    pub fn new(cfg: &DramConfig, scheme: &AddressScheme) -> Result<Self, DramError> {
        cfg.validate()?;
        let offset_bits = cfg.block_bytes().trailing_zeros();
        let capacity_bytes = cfg.capacity_bytes();
        let addr_bits = capacity_bytes.trailing_zeros();

        let mut positions: [Vec<u32>; 5] = Default::default();
        let mut owner: Vec<Option<Level>> = vec![None; addr_bits as usize];
        for f in &scheme.field_layout {
            if f.low > f.high || f.high >= addr_bits {
                return Err(DramError::InvalidLayout(format!(
                    "{} field a{}..a{} outside address bits a0..a{}",
                    f.level,
                    f.low,
                    f.high,
                    addr_bits.saturating_sub(1)
                )));
            }
            for p in f.low..=f.high {
                if p < offset_bits {
                    return Err(DramError::InvalidLayout(format!(
                        "{} field uses a{p}, below the lowest addressing bit a{offset_bits}",
                        f.level
                    )));
                }
                if let Some(prev) = owner[p as usize] {
                    return Err(DramError::InvalidLayout(format!(
                        "address bit a{p} claimed by both {prev} and {}",
                        f.level
                    )));
                }
                owner[p as usize] = Some(f.level);
                positions[f.level.idx()].push(p);
            }
        }
        for p in offset_bits..addr_bits {
            if owner[p as usize].is_none() {
                return Err(DramError::InvalidLayout(format!("address bit a{p} is not assigned to any level")));
            }
        }
        for level in Level::ALL {
            let want = cfg.count(level).trailing_zeros() as usize;
            let got = positions[level.idx()].len();
            if want != got {
                return Err(DramError::InvalidLayout(format!(
                    "{level} field has {got} bits but the device has {} {level}s",
                    cfg.count(level)
                )));
            }
        }

        // Matrix rows, one per address bit: raw = M · addr.
        let mut rows: Vec<u64> = (0..addr_bits).map(|p| 1u64 << p).collect();
        for x in &scheme.xor_functions {
            if x.source_low > x.source_high || x.target_low > x.target_high {
                return Err(DramError::InvalidLayout("inverted XOR bit range".into()));
            }
            if x.source_high - x.source_low != x.target_high - x.target_low {
                return Err(DramError::InvalidLayout("XOR source and target widths differ".into()));
            }
            if x.source_high >= addr_bits || x.source_low < offset_bits {
                return Err(DramError::InvalidLayout("XOR source outside addressing bits".into()));
            }
            for t in 0..=(x.target_high - x.target_low) {
                let dst = x.target_low + t;
                if dst >= addr_bits || owner[dst as usize] != Some(x.target) {
                    return Err(DramError::InvalidLayout(format!(
                        "XOR target a{dst} is not a {} bit",
                        x.target
                    )));
                }
                rows[dst as usize] ^= 1u64 << (x.source_low + t);
            }
        }
        let encode_rows = invert_gf2(&rows).ok_or(DramError::SingularMapping)?;
        let mut decode_rows: [Vec<u64>; 5] = Default::default();
        for level in Level::ALL {
            decode_rows[level.idx()] = positions[level.idx()].iter().map(|&p| rows[p as usize]).collect();
        }
        Ok(DramMap {
            cfg: *cfg,
            scheme: scheme.clone(),
            offset_bits,
            capacity_bytes,
            positions,
            decode_rows,
            encode_rows,
        })
    }

    pub fn standard(cfg: &DramConfig, id: SchemeId) -> Result<Self, DramError> {
        Self::new(cfg, &AddressScheme::standard(id, cfg)?)
    }

    pub fn config(&self) -> &DramConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> &AddressScheme {
        &self.scheme
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Decodes a byte address. `bit_in_block` points at bit 0 of that byte.
    pub fn decode(&self, pa: u64) -> Result<CellCoord, DramError> {
        self.decode_bit(pa, 0)
    }

    /// Decodes one bit of a byte address.
    pub fn decode_bit(&self, pa: u64, bit: u8) -> Result<CellCoord, DramError> {
        if pa >= self.capacity_bytes {
            return Err(DramError::AddressOutOfRange { pa, capacity_bytes: self.capacity_bytes });
        }
        if bit >= 8 {
            return Err(DramError::CellOutOfBounds(format!("bit {bit} of a byte")));
        }
        let offset = pa & ((1u64 << self.offset_bits) - 1);
        let mut cell = CellCoord { bit_in_block: (offset * 8) as u32 + u32::from(bit), ..Default::default() };
        for level in Level::ALL {
            let mut v = 0u64;
            for (j, &row) in self.decode_rows[level.idx()].iter().enumerate() {
                v |= parity(pa & row) << j;
            }
            cell.set_level(level, v);
        }
        Ok(cell)
    }

    pub fn check_cell(&self, cell: &CellCoord) -> Result<(), DramError> {
        for level in Level::ALL {
            if cell.level(level) >= self.cfg.count(level) {
                return Err(DramError::CellOutOfBounds(format!(
                    "{level} {} >= {}",
                    cell.level(level),
                    self.cfg.count(level)
                )));
            }
        }
        if u64::from(cell.bit_in_block) >= self.cfg.block_bits() {
            return Err(DramError::CellOutOfBounds(format!(
                "bit_in_block {} >= {}",
                cell.bit_in_block,
                self.cfg.block_bits()
            )));
        }
        Ok(())
    }

    /// Byte address holding `cell`; the bit inside that byte is
    /// `cell.bit_in_block % 8`.
    pub fn encode(&self, cell: &CellCoord) -> Result<u64, DramError> {
        self.check_cell(cell)?;
        let mut raw = u64::from(cell.bit_in_block / 8);
        for level in Level::ALL {
            let v = cell.level(level);
            for (j, &p) in self.positions[level.idx()].iter().enumerate() {
                raw |= ((v >> j) & 1) << p;
            }
        }
        let mut pa = 0u64;
        for (i, &row) in self.encode_rows.iter().enumerate() {
            pa |= parity(raw & row) << i;
        }
        Ok(pa)
    }

    /// Bit-exact inverse of [`DramMap::decode_bit`].
    pub fn encode_bit(&self, cell: &CellCoord) -> Result<(u64, u8), DramError> {
        Ok((self.encode(cell)?, (cell.bit_in_block % 8) as u8))
    }

    /// Per-level index ranges reached by any byte address in `[pa_min, pa_max]`.
    /// Every range is exact (tight) in both bounds.
    pub fn level_span(&self, pa_min: u64, pa_max: u64) -> Result<LevelSpan, DramError> {
        if pa_min > pa_max {
            return Err(DramError::InvertedRange { min: pa_min, max: pa_max });
        }
        if pa_max >= self.capacity_bytes {
            return Err(DramError::AddressOutOfRange { pa: pa_max, capacity_bytes: self.capacity_bytes });
        }
        let mut ranges = [IndexRange { min: u64::MAX, max: 0 }; 5];
        for (base, k) in aligned_blocks(pa_min, pa_max) {
            let free = if k >= 64 { u64::MAX } else { (1u64 << k) - 1 };
            for level in Level::ALL {
                let rows = &self.decode_rows[level.idx()];
                let consts: Vec<bool> = rows.iter().map(|&r| parity(r & base & !free) == 1).collect();
                let vars: Vec<u64> = rows.iter().map(|&r| r & free).collect();
                let lo = affine_extreme(&consts, &vars, false);
                let hi = affine_extreme(&consts, &vars, true);
                let r = &mut ranges[level.idx()];
                r.min = r.min.min(lo);
                r.max = r.max.max(hi);
            }
        }
        Ok(LevelSpan {
            channel: ranges[Level::Channel.idx()],
            rank: ranges[Level::Rank.idx()],
            bank: ranges[Level::Bank.idx()],
            row: ranges[Level::Row.idx()],
            column: ranges[Level::Column.idx()],
        })
    }
}

pub fn decode_address(pa: u64, cfg: &DramConfig, scheme: &AddressScheme) -> Result<CellCoord, DramError> {
    DramMap::new(cfg, scheme)?.decode(pa)
}

pub fn encode_cell(cell: &CellCoord, cfg: &DramConfig, scheme: &AddressScheme) -> Result<u64, DramError> {
    DramMap::new(cfg, scheme)?.encode(cell)
}

pub fn level_span(pa_min: u64, pa_max: u64, cfg: &DramConfig, scheme: &AddressScheme) -> Result<LevelSpan, DramError> {
    DramMap::new(cfg, scheme)?.level_span(pa_min, pa_max)
}

/// Gauss-Jordan inversion of a square GF(2) matrix given as row bitsets.
fn invert_gf2(rows: &[u64]) -> Option<Vec<u64>> {
    let n = rows.len();
    let mut a = rows.to_vec();
    let mut inv: Vec<u64> = (0..n).map(|i| 1u64 << i).collect();
    for col in 0..n {
        let bit = 1u64 << col;
        let pivot = (col..n).find(|&r| a[r] & bit != 0)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        for r in 0..n {
            if r != col && a[r] & bit != 0 {
                a[r] ^= a[col];
                inv[r] ^= inv[col];
            }
        }
    }
    Some(inv)
}

/// Splits `[lo, hi]` into maximal naturally aligned power-of-two blocks,
/// returned as `(base, log2(size))`.
fn aligned_blocks(lo: u64, hi: u64) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    let mut cur = lo;
    loop {
        let mut k = if cur == 0 { 63 } else { cur.trailing_zeros().min(63) };
        while k > 0 && cur.checked_add((1u64 << k) - 1).is_none_or(|end| end > hi) {
            k -= 1;
        }
        out.push((cur, k));
        let end = cur + ((1u64 << k) - 1);
        if end >= hi {
            break;
        }
        cur = end + 1;
    }
    out
}

/// Minimum or maximum of `Σ_j 2^j (c_j ⊕ <v_j, x>)` over all free-bit
/// assignments `x`, chosen greedily from the most significant bit while
/// tracking the linear constraints already committed to.
fn affine_extreme(consts: &[bool], vars: &[u64], maximize: bool) -> u64 {
    // (vector, rhs), leading bits distinct, sorted descending.
    let mut basis: Vec<(u64, bool)> = Vec::new();
    let mut value = 0u64;
    for j in (0..consts.len()).rev() {
        let mut v = vars[j];
        let mut rhs = false;
        for &(bv, br) in &basis {
            let lead = 63 - bv.leading_zeros();
            if v >> lead & 1 == 1 {
                v ^= bv;
                rhs ^= br;
            }
        }
        let bit = if v != 0 {
            let want = maximize;
            basis.push((v, want ^ consts[j] ^ rhs));
            basis.sort_by_key(|&(bv, _)| bv.leading_zeros());
            want
        } else {
            consts[j] ^ rhs
        };
        value |= u64::from(bit) << j;
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(id: SchemeId) -> DramMap {
        DramMap::standard(&DramConfig::scaled(), id).unwrap()
    }

    #[test]
    fn standard_s1_layout_matches_documented_bits() {
        let s = AddressScheme::standard(SchemeId::S1, &DramConfig::lpddr4_8gb()).unwrap();
        let find = |l| *s.field_layout.iter().find(|f| f.level == l).unwrap();
        assert_eq!((find(Level::Column).low, find(Level::Column).high), (4, 10));
        assert_eq!((find(Level::Bank).low, find(Level::Bank).high), (11, 13));
        assert_eq!((find(Level::Channel).low, find(Level::Channel).high), (14, 16));
        assert_eq!((find(Level::Row).low, find(Level::Row).high), (17, 32));
        assert!(s.xor_functions.is_empty());
    }

    #[test]
    fn zero_address_is_zero_cell() {
        for id in SchemeId::ALL {
            assert_eq!(map(id).decode(0).unwrap(), CellCoord::default());
            assert_eq!(map(id).encode(&CellCoord::default()).unwrap(), 0);
        }
    }

    #[test]
    fn out_of_range_address_rejected() {
        let m = map(SchemeId::S1);
        let cap = m.capacity_bytes();
        assert!(matches!(m.decode(cap), Err(DramError::AddressOutOfRange { .. })));
        assert!(m.decode(cap - 1).is_ok());
    }

    #[test]
    fn out_of_bounds_cell_rejected() {
        let m = map(SchemeId::S2);
        let bad = CellCoord { bank: 4, ..Default::default() };
        assert!(matches!(m.encode(&bad), Err(DramError::CellOutOfBounds(_))));
        let bad = CellCoord { bit_in_block: 128, ..Default::default() };
        assert!(matches!(m.encode(&bad), Err(DramError::CellOutOfBounds(_))));
    }

    #[test]
    fn singular_layout_rejected() {
        let cfg = DramConfig::scaled();
        let mut s = AddressScheme::standard(SchemeId::S1, &cfg).unwrap();
        // bank bit a11 XOR a11 collapses the row to zero.
        s.xor_functions.push(XorFunction {
            target: Level::Bank,
            source_low: 11,
            source_high: 11,
            target_low: 11,
            target_high: 11,
        });
        assert_eq!(DramMap::new(&cfg, &s).unwrap_err(), DramError::SingularMapping);
    }

    #[test]
    fn overlapping_fields_rejected() {
        let cfg = DramConfig::scaled();
        let mut s = AddressScheme::standard(SchemeId::S1, &cfg).unwrap();
        s.field_layout[1].low -= 1;
        assert!(matches!(DramMap::new(&cfg, &s), Err(DramError::InvalidLayout(_))));
    }

    #[test]
    fn aligned_blocks_cover_range_exactly() {
        for (lo, hi) in [(0u64, 0u64), (0, 4095), (3, 17), (4095, 4097), (1, 1 << 20)] {
            let blocks = aligned_blocks(lo, hi);
            let mut next = lo;
            for (base, k) in blocks {
                assert_eq!(base, next);
                assert_eq!(base % (1u64 << k), 0);
                next = base + (1u64 << k);
            }
            assert_eq!(next, hi + 1);
        }
    }

    #[test]
    fn affine_extreme_respects_shared_free_bit() {
        // bit0 = x, bit1 = x: only 0b00 and 0b11 reachable.
        assert_eq!(affine_extreme(&[false, false], &[1, 1], false), 0);
        assert_eq!(affine_extreme(&[false, false], &[1, 1], true), 3);
        // bit0 = x, bit1 = 1 ^ x: 0b10 or 0b01.
        assert_eq!(affine_extreme(&[false, true], &[1, 1], false), 1);
        assert_eq!(affine_extreme(&[false, true], &[1, 1], true), 2);
    }

    #[test]
    fn mapping_config_defaults_to_standard_layout() {
        let cfg = DramConfig::scaled();
        let m: MappingConfig = serde_json::from_str(r#"{"scheme_id":"S3"}"#).unwrap();
        assert_eq!(m.resolve(&cfg).unwrap(), AddressScheme::standard(SchemeId::S3, &cfg).unwrap());
    }

    #[test]
    fn scheme_id_parses_case_insensitively() {
        assert_eq!("s2".parse::<SchemeId>().unwrap(), SchemeId::S2);
        assert_eq!("S3".parse::<SchemeId>().unwrap(), SchemeId::S3);
        assert!("s4".parse::<SchemeId>().is_err());
    }
}
