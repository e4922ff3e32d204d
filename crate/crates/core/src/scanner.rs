//! Per-bit sensitivity scans, multi-round injection campaigns and the
//! metrics computed over them.
//!
//! Both procedures work on an [`EngineImage`] held in a byte buffer: they flip
//! bits in the buffer, evaluate what the engine would load from it, and flip
//! the bits back. Evaluation reuses cached clean activations, so a change in
//! layer `k` only re-runs layers `k..` (and only for samples that reached
//! layer `k` in the clean run).

use crate::addrspace::{build_block_map, AddrError, BlockMap, Roi, SyntheticAllocator, SyntheticAllocatorConfig};
use crate::dram::DramMap;
use crate::injector::{apply_flips, plan_injection_with, plan_uniform, revert, InjectError, InjectionPlan, PlanOptions};
use crate::nn::data::Dataset;
use crate::nn::engine::{EngineImage, ForwardResult, LayerRef, LayoutIndex, Region};
use crate::nn::exit::{ExitPolicy, Prediction};
use crate::nn::metrics::score;
use crate::nn::{EngineModel, NnError};
use crate::radiation::ErrorModelConfig;
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// A round (or bit) whose metric falls this many points below the clean
/// baseline counts as a model crash.
pub const CRASH_DROP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Addr(#[from] AddrError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("clean engine image does not parse: {0}")]
    Parse(#[from] crate::nn::ParseError),
    #[error("byte range {start}+{len} is outside the {image}-byte image")]
    AreaOutOfBounds { start: usize, len: usize, image: usize },
    #[error("area cannot be carried over between images: {0}")]
    AreaMismatch(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `baseline - performance >= 10`, with a little slack for float noise.
pub fn is_crash(baseline: f64, performance: f64) -> bool {
    baseline - performance >= CRASH_DROP - 1e-9
}

struct SampleCache {
    acts: Vec<Vec<f32>>,
    result: ForwardResult,
}

/// Evaluates corrupted copies of one engine against its clean run.
pub struct Evaluator<'a> {
    base: EngineModel,
    data: &'a Dataset,
    policy: ExitPolicy,
    cache: Vec<SampleCache>,
    baseline: f64,
    baseline_layers: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub performance: f64,
    pub mean_layers: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(base: EngineModel, data: &'a Dataset, policy: ExitPolicy) -> Result<Self, ScanError> {
        if data.is_empty() {
            return Err(ScanError::Empty("evaluation set"));
        }
        let cache: Vec<SampleCache> = (0..data.len())
            .map(|i| {
                let acts = base.trace(data.input(i));
                let result = base.forward(data.input(i), &policy);
                SampleCache { acts, result }
            })
            .collect();
        let preds = cache.iter().map(|c| c.result.prediction.clone()).collect();
        let baseline = score(base.task, base.classes, preds, data);
        let baseline_layers =
            cache.iter().map(|c| c.result.layers_executed).sum::<usize>() as f64 / data.len() as f64;
        Ok(Evaluator { base, data, policy, cache, baseline, baseline_layers })
    }

    pub fn base(&self) -> &EngineModel {
        &self.base
    }

    pub fn baseline(&self) -> Outcome {
        Outcome { performance: self.baseline, mean_layers: self.baseline_layers }
    }

    /// Metric of `model`, which must match the base in every layer before
    /// backbone layer `start`.
    pub fn evaluate_from(&self, model: &EngineModel, start: usize) -> Outcome {
        let mut preds: Vec<Prediction> = Vec::with_capacity(self.cache.len());
        let mut layers = 0usize;
        for c in &self.cache {
            if self.policy.enabled && c.result.exit_index <= start {
                preds.push(c.result.prediction.clone());
                layers += c.result.layers_executed;
            } else {
                let r = model.forward_from(&c.acts[start], start, &self.policy);
                layers += r.layers_executed;
                preds.push(r.prediction);
            }
        }
        Outcome {
            performance: score(model.task, model.classes, preds, self.data),
            mean_layers: layers as f64 / self.cache.len() as f64,
        }
    }

    /// Metric of an arbitrary model parsed from a corrupted image; `None`
    /// when it no longer accepts the evaluation inputs (a detectable crash,
    /// like a parse failure).
    pub fn evaluate(&self, model: &EngineModel) -> Option<Outcome> {
        if model.input != self.base.input || model.task != self.base.task || model.classes != self.base.classes {
            return None;
        }
        Some(match first_difference(&self.base, model) {
            None => self.baseline(),
            Some(start) => self.evaluate_from(model, start),
        })
    }
}

/// Earliest backbone layer from which `b` may compute differently from `a`;
/// `None` when they are identical.
pub fn first_difference(a: &EngineModel, b: &EngineModel) -> Option<usize> {
    let same_shape = a.task == b.task
        && a.classes == b.classes
        && a.input == b.input
        && a.shapes() == b.shapes()
        && a.exits.len() == b.exits.len()
        && a.exits.iter().zip(&b.exits).all(|(x, y)| x.attach == y.attach && x.layers.len() == y.layers.len());
    if !same_shape {
        return Some(0);
    }
    a.records().into_iter().filter(|&r| a.layer(r) != b.layer(r)).map(|r| a.resume_point(r)).min()
}

/// Image byte `offset` re-expressed in another image of the same backbone
/// (same region, same position inside it).
pub fn map_offset(from: &LayoutIndex, to: &LayoutIndex, offset: usize) -> Option<usize> {
    let e = from.region_at(offset)?;
    let t = to.entries.iter().find(|t| t.region == e.region && t.len == e.len)?;
    Some(t.start + offset - e.start)
}

// ---------------------------------------------------------------------------
// Sensitivity scans

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Scanned byte range; `None` means the whole image.
    pub range: Option<(usize, usize)>,
    /// Size of the stratified evaluation subset used per bit.
    pub eval_samples: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { range: None, eval_samples: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitSensitivity {
    pub offset: usize,
    pub bit: u8,
    pub performance: f64,
    pub delta: f64,
    /// The flipped image failed to parse or no longer takes the inputs;
    /// counted as performance 0.
    pub parse_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub image_len: usize,
    pub baseline: f64,
    pub eval_samples: usize,
    pub layout: LayoutIndex,
    /// Ordered by offset, then bit.
    pub bits: Vec<BitSensitivity>,
}

impl SensitivityMap {
    pub fn is_sensitive(&self, b: &BitSensitivity) -> bool {
        is_crash(self.baseline, b.performance)
    }

    pub fn sensitive_count(&self) -> usize {
        self.bits.iter().filter(|b| self.is_sensitive(b)).count()
    }

    /// Label of the component holding `offset`: `header`, `exits`, `record:r`
    /// or `params:r`.
    pub fn region_label(&self, offset: usize) -> String {
        region_label(self.layout.region_at(offset).map(|e| e.region))
    }

    /// The `window`-byte range holding the most sensitive bits, earliest on
    /// ties. Returns `(start, sensitive bits)`.
    pub fn densest_window(&self, window: usize) -> Option<(usize, usize)> {
        let (lo, hi) = self.scanned_range()?;
        self.densest_window_in(window, lo, hi)
    }

    /// [`densest_window`](Self::densest_window) restricted to `[lo, hi)`.
    pub fn densest_window_in(&self, window: usize, lo: usize, hi: usize) -> Option<(usize, usize)> {
        if window == 0 || hi < lo + window {
            return None;
        }
        let mut per_byte = vec![0usize; hi - lo];
        for b in &self.bits {
            if self.is_sensitive(b) && (lo..hi).contains(&b.offset) {
                per_byte[b.offset - lo] += 1;
            }
        }
        let mut cur: usize = per_byte[..window].iter().sum();
        let mut best = (lo, cur);
        for s in 1..=per_byte.len() - window {
            cur = cur + per_byte[s + window - 1] - per_byte[s - 1];
            if cur > best.1 {
                best = (lo + s, cur);
            }
        }
        Some(best)
    }

    fn scanned_range(&self) -> Option<(usize, usize)> {
        Some((self.bits.first()?.offset, self.bits.last()?.offset + 1))
    }

    /// One row per scanned bit.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScanError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["offset", "bit", "region", "performance", "delta", "sensitive", "parse_error"])?;
        for b in &self.bits {
            out.write_record([
                b.offset.to_string(),
                b.bit.to_string(),
                self.region_label(b.offset),
                format!("{:.4}", b.performance),
                format!("{:.4}", b.delta),
                u8::from(self.is_sensitive(b)).to_string(),
                u8::from(b.parse_error).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Page grid: each `page_size`-byte page of the image is cut into
    /// `page_rows` equal rows, one CSV row per (page, row).
    pub fn write_page_grid<W: Write>(&self, w: W, page_size: usize, page_rows: usize) -> Result<(), ScanError> {
        if page_size == 0 || page_rows == 0 || !page_size.is_multiple_of(page_rows) {
            return Err(ScanError::AreaMismatch(format!(
                "page size {page_size} does not split into {page_rows} rows"
            )));
        }
        let row_bytes = page_size / page_rows;
        let pages = self.image_len.div_ceil(page_size);
        let cells = pages * page_rows;
        let mut scanned = vec![0usize; cells];
        let mut sensitive = vec![0usize; cells];
        let mut sum = vec![0.0f64; cells];
        let mut max = vec![0.0f64; cells];
        for b in &self.bits {
            let c = b.offset / row_bytes;
            scanned[c] += 1;
            sensitive[c] += usize::from(self.is_sensitive(b));
            sum[c] += b.delta;
            max[c] = f64::max(max[c], b.delta);
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["page", "row", "byte_start", "byte_end", "bits", "sensitive_bits", "mean_delta", "max_delta"])?;
        for c in 0..cells {
            let start = c * row_bytes;
            let mean = if scanned[c] == 0 { 0.0 } else { sum[c] / scanned[c] as f64 };
            out.write_record([
                (c / page_rows).to_string(),
                (c % page_rows).to_string(),
                start.to_string(),
                (start + row_bytes).min(self.image_len.max(start)).to_string(),
                scanned[c].to_string(),
                sensitive[c].to_string(),
                format!("{mean:.4}"),
                format!("{:.4}", max[c]),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn region_label(r: Option<Region>) -> String {
    match r {
        None => "unused".into(),
        Some(Region::Header) => "header".into(),
        Some(Region::ExitTable) => "exits".into(),
        Some(Region::Record(i)) => format!("record:{i}"),
        Some(Region::Params(i)) => format!("params:{i}"),
    }
}

/// Flips every bit of the scanned range one at a time, evaluates and flips
/// it back. The image is left exactly as it was.
///
/// Parameter bits are evaluated by patching the one affected weight of the
/// parsed model; any other bit re-parses the whole image, and a parse failure
/// scores 0.
pub fn sensitivity_scan(
    image: &mut EngineImage,
    eval: &Dataset,
    policy: &ExitPolicy,
    opts: &ScanOptions,
) -> Result<SensitivityMap, ScanError> {
    let base = image.parse()?;
    let subset = eval.stratified(opts.eval_samples);
    let evaluator = Evaluator::new(base.clone(), &subset, *policy)?;
    let baseline = evaluator.baseline().performance;
    let (lo, hi) = opts.range.unwrap_or((0, image.len()));
    if lo > hi || hi > image.len() {
        return Err(ScanError::AreaOutOfBounds { start: lo, len: hi.saturating_sub(lo), image: image.len() });
    }
    let records = base.records();
    let mut patched = base.clone();
    let mut bits = Vec::with_capacity((hi - lo) * 8);
    for offset in lo..hi {
        let entry = image.layout.region_at(offset).copied();
        for bit in 0..8u8 {
            image.bytes[offset] ^= 1 << bit;
            let (performance, parse_error) = match entry.map(|e| (e.region, e.start)) {
                Some((Region::Params(r), start)) => {
                    let lref: LayerRef = records[r];
                    let j = offset - start;
                    let blob = &image.bytes[start..start + base.layer(lref).blob_len()];
                    patched.layer_mut(lref).reload_byte(blob, j);
                    let o = evaluator.evaluate_from(&patched, base.resume_point(lref));
                    *patched.layer_mut(lref) = base.layer(lref).clone();
                    (o.performance, false)
                }
                _ => match image.parse().ok().and_then(|m| evaluator.evaluate(&m)) {
                    Some(o) => (o.performance, false),
                    None => (0.0, true),
                },
            };
            image.bytes[offset] ^= 1 << bit;
            bits.push(BitSensitivity { offset, bit, performance, delta: baseline - performance, parse_error });
        }
    }
    Ok(SensitivityMap {
        image_len: image.len(),
        baseline,
        eval_samples: subset.len(),
        layout: image.layout.clone(),
        bits,
    })
}

// ---------------------------------------------------------------------------
// Campaigns

/// Where flips may land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Area {
    /// Every parameter byte.
    #[default]
    Global,
    /// The whole image, header and records included.
    Image,
    /// An explicit byte range of the image.
    Sensitive { start: usize, len: usize },
}

impl Area {
    /// `[start, end)` in image bytes.
    pub fn resolve(&self, image: &EngineImage) -> Result<(usize, usize), ScanError> {
        let (s, e) = match *self {
            Area::Global => image.params_range(),
            Area::Image => (0, image.len()),
            Area::Sensitive { start, len } => (start, start.saturating_add(len)),
        };
        if s >= e || e > image.len() {
            return Err(ScanError::AreaOutOfBounds { start: s, len: e.saturating_sub(s), image: image.len() });
        }
        Ok((s, e))
    }

    pub fn label(&self) -> String {
        match self {
            Area::Global => "global".into(),
            Area::Image => "image".into(),
            Area::Sensitive { start, len } => format!("sensitive:{start}+{len}"),
        }
    }

    /// The same bytes in another image with the same backbone.
    pub fn carry_over(&self, from: &LayoutIndex, to: &LayoutIndex) -> Result<Area, ScanError> {
        match *self {
            Area::Sensitive { start, len } => {
                let s = map_offset(from, to, start);
                let e = map_offset(from, to, start + len - 1);
                match (s, e) {
                    (Some(s), Some(e)) if e + 1 - s == len => Ok(Area::Sensitive { start: s, len }),
                    _ => Err(ScanError::AreaMismatch(format!("{start}+{len} has no counterpart"))),
                }
            }
            other => Ok(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionMode {
    /// SEU and MCU events from the error model.
    #[default]
    Correlated,
    /// The same number of independent, uniformly placed bits.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocatorSettings {
    pub fragmentation_prob: f64,
}

impl Default for AllocatorSettings {
    fn default() -> Self {
        AllocatorSettings { fragmentation_prob: 0.25 }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_base() -> u64 {
    0x7f00_0000_0000
}

fn default_budget() -> u64 {
    crate::injector::DEFAULT_RETRY_BUDGET
}

/// The campaign config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub total_bits: usize,
    pub rounds: usize,
    #[serde(default)]
    pub area: Area,
    #[serde(default)]
    pub mode: InjectionMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub allocator: AllocatorSettings,
    /// Page-aligned virtual address the image is loaded at.
    #[serde(default = "default_base")]
    pub virtual_base: u64,
    #[serde(default = "default_budget")]
    pub retry_budget: u64,
}

impl CampaignConfig {
    pub fn new(total_bits: usize, rounds: usize, area: Area) -> Self {
        CampaignConfig {
            total_bits,
            rounds,
            area,
            mode: InjectionMode::Correlated,
            seed: default_seed(),
            allocator: AllocatorSettings::default(),
            virtual_base: default_base(),
            retry_budget: default_budget(),
        }
    }
}

/// Where block maps come from.
#[derive(Debug, Clone)]
pub enum PageSource {
    /// A fresh synthetic allocation per round over the whole device.
    Synthetic,
    /// One fixed map (e.g. read from the OS); its ROI must hold the image.
    Fixed(BlockMap),
}

/// DRAM geometry, error model and page source shared by every round.
#[derive(Debug, Clone)]
pub struct Platform {
    pub dram: DramMap,
    pub error_model: ErrorModelConfig,
    pub pages: PageSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub seed: u64,
    pub bits: usize,
    pub events: usize,
    pub mcu_events: usize,
    pub performance: f64,
    pub drop: f64,
    pub crash: bool,
    pub parse_error: bool,
    pub mean_layers: f64,
    /// Earliest backbone layer touched, if any parameter changed.
    pub first_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub rounds: usize,
    pub total_bits: usize,
    pub area: String,
    pub mode: InjectionMode,
    pub baseline: f64,
    pub baseline_layers: f64,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub crash_rate: f64,
    pub mean_layers: Option<f64>,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub config: CampaignConfig,
    pub baseline: Outcome,
    pub rounds: Vec<RoundResult>,
}

impl CampaignResult {
    pub fn summary(&self) -> CampaignSummary {
        let perf: Vec<f64> = self.rounds.iter().map(|r| r.performance).collect();
        let n = perf.len();
        let mean = (n > 0).then(|| perf.iter().sum::<f64>() / n as f64);
        CampaignSummary {
            rounds: n,
            total_bits: self.config.total_bits,
            area: self.config.area.label(),
            mode: self.config.mode,
            baseline: self.baseline.performance,
            baseline_layers: self.baseline.mean_layers,
            mean,
            min: perf.iter().cloned().reduce(f64::min),
            max: perf.iter().cloned().reduce(f64::max),
            crash_rate: crash_rate(self),
            mean_layers: (n > 0).then(|| self.rounds.iter().map(|r| r.mean_layers).sum::<f64>() / n as f64),
            parse_failures: self.rounds.iter().filter(|r| r.parse_error).count(),
        }
    }

    pub fn mean_drop(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.rounds.iter().map(|r| r.drop).sum::<f64>() / self.rounds.len() as f64
    }

    pub fn write_rounds_csv<W: Write>(&self, w: W) -> Result<(), ScanError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rounds {
            out.serialize(RoundRow::from(r))?;
        }
        if self.rounds.is_empty() {
            out.write_record(ROUND_COLUMNS)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Columns of the per-round CSV.
pub const ROUND_COLUMNS: [&str; 11] = [
    "round",
    "seed",
    "bits",
    "events",
    "mcu_events",
    "performance",
    "drop",
    "crash",
    "parse_error",
    "mean_layers",
    "first_layer",
];

#[derive(Serialize)]
struct RoundRow {
    round: usize,
    seed: u64,
    bits: usize,
    events: usize,
    mcu_events: usize,
    performance: String,
    drop: String,
    crash: u8,
    parse_error: u8,
    mean_layers: String,
    first_layer: String,
}

impl From<&RoundResult> for RoundRow {
    fn from(r: &RoundResult) -> Self {
        RoundRow {
            round: r.round,
            seed: r.seed,
            bits: r.bits,
            events: r.events,
            mcu_events: r.mcu_events,
            performance: format!("{:.4}", r.performance),
            drop: format!("{:.4}", r.drop),
            crash: u8::from(r.crash),
            parse_error: u8::from(r.parse_error),
            mean_layers: format!("{:.4}", r.mean_layers),
            first_layer: r.first_layer.map_or(String::new(), |l| l.to_string()),
        }
    }
}

/// Share of rounds that crashed; 0 for an empty result.
pub fn crash_rate(result: &CampaignResult) -> f64 {
    if result.rounds.is_empty() {
        return 0.0;
    }
    result.rounds.iter().filter(|r| is_crash(result.baseline.performance, r.performance)).count() as f64
        / result.rounds.len() as f64
}

/// Block map and injection plan of round `round`, as a campaign draws them.
pub fn plan_round(
    image: &EngineImage,
    platform: &Platform,
    cfg: &CampaignConfig,
    round: usize,
) -> Result<(u64, InjectionPlan), ScanError> {
    let (lo, hi) = cfg.area.resolve(image)?;
    let seed = derive_seed(cfg.seed, round as u64);
    let map = match &platform.pages {
        PageSource::Fixed(m) => m.clone(),
        PageSource::Synthetic => {
            let roi = Roi::new(cfg.virtual_base, image.len() as u64)?;
            let mut alloc = SyntheticAllocator::new(SyntheticAllocatorConfig {
                fragmentation_prob: cfg.allocator.fragmentation_prob,
                physical_space: platform.dram.capacity_bytes(),
                rng_seed: derive_seed(seed, 1),
                page_size: platform.dram.config().page_size,
            })?;
            build_block_map(roi, &mut alloc)?
        }
    };
    if map.roi.size != image.len() as u64 {
        return Err(ScanError::AreaMismatch(format!(
            "block map covers {} bytes, image has {}",
            map.roi.size,
            image.len()
        )));
    }
    let region = Roi::new(map.roi.start + lo as u64, (hi - lo) as u64)?;
    let plan = match cfg.mode {
        InjectionMode::Correlated => plan_injection_with(
            region,
            &map,
            &platform.dram,
            &platform.error_model,
            cfg.total_bits,
            derive_seed(seed, 2),
            PlanOptions { retry_budget: cfg.retry_budget },
        )?,
        InjectionMode::Uniform => plan_uniform(region, &map, &platform.dram, cfg.total_bits, derive_seed(seed, 2))?,
    };
    Ok((seed, plan))
}

/// Runs `cfg.rounds` rounds of plan, flip, evaluate, revert on `image`.
///
/// Round `i` uses seed `derive_seed(cfg.seed, i)`: it allocates a fresh block
/// map (synthetic source), plans the flips inside the configured area, and
/// scores the engine parsed from the flipped buffer.
pub fn run_campaign(
    image: &mut EngineImage,
    eval: &Dataset,
    policy: &ExitPolicy,
    platform: &Platform,
    cfg: &CampaignConfig,
) -> Result<CampaignResult, ScanError> {
    let evaluator = Evaluator::new(image.parse()?, eval, *policy)?;
    run_campaign_with(image, &evaluator, platform, cfg)
}

/// [`run_campaign`] with a prepared evaluator (reused across campaigns on
/// the same engine).
pub fn run_campaign_with(
    image: &mut EngineImage,
    evaluator: &Evaluator,
    platform: &Platform,
    cfg: &CampaignConfig,
) -> Result<CampaignResult, ScanError> {
    let baseline = evaluator.baseline();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let (seed, plan) = plan_round(image, platform, cfg, round)?;
        let record = apply_flips(&mut image.bytes, &plan)?;
        let parsed = image.parse();
        revert(&mut image.bytes, &record);
        let (outcome, parse_error, first_layer) = match parsed.ok().and_then(|m| Some((evaluator.evaluate(&m)?, m))) {
            Some((o, m)) => (o, false, first_difference(evaluator.base(), &m)),
            None => (Outcome { performance: 0.0, mean_layers: 0.0 }, true, Some(0)),
        };
        rounds.push(RoundResult {
            round,
            seed,
            bits: plan.total_bits,
            events: plan.events.len(),
            mcu_events: plan.events.iter().filter(|e| e.flips.len() > 1).count(),
            performance: outcome.performance,
            drop: baseline.performance - outcome.performance,
            crash: is_crash(baseline.performance, outcome.performance),
            parse_error,
            mean_layers: outcome.mean_layers,
            first_layer,
        });
    }
    Ok(CampaignResult { config: *cfg, baseline, rounds })
}

// ---------------------------------------------------------------------------
// Distribution shift

/// Kolmogorov-Smirnov statistic: the largest vertical gap between the two
/// empirical CDFs.
pub fn cdf_deviation(a: &[f64], b: &[f64]) -> Result<f64, ScanError> {
    if a.is_empty() || b.is_empty() {
        return Err(ScanError::Empty("sample"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = if x[i].total_cmp(&y[j]).is_le() { x[i] } else { y[j] };
        while i < x.len() && x[i].total_cmp(&v).is_le() {
            i += 1;
        }
        while j < y.len() && y[j].total_cmp(&v).is_le() {
            j += 1;
        }
        d = d.max((i as f64 / x.len() as f64 - j as f64 / y.len() as f64).abs());
    }
    Ok(d)
}

/// Every output value of backbone layer `layer` (1-based) over `inputs`.
pub fn layer_outputs(model: &EngineModel, inputs: &Dataset, layer: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..inputs.len() {
        let acts = model.trace(inputs.input(i));
        v.extend(acts[layer].iter().map(|&x| f64::from(x)));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::{DramConfig, SchemeId};
    use crate::nn::data::shapes_classification;
    use crate::nn::engine::quantize;
    use crate::nn::model::{Model, ModelSpec};
    use crate::nn::ActivationKind;

    fn engine(exits: bool) -> EngineModel {
        let mut spec = ModelSpec::toy_classifier();
        if exits {
            spec = spec.with_exits(&[2], 8, ActivationKind::Relu).unwrap();
        }
        quantize(&Model::init(&spec, 3).unwrap())
    }

    fn platform() -> Platform {
        Platform {
            dram: DramMap::standard(&DramConfig::compact_rows(), SchemeId::S1).unwrap(),
            error_model: ErrorModelConfig::default(),
            pages: PageSource::Synthetic,
        }
    }

    #[test]
    fn ks_edges() {
        assert_eq!(cdf_deviation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cdf_deviation(&[1.0, 2.0], &[5.0, 6.0]).unwrap(), 1.0);
        assert!((cdf_deviation(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(cdf_deviation(&[], &[1.0]).is_err());
    }

    #[test]
    fn crash_boundary() {
        assert!(is_crash(92.0, 80.0));
        assert!(!is_crash(92.0, 83.0));
        assert!(is_crash(92.0, 82.0));
    }

    #[test]
    fn patched_param_matches_parse() {
        let m = engine(true);
        let img = m.serialize();
        let (s, _) = img.layout.params_of(1).unwrap();
        let mut bytes = img.bytes.clone();
        bytes[s + 5] ^= 0x80;
        let parsed = EngineModel::deserialize(&bytes).unwrap();
        let mut patched = m.clone();
        let r = m.records()[1];
        patched.layer_mut(r).reload_byte(&bytes[s..], 5);
        assert_eq!(parsed, patched);
        assert_eq!(first_difference(&m, &parsed), Some(1));
    }

    #[test]
    fn cached_evaluation_matches_full_forward() {
        let m = engine(true);
        let data = shapes_classification(40, 2);
        let policy = ExitPolicy::at(0.3);
        let ev = Evaluator::new(m.clone(), &data, policy).unwrap();
        let mut bad = m.clone();
        bad.backbone[2].weights[7] = bad.backbone[2].weights[7].wrapping_add(100);
        bad.exits[0].layers[0].weights[0] ^= 0x40;
        bad.backbone[0].bias[1] = 1e30;
        let fast = ev.evaluate(&bad).unwrap();
        let full = crate::nn::metrics::evaluate(&bad, &data, &policy);
        assert_eq!(fast.performance, full.performance);
        assert!((fast.mean_layers - full.mean_layers).abs() < 1e-12);
    }

    #[test]
    fn campaign_is_deterministic_and_restores() {
        let m = engine(false);
        let mut img = m.serialize();
        let before = img.bytes.clone();
        let data = shapes_classification(16, 1);
        let cfg = CampaignConfig::new(20, 3, Area::Global);
        let a = run_campaign(&mut img, &data, &ExitPolicy::DISABLED, &platform(), &cfg).unwrap();
        let b = run_campaign(&mut img, &data, &ExitPolicy::DISABLED, &platform(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(img.bytes, before);
        assert!(a.rounds.iter().all(|r| r.bits == 20));
        let none = run_campaign(&mut img, &data, &ExitPolicy::DISABLED, &platform(), &CampaignConfig::new(5, 0, Area::Global))
            .unwrap();
        assert!(none.rounds.is_empty());
        assert_eq!(crash_rate(&none), 0.0);
    }

    #[test]
    fn scan_restores_and_padding_free() {
        let m = engine(false);
        let mut img = m.serialize();
        let before = img.bytes.clone();
        let data = shapes_classification(16, 1);
        let (s, _) = img.params_range();
        let opts = ScanOptions { range: Some((s, s + 2)), eval_samples: 8 };
        let map = sensitivity_scan(&mut img, &data, &ExitPolicy::DISABLED, &opts).unwrap();
        assert_eq!(img.bytes, before);
        assert_eq!(map.bits.len(), 16);
    }

    #[test]
    fn densest_window_picks_cluster() {
        let bits = (0..10)
            .flat_map(|o| {
                (0..8u8).map(move |b| BitSensitivity {
                    offset: 100 + o,
                    bit: b,
                    performance: if (4..6).contains(&o) && b == 7 { 0.0 } else { 90.0 },
                    delta: 0.0,
                    parse_error: false,
                })
            })
            .collect();
        let map = SensitivityMap { image_len: 200, baseline: 90.0, eval_samples: 1, layout: LayoutIndex::default(), bits };
        assert_eq!(map.densest_window(2), Some((104, 2)));
        assert_eq!(map.densest_window(3), Some((103, 2)));
        assert_eq!(map.densest_window(11), None);
    }

    #[test]
    fn area_json() {
        let a: Area = serde_json::from_str(r#"{"kind":"sensitive","start":10,"len":4}"#).unwrap();
        assert_eq!(a, Area::Sensitive { start: 10, len: 4 });
        let c: CampaignConfig = serde_json::from_str(r#"{"total_bits":5,"rounds":2}"#).unwrap();
        assert_eq!(c.area, Area::Global);
    }
}
