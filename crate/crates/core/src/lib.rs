//! Desk-scale emulation of radiation-induced DRAM bit flips, coupled with a
//! small INT8 inference engine whose activation and early-exit design bounds
//! the damage those flips do.
//!
//! The pipeline mirrors a hardware-in-the-loop injector:
//!
//! 1. [`addrspace`] maps a region of interest (ROI) in virtual space onto
//!    physical blocks.
//! 2. [`dram`] decodes physical addresses into DRAM cell coordinates under a
//!    configurable addressing scheme (optionally XOR-interleaved).
//! 3. [`radiation`] samples single- and multi-cell upsets around a reference
//!    cell.
//! 4. [`injector`] maps upset cells back to virtual bytes inside the ROI and
//!    flips them.
//! 5. [`nn`] provides the engine image that lives in the ROI, and
//!    [`scanner`] runs per-bit scans and multi-round campaigns over it.

pub mod addrspace;
pub mod dram;
pub mod injector;
pub mod nn;
pub mod radiation;
pub mod report;
pub mod rng;
pub mod scanner;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/dram-mapping.md")]
    mod dram_mapping {}
    #[doc = include_str!("../../../book/src/radiation-model.md")]
    mod radiation_model {}
    #[doc = include_str!("../../../book/src/address-space.md")]
    mod address_space {}
    #[doc = include_str!("../../../book/src/injection.md")]
    mod injection {}
    #[doc = include_str!("../../../book/src/logclip.md")]
    mod logclip {}
    #[doc = include_str!("../../../book/src/multi-exit.md")]
    mod multi_exit {}
    #[doc = include_str!("../../../book/src/engine-image.md")]
    mod engine_image {}
    #[doc = include_str!("../../../book/src/campaigns.md")]
    mod campaigns {}
}
