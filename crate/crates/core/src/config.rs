//! Full system configuration.

use std::fmt;

use crate::addrmap::{AddressMapping, MappingError};
use crate::agents::AcceleratorGeometry;
use crate::cache::{CacheError, CacheGeometry};
use crate::dram::{DramTiming, TimingError};
use crate::memctrl::{McConfig, McConfigError};
use crate::simcore::SimTime;

/// Fixed pipeline latencies. CPU-side values are CPU cycles, accelerator-side
/// values accelerator cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latencies {
    pub l2_hit_cycles: u32,
    pub llc_hit_cycles: u32,
    /// LLC to controller and back, each direction.
    pub uncore_cycles: u32,
    pub accel_l3_hit_cycles: u32,
    pub accel_llc_cycles: u32,
    pub accel_uncore_cycles: u32,
    /// Minimum spacing of two stores to the same line at the LLC.
    pub accel_same_line_cycles: u32,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            l2_hit_cycles: 14,
            llc_hit_cycles: 42,
            uncore_cycles: 24,
            accel_l3_hit_cycles: 40,
            accel_llc_cycles: 90,
            accel_uncore_cycles: 10,
            accel_same_line_cycles: 56,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcceleratorConfig {
    pub geometry: AcceleratorGeometry,
    pub launch_overhead: SimTime,
    /// Gap between back-to-back kernels already in the command queue.
    pub kernel_gap: SimTime,
    /// Serialized per-subslice cost of starting one work-group.
    pub wg_dispatch: SimTime,
    pub wgs_per_subslice: u32,
    pub max_outstanding_reads: u32,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        AcceleratorConfig {
            geometry: AcceleratorGeometry::default(),
            launch_overhead: SimTime::from_us(40),
            kernel_gap: SimTime::from_us(2),
            wg_dispatch: SimTime::from_us(10),
            wgs_per_subslice: 1,
            max_outstanding_reads: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpuLoopConfig {
    /// Non-memory work between two measured loads (timer reads, fences).
    pub loop_overhead_cycles: u32,
    /// Uniform extra delay in [0, jitter] cycles per iteration.
    pub jitter_cycles: u32,
}

impl Default for CpuLoopConfig {
    fn default() -> Self {
        CpuLoopConfig {
            loop_overhead_cycles: 60,
            jitter_cycles: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocConfig {
    pub cpu_hz: u64,
    pub accel_hz: u64,
    pub mc_hz: u64,
    pub llc: CacheGeometry,
    pub l2: CacheGeometry,
    pub accel_l3: CacheGeometry,
    pub writeback_entries: usize,
    pub mapping: AddressMapping,
    pub dram: DramTiming,
    pub mc: McConfig,
    pub latencies: Latencies,
    pub accel: AcceleratorConfig,
    pub cpu_loop: CpuLoopConfig,
}

impl Default for SocConfig {
    fn default() -> Self {
        SocConfig {
            cpu_hz: 3_800_000_000,
            accel_hz: 1_200_000_000,
            mc_hz: 1_300_000_000,
            llc: CacheGeometry::new(16 << 20, 16),
            l2: CacheGeometry::new(256 << 10, 4),
            accel_l3: CacheGeometry::new(512 << 10, 16),
            writeback_entries: 32,
            mapping: AddressMapping::default(),
            dram: DramTiming::default(),
            mc: McConfig::default(),
            latencies: Latencies::default(),
            accel: AcceleratorConfig::default(),
            cpu_loop: CpuLoopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigIssue {
    ZeroClock(&'static str),
    Cache(&'static str, CacheError),
    Mapping(MappingError),
    Timing(TimingError),
    Controller(McConfigError),
    ZeroWriteback,
    Geometry(&'static str),
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigIssue::ZeroClock(n) => write!(f, "{n} clock frequency must be positive"),
            ConfigIssue::Cache(n, e) => write!(f, "{n}: {e}"),
            ConfigIssue::Mapping(e) => write!(f, "mapping: {e}"),
            ConfigIssue::Timing(e) => write!(f, "dram: {e}"),
            ConfigIssue::Controller(e) => write!(f, "memctrl: {e}"),
            ConfigIssue::ZeroWriteback => write!(f, "writeback buffer capacity must be positive"),
            ConfigIssue::Geometry(what) => write!(f, "accelerator: {what} must be positive"),
        }
    }
}

impl SocConfig {
    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut v = vec![];
        for (n, hz) in [("cpu", self.cpu_hz), ("accelerator", self.accel_hz), ("memory controller", self.mc_hz)] {
            if hz == 0 {
                v.push(ConfigIssue::ZeroClock(n));
            }
        }
        for (n, g) in [("llc", &self.llc), ("l2", &self.l2), ("accelerator l3", &self.accel_l3)] {
            if let Err(e) = g.validate() {
                v.push(ConfigIssue::Cache(n, e));
            }
        }
        if self.writeback_entries == 0 {
            v.push(ConfigIssue::ZeroWriteback);
        }
        if let Err(es) = self.mapping.validate() {
            v.extend(es.into_iter().map(ConfigIssue::Mapping));
        }
        if let Err(e) = self.dram.validate() {
            v.push(ConfigIssue::Timing(e));
        }
        if let Err(e) = self.mc.validate(self.mapping.channels()) {
            v.push(ConfigIssue::Controller(e));
        }
        let g = &self.accel.geometry;
        if g.subslices == 0 {
            v.push(ConfigIssue::Geometry("subslices"));
        }
        if g.eus_per_subslice == 0 || g.threads_per_eu == 0 {
            v.push(ConfigIssue::Geometry("EUs and threads per EU"));
        }
        if self.accel.wgs_per_subslice == 0 {
            v.push(ConfigIssue::Geometry("work-groups per subslice"));
        }
        if self.accel.max_outstanding_reads == 0 {
            v.push(ConfigIssue::Geometry("outstanding reads"));
        }
        v
    }
}
