//! Agent configurations: the CPU spy, CPU load generators and accelerator
//! kernels, plus the latency trace the spy produces.

use thiserror::Error;

use crate::addrmap::{AddressMapping, PhysAddr, LINE_BYTES};
use crate::memctrl::AccessKind;
use crate::simcore::{fnv1a, SimTime};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("buffer of {buffer} bytes holds no line at stride {stride}")]
    EmptyBuffer { buffer: u64, stride: u64 },
    #[error("stride must be at least one line")]
    ZeroStride,
    #[error("local size {local} must be in 1..=256 and not exceed global size {global}")]
    LocalSize { local: u32, global: u32 },
    #[error("wavefront size {0} is not one of 8, 16, 32")]
    Wavefront(u32),
    #[error("no address in the buffer passes the channel/bank-group filter")]
    FilterEmpty,
    #[error("repeat factor must be positive")]
    ZeroRepeat,
}

/// Restricts an agent to part of the DRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AddressFilter {
    pub channel: Option<u8>,
    /// Bit i set admits bank group i; 0 admits all.
    pub bank_group_mask: u32,
}

impl AddressFilter {
    pub fn admits(&self, addr: PhysAddr, m: &AddressMapping) -> bool {
        if let Some(ch) = self.channel {
            if m.channel_of(addr) != ch {
                return false;
            }
        }
        self.bank_group_mask == 0 || self.bank_group_mask >> m.map(addr).bank_group & 1 == 1
    }

    pub fn is_open(&self) -> bool {
        self.channel.is_none() && self.bank_group_mask == 0
    }
}

/// Line offsets (from the buffer base) visited by a strided walk, keeping
/// only those that pass the filter.
pub fn strided_lines(
    base: PhysAddr,
    buffer_bytes: u64,
    stride_lines: u64,
    filter: &AddressFilter,
    m: &AddressMapping,
) -> Result<Vec<u32>, AgentError> {
    if stride_lines == 0 {
        return Err(AgentError::ZeroStride);
    }
    let n = buffer_bytes / (stride_lines * LINE_BYTES);
    if n == 0 {
        return Err(AgentError::EmptyBuffer {
            buffer: buffer_bytes,
            stride: stride_lines,
        });
    }
    let v: Vec<u32> = (0..n)
        .map(|k| k * stride_lines)
        .filter(|&off| filter.is_open() || filter.admits(base.offset(off * LINE_BYTES), m))
        .map(|off| u32::try_from(off).expect("buffer too large"))
        .collect();
    if v.is_empty() {
        return Err(AgentError::FilterEmpty);
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpyConfig {
    pub base: PhysAddr,
    pub buffer_bytes: u64,
    pub stride_lines: u64,
    pub use_flush: bool,
    pub filter: AddressFilter,
}

impl Default for SpyConfig {
    fn default() -> Self {
        SpyConfig {
            base: PhysAddr(0x1_0000_0000),
            buffer_bytes: 32 << 20,
            stride_lines: 64,
            use_flush: false,
            filter: AddressFilter::default(),
        }
    }
}

impl SpyConfig {
    pub fn addresses(&self, m: &AddressMapping) -> Result<Vec<PhysAddr>, AgentError> {
        Ok(strided_lines(self.base, self.buffer_bytes, self.stride_lines, &self.filter, m)?
            .into_iter()
            .map(|o| self.base.offset(o as u64 * LINE_BYTES))
            .collect())
    }
}

/// A CPU process issuing a fixed number of loads or stores, one at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuWorkerConfig {
    pub base: PhysAddr,
    pub buffer_bytes: u64,
    pub stride_lines: u64,
    pub kind: AccessKind,
    pub count: u64,
    pub use_flush: bool,
}

impl CpuWorkerConfig {
    pub fn addresses(&self, m: &AddressMapping) -> Result<Vec<PhysAddr>, AgentError> {
        Ok(strided_lines(
            self.base,
            self.buffer_bytes,
            self.stride_lines,
            &AddressFilter::default(),
            m,
        )?
        .into_iter()
        .map(|o| self.base.offset(o as u64 * LINE_BYTES))
        .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetLines {
    Distinct,
    Same,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelConfig {
    pub base: PhysAddr,
    pub buffer_bytes: u64,
    pub stride_lines: u64,
    pub global_threads: u32,
    pub local_threads: u32,
    pub wavefront_size: u32,
    pub access_kind: AccessKind,
    pub target_lines: TargetLines,
    /// Passes over the buffer's line set (the zero factor for same-line kernels).
    pub repeat: u32,
    /// Overrides the access count; addresses wrap around the line set.
    pub accesses: Option<u64>,
    pub filter: AddressFilter,
    /// Each store is preceded by a load of its index from a 4-byte array.
    pub index_read_first: bool,
    pub index_base: PhysAddr,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            base: PhysAddr(0x4000_0000),
            buffer_bytes: 32 << 20,
            stride_lines: 8,
            global_threads: 256,
            local_threads: 128,
            wavefront_size: 16,
            access_kind: AccessKind::Write,
            target_lines: TargetLines::Distinct,
            repeat: 1,
            accesses: None,
            filter: AddressFilter::default(),
            index_read_first: false,
            index_base: PhysAddr(0x3000_0000),
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.stride_lines == 0 {
            return Err(AgentError::ZeroStride);
        }
        if self.local_threads == 0 || self.local_threads > 256 || self.local_threads > self.global_threads {
            return Err(AgentError::LocalSize {
                local: self.local_threads,
                global: self.global_threads,
            });
        }
        if !matches!(self.wavefront_size, 8 | 16 | 32) {
            return Err(AgentError::Wavefront(self.wavefront_size));
        }
        if self.repeat == 0 {
            return Err(AgentError::ZeroRepeat);
        }
        Ok(())
    }

    pub fn work_groups(&self) -> u32 {
        self.global_threads.div_ceil(self.local_threads)
    }

    pub fn plan(&self, m: &AddressMapping) -> Result<KernelPlan, AgentError> {
        self.validate()?;
        let lines = strided_lines(self.base, self.buffer_bytes, self.stride_lines, &self.filter, m)?;
        let accesses = self
            .accesses
            .unwrap_or(lines.len() as u64 * self.repeat as u64);
        Ok(KernelPlan {
            base: self.base,
            lines,
            accesses,
            same: self.target_lines == TargetLines::Same,
            index_base: self.index_base,
        })
    }
}

/// Resolved address stream of a kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelPlan {
    base: PhysAddr,
    lines: Vec<u32>,
    pub accesses: u64,
    same: bool,
    index_base: PhysAddr,
}

impl KernelPlan {
    /// Address of access `k = i·G + t` (iteration i, global thread t).
    #[inline]
    pub fn address(&self, k: u64) -> PhysAddr {
        let off = if self.same {
            self.lines[0]
        } else {
            self.lines[(k % self.lines.len() as u64) as usize]
        };
        self.base.offset(off as u64 * LINE_BYTES)
    }

    #[inline]
    pub fn index_address(&self, k: u64) -> PhysAddr {
        self.index_base.offset(k * 4)
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    /// Distinct lines the kernel will touch (for warming caches).
    pub fn footprint(&self) -> impl Iterator<Item = PhysAddr> + '_ {
        let n = if self.same { 1 } else { self.lines.len() };
        self.lines[..n]
            .iter()
            .map(|&o| self.base.offset(o as u64 * LINE_BYTES))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcceleratorGeometry {
    pub subslices: u32,
    pub eus_per_subslice: u32,
    pub threads_per_eu: u32,
}

impl Default for AcceleratorGeometry {
    fn default() -> Self {
        AcceleratorGeometry {
            subslices: 3,
            eus_per_subslice: 8,
            threads_per_eu: 7,
        }
    }
}

/// Work-group ids per subslice, assigned round-robin.
pub fn assign_work_groups(work_groups: u32, subslices: u32) -> Vec<Vec<u32>> {
    let mut v = vec![vec![]; subslices as usize];
    for wg in 0..work_groups {
        v[(wg % subslices) as usize].push(wg);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencySample {
    pub issue: SimTime,
    pub latency_cycles: u32,
    line: u32,
}

impl LatencySample {
    pub fn addr(&self) -> PhysAddr {
        PhysAddr::from_line(self.line as u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatencyTrace {
    samples: Vec<LatencySample>,
}

impl LatencyTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics unless issue times strictly increase.
    pub fn push(&mut self, issue: SimTime, latency_cycles: u32, addr: PhysAddr) {
        if let Some(last) = self.samples.last() {
            assert!(issue > last.issue, "trace issue times must strictly increase");
        }
        let line = u32::try_from(addr.line()).expect("address beyond trace range");
        self.samples.push(LatencySample {
            issue,
            latency_cycles,
            line,
        });
    }

    pub fn samples(&self) -> &[LatencySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples issued in [from, to).
    pub fn window(&self, from: SimTime, to: SimTime) -> &[LatencySample] {
        let a = self.samples.partition_point(|s| s.issue < from);
        let b = self.samples.partition_point(|s| s.issue < to);
        &self.samples[a..b.max(a)]
    }

    pub fn mean_latency(samples: &[LatencySample]) -> Option<f64> {
        if samples.is_empty() {
            return None;
        }
        Some(samples.iter().map(|s| s.latency_cycles as f64).sum::<f64>() / samples.len() as f64)
    }

    /// Stable content hash used for determinism checks.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.samples.len() * 16);
        for s in &self.samples {
            bytes.extend_from_slice(&s.issue.ps().to_le_bytes());
            bytes.extend_from_slice(&s.latency_cycles.to_le_bytes());
            bytes.extend_from_slice(&s.line.to_le_bytes());
        }
        fnv1a(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_rule() {
        let k = KernelConfig {
            base: PhysAddr(0),
            ..KernelConfig::default()
        };
        let p = k.plan(&AddressMapping::default()).unwrap();
        assert_eq!(p.accesses, 1 << 16);
        // thread 3 of iteration 2 with G = 256, S = 8
        assert_eq!(p.address(2 * 256 + 3), PhysAddr((2 * 256 + 3) * 8 * 64));
    }

    #[test]
    fn same_line_kernel_hits_one_line() {
        let k = KernelConfig {
            target_lines: TargetLines::Same,
            repeat: 8,
            ..KernelConfig::default()
        };
        let p = k.plan(&AddressMapping::default()).unwrap();
        assert_eq!(p.accesses, 8 << 16);
        assert_eq!(p.address(0), p.address(12345));
    }

    #[test]
    fn channel_filter_halves_line_set() {
        let m = AddressMapping::default();
        let k = KernelConfig {
            stride_lines: 4,
            filter: AddressFilter {
                channel: Some(1),
                bank_group_mask: 0,
            },
            ..KernelConfig::default()
        };
        let p = k.plan(&m).unwrap();
        assert_eq!(p.accesses, 1 << 16);
        assert!((0..1000).all(|i| m.channel_of(p.address(i)) == 1));
    }

    #[test]
    fn round_robin_work_groups() {
        assert_eq!(
            assign_work_groups(5, 3),
            vec![vec![0, 3], vec![1, 4], vec![2]]
        );
    }

    #[test]
    fn local_size_bounds() {
        let k = KernelConfig {
            local_threads: 512,
            global_threads: 1024,
            ..KernelConfig::default()
        };
        assert!(k.validate().is_err());
    }

    #[test]
    #[should_panic(expected = "strictly increase")]
    fn trace_rejects_non_increasing_issue() {
        let mut t = LatencyTrace::new();
        t.push(SimTime::from_ps(5), 1, PhysAddr(0));
        t.push(SimTime::from_ps(5), 1, PhysAddr(0));
    }
}
