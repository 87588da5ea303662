//! Per-bank DRAM timing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::addrmap::{AddressMapping, DramCoord, PhysAddr};
use crate::memctrl::AccessKind;
use crate::simcore::{ClockDomain, SimTime};

/// Latencies in memory-controller cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramTiming {
    pub row_hit_cycles: u32,
    pub row_miss_cycles: u32,
    pub row_conflict_cycles: u32,
    /// Read followed by write on the same bank.
    pub turnaround_rw_cycles: u32,
    /// Write followed by read on the same bank.
    pub turnaround_wr_cycles: u32,
}

impl Default for DramTiming {
    fn default() -> Self {
        DramTiming {
            row_hit_cycles: 5,
            row_miss_cycles: 18,
            row_conflict_cycles: 28,
            turnaround_rw_cycles: 6,
            turnaround_wr_cycles: 6,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimingError {
    #[error("row timings must satisfy 0 < hit <= miss <= conflict (got {0}, {1}, {2})")]
    Order(u32, u32, u32),
}

impl DramTiming {
    pub fn validate(&self) -> Result<(), TimingError> {
        let (h, m, c) = (
            self.row_hit_cycles,
            self.row_miss_cycles,
            self.row_conflict_cycles,
        );
        if h == 0 || h > m || m > c {
            return Err(TimingError::Order(h, m, c));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BankState {
    pub open_row: Option<u32>,
    pub busy_until: SimTime,
    pub last_op: Option<AccessKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOutcome {
    Hit,
    Miss,
    Conflict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceOutcome {
    pub start: SimTime,
    pub completion: SimTime,
    pub row: RowOutcome,
    pub turnaround: bool,
    pub cycles: u32,
}

/// Banks of one channel.
#[derive(Debug, Clone)]
pub struct DramChannel {
    banks: Vec<BankState>,
    timing: DramTiming,
    clock: ClockDomain,
    // [row outcome][0 = none, 1 = rw, 2 = wr]
    durations: [[SimTime; 3]; 3],
}

impl DramChannel {
    pub fn new(banks: usize, timing: DramTiming, clock: ClockDomain) -> Self {
        let base = [
            timing.row_hit_cycles,
            timing.row_miss_cycles,
            timing.row_conflict_cycles,
        ];
        let extra = [0, timing.turnaround_rw_cycles, timing.turnaround_wr_cycles];
        let mut durations = [[SimTime::ZERO; 3]; 3];
        for (i, b) in base.iter().enumerate() {
            for (j, e) in extra.iter().enumerate() {
                durations[i][j] = clock.cycles_to_time((b + e) as u64);
            }
        }
        DramChannel {
            banks: vec![BankState::default(); banks],
            timing,
            clock,
            durations,
        }
    }

    pub fn bank(&self, slot: usize) -> &BankState {
        &self.banks[slot]
    }

    pub fn banks(&self) -> &[BankState] {
        &self.banks
    }

    pub fn timing(&self) -> &DramTiming {
        &self.timing
    }

    pub fn reset(&mut self) {
        self.banks.fill(BankState::default());
    }

    #[inline]
    pub fn bank_free_at(&self, slot: usize) -> SimTime {
        self.banks[slot].busy_until
    }

    pub fn service(
        &mut self,
        kind: AccessKind,
        row: u32,
        slot: usize,
        now: SimTime,
    ) -> ServiceOutcome {
        let b = &mut self.banks[slot];
        let outcome = match b.open_row {
            None => RowOutcome::Miss,
            Some(r) if r == row => RowOutcome::Hit,
            Some(_) => RowOutcome::Conflict,
        };
        let ta = match (b.last_op, kind) {
            (Some(AccessKind::Read), AccessKind::Write) => 1,
            (Some(AccessKind::Write), AccessKind::Read) => 2,
            _ => 0,
        };
        let oi = outcome as usize;
        let start = now.max(b.busy_until);
        let completion = start + self.durations[oi][ta];
        b.open_row = Some(row);
        b.busy_until = completion;
        b.last_op = Some(kind);
        let cycles = [
            self.timing.row_hit_cycles,
            self.timing.row_miss_cycles,
            self.timing.row_conflict_cycles,
        ][oi]
            + [
                0,
                self.timing.turnaround_rw_cycles,
                self.timing.turnaround_wr_cycles,
            ][ta];
        ServiceOutcome {
            start,
            completion,
            row: outcome,
            turnaround: ta != 0,
            cycles,
        }
    }

    pub fn clock(&self) -> &ClockDomain {
        &self.clock
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConflictKind {
    None,
    Channel,
    BankGroup,
    Bank,
}

/// Deepest shared DRAM structure of two coordinates.
pub fn conflict_kind(prev: &DramCoord, next: &DramCoord) -> ConflictKind {
    if prev.channel != next.channel {
        ConflictKind::None
    } else if prev.rank != next.rank || prev.bank_group != next.bank_group {
        ConflictKind::Channel
    } else if prev.bank != next.bank {
        ConflictKind::BankGroup
    } else {
        ConflictKind::Bank
    }
}

/// Timing oracle for address pairs: alternating reads on an otherwise idle
/// DRAM, reporting the last access's service time in controller cycles.
pub struct DramPairProbe {
    mapping: AddressMapping,
    channels: Vec<DramChannel>,
    noise_cycles: u32,
    rng: Option<ChaCha8Rng>,
    probes: u64,
}

impl DramPairProbe {
    pub fn new(mapping: AddressMapping, timing: DramTiming, clock: ClockDomain) -> Self {
        let channels = (0..mapping.channels())
            .map(|_| DramChannel::new(mapping.banks_per_channel(), timing, clock.clone()))
            .collect();
        DramPairProbe {
            mapping,
            channels,
            noise_cycles: 0,
            rng: None,
            probes: 0,
        }
    }

    /// Adds uniform jitter in [0, noise_cycles] to each measurement.
    pub fn with_noise(mut self, noise_cycles: u32, rng: ChaCha8Rng) -> Self {
        self.noise_cycles = noise_cycles;
        self.rng = Some(rng);
        self
    }

    pub fn probes(&self) -> u64 {
        self.probes
    }

    pub fn measure(&mut self, a: PhysAddr, b: PhysAddr) -> u64 {
        self.probes += 1;
        for ch in &mut self.channels {
            ch.reset();
        }
        let mut now = SimTime::ZERO;
        let mut last = 0;
        for addr in [a, b, a, b] {
            let c = self.mapping.map(addr);
            let slot = self.mapping.bank_slot(&c);
            let out = self.channels[c.channel as usize].service(AccessKind::Read, c.row, slot, now);
            now = out.completion;
            last = out.cycles as u64;
        }
        let jitter = match (&mut self.rng, self.noise_cycles) {
            (Some(rng), n) if n > 0 => rng.gen_range(0..=n) as u64,
            _ => 0,
        };
        last + jitter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chan() -> DramChannel {
        let t = DramTiming {
            row_hit_cycles: 15,
            row_miss_cycles: 30,
            row_conflict_cycles: 45,
            turnaround_rw_cycles: 8,
            turnaround_wr_cycles: 8,
        };
        DramChannel::new(16, t, ClockDomain::new("mc", 1_300_000_000).unwrap())
    }

    #[test]
    fn hit_after_open_row() {
        let mut c = chan();
        c.service(AccessKind::Read, 7, 0, SimTime::ZERO);
        let now = c.bank_free_at(0);
        let o = c.service(AccessKind::Read, 7, 0, now);
        assert_eq!(o.row, RowOutcome::Hit);
        assert_eq!(o.completion - now, c.clock().cycles_to_time(15));
    }

    #[test]
    fn write_then_read_conflict_pays_turnaround() {
        let mut c = chan();
        c.service(AccessKind::Write, 1, 3, SimTime::ZERO);
        let now = c.bank_free_at(3);
        let o = c.service(AccessKind::Read, 2, 3, now);
        assert_eq!(o.row, RowOutcome::Conflict);
        assert!(o.turnaround);
        assert_eq!(o.cycles, 53);
        assert_eq!(o.completion - now, c.clock().cycles_to_time(53));
    }

    #[test]
    fn busy_bank_delays_start() {
        let mut c = chan();
        let first = c.service(AccessKind::Read, 1, 0, SimTime::ZERO);
        let second = c.service(AccessKind::Read, 1, 0, SimTime::ZERO);
        assert_eq!(second.start, first.completion);
    }

    #[test]
    fn conflict_levels() {
        let a = DramCoord {
            channel: 0,
            rank: 0,
            bank_group: 1,
            bank: 2,
            row: 0,
        };
        assert_eq!(conflict_kind(&a, &a), ConflictKind::Bank);
        assert_eq!(
            conflict_kind(&a, &DramCoord { bank: 3, ..a }),
            ConflictKind::BankGroup
        );
        assert_eq!(
            conflict_kind(&a, &DramCoord { bank_group: 0, ..a }),
            ConflictKind::Channel
        );
        assert_eq!(
            conflict_kind(&a, &DramCoord { channel: 1, ..a }),
            ConflictKind::None
        );
    }

    #[test]
    fn timing_order_validated() {
        let t = DramTiming {
            row_hit_cycles: 40,
            ..DramTiming::default()
        };
        assert!(t.validate().is_err());
    }
}
