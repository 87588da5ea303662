//! Per-channel read/write queues with write-drain scheduling policies.

use std::collections::VecDeque;

use thiserror::Error;

use crate::addrmap::{AddressMapping, DramCoord, PhysAddr};
use crate::dram::{DramChannel, DramTiming, RowOutcome};
use crate::simcore::{ClockDomain, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Cpu(u8),
    Accelerator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRequest {
    pub id: u64,
    pub kind: AccessKind,
    pub addr: PhysAddr,
    pub origin: Origin,
    pub issue_time: SimTime,
    pub complete_time: Option<SimTime>,
    /// Opaque requester cookie, returned with the dispatch.
    pub tag: u32,
}

impl MemoryRequest {
    pub fn new(id: u64, kind: AccessKind, addr: PhysAddr, origin: Origin, now: SimTime) -> Self {
        MemoryRequest {
            id,
            kind,
            addr: addr.line_base(),
            origin,
            issue_time: now,
            complete_time: None,
            tag: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOwner {
    Cpu,
    Accelerator,
    Shared,
}

impl ChannelOwner {
    fn admits(self, o: Origin) -> bool {
        matches!(
            (self, o),
            (ChannelOwner::Shared, _)
                | (ChannelOwner::Cpu, Origin::Cpu(_))
                | (ChannelOwner::Accelerator, Origin::Accelerator)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerPolicy {
    /// Reads first; once write_q fills, only writes until it empties.
    DrainWhenFull,
    /// Reads always first; writes only when no read is queued.
    ReadPriority,
    /// Drain-when-full, but a read to a bank with no queued write may pass.
    StagedReads,
    /// Drain-when-full with each channel reserved for one origin class.
    ChannelPartition(Vec<ChannelOwner>),
}

impl ControllerPolicy {
    pub fn drains(&self) -> bool {
        !matches!(self, ControllerPolicy::ReadPriority)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControllerPolicy::DrainWhenFull => "drain_when_full",
            ControllerPolicy::ReadPriority => "read_priority",
            ControllerPolicy::StagedReads => "staged_reads",
            ControllerPolicy::ChannelPartition(_) => "drain_when_full_with_channel_partition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McConfig {
    pub policy: ControllerPolicy,
    pub read_entries: usize,
    pub write_entries: usize,
    pub pending_entries: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            policy: ControllerPolicy::DrainWhenFull,
            read_entries: 32,
            write_entries: 64,
            pending_entries: 32,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum McConfigError {
    #[error("queue capacities must be positive")]
    ZeroCapacity,
    #[error("channel partition lists {got} owners for {want} channels")]
    PartitionArity { got: usize, want: usize },
}

impl McConfig {
    pub fn validate(&self, channels: usize) -> Result<(), McConfigError> {
        if self.read_entries == 0 || self.write_entries == 0 || self.pending_entries == 0 {
            return Err(McConfigError::ZeroCapacity);
        }
        if let ControllerPolicy::ChannelPartition(o) = &self.policy {
            if o.len() != channels {
                return Err(McConfigError::PartitionArity {
                    got: o.len(),
                    want: channels,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    req: MemoryRequest,
    coord: DramCoord,
    bank: u16,
    enqueued: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceptance {
    Accepted,
    StalledFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub req: MemoryRequest,
    pub channel: u8,
    pub enqueued: SimTime,
    pub start: SimTime,
    pub completion: SimTime,
    pub row: RowOutcome,
    /// Controller state at the moment of dispatch.
    pub while_draining: bool,
}

pub const STALL_BUCKETS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ControllerStats {
    pub reads_enqueued: u64,
    pub writes_enqueued: u64,
    pub reads_dispatched: u64,
    pub writes_dispatched: u64,
    pub stalled_full: u64,
    pub drain_episodes: u64,
    pub drain_time: SimTime,
    pub max_write_q: usize,
    pub reads_during_drain: u64,
    pub reroutes: u64,
    pub row_hits: u64,
    pub row_misses: u64,
    pub row_conflicts: u64,
    /// Bucket i counts reads that waited [2^(i-1), 2^i) controller cycles (bucket 0: zero).
    pub read_stall_hist: [u64; STALL_BUCKETS],
}

impl ControllerStats {
    fn record_stall(&mut self, cycles: u64) {
        let b = (64 - cycles.leading_zeros()) as usize;
        self.read_stall_hist[b.min(STALL_BUCKETS - 1)] += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrainEpisode {
    pub start: SimTime,
    pub end: SimTime,
}

struct Channel {
    read_q: VecDeque<Slot>,
    write_q: VecDeque<Slot>,
    pending: VecDeque<Slot>,
    draining: bool,
    bank_writes: Vec<u32>,
    dram: DramChannel,
    next_cmd: SimTime,
    drain_start: SimTime,
    last_write_done: SimTime,
    stats: ControllerStats,
    episodes: Vec<DrainEpisode>,
}

#[derive(Clone, Copy)]
enum Pick {
    Read,
    Write,
}

/// Snapshot of one channel's queues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelBuffers {
    pub read_q: usize,
    pub write_q: usize,
    pub pending_writes: usize,
    pub draining: bool,
}

pub struct MemoryController {
    mapping: AddressMapping,
    cfg: McConfig,
    cycle: SimTime,
    channels: Vec<Channel>,
    record_episodes: bool,
}

impl MemoryController {
    pub fn new(cfg: McConfig, timing: DramTiming, mapping: AddressMapping, clock: ClockDomain) -> Self {
        let banks = mapping.banks_per_channel();
        let channels = (0..mapping.channels())
            .map(|_| Channel {
                read_q: VecDeque::with_capacity(cfg.read_entries),
                write_q: VecDeque::with_capacity(cfg.write_entries),
                pending: VecDeque::with_capacity(cfg.pending_entries),
                draining: false,
                bank_writes: vec![0; banks],
                dram: DramChannel::new(banks, timing, clock.clone()),
                next_cmd: SimTime::ZERO,
                drain_start: SimTime::ZERO,
                last_write_done: SimTime::ZERO,
                stats: ControllerStats::default(),
                episodes: vec![],
            })
            .collect();
        MemoryController {
            mapping,
            cycle: clock.period(),
            cfg,
            channels,
            record_episodes: false,
        }
    }

    pub fn record_episodes(&mut self, on: bool) {
        self.record_episodes = on;
    }

    pub fn mapping(&self) -> &AddressMapping {
        &self.mapping
    }

    pub fn config(&self) -> &McConfig {
        &self.cfg
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn cycle(&self) -> SimTime {
        self.cycle
    }

    pub fn stats(&self, ch: usize) -> &ControllerStats {
        &self.channels[ch].stats
    }

    pub fn episodes(&self, ch: usize) -> &[DrainEpisode] {
        &self.channels[ch].episodes
    }

    pub fn buffers(&self, ch: usize) -> ChannelBuffers {
        let c = &self.channels[ch];
        ChannelBuffers {
            read_q: c.read_q.len(),
            write_q: c.write_q.len(),
            pending_writes: c.pending.len(),
            draining: c.draining,
        }
    }

    pub fn dram(&self, ch: usize) -> &DramChannel {
        &self.channels[ch].dram
    }

    pub fn is_idle(&self) -> bool {
        self.channels.iter().all(|c| {
            c.read_q.is_empty() && c.write_q.is_empty() && c.pending.is_empty() && !c.draining
        })
    }

    /// Channel that will hold a request from `origin` to `addr`.
    pub fn route(&self, addr: PhysAddr, origin: Origin) -> usize {
        let ch = self.mapping.channel_of(addr) as usize;
        self.route_channel(ch, origin).0
    }

    fn route_channel(&self, ch: usize, origin: Origin) -> (usize, bool) {
        match &self.cfg.policy {
            ControllerPolicy::ChannelPartition(owners) if !owners[ch].admits(origin) => owners
                .iter()
                .position(|o| o.admits(origin))
                .map_or((ch, false), |c| (c, true)),
            _ => (ch, false),
        }
    }

    pub fn can_accept(&self, kind: AccessKind, addr: PhysAddr, origin: Origin) -> bool {
        let ch = self.route(addr, origin);
        match kind {
            AccessKind::Read => self.channels[ch].read_q.len() < self.cfg.read_entries,
            AccessKind::Write => self.accepts_write_on(ch),
        }
    }

    /// Whether channel `ch` has room for one more write.
    pub fn accepts_write_on(&self, ch: usize) -> bool {
        let c = &self.channels[ch];
        (!c.draining && c.pending.is_empty() && c.write_q.len() < self.cfg.write_entries)
            || c.pending.len() < self.cfg.pending_entries
    }

    pub fn enqueue(&mut self, req: MemoryRequest, now: SimTime) -> Acceptance {
        let mut coord = self.mapping.map(req.addr);
        let (ch, rerouted) = self.route_channel(coord.channel as usize, req.origin);
        coord.channel = ch as u8;
        let bank = self.mapping.bank_slot(&coord) as u16;
        let slot = Slot {
            req,
            coord,
            bank,
            enqueued: now,
        };
        let (w_cap, r_cap, p_cap) = (
            self.cfg.write_entries,
            self.cfg.read_entries,
            self.cfg.pending_entries,
        );
        let drains = self.cfg.policy.drains();
        let record = self.record_episodes;
        let c = &mut self.channels[ch];
        match req.kind {
            AccessKind::Read => {
                if c.read_q.len() >= r_cap {
                    c.stats.stalled_full += 1;
                    return Acceptance::StalledFull;
                }
                c.read_q.push_back(slot);
                c.stats.reads_enqueued += 1;
            }
            AccessKind::Write => {
                if !c.draining && c.pending.is_empty() && c.write_q.len() < w_cap {
                    c.write_q.push_back(slot);
                    c.bank_writes[bank as usize] += 1;
                    if drains && c.write_q.len() == w_cap {
                        start_drain(c, now, record);
                    }
                } else if c.pending.len() < p_cap {
                    c.pending.push_back(slot);
                } else {
                    c.stats.stalled_full += 1;
                    return Acceptance::StalledFull;
                }
                c.stats.writes_enqueued += 1;
                c.stats.max_write_q = c.stats.max_write_q.max(c.write_q.len());
            }
        }
        if rerouted {
            c.stats.reroutes += 1;
        }
        Acceptance::Accepted
    }

    /// Advances every channel at `now`; returns requests sent to DRAM.
    pub fn tick(&mut self, now: SimTime) -> Vec<Dispatch> {
        let mut out = vec![];
        for ch in 0..self.channels.len() {
            self.tick_channel(ch, now, &mut out);
        }
        out
    }

    /// One controller step on `ch`: drain bookkeeping, at most one refill
    /// and at most one dispatch. Returns when the channel next needs a tick
    /// and whether a pending-write slot was freed.
    pub fn tick_channel(
        &mut self,
        ch: usize,
        now: SimTime,
        out: &mut Vec<Dispatch>,
    ) -> (Option<SimTime>, bool) {
        let w_cap = self.cfg.write_entries;
        let drains = self.cfg.policy.drains();
        let record = self.record_episodes;
        let mut freed = false;
        {
            let c = &mut self.channels[ch];
            if c.draining && c.write_q.is_empty() && now >= c.last_write_done {
                c.draining = false;
                c.stats.drain_time += c.last_write_done.max(c.drain_start) - c.drain_start;
                if record {
                    c.episodes.push(DrainEpisode {
                        start: c.drain_start,
                        end: c.last_write_done.max(c.drain_start),
                    });
                }
            }
            while !c.draining && c.write_q.len() < w_cap {
                let Some(s) = c.pending.pop_front() else {
                    break;
                };
                c.bank_writes[s.bank as usize] += 1;
                c.write_q.push_back(s);
                c.stats.max_write_q = c.stats.max_write_q.max(c.write_q.len());
                freed = true;
                if drains && c.write_q.len() == w_cap {
                    start_drain(c, now, record);
                }
            }
        }
        if now >= self.channels[ch].next_cmd {
            if let Some((pick, free_at)) = self.pick(ch) {
                if free_at <= now {
                    self.dispatch(ch, pick, now, out);
                }
            }
        }
        // Nothing can interleave with a plain drain: new writes wait in the
        // pending queue and reads wait for the drain to end, so its whole
        // command sequence is fixed once it starts.
        if self.channels[ch].draining && !matches!(self.cfg.policy, ControllerPolicy::StagedReads) {
            while let Some((pick, free_at)) = self.pick(ch) {
                let t = free_at.max(self.channels[ch].next_cmd).max(now);
                self.dispatch(ch, pick, t, out);
            }
        }
        (self.next_wake(ch, now), freed)
    }

    fn pick(&self, ch: usize) -> Option<(Pick, SimTime)> {
        let c = &self.channels[ch];
        let free = |s: &Slot| c.dram.bank_free_at(s.bank as usize);
        let read = c.read_q.front();
        let write = c.write_q.front();
        let choice = match &self.cfg.policy {
            ControllerPolicy::ReadPriority => match (read, write) {
                (Some(_), _) => Pick::Read,
                (None, Some(_)) => Pick::Write,
                _ => return None,
            },
            ControllerPolicy::StagedReads if c.draining => {
                if let Some(r) = read.filter(|r| c.bank_writes[r.bank as usize] == 0) {
                    let rf = free(r);
                    match write {
                        Some(w) if free(w) < rf => return Some((Pick::Write, free(w))),
                        _ => return Some((Pick::Read, rf)),
                    }
                }
                match write {
                    Some(_) => Pick::Write,
                    None => return None,
                }
            }
            _ if c.draining => match write {
                Some(_) => Pick::Write,
                None => return None,
            },
            _ => match (read, write) {
                (Some(_), _) => Pick::Read,
                (None, Some(_)) if c.pending.is_empty() => Pick::Write,
                _ => return None,
            },
        };
        let slot = match choice {
            Pick::Read => read,
            Pick::Write => write,
        }
        .expect("picked queue is non-empty");
        Some((choice, free(slot)))
    }

    fn dispatch(&mut self, ch: usize, pick: Pick, now: SimTime, out: &mut Vec<Dispatch>) {
        let cycle = self.cycle;
        let c = &mut self.channels[ch];
        let slot = match pick {
            Pick::Read => c.read_q.pop_front(),
            Pick::Write => c.write_q.pop_front(),
        }
        .expect("dispatch from empty queue");
        let draining = c.draining;
        let svc = c
            .dram
            .service(slot.req.kind, slot.coord.row, slot.bank as usize, now);
        match svc.row {
            RowOutcome::Hit => c.stats.row_hits += 1,
            RowOutcome::Miss => c.stats.row_misses += 1,
            RowOutcome::Conflict => c.stats.row_conflicts += 1,
        }
        match slot.req.kind {
            AccessKind::Read => {
                assert!(
                    !draining || matches!(self.cfg.policy, ControllerPolicy::StagedReads),
                    "read dispatched on channel {ch} while draining"
                );
                if draining {
                    c.stats.reads_during_drain += 1;
                }
                c.stats.reads_dispatched += 1;
                let waited = (now - slot.enqueued).ps() / cycle.ps().max(1);
                c.stats.record_stall(waited);
            }
            AccessKind::Write => {
                c.bank_writes[slot.bank as usize] -= 1;
                c.stats.writes_dispatched += 1;
                c.last_write_done = c.last_write_done.max(svc.completion);
            }
        }
        c.next_cmd = now + cycle;
        let mut req = slot.req;
        req.complete_time = Some(svc.completion);
        out.push(Dispatch {
            req,
            channel: ch as u8,
            enqueued: slot.enqueued,
            start: svc.start,
            completion: svc.completion,
            row: svc.row,
            while_draining: draining,
        });
    }

    /// Earliest time `ch` has work to do, if any.
    pub fn next_wake(&self, ch: usize, now: SimTime) -> Option<SimTime> {
        let c = &self.channels[ch];
        let mut next: Option<SimTime> = None;
        let mut consider = |t: SimTime| {
            let t = t.max(now + SimTime::from_ps(1)).max(t);
            next = Some(next.map_or(t, |n: SimTime| n.min(t)));
        };
        if c.draining && c.write_q.is_empty() {
            consider(c.last_write_done.max(now));
        }
        if let Some((_, free_at)) = self.pick(ch) {
            consider(free_at.max(c.next_cmd));
        }
        next
    }
}

fn start_drain(c: &mut Channel, now: SimTime, _record: bool) {
    c.draining = true;
    c.drain_start = now;
    c.stats.drain_episodes += 1;
}

/// Per-level contention between accelerator writes and spy reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaseCounts {
    pub channel: u64,
    pub bank_group: u64,
    pub bank: u64,
}

/// Histograms of write coordinates; each read is scored against all writes.
#[derive(Debug, Clone)]
pub struct ContentionCounter {
    mapping: AddressMapping,
    per_channel: Vec<u64>,
    per_group: Vec<u64>,
    per_bank: Vec<u64>,
    reads: Vec<DramCoord>,
    writes: u64,
    read_log: Vec<PhysAddr>,
    write_log: Vec<PhysAddr>,
}

impl ContentionCounter {
    pub fn new(mapping: AddressMapping) -> Self {
        let ch = mapping.channels();
        let groups = mapping.ranks() * mapping.bank_groups();
        let banks = mapping.banks_per_channel();
        ContentionCounter {
            per_channel: vec![0; ch],
            per_group: vec![0; ch * groups],
            per_bank: vec![0; ch * banks],
            mapping,
            reads: vec![],
            writes: 0,
            read_log: vec![],
            write_log: vec![],
        }
    }

    fn group_index(&self, c: &DramCoord) -> usize {
        let groups = self.mapping.ranks() * self.mapping.bank_groups();
        c.channel as usize * groups
            + c.rank as usize * self.mapping.bank_groups()
            + c.bank_group as usize
    }

    fn bank_index(&self, c: &DramCoord) -> usize {
        c.channel as usize * self.mapping.banks_per_channel() + self.mapping.bank_slot(c)
    }

    pub fn record_write(&mut self, addr: PhysAddr) {
        let c = self.mapping.map(addr);
        self.per_channel[c.channel as usize] += 1;
        let g = self.group_index(&c);
        self.per_group[g] += 1;
        let b = self.bank_index(&c);
        self.per_bank[b] += 1;
        self.writes += 1;
        self.write_log.push(addr);
    }

    pub fn record_read(&mut self, addr: PhysAddr) {
        let c = self.mapping.map(addr);
        self.reads.push(c);
        self.read_log.push(addr);
    }

    pub fn read_addrs(&self) -> &[PhysAddr] {
        &self.read_log
    }

    pub fn write_addrs(&self) -> &[PhysAddr] {
        &self.write_log
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn cases(&self, c: &DramCoord) -> CaseCounts {
        CaseCounts {
            channel: self.per_channel[c.channel as usize],
            bank_group: self.per_group[self.group_index(c)],
            bank: self.per_bank[self.bank_index(c)],
        }
    }

    pub fn per_read(&self) -> Vec<CaseCounts> {
        self.reads.iter().map(|c| self.cases(c)).collect()
    }

    pub fn totals(&self) -> CaseCounts {
        self.per_read().iter().fold(CaseCounts::default(), |a, c| CaseCounts {
            channel: a.channel + c.channel,
            bank_group: a.bank_group + c.bank_group,
            bank: a.bank + c.bank,
        })
    }
}

/// Channel oracle for mapping recovery: a write burst to `a` fills its
/// channel's write queue, then the queueing delay of a read to `b` is timed.
pub struct DrainChannelProbe {
    mapping: AddressMapping,
    timing: DramTiming,
    clock: ClockDomain,
    burst: usize,
    probes: u64,
}

impl DrainChannelProbe {
    pub fn new(mapping: AddressMapping, timing: DramTiming, clock: ClockDomain) -> Self {
        DrainChannelProbe {
            mapping,
            timing,
            clock,
            burst: 8,
            probes: 0,
        }
    }

    pub fn probes(&self) -> u64 {
        self.probes
    }

    /// Queueing delay of the read, in controller cycles.
    pub fn measure(&mut self, a: PhysAddr, b: PhysAddr) -> u64 {
        self.probes += 1;
        let cfg = McConfig {
            policy: ControllerPolicy::DrainWhenFull,
            read_entries: 4,
            write_entries: self.burst,
            pending_entries: 1,
        };
        let mut mc = MemoryController::new(cfg, self.timing, self.mapping.clone(), self.clock.clone());
        let t0 = SimTime::ZERO;
        for i in 0..self.burst {
            let r = MemoryRequest::new(i as u64, AccessKind::Write, a, Origin::Accelerator, t0);
            mc.enqueue(r, t0);
        }
        let read = MemoryRequest::new(u64::MAX, AccessKind::Read, b, Origin::Cpu(0), t0);
        mc.enqueue(read, t0);
        let ch = mc.route(b, Origin::Cpu(0));
        let mut now = t0;
        let mut out = vec![];
        loop {
            let (next, _) = mc.tick_channel(ch, now, &mut out);
            if let Some(d) = out.iter().find(|d| d.req.id == u64::MAX) {
                return (d.start - t0).ps() / mc.cycle().ps();
            }
            now = next.expect("probe read never dispatched");
        }
    }
}
