//! Set-associative LRU caches, the shared LLC with its writeback buffer, and
//! accelerator request coalescing.

use std::collections::VecDeque;

use thiserror::Error;

use crate::addrmap::{PhysAddr, LINE_BYTES};
use crate::memctrl::{AccessKind, MemoryRequest, Origin};
use crate::simcore::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("cache of {size} bytes with {ways} ways of {line}-byte lines does not give a power-of-two set count")]
    Geometry { size: u64, ways: usize, line: u64 },
    #[error("wavefront size {0} is not one of 8, 16, 32")]
    WavefrontSize(usize),
    #[error("writeback buffer capacity must be positive")]
    ZeroWriteback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheGeometry {
    pub size_bytes: u64,
    pub ways: usize,
    pub line_bytes: u64,
}

pub type LlcConfig = CacheGeometry;

impl CacheGeometry {
    pub fn new(size_bytes: u64, ways: usize) -> Self {
        CacheGeometry {
            size_bytes,
            ways,
            line_bytes: LINE_BYTES,
        }
    }

    pub fn sets(&self) -> usize {
        (self.size_bytes / (self.ways as u64 * self.line_bytes)) as usize
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let err = CacheError::Geometry {
            size: self.size_bytes,
            ways: self.ways,
            line: self.line_bytes,
        };
        if self.ways == 0 || self.line_bytes != LINE_BYTES {
            return Err(err);
        }
        let sets = self.size_bytes / (self.ways as u64 * self.line_bytes);
        if sets == 0 || !sets.is_power_of_two() || sets * self.ways as u64 * self.line_bytes != self.size_bytes {
            return Err(err);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub addr: PhysAddr,
    pub dirty: bool,
    /// Origin tag of the last store to the line.
    pub owner: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheLineState {
    pub addr: PhysAddr,
    pub dirty: bool,
    /// 0 is most recently used.
    pub lru_rank: usize,
}

const INVALID: u64 = u64::MAX;

enum StoreResult {
    Hit,
    Refused,
    Allocated(Option<Evicted>),
}

/// Physically indexed set-associative cache with true LRU replacement.
/// Set index is taken from the bits directly above the line offset.
#[derive(Debug, Clone)]
pub struct SetAssocCache {
    ways: usize,
    set_mask: u64,
    tags: Vec<u64>,
    stamps: Vec<u64>,
    dirty: Vec<bool>,
    owner: Vec<u8>,
    clock: u64,
}

impl SetAssocCache {
    pub fn new(geom: CacheGeometry) -> Result<Self, CacheError> {
        geom.validate()?;
        let sets = geom.sets();
        let n = sets * geom.ways;
        Ok(SetAssocCache {
            ways: geom.ways,
            set_mask: sets as u64 - 1,
            tags: vec![INVALID; n],
            stamps: vec![0; n],
            dirty: vec![false; n],
            owner: vec![0; n],
            clock: 0,
        })
    }

    pub fn sets(&self) -> usize {
        self.set_mask as usize + 1
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    #[inline]
    pub fn set_of(&self, addr: PhysAddr) -> usize {
        (addr.line() & self.set_mask) as usize
    }

    #[inline]
    fn range(&self, addr: PhysAddr) -> std::ops::Range<usize> {
        let s = self.set_of(addr) * self.ways;
        s..s + self.ways
    }

    /// One pass over the set: `Ok(way)` on a hit, otherwise `Err(victim)`
    /// (first invalid way, else least recently used).
    #[inline]
    fn probe(&self, addr: PhysAddr) -> Result<usize, usize> {
        let line = addr.line();
        let r = self.range(addr);
        let mut victim = r.start;
        let mut best = u64::MAX;
        for i in r {
            let t = self.tags[i];
            if t == line {
                return Ok(i);
            }
            let st = if t == INVALID { 0 } else { self.stamps[i] };
            if st < best {
                best = st;
                victim = i;
            }
        }
        Err(victim)
    }

    #[inline]
    fn find(&self, addr: PhysAddr) -> Option<usize> {
        self.probe(addr).ok()
    }

    #[inline]
    fn touch(&mut self, i: usize) {
        self.clock += 1;
        self.stamps[i] = self.clock;
    }

    fn place(&mut self, i: usize, addr: PhysAddr, dirty: bool, owner: u8) -> Option<Evicted> {
        let out = (self.tags[i] != INVALID).then(|| self.evicted(i));
        self.tags[i] = addr.line();
        self.dirty[i] = dirty;
        self.owner[i] = owner;
        self.touch(i);
        out
    }

    pub fn contains(&self, addr: PhysAddr) -> bool {
        self.find(addr).is_some()
    }

    pub fn is_dirty(&self, addr: PhysAddr) -> Option<bool> {
        self.find(addr).map(|i| self.dirty[i])
    }

    /// Line that allocating `addr` would displace, if any.
    pub fn would_evict(&self, addr: PhysAddr) -> Option<Evicted> {
        match self.probe(addr) {
            Ok(_) => None,
            Err(i) => (self.tags[i] != INVALID).then(|| self.evicted(i)),
        }
    }

    fn evicted(&self, i: usize) -> Evicted {
        Evicted {
            addr: PhysAddr::from_line(self.tags[i]),
            dirty: self.dirty[i],
            owner: self.owner[i],
        }
    }

    /// Lookup that refreshes LRU on a hit and optionally marks the line dirty.
    pub fn lookup(&mut self, addr: PhysAddr, write: bool) -> bool {
        self.lookup_by(addr, write, 0)
    }

    pub fn lookup_by(&mut self, addr: PhysAddr, write: bool, owner: u8) -> bool {
        match self.find(addr) {
            Some(i) => {
                self.touch(i);
                if write {
                    self.dirty[i] = true;
                    self.owner[i] = owner;
                }
                true
            }
            None => false,
        }
    }

    /// Allocates `addr` as MRU (or refreshes it), returning the displaced line.
    pub fn install(&mut self, addr: PhysAddr, dirty: bool) -> Option<Evicted> {
        self.install_by(addr, dirty, 0)
    }

    pub fn install_by(&mut self, addr: PhysAddr, dirty: bool, owner: u8) -> Option<Evicted> {
        match self.probe(addr) {
            Ok(i) => {
                self.touch(i);
                if dirty {
                    self.dirty[i] = true;
                    self.owner[i] = owner;
                }
                None
            }
            Err(i) => self.place(i, addr, dirty, owner),
        }
    }

    /// Store by `owner`: hit, or allocation that `allow` may veto when it
    /// would displace a dirty line.
    fn store(&mut self, addr: PhysAddr, owner: u8, allow_dirty_victim: bool) -> StoreResult {
        match self.probe(addr) {
            Ok(i) => {
                self.touch(i);
                self.dirty[i] = true;
                self.owner[i] = owner;
                StoreResult::Hit
            }
            Err(i) => {
                if !allow_dirty_victim && self.tags[i] != INVALID && self.dirty[i] {
                    return StoreResult::Refused;
                }
                StoreResult::Allocated(self.place(i, addr, true, owner))
            }
        }
    }

    /// Removes the line; returns its dirty bit if it was present.
    pub fn invalidate(&mut self, addr: PhysAddr) -> Option<bool> {
        let i = self.find(addr)?;
        self.tags[i] = INVALID;
        let d = self.dirty[i];
        self.dirty[i] = false;
        Some(d)
    }

    /// Lines of one set ordered from MRU to LRU.
    pub fn set_lines(&self, set: usize) -> Vec<CacheLineState> {
        let s = set * self.ways;
        let mut v: Vec<(u64, usize)> = (s..s + self.ways)
            .filter(|&i| self.tags[i] != INVALID)
            .map(|i| (self.stamps[i], i))
            .collect();
        v.sort_by(|a, b| b.0.cmp(&a.0));
        v.iter()
            .enumerate()
            .map(|(rank, &(_, i))| CacheLineState {
                addr: PhysAddr::from_line(self.tags[i]),
                dirty: self.dirty[i],
                lru_rank: rank,
            })
            .collect()
    }

    pub fn dirty_lines(&self) -> usize {
        self.dirty.iter().filter(|&&d| d).count()
    }
}

/// Owner tag stored with dirty lines.
pub fn owner_tag(o: Origin) -> u8 {
    match o {
        Origin::Cpu(_) => 0,
        Origin::Accelerator => 1,
    }
}

pub fn owner_origin(tag: u8) -> Origin {
    if tag == 1 {
        Origin::Accelerator
    } else {
        Origin::Cpu(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Writeback {
    pub addr: PhysAddr,
    pub origin: Origin,
}

/// Bounded FIFO of dirty lines on their way to the memory controller.
#[derive(Debug, Clone)]
pub struct WritebackBuffer {
    entries: VecDeque<Writeback>,
    capacity: usize,
}

impl WritebackBuffer {
    pub fn new(capacity: usize) -> Result<Self, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroWriteback);
        }
        Ok(WritebackBuffer {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn push(&mut self, wb: Writeback) -> Result<(), Writeback> {
        if self.is_full() {
            return Err(wb);
        }
        self.entries.push_back(Writeback {
            addr: wb.addr.line_base(),
            origin: wb.origin,
        });
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Writeback> {
        self.entries.iter()
    }

    pub fn remove(&mut self, idx: usize) -> Option<Writeback> {
        self.entries.remove(idx)
    }

    pub fn pop(&mut self) -> Option<Writeback> {
        self.entries.pop_front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Hit,
    /// Allocated; `writeback` is the dirty victim now in the buffer.
    Allocated { writeback: Option<PhysAddr> },
    /// A dirty victim must leave but the writeback buffer is full.
    StalledWbFull,
}

/// Shared last-level cache: write-allocate without fetch, dirty victims go
/// through a bounded writeback buffer. Victims displaced by read fills never
/// stall the read; if the buffer is full they wait in an overflow queue.
#[derive(Debug, Clone)]
pub struct Llc {
    cache: SetAssocCache,
    wb: WritebackBuffer,
    overflow: VecDeque<Writeback>,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlcAccess {
    pub hit: bool,
    pub latency: SimTime,
    pub requests: Vec<MemoryRequest>,
}

impl Llc {
    pub fn new(geom: LlcConfig, wb_entries: usize) -> Result<Self, CacheError> {
        Ok(Llc {
            cache: SetAssocCache::new(geom)?,
            wb: WritebackBuffer::new(wb_entries)?,
            overflow: VecDeque::new(),
            hits: 0,
            misses: 0,
            writebacks: 0,
        })
    }

    pub fn cache(&self) -> &SetAssocCache {
        &self.cache
    }

    pub fn wb(&self) -> &WritebackBuffer {
        &self.wb
    }

    pub fn overflow_len(&self) -> usize {
        self.overflow.len()
    }

    /// True when a write that evicts a dirty line would have to wait.
    pub fn wb_blocked(&self) -> bool {
        self.wb.is_full() || !self.overflow.is_empty()
    }

    pub fn read(&mut self, addr: PhysAddr) -> bool {
        let hit = self.cache.lookup(addr, false);
        if hit {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        hit
    }

    pub fn write(&mut self, addr: PhysAddr, origin: Origin) -> WriteOutcome {
        let blocked = self.wb_blocked();
        match self.cache.store(addr, owner_tag(origin), !blocked) {
            StoreResult::Hit => {
                self.hits += 1;
                WriteOutcome::Hit
            }
            StoreResult::Refused => WriteOutcome::StalledWbFull,
            StoreResult::Allocated(ev) => {
                self.misses += 1;
                let writeback = ev.filter(|e| e.dirty).map(|e| {
                    self.wb
                        .push(Writeback {
                            addr: e.addr,
                            origin: owner_origin(e.owner),
                        })
                        .expect("not blocked");
                    self.writebacks += 1;
                    e.addr
                });
                WriteOutcome::Allocated { writeback }
            }
        }
    }

    fn queue_writeback(&mut self, wb: Writeback) {
        self.writebacks += 1;
        if !(self.overflow.is_empty() && self.wb.push(wb).is_ok()) {
            self.overflow.push_back(wb);
        }
    }

    /// Installs a line returned by memory.
    pub fn fill(&mut self, addr: PhysAddr) {
        if let Some(e) = self.cache.install(addr, false) {
            if e.dirty {
                self.queue_writeback(Writeback {
                    addr: e.addr,
                    origin: owner_origin(e.owner),
                });
            }
        }
    }

    /// Drops the line from the LLC; a dirty copy is written back.
    pub fn flush_line(&mut self, addr: PhysAddr) -> bool {
        match self.cache.invalidate(addr) {
            Some(true) => {
                self.queue_writeback(Writeback {
                    addr: addr.line_base(),
                    origin: Origin::Cpu(0),
                });
                true
            }
            Some(false) => true,
            None => false,
        }
    }

    /// Removes buffer entry `idx` and refills from the overflow queue.
    pub fn take_writeback(&mut self, idx: usize) -> Option<Writeback> {
        let a = self.wb.remove(idx)?;
        if let Some(o) = self.overflow.pop_front() {
            self.wb.push(o).expect("slot just freed");
        }
        Some(a)
    }

    /// Direct model of one access: reads allocate and emit a fill request,
    /// writes allocate dirty without a fill; dirty victims emit a writeback.
    /// Returns None when the access must stall on a full writeback buffer.
    pub fn access(
        &mut self,
        addr: PhysAddr,
        kind: AccessKind,
        origin: Origin,
        now: SimTime,
        latency: SimTime,
        next_id: &mut u64,
    ) -> Option<LlcAccess> {
        let mut mk = |k, a| {
            *next_id += 1;
            MemoryRequest::new(*next_id - 1, k, a, origin, now)
        };
        let mut requests = vec![];
        let hit = match kind {
            AccessKind::Read => {
                let hit = self.read(addr);
                if !hit {
                    requests.push(mk(AccessKind::Read, addr));
                    let victim = self.cache.would_evict(addr);
                    self.fill(addr);
                    if let Some(v) = victim.filter(|v| v.dirty) {
                        requests.push(mk(AccessKind::Write, v.addr));
                    }
                }
                hit
            }
            AccessKind::Write => match self.write(addr, origin) {
                WriteOutcome::Hit => true,
                WriteOutcome::Allocated { writeback } => {
                    if let Some(w) = writeback {
                        requests.push(mk(AccessKind::Write, w));
                    }
                    false
                }
                WriteOutcome::StalledWbFull => return None,
            },
        };
        Some(LlcAccess {
            hit,
            latency,
            requests,
        })
    }

    /// Installs clean lines without generating traffic; victims are dropped.
    pub fn prefill_clean(&mut self, addrs: impl IntoIterator<Item = PhysAddr>) {
        for a in addrs {
            self.cache.install(a, false);
        }
    }

    /// Installs dirty lines without generating traffic (pre-existing state).
    pub fn prefill_dirty(&mut self, addrs: impl IntoIterator<Item = PhysAddr>, origin: Origin) {
        let tag = owner_tag(origin);
        for a in addrs {
            self.cache.install_by(a, true, tag);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wavefront {
    accesses: Vec<PhysAddr>,
}

impl Wavefront {
    pub fn new(accesses: Vec<PhysAddr>) -> Result<Self, CacheError> {
        if !matches!(accesses.len(), 8 | 16 | 32) {
            return Err(CacheError::WavefrontSize(accesses.len()));
        }
        Ok(Wavefront { accesses })
    }

    pub fn accesses(&self) -> &[PhysAddr] {
        &self.accesses
    }
}

/// Distinct lines touched by `addrs`, in order of first occurrence.
pub fn coalesce_lines(addrs: impl IntoIterator<Item = PhysAddr>, out: &mut Vec<PhysAddr>) {
    out.clear();
    for a in addrs {
        let l = a.line_base();
        if !out.contains(&l) {
            out.push(l);
        }
    }
}

pub fn coalesce(
    wf: &Wavefront,
    kind: AccessKind,
    origin: Origin,
    now: SimTime,
    next_id: &mut u64,
) -> Vec<MemoryRequest> {
    let mut lines = Vec::with_capacity(wf.accesses.len());
    coalesce_lines(wf.accesses.iter().copied(), &mut lines);
    lines
        .into_iter()
        .map(|l| {
            *next_id += 1;
            MemoryRequest::new(*next_id - 1, kind, l, origin, now)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const O: Origin = Origin::Accelerator;

    fn llc() -> Llc {
        Llc::new(CacheGeometry::new(16 << 20, 16), 32).unwrap()
    }

    #[test]
    fn default_llc_geometry() {
        let g = CacheGeometry::new(16 << 20, 16);
        assert_eq!(g.sets(), 16384);
        assert!(g.validate().is_ok());
        assert!(CacheGeometry::new(3 << 20, 16).validate().is_err());
    }

    #[test]
    fn write_hit_marks_dirty_without_traffic() {
        let mut l = llc();
        assert!(matches!(
            l.write(PhysAddr(0x1000), O),
            WriteOutcome::Allocated { writeback: None }
        ));
        assert_eq!(l.write(PhysAddr(0x1000), O), WriteOutcome::Hit);
        assert_eq!(l.cache().is_dirty(PhysAddr(0x1000)), Some(true));
        assert!(l.wb().is_empty());
    }

    #[test]
    fn seventeenth_line_evicts_dirty_lru() {
        let mut l = llc();
        let set_stride = 16384 * 64;
        for i in 0..16u64 {
            l.write(PhysAddr(i * set_stride), O);
        }
        let out = l.write(PhysAddr(16 * set_stride), O);
        assert_eq!(
            out,
            WriteOutcome::Allocated {
                writeback: Some(PhysAddr(0))
            }
        );
        assert_eq!(l.wb().len(), 1);
    }

    #[test]
    fn full_buffer_stalls_dirty_eviction() {
        let mut l = Llc::new(CacheGeometry::new(4096, 1), 1).unwrap();
        let stride = 4096;
        l.write(PhysAddr(0), O);
        l.write(PhysAddr(stride), O);
        assert_eq!(l.write(PhysAddr(2 * stride), O), WriteOutcome::StalledWbFull);
        l.take_writeback(0);
        assert!(matches!(l.write(PhysAddr(2 * stride), O), WriteOutcome::Allocated { .. }));
    }

    #[test]
    fn fills_never_stall() {
        let mut l = Llc::new(CacheGeometry::new(4096, 1), 1).unwrap();
        l.write(PhysAddr(0), O);
        l.write(PhysAddr(4096), O);
        l.fill(PhysAddr(8192));
        assert_eq!(l.overflow_len(), 1);
        assert!(l.wb_blocked());
        l.take_writeback(0);
        assert_eq!(l.wb().len(), 1);
        assert_eq!(l.overflow_len(), 0);
    }

    #[test]
    fn flush_dirty_line_writes_back() {
        let mut l = llc();
        l.write(PhysAddr(0x40), O);
        assert!(l.flush_line(PhysAddr(0x40)));
        assert!(!l.cache().contains(PhysAddr(0x40)));
        assert_eq!(l.wb().len(), 1);
        assert!(!l.flush_line(PhysAddr(0x40)));
    }

    #[test]
    fn coalescing_examples() {
        let same = Wavefront::new(vec![PhysAddr(0x1000); 16]).unwrap();
        let mut id = 0;
        assert_eq!(coalesce(&same, AccessKind::Write, Origin::Accelerator, SimTime::ZERO, &mut id).len(), 1);
        let distinct =
            Wavefront::new((0..16).map(|i| PhysAddr(i * 64 * 8)).collect()).unwrap();
        assert_eq!(
            coalesce(&distinct, AccessKind::Write, Origin::Accelerator, SimTime::ZERO, &mut id).len(),
            16
        );
        assert!(Wavefront::new(vec![PhysAddr(0); 12]).is_err());
    }

    #[test]
    fn direct_access_model() {
        let mut l = llc();
        let mut id = 0;
        let t = SimTime::ZERO;
        let r = l.access(PhysAddr(0x80), AccessKind::Read, Origin::Cpu(0), t, t, &mut id).unwrap();
        assert!(!r.hit);
        assert_eq!(r.requests.len(), 1);
        let r = l.access(PhysAddr(0x80), AccessKind::Read, Origin::Cpu(0), t, t, &mut id).unwrap();
        assert!(r.hit && r.requests.is_empty());
    }
}
