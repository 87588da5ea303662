use std::collections::HashSet;

use drainsim::cache::{coalesce, CacheGeometry, Llc, SetAssocCache, Wavefront};
use drainsim::memctrl::MemoryRequest;
use drainsim::{AccessKind, Origin, PhysAddr, SimTime};
use proptest::prelude::*;

const LINE: u64 = 64;

/// Reference LRU set: lines ordered MRU first, unbounded; a reference hits
/// when its stack distance is below the associativity.
#[derive(Default)]
struct Stack(Vec<u64>);

impl Stack {
    fn access(&mut self, line: u64, ways: usize) -> bool {
        let pos = self.0.iter().position(|&l| l == line);
        if let Some(p) = pos {
            self.0.remove(p);
        }
        self.0.insert(0, line);
        pos.is_some_and(|p| p < ways)
    }
}

fn ways_strategy() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 4, 8, 16])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn lru_matches_stack_distance(
        ways in ways_strategy(),
        seq in prop::collection::vec(0u64..40, 1..80),
    ) {
        let mut c = SetAssocCache::new(CacheGeometry::new(ways as u64 * LINE, ways)).unwrap();
        let mut oracle = Stack::default();
        for &l in &seq {
            let a = PhysAddr::from_line(l);
            let hit = c.lookup(a, false);
            if !hit {
                c.install(a, false);
            }
            prop_assert_eq!(hit, oracle.access(l, ways));
        }
        let resident: Vec<u64> = c.set_lines(0).iter().map(|s| s.addr.line()).collect();
        let n = oracle.0.len().min(ways);
        prop_assert_eq!(resident, oracle.0[..n].to_vec());
    }

    #[test]
    fn coalescing_matches_group_by_line(
        size in prop::sample::select(vec![8usize, 16, 32]),
        lines in prop::collection::vec((0u64..12, 0u64..64), 32),
    ) {
        let addrs: Vec<PhysAddr> = lines[..size]
            .iter()
            .map(|&(l, off)| PhysAddr(0x10_0000 + l * LINE + off))
            .collect();
        let mut id = 7;
        let reqs = coalesce(&Wavefront::new(addrs.clone()).unwrap(), AccessKind::Write, Origin::Accelerator, SimTime::ZERO, &mut id);
        let mut seen = HashSet::new();
        let expected: Vec<PhysAddr> = addrs.iter().map(|a| a.line_base()).filter(|l| seen.insert(*l)).collect();
        prop_assert_eq!(reqs.len(), seen.len());
        prop_assert_eq!(reqs.iter().map(|r| r.addr).collect::<Vec<_>>(), expected);
        prop_assert_eq!(reqs.iter().map(|r| r.id).collect::<Vec<_>>(), (7..7 + reqs.len() as u64).collect::<Vec<_>>());
        prop_assert_eq!(id, 7 + reqs.len() as u64);
    }
}

#[test]
fn coalescing_examples() {
    let run = |addrs: Vec<u64>| {
        let wf = Wavefront::new(addrs.into_iter().map(PhysAddr).collect()).unwrap();
        coalesce(&wf, AccessKind::Write, Origin::Accelerator, SimTime::ZERO, &mut 0).len()
    };
    assert_eq!(run((0..8).map(|i| 0x1000 + 8 * i).collect()), 1);
    assert_eq!(run((0..8).map(|i| 0x1000 + 64 * i).collect()), 8);
    assert_eq!(run((0..8).map(|i| if i < 4 { 0x1000 } else { 0x2000 + i }).collect()), 2);
    assert!(Wavefront::new(vec![PhysAddr(0); 12]).is_err());
}

/// Reference write-back set model: MRU-first (line, dirty), fixed ways.
struct RefSet {
    ways: usize,
    lines: Vec<(u64, bool)>,
}

impl RefSet {
    /// Memory traffic of one access: (kind, line) pairs in emission order.
    fn access(&mut self, line: u64, kind: AccessKind) -> Vec<(AccessKind, u64)> {
        let write = kind == AccessKind::Write;
        if let Some(p) = self.lines.iter().position(|&(l, _)| l == line) {
            let (l, d) = self.lines.remove(p);
            self.lines.insert(0, (l, d || write));
            return vec![];
        }
        let mut out = vec![];
        if !write {
            out.push((AccessKind::Read, line));
        }
        if self.lines.len() == self.ways {
            let (v, dirty) = self.lines.pop().unwrap();
            if dirty {
                out.push((AccessKind::Write, v));
            }
        }
        self.lines.insert(0, (line, write));
        out
    }
}

fn traffic(reqs: &[MemoryRequest]) -> Vec<(AccessKind, u64)> {
    reqs.iter().map(|r| (r.kind, r.addr.line())).collect()
}

fn small_llc(ways: usize, wb: usize) -> Llc {
    Llc::new(CacheGeometry::new(ways as u64 * LINE, ways), wb).unwrap()
}

fn drain_to(llc: &mut Llc, level: usize) {
    while llc.wb().len() > level {
        llc.take_writeback(0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn traffic_comes_only_from_misses_and_dirty_evictions(
        ways in ways_strategy(),
        ops in prop::collection::vec((0u64..24, any::<bool>()), 1..120),
    ) {
        let mut llc = small_llc(ways, 4);
        let mut oracle = RefSet { ways, lines: vec![] };
        let mut id = 0;
        for &(l, w) in &ops {
            let kind = if w { AccessKind::Write } else { AccessKind::Read };
            let got = llc
                .access(PhysAddr::from_line(l), kind, Origin::Cpu(0), SimTime::ZERO, SimTime::ZERO, &mut id)
                .expect("buffer kept empty");
            prop_assert_eq!(traffic(&got.requests), oracle.access(l, kind));
            drain_to(&mut llc, 0);
        }
    }

    /// A read miss sees the same outcome whatever the writeback buffer
    /// holds, as long as it is not full.
    #[test]
    fn writeback_off_read_critical_path(
        ways in ways_strategy(),
        cap in 2usize..8,
        ops in prop::collection::vec((0u64..24, any::<bool>(), any::<u8>()), 1..150),
    ) {
        let mut empty = small_llc(ways, cap);
        let mut busy = small_llc(ways, cap);
        let (mut ia, mut ib) = (0, 0);
        for &(l, w, lvl) in &ops {
            let a = PhysAddr::from_line(l);
            let kind = if w { AccessKind::Write } else { AccessKind::Read };
            let lat = SimTime::from_ns(30);
            let x = empty.access(a, kind, Origin::Cpu(0), SimTime::ZERO, lat, &mut ia).unwrap();
            prop_assert!(!busy.wb().is_full());
            let y = busy.access(a, kind, Origin::Cpu(0), SimTime::ZERO, lat, &mut ib);
            if kind == AccessKind::Read {
                let y = y.expect("reads never stall on the writeback buffer");
                prop_assert_eq!(x.hit, y.hit);
                prop_assert_eq!(x.latency, y.latency);
                prop_assert_eq!(traffic(&x.requests), traffic(&y.requests));
            }
            drain_to(&mut empty, 0);
            drain_to(&mut busy, (lvl as usize % cap).min(cap - 1));
        }
    }
}

#[test]
fn seventeen_dirty_lines_in_one_set_write_back_once() {
    let mut llc = Llc::new(CacheGeometry::new(16 << 20, 16), 32).unwrap();
    let sets = llc.cache().sets() as u64;
    let mut id = 0;
    let mut wbs = vec![];
    for k in 0..17 {
        let a = PhysAddr::from_line(k * sets);
        let r = llc.access(a, AccessKind::Write, Origin::Accelerator, SimTime::ZERO, SimTime::ZERO, &mut id).unwrap();
        wbs.extend(r.requests);
    }
    assert_eq!(wbs.len(), 1);
    assert_eq!(wbs[0].kind, AccessKind::Write);
    assert_eq!(wbs[0].addr, PhysAddr(0));
}

#[test]
fn flush_semantics() {
    let mut llc = small_llc(4, 4);
    let a = PhysAddr(0x40);
    assert!(!llc.flush_line(a));
    assert!(llc.wb().is_empty());
    llc.write(a, Origin::Cpu(0));
    assert!(llc.flush_line(a));
    assert_eq!(llc.wb().len(), 1);
    assert!(!llc.read(a));
}
