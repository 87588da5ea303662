//! One pass/fail line per acceptance criterion. Run with
//! `cargo test -p drainsim-harness --test acceptance`.

use std::collections::HashMap;
use std::time::Instant;

use drainsim::agents::{KernelConfig, SpyConfig};
use drainsim::cache::{coalesce, CacheGeometry, Llc, SetAssocCache, Wavefront};
use drainsim::simcore::splitmix64;
use drainsim::{AccessKind, ControllerPolicy, Origin, PhysAddr, SimTime, System};
use drainsim_harness::conf::HarnessConfig;
use drainsim_harness::experiments::{
    self, bit_traffic, e4_runs, e5_points, e6_points, e7_points, e8_rows, e9_rows, load_run, CovertPoint, RunOptions,
    Scale, Source, SpyPath, E5_STRIDES, E5_ZERO_FACTORS, E6_LOCAL,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn c1(cfg: &HarnessConfig) -> Verdict {
    let t = Instant::now();
    let setup = cfg.covert.setup(&cfg.soc, cfg.covert.params(false), 1);
    let one = bit_traffic(&setup, true, cfg.covert.calibration_kernels).unwrap();
    let zero = bit_traffic(&setup, false, cfg.covert.calibration_kernels).unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        (4.0..=6.0).contains(&one.ratio) && zero.ratio <= 1.3 && secs < 30.0,
        format!("bit-1 ratio {:.2} in [4,6], bit-0 ratio {:.2} <= 1.3, {secs:.1} s", one.ratio, zero.ratio),
    )
}

fn c2(cfg: &HarnessConfig) -> Verdict {
    let run = |src, kind, n| load_run(&cfg.soc, src, kind, n, SpyPath::Flushed, 1).unwrap();
    let mut ok = true;
    let mut parts = vec![];
    for n in [1u64 << 19, 1 << 20] {
        let cpu = run(Source::Cpu, AccessKind::Write, n);
        let acc = run(Source::Accelerator, AccessKind::Write, n);
        let ratio = acc.slowdown() / cpu.slowdown();
        ok &= cpu.delivered_writes == acc.delivered_writes && ratio >= 2.5;
        parts.push(format!(
            "2^{}: {} writes each, excess {:.3} vs {:.3} ({:.1}x)",
            n.trailing_zeros(),
            acc.delivered_writes,
            acc.slowdown(),
            cpu.slowdown(),
            ratio
        ));
    }
    let n = 1 << 20;
    let cr = run(Source::Cpu, AccessKind::Read, n).load.mean;
    let ar = run(Source::Accelerator, AccessKind::Read, n).load.mean;
    ok &= cr <= 1.3 && ar <= 1.3;
    parts.push(format!("reads {cr:.3}/{ar:.3} <= 1.3"));
    verdict(ok, parts.join("; "))
}

fn c3(cfg: &HarnessConfig) -> Verdict {
    let n = 1 << 20;
    let hit = load_run(&cfg.soc, Source::Accelerator, AccessKind::Write, n, SpyPath::LlcHit, 1).unwrap();
    let miss = load_run(&cfg.soc, Source::Accelerator, AccessKind::Write, n, SpyPath::LlcMiss, 1).unwrap();
    let (h, m) = (hit.load.mean, miss.load.mean);
    verdict(h < m && m / h >= 2.0, format!("2^20 writes: hit {h:.3}, miss {m:.3}, miss/hit {:.2} >= 2", m / h))
}

fn c4(cfg: &HarnessConfig) -> Verdict {
    let mapping = &cfg.soc.mapping;
    let mut ok = true;
    let mut parts = vec![];
    for r in e4_runs(cfg, Scale::Paper, 1).unwrap() {
        let key = |a: PhysAddr| {
            let c = mapping.map(a);
            (c.channel, (c.rank, c.bank_group), c.bank)
        };
        let writes: Vec<_> = r.writes.iter().map(|&a| key(a)).collect();
        let half = writes.len() as u64 / 2;
        let mut mismatches = 0;
        let mut channel_ok = r.reads.len() == 2048 && writes.len() == 1 << 18;
        for (read, counts) in r.reads.iter().zip(&r.per_read) {
            let k = key(*read);
            let (mut ch, mut bg, mut bk) = (0u64, 0u64, 0u64);
            for w in &writes {
                if w.0 == k.0 {
                    ch += 1;
                    if w.1 == k.1 {
                        bg += 1;
                        if w.2 == k.2 {
                            bk += 1;
                        }
                    }
                }
            }
            channel_ok &= counts.channel == half;
            if (ch, bg, bk) != (counts.channel, counts.bank_group, counts.bank) {
                mismatches += 1;
            }
        }
        ok &= channel_ok && mismatches == 0;
        parts.push(format!(
            "{}: {} reads x {} writes, channel cases {} for every read: {}, pairwise mismatches {}",
            r.layout,
            r.reads.len(),
            writes.len(),
            half,
            channel_ok,
            mismatches
        ));
    }
    verdict(ok, parts.join("; "))
}

fn variant<'a>(pts: &'a [CovertPoint], label: &str) -> Vec<&'a CovertPoint> {
    pts.iter().filter(|p| p.label == label).collect()
}

fn c5(pts: &[CovertPoint]) -> Verdict {
    let v1 = variant(pts, "variant1");
    let mean = v1.iter().map(|p| p.error_rate()).sum::<f64>() / v1.len() as f64;
    let max = v1.iter().map(|p| p.error_rate()).fold(0.0, f64::max);
    let rate = v1.iter().map(|p| p.run.metrics.bit_rate_bps).sum::<f64>() / v1.len() as f64;
    verdict(
        v1.len() == 10 && mean <= 0.01 && max <= 0.02 && (825.0..=3300.0).contains(&rate),
        format!(
            "{} seeds: mean error {:.3}%, max {:.3}%, {rate:.0} bps in [825, 3300]",
            v1.len(),
            mean * 100.0,
            max * 100.0
        ),
    )
}

fn c6(pts: &[CovertPoint]) -> Verdict {
    let v1 = variant(pts, "variant1");
    let v2 = variant(pts, "variant2");
    let mean = v2.iter().map(|p| p.error_rate()).sum::<f64>() / v2.len().max(1) as f64;
    let ratios: Vec<f64> = v2
        .iter()
        .map(|b| {
            let a = v1.iter().find(|a| a.seed == b.seed).expect("same seeds");
            b.run.metrics.bit_rate_bps / a.run.metrics.bit_rate_bps
        })
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    verdict(
        v2.len() == 10 && mean <= 0.06 && lo >= 2.0 && hi <= 3.5,
        format!("mean error {:.3}% <= 6%, v2/v1 bit rate per seed in [{lo:.2}, {hi:.2}]", mean * 100.0),
    )
}

fn error_of(pts: &[CovertPoint], label: &str) -> f64 {
    pts.iter().find(|p| p.label == label).unwrap_or_else(|| panic!("no point {label}")).error_rate()
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn c7(cfg: &HarnessConfig) -> Verdict {
    let o = RunOptions::new(1);
    let e5 = e5_points(cfg, &o).unwrap();
    let e6 = e6_points(cfg, &o).unwrap();
    let mut z_ok = true;
    let mut zs = vec![];
    for s in E5_STRIDES {
        let v: Vec<f64> = E5_ZERO_FACTORS.iter().map(|z| error_of(&e5, &format!("S{s}_Z{z}"))).collect();
        z_ok &= non_increasing(&v);
        zs.push(format!("S{s} {}", fmt_rates(&v)));
    }
    let l: Vec<f64> = E6_LOCAL.iter().map(|l| error_of(&e6, &format!("L{l}_G256"))).collect();
    let g256 = error_of(&e6, "L128_G256");
    let g4096 = error_of(&e6, "L128_G4096");
    let g_ok = g4096 >= 10.0 * g256;
    verdict(
        z_ok && non_increasing(&l) && g_ok,
        format!(
            "Z non-increasing {z_ok} ({}); L 8..128 {} non-increasing {}; G4096 {:.3} >= 10 x G256 {:.3}: {g_ok}",
            zs.join(", "),
            fmt_rates(&l),
            non_increasing(&l),
            g4096,
            g256
        ),
    )
}

fn fmt_rates(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "))
}

fn c8(cfg: &HarnessConfig) -> Verdict {
    let rows = e8_rows(cfg, &RunOptions::new(1)).unwrap();
    let get = |p: &str| rows.iter().find(|r| r.policy == p).unwrap();
    let rp = get("read_priority").point.error_rate();
    let cp = get("channel_partition").point.error_rate();
    let st = get("staged_reads").bit1_ratio;
    verdict(
        rp >= 0.4 && cp >= 0.4 && st <= 1.5,
        format!("read_priority error {rp:.3} >= 0.4, channel_partition error {cp:.3} >= 0.4, staged_reads slowdown {st:.3} <= 1.5"),
    )
}

fn c9(cfg: &HarnessConfig) -> Verdict {
    let t = Instant::now();
    let rows = e9_rows(cfg, 1);
    let secs = t.elapsed().as_secs_f64();
    let equal = rows.iter().filter(|r| r.partition_equal).count();
    verdict(
        rows.len() == 21 && rows[0].partition_equal && equal == rows.len() && secs < 60.0,
        format!("{equal}/{} partitions identical (configured + 20 random), {secs:.1} s", rows.len()),
    )
}

/// Deterministic stream for the randomized oracles.
struct Stream(u64);

impl Stream {
    fn next(&mut self, n: u64) -> u64 {
        self.0 = self.0.wrapping_add(1);
        splitmix64(self.0) % n
    }
}

fn lru_oracle(rng: &mut Stream) -> bool {
    (0..10_000).all(|_| {
        let ways = 1usize << rng.next(5);
        let mut c = SetAssocCache::new(CacheGeometry::new(ways as u64 * 64, ways)).unwrap();
        let mut stack: Vec<u64> = vec![];
        (0..rng.next(60) + 1).all(|_| {
            let l = rng.next(2 * ways as u64 + 3);
            let a = PhysAddr::from_line(l);
            let hit = c.lookup(a, false);
            if !hit {
                c.install(a, false);
            }
            let pos = stack.iter().position(|&x| x == l);
            if let Some(p) = pos {
                stack.remove(p);
            }
            stack.insert(0, l);
            hit == pos.is_some_and(|p| p < ways)
        })
    })
}

fn coalescing_oracle(rng: &mut Stream) -> bool {
    (0..10_000).all(|_| {
        let size = 8usize << rng.next(3);
        let addrs: Vec<PhysAddr> = (0..size).map(|_| PhysAddr(rng.next(16) * 64 + rng.next(64))).collect();
        let reqs = coalesce(&Wavefront::new(addrs.clone()).unwrap(), AccessKind::Write, Origin::Accelerator, SimTime::ZERO, &mut 0);
        let mut firsts: Vec<PhysAddr> = vec![];
        for a in &addrs {
            if !firsts.contains(&a.line_base()) {
                firsts.push(a.line_base());
            }
        }
        reqs.iter().map(|r| r.addr).collect::<Vec<_>>() == firsts
    })
}

fn writeback_oracle(rng: &mut Stream) -> bool {
    (0..2_000).all(|_| {
        let cap = 2 + rng.next(6) as usize;
        let mk = || Llc::new(CacheGeometry::new(4 * 64, 4), cap).unwrap();
        let (mut a, mut b) = (mk(), mk());
        let (mut ia, mut ib) = (0, 0);
        (0..100).all(|_| {
            let addr = PhysAddr::from_line(rng.next(12));
            let kind = if rng.next(2) == 0 { AccessKind::Read } else { AccessKind::Write };
            let x = a.access(addr, kind, Origin::Cpu(0), SimTime::ZERO, SimTime::from_ns(30), &mut ia);
            let y = b.access(addr, kind, Origin::Cpu(0), SimTime::ZERO, SimTime::from_ns(30), &mut ib);
            while a.wb().len() > 0 {
                a.take_writeback(0);
            }
            let keep = rng.next(cap as u64) as usize;
            while b.wb().len() > keep.min(cap - 1) {
                b.take_writeback(0);
            }
            match (x, y) {
                (Some(x), Some(y)) => {
                    x.hit == y.hit
                        && x.latency == y.latency
                        && x.requests.iter().map(|r| (r.kind, r.addr)).eq(y.requests.iter().map(|r| (r.kind, r.addr)))
                }
                _ => false,
            }
        })
    })
}

/// Reads during a drain, summed over channels, under heavy accelerator writes.
fn reads_during_drain(cfg: &HarnessConfig, policy: ControllerPolicy) -> (u64, u64) {
    let mut soc = cfg.soc.clone();
    soc.mc.policy = policy;
    let mut sys = System::new(&soc, 1).unwrap();
    let spy = SpyConfig {
        base: PhysAddr(0x1_0000_0000),
        buffer_bytes: 1 << 20,
        stride_lines: 8,
        use_flush: true,
        filter: Default::default(),
    };
    sys.add_spy(&spy, SimTime::ZERO, SimTime::MAX).unwrap();
    let k = KernelConfig {
        accesses: Some(1 << 19),
        ..KernelConfig::default()
    };
    sys.launch_kernels(&[k], SimTime::from_us(20)).unwrap();
    sys.run_to_completion(SimTime::from_us(5), SimTime::from_secs_f64(1.0));
    let s = sys.mc_stats();
    (s.iter().map(|c| c.reads_during_drain).sum(), s.iter().map(|c| c.drain_episodes).sum())
}

fn c10(cfg: &HarnessConfig) -> Verdict {
    let o = RunOptions {
        seed: 1,
        scale: Scale::Desk,
        reps: Some(1),
        bits: Some(128),
    };
    let dir = std::env::temp_dir().join(format!("drainsim-acceptance-{}", std::process::id()));
    let mut unstable = vec![];
    for e in experiments::ALL {
        let hashes: Vec<_> = (0..2)
            .map(|i| {
                let (m, _, _) = drainsim_harness::execute(e, cfg, &o, &dir.join(format!("{}-{i}", e.name()))).unwrap();
                (m.status, m.files.iter().map(|f| (f.name.clone(), f.sha256.clone())).collect::<HashMap<_, _>>())
            })
            .collect();
        if hashes[0] != hashes[1] || hashes[0].0 != "ok" {
            unstable.push(e.name());
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    let (dwf_reads, dwf_drains) = reads_during_drain(cfg, ControllerPolicy::DrainWhenFull);
    let (staged_reads, _) = reads_during_drain(cfg, ControllerPolicy::StagedReads);
    let mut rng = Stream(0x5eed);
    let lru = lru_oracle(&mut rng);
    let coal = coalescing_oracle(&mut rng);
    let wb = writeback_oracle(&mut rng);
    verdict(
        unstable.is_empty() && dwf_reads == 0 && dwf_drains > 0 && lru && coal && wb,
        format!(
            "rerun hashes identical for all 9 experiments: {} {:?}; drain_when_full reads during {dwf_drains} drains: {dwf_reads} (staged_reads: {staged_reads}); LRU oracle {lru}; coalescing oracle {coal}; writeback off critical path {wb}",
            unstable.is_empty(),
            unstable
        ),
    )
}

fn main() {
    let cfg = HarnessConfig::default();
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = vec![];
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "drain-induced slowdown", c1(&cfg));
    report(2, "CPU vs accelerator asymmetry", c2(&cfg));
    report(3, "LLC hit/miss discrimination", c3(&cfg));
    report(4, "contention-case accounting", c4(&cfg));
    let e7 = e7_points(
        &cfg,
        &RunOptions {
            seed: 1,
            scale: Scale::Paper,
            reps: Some(10),
            bits: Some(1024),
        },
    )
    .unwrap();
    report(5, "covert channel variant 1", c5(&e7));
    report(6, "covert channel variant 2", c6(&e7));
    report(7, "sweep trends", c7(&cfg));
    report(8, "mitigations", c8(&cfg));
    report(9, "mapping recovery", c9(&cfg));
    report(10, "structural and property suites", c10(&cfg));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "{}/10 criteria pass ({:.0} s)",
        10 - failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        std::process::exit(1);
    }
}
