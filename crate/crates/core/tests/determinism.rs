use drainsim::agents::{CpuWorkerConfig, KernelConfig, LatencyTrace, SpyConfig};
use drainsim::simcore::fnv1a;
use drainsim::{AccessKind, PhysAddr, SimTime, SocConfig, System};

fn trace_hash(t: &LatencyTrace) -> u64 {
    let mut bytes = Vec::with_capacity(t.len() * 20);
    for s in t.samples() {
        bytes.extend_from_slice(&s.issue.ps().to_le_bytes());
        bytes.extend_from_slice(&s.latency_cycles.to_le_bytes());
        bytes.extend_from_slice(&s.addr().0.to_le_bytes());
    }
    fnv1a(&bytes)
}

/// Spy, CPU writer and accelerator kernel sharing the controller.
fn mixed_run(seed: u64) -> (u64, u64, Vec<u64>) {
    let soc = SocConfig::default();
    let mut sys = System::new(&soc, seed).unwrap();
    let spy = SpyConfig {
        base: PhysAddr(0x1_0000_0000),
        buffer_bytes: 1 << 20,
        stride_lines: 8,
        use_flush: true,
        filter: Default::default(),
    };
    let id = sys.add_spy(&spy, SimTime::ZERO, SimTime::MAX).unwrap();
    let w = CpuWorkerConfig {
        base: PhysAddr(0x8000_0000),
        buffer_bytes: 4 << 20,
        stride_lines: 1,
        kind: AccessKind::Write,
        count: 20_000,
        use_flush: false,
    };
    sys.add_worker(&w, SimTime::from_us(20)).unwrap();
    let k = KernelConfig {
        accesses: Some(1 << 17),
        ..KernelConfig::default()
    };
    sys.launch_kernels(&[k.clone(), k], SimTime::from_us(50)).unwrap();
    let stats = sys.run_to_completion(SimTime::from_us(5), SimTime::from_secs_f64(1.0));
    let mc: Vec<u64> = sys
        .mc_stats()
        .iter()
        .flat_map(|c| [c.reads_dispatched, c.writes_dispatched, c.drain_episodes, c.drain_time.ps()])
        .collect();
    (trace_hash(sys.trace(id)), stats.events_fired, mc)
}

#[test]
fn reruns_are_bit_identical() {
    let a = mixed_run(5);
    assert_eq!(a, mixed_run(5));
    assert!(a.2.iter().any(|&x| x > 0));
}

#[test]
fn concurrent_runs_match_serial() {
    let serial: Vec<_> = (1..=3).map(mixed_run).collect();
    let parallel: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = (1..=3).map(|seed| s.spawn(move || mixed_run(seed))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

#[test]
fn seed_changes_cpu_jitter() {
    assert_ne!(mixed_run(1).0, mixed_run(2).0);
}
