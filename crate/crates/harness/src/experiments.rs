//! The nine named experiments. Each has a typed entry point (used by the
//! acceptance tests) and a conversion into CSV artifacts.

use std::fmt::Write as _;

use drainsim::agents::{AddressFilter, CpuWorkerConfig, KernelConfig, LatencySample, LatencyTrace, SpyConfig};
use drainsim::covert::{
    calibrate_setup, probe_slowdown, transmit, CovertError, CovertRun, CovertSetup, DecoderState, EncodingParams,
    SecretMessage,
};
use drainsim::dram::DramPairProbe;
use drainsim::memctrl::{AccessKind, CaseCounts, ChannelOwner, ControllerPolicy, DrainChannelProbe};
use drainsim::recover::{random_mapping, recover_mapping, same_partition, RecoveryParams};
use drainsim::simcore::splitmix64;
use drainsim::{AddressMapping, ClockDomain, PhysAddr, SimTime, SocConfig, System};
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::conf::{mapping_text, HarnessConfig};
use crate::output::{Artifacts, RawRun, Table};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment `{0}`; valid names: {}", names().join(", "))]
    Unknown(String),
    #[error(transparent)]
    Covert(#[from] CovertError),
    #[error(transparent)]
    Agent(#[from] drainsim::agents::AgentError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    E1CpuCpu,
    E2CpuGpu,
    E3LlcHitMiss,
    E4DramContention,
    E5SweepZeroFactor,
    E6SweepThreads,
    E7CovertEval,
    E8Mitigations,
    E9RecoverMapping,
}

pub const ALL: [Experiment; 9] = [
    Experiment::E1CpuCpu,
    Experiment::E2CpuGpu,
    Experiment::E3LlcHitMiss,
    Experiment::E4DramContention,
    Experiment::E5SweepZeroFactor,
    Experiment::E6SweepThreads,
    Experiment::E7CovertEval,
    Experiment::E8Mitigations,
    Experiment::E9RecoverMapping,
];

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::E1CpuCpu => "E1_cpu_cpu",
            Experiment::E2CpuGpu => "E2_cpu_gpu",
            Experiment::E3LlcHitMiss => "E3_llc_hit_miss",
            Experiment::E4DramContention => "E4_dram_contention",
            Experiment::E5SweepZeroFactor => "E5_sweep_zero_factor",
            Experiment::E6SweepThreads => "E6_sweep_threads",
            Experiment::E7CovertEval => "E7_covert_eval",
            Experiment::E8Mitigations => "E8_mitigations",
            Experiment::E9RecoverMapping => "E9_recover_mapping",
        }
    }

    pub fn figure(self) -> &'static str {
        match self {
            Experiment::E1CpuCpu => "Fig 4a: spy slowdown from a second CPU process",
            Experiment::E2CpuGpu => "Fig 4b: spy slowdown from accelerator kernels",
            Experiment::E3LlcHitMiss => "Fig 5: slowdown of LLC hits vs LLC misses",
            Experiment::E4DramContention => "Figs 6-7: channel, bank-group and bank contention cases",
            Experiment::E5SweepZeroFactor => "Fig 10: error rate vs zero factor and stride",
            Experiment::E6SweepThreads => "Fig 11: error rate vs local and global thread counts",
            Experiment::E7CovertEval => "Fig 12: bit and error rates of both attack variants",
            Experiment::E8Mitigations => "Mitigations: read priority, channel partitioning, staged reads",
            Experiment::E9RecoverMapping => "Table of recovered channel, bank-group and bank functions",
        }
    }

    /// Accepts the full name or its `E<n>` prefix.
    pub fn parse(s: &str) -> Result<Self, ExperimentError> {
        ALL.iter()
            .copied()
            .find(|e| e.name().eq_ignore_ascii_case(s) || e.name().split('_').next() == Some(s))
            .ok_or_else(|| ExperimentError::Unknown(s.to_string()))
    }

    pub fn default_reps(self) -> usize {
        match self {
            Experiment::E7CovertEval => 10,
            _ => 1,
        }
    }
}

pub fn names() -> Vec<&'static str> {
    ALL.iter().map(|e| e.name()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn label(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub scale: Scale,
    pub reps: Option<usize>,
    /// Secret length for the sweep and mitigation experiments.
    pub bits: Option<usize>,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            scale: Scale::Desk,
            reps: None,
            bits: None,
        }
    }

    fn seeds(&self, e: Experiment) -> Vec<u64> {
        (0..self.reps.unwrap_or(e.default_reps()) as u64).map(|i| self.seed + i).collect()
    }

    fn sweep_bits(&self) -> usize {
        self.bits.unwrap_or(match self.scale {
            Scale::Desk => 128,
            Scale::Paper => 1024,
        })
    }

    fn mitigation_bits(&self) -> usize {
        self.bits.unwrap_or(match self.scale {
            Scale::Desk => 256,
            Scale::Paper => 1024,
        })
    }
}

pub fn run(e: Experiment, cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    match e {
        Experiment::E1CpuCpu => e1(cfg, o),
        Experiment::E2CpuGpu => e2(cfg, o),
        Experiment::E3LlcHitMiss => e3(cfg, o),
        Experiment::E4DramContention => e4(cfg, o),
        Experiment::E5SweepZeroFactor => e5(cfg, o),
        Experiment::E6SweepThreads => e6(cfg, o),
        Experiment::E7CovertEval => e7(cfg, o),
        Experiment::E8Mitigations => e8(cfg, o),
        Experiment::E9RecoverMapping => e9(cfg, o),
    }
}

fn f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "nan".into()
    }
}

// ---------------------------------------------------------------------------
// E1-E3: normalized spy latency under a second traffic source.

const LOAD_BASE: PhysAddr = PhysAddr(0x4000_0000);
const SPY_BASE: PhysAddr = PhysAddr(0x1_0000_0000);
const IDLE_LEAD: SimTime = SimTime::from_us(200);

/// Request counts of the slowdown sweeps. The onset needs more distinct
/// lines than the LLC holds, so these are not shrunk at desk scale.
pub const LOAD_COUNTS: [u64; 6] = [1 << 15, 1 << 16, 1 << 17, 1 << 18, 1 << 19, 1 << 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cpu,
    Accelerator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpyPath {
    /// 1 MiB buffer at stride 8, every load flushed first.
    Flushed,
    /// 128 KiB buffer at stride 1, flushed: LLC misses.
    LlcMiss,
    /// 384 KiB buffer at stride 1: larger than L2, small enough to stay
    /// resident in the LLC under streaming writes. LLC hits.
    LlcHit,
}

impl SpyPath {
    pub fn config(self) -> SpyConfig {
        let (buffer_bytes, stride_lines, use_flush) = match self {
            SpyPath::Flushed => (1 << 20, 8, true),
            SpyPath::LlcMiss => (128 << 10, 1, true),
            SpyPath::LlcHit => (384 << 10, 1, false),
        };
        SpyConfig {
            base: SPY_BASE,
            buffer_bytes,
            stride_lines,
            use_flush,
            filter: AddressFilter::default(),
        }
    }

    fn label(self) -> &'static str {
        match self {
            SpyPath::Flushed => "flushed",
            SpyPath::LlcMiss => "llc_miss",
            SpyPath::LlcHit => "llc_hit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Normalized {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

pub fn normalized(samples: &[LatencySample], baseline: f64) -> Normalized {
    if samples.is_empty() || baseline <= 0.0 {
        return Normalized {
            mean: f64::NAN,
            median: f64::NAN,
            p95: f64::NAN,
        };
    }
    let mut v: Vec<u32> = samples.iter().map(|s| s.latency_cycles).collect();
    v.sort_unstable();
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize] as f64 / baseline;
    Normalized {
        mean: LatencyTrace::mean_latency(samples).expect("non-empty") / baseline,
        median: q(0.5),
        p95: q(0.95),
    }
}

#[derive(Debug, Clone)]
pub struct LoadRun {
    pub source: Source,
    pub kind: AccessKind,
    pub requests: u64,
    pub spy: SpyPath,
    pub idle_mean: f64,
    pub load: Normalized,
    /// Writes that reached the memory controller during the run.
    pub delivered_writes: u64,
    pub load_start: SimTime,
    pub load_end: SimTime,
    pub trace: LatencyTrace,
}

impl LoadRun {
    /// Normalized mean latency minus one.
    pub fn slowdown(&self) -> f64 {
        self.load.mean - 1.0
    }

    fn run_id(&self) -> String {
        let src = match self.source {
            Source::Cpu => "cpu",
            Source::Accelerator => "accel",
        };
        let k = match self.kind {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        };
        format!("{src}_{k}_{}_{}", self.requests, self.spy.label())
    }
}

/// Idle spy for a lead time, then `requests` loads or stores from a CPU
/// process or one accelerator kernel over a 32 MiB buffer at stride 1.
pub fn load_run(
    soc: &SocConfig,
    source: Source,
    kind: AccessKind,
    requests: u64,
    spy: SpyPath,
    seed: u64,
) -> Result<LoadRun, ExperimentError> {
    let mut sys = System::new(soc, seed).map_err(|e| ExperimentError::Other(format!("{e:?}")))?;
    let sc = spy.config();
    if spy == SpyPath::LlcHit {
        sys.warm_llc_clean(sc.addresses(&soc.mapping)?);
    }
    let id = sys.add_spy(&sc, SimTime::ZERO, SimTime::MAX)?;
    let limit = SimTime::from_secs_f64(30.0);
    let (load_start, load_end) = match source {
        Source::Cpu => {
            let w = CpuWorkerConfig {
                base: LOAD_BASE,
                buffer_bytes: 32 << 20,
                stride_lines: 1,
                kind,
                count: requests,
                use_flush: kind == AccessKind::Read,
            };
            let wid = sys.add_worker(&w, IDLE_LEAD)?;
            sys.run_to_completion(SimTime::from_us(5), limit);
            (IDLE_LEAD, sys.agent_done(wid).unwrap_or(limit))
        }
        Source::Accelerator => {
            let k = KernelConfig {
                base: LOAD_BASE,
                buffer_bytes: 32 << 20,
                stride_lines: 1,
                access_kind: kind,
                accesses: Some(requests),
                ..KernelConfig::default()
            };
            sys.launch_kernels(&[k], IDLE_LEAD)?;
            sys.run_to_completion(SimTime::from_us(5), limit);
            let r = &sys.kernels()[0];
            (r.start, r.end.unwrap_or(limit))
        }
    };
    let trace = sys.take_trace(id);
    let idle_mean = LatencyTrace::mean_latency(trace.window(SimTime::ZERO, IDLE_LEAD)).unwrap_or(f64::NAN);
    let load = normalized(trace.window(load_start, load_end), idle_mean);
    Ok(LoadRun {
        source,
        kind,
        requests,
        spy,
        idle_mean,
        load,
        delivered_writes: sys.mc_stats().iter().map(|c| c.writes_dispatched).sum(),
        load_start,
        load_end,
        trace,
    })
}

fn load_table(runs: &[LoadRun]) -> Table {
    let mut t = Table::new(&[
        "source", "kind", "spy", "requests", "delivered_writes", "idle_mean_cycles", "norm_mean", "norm_median",
        "norm_p95", "load_us",
    ]);
    for r in runs {
        let id = r.run_id();
        let mut parts = id.splitn(3, '_');
        t.push(vec![
            parts.next().unwrap_or("").into(),
            parts.next().unwrap_or("").into(),
            r.spy.label().into(),
            r.requests.to_string(),
            r.delivered_writes.to_string(),
            f(r.idle_mean),
            f(r.load.mean),
            f(r.load.median),
            f(r.load.p95),
            f((r.load_end - r.load_start).as_us_f64()),
        ]);
    }
    t
}

fn load_sweep(soc: &SocConfig, source: Source, spy: SpyPath, kinds: &[AccessKind], seed: u64) -> Result<Vec<LoadRun>, ExperimentError> {
    let points: Vec<(AccessKind, u64)> = kinds.iter().flat_map(|&k| LOAD_COUNTS.iter().map(move |&n| (k, n))).collect();
    points
        .par_iter()
        .map(|&(k, n)| load_run(soc, source, k, n, spy, seed))
        .collect()
}

fn raw_of(runs: &[LoadRun]) -> Vec<RawRun> {
    runs.iter()
        .map(|r| RawRun {
            run_id: r.run_id(),
            samples: r.trace.samples().to_vec(),
        })
        .collect()
}

pub fn e1_runs(cfg: &HarnessConfig, seed: u64) -> Result<Vec<LoadRun>, ExperimentError> {
    load_sweep(&cfg.soc, Source::Cpu, SpyPath::Flushed, &[AccessKind::Read, AccessKind::Write], seed)
}

fn e1(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let runs = e1_runs(cfg, o.seed)?;
    Ok(Artifacts {
        summary: load_table(&runs),
        raw: raw_of(&runs),
        extra: vec![],
        metrics: json!({}),
    })
}

/// Spy slowdown under back-to-back kernels that all send one bit value,
/// in the covert-channel setting.
#[derive(Debug, Clone)]
pub struct BitTraffic {
    pub bit: bool,
    pub idle_mean: f64,
    pub busy_mean: f64,
    pub ratio: f64,
    pub kernel_period: SimTime,
    pub trace: LatencyTrace,
}

pub fn bit_traffic(setup: &CovertSetup, bit: bool, kernels: usize) -> Result<BitTraffic, ExperimentError> {
    let p = probe_slowdown(setup, bit, kernels)?;
    let idle_mean = LatencyTrace::mean_latency(p.idle(setup.idle_lead)).unwrap_or(f64::NAN);
    let busy_mean = LatencyTrace::mean_latency(p.busy()).unwrap_or(f64::NAN);
    Ok(BitTraffic {
        bit,
        idle_mean,
        busy_mean,
        ratio: busy_mean / idle_mean,
        kernel_period: p.kernel_period(),
        trace: p.trace,
    })
}

pub fn e2_runs(cfg: &HarnessConfig, seed: u64) -> Result<(Vec<LoadRun>, Vec<BitTraffic>), ExperimentError> {
    let runs = load_sweep(&cfg.soc, Source::Accelerator, SpyPath::Flushed, &[AccessKind::Read, AccessKind::Write], seed)?;
    let setup = cfg.covert.setup(&cfg.soc, cfg.covert.params(false), seed);
    let bits = [true, false]
        .par_iter()
        .map(|&b| bit_traffic(&setup, b, cfg.covert.calibration_kernels))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((runs, bits))
}

fn e2(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let (runs, bits) = e2_runs(cfg, o.seed)?;
    let mut raw = raw_of(&runs);
    let mut extra = Table::new(&["bit", "idle_mean_cycles", "busy_mean_cycles", "ratio", "kernel_period_us"]);
    for b in &bits {
        extra.push(vec![
            (b.bit as u8).to_string(),
            f(b.idle_mean),
            f(b.busy_mean),
            f(b.ratio),
            f(b.kernel_period.as_us_f64()),
        ]);
        raw.push(RawRun {
            run_id: format!("variant1_bit{}", b.bit as u8),
            samples: b.trace.samples().to_vec(),
        });
    }
    Ok(Artifacts {
        summary: load_table(&runs),
        raw,
        extra: vec![("bit_traffic.csv".into(), extra.to_csv())],
        metrics: json!({
            "bit1_ratio": bits[0].ratio,
            "bit0_ratio": bits[1].ratio,
        }),
    })
}

pub fn e3_runs(cfg: &HarnessConfig, seed: u64) -> Result<Vec<LoadRun>, ExperimentError> {
    let mut v = load_sweep(&cfg.soc, Source::Accelerator, SpyPath::LlcHit, &[AccessKind::Write], seed)?;
    v.extend(load_sweep(&cfg.soc, Source::Accelerator, SpyPath::LlcMiss, &[AccessKind::Write], seed)?);
    Ok(v)
}

fn e3(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let runs = e3_runs(cfg, o.seed)?;
    Ok(Artifacts {
        summary: load_table(&runs),
        raw: raw_of(&runs),
        extra: vec![],
        metrics: json!({}),
    })
}

// ---------------------------------------------------------------------------
// E4: contention-case accounting.

#[derive(Debug, Clone)]
pub struct ContentionRun {
    pub layout: &'static str,
    pub kernel: KernelConfig,
    pub reads: Vec<PhysAddr>,
    pub writes: Vec<PhysAddr>,
    pub per_read: Vec<CaseCounts>,
    pub trace: LatencyTrace,
}

pub const E4_READS: u64 = 2048;

pub fn e4_writes(scale: Scale) -> u64 {
    match scale {
        Scale::Desk => 1 << 15,
        Scale::Paper => 1 << 18,
    }
}

/// Two kernel layouts with the same write count: every line of a buffer of
/// exactly that many lines, or the first half of a buffer twice as large.
pub fn e4_runs(cfg: &HarnessConfig, scale: Scale, seed: u64) -> Result<Vec<ContentionRun>, ExperimentError> {
    let n = e4_writes(scale);
    let layouts: [(&'static str, u64); 2] = [("all_lines", n * 64), ("half_of_double", n * 128)];
    layouts
        .par_iter()
        .map(|&(layout, bytes)| {
            let kernel = KernelConfig {
                base: LOAD_BASE,
                buffer_bytes: bytes,
                stride_lines: 1,
                accesses: Some(n),
                ..KernelConfig::default()
            };
            let mut sys = System::new(&cfg.soc, seed).map_err(|e| ExperimentError::Other(format!("{e:?}")))?;
            sys.track_contention();
            let spy = sys.add_counted_spy(&SpyPath::LlcMiss.config(), cfg.soc.accel.launch_overhead, E4_READS)?;
            sys.launch_kernels(std::slice::from_ref(&kernel), SimTime::ZERO)?;
            sys.run_to_completion(SimTime::from_us(5), SimTime::from_secs_f64(30.0));
            let c = sys.contention().expect("tracking enabled");
            Ok(ContentionRun {
                layout,
                reads: c.read_addrs().to_vec(),
                writes: c.write_addrs().to_vec(),
                per_read: c.per_read(),
                trace: sys.take_trace(spy),
                kernel,
            })
        })
        .collect()
}

fn e4(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let runs = e4_runs(cfg, o.scale, o.seed)?;
    let mut t = Table::new(&[
        "layout", "writes", "reads", "channel_min", "channel_max", "bank_group_min", "bank_group_mean",
        "bank_group_max", "bank_min", "bank_mean", "bank_max", "mean_latency_cycles",
    ]);
    let mut per = String::from("layout,read_index,addr_hex,channel_cases,bank_group_cases,bank_cases,latency_cycles\n");
    for r in &runs {
        let col = |g: fn(&CaseCounts) -> u64| {
            let v: Vec<u64> = r.per_read.iter().map(g).collect();
            let mean = v.iter().sum::<u64>() as f64 / v.len().max(1) as f64;
            (v.iter().copied().min().unwrap_or(0), mean, v.iter().copied().max().unwrap_or(0))
        };
        let (c0, _, c1) = col(|c| c.channel);
        let (g0, gm, g1) = col(|c| c.bank_group);
        let (b0, bm, b1) = col(|c| c.bank);
        t.push(vec![
            r.layout.into(),
            r.writes.len().to_string(),
            r.reads.len().to_string(),
            c0.to_string(),
            c1.to_string(),
            g0.to_string(),
            f(gm),
            g1.to_string(),
            b0.to_string(),
            f(bm),
            b1.to_string(),
            f(LatencyTrace::mean_latency(r.trace.samples()).unwrap_or(f64::NAN)),
        ]);
        for (i, (c, a)) in r.per_read.iter().zip(&r.reads).enumerate() {
            let lat = r.trace.samples().get(i).map_or(0, |s| s.latency_cycles);
            let _ = writeln!(per, "{},{i},{:#x},{},{},{},{lat}", r.layout, a.0, c.channel, c.bank_group, c.bank);
        }
    }
    Ok(Artifacts {
        raw: runs
            .iter()
            .map(|r| RawRun {
                run_id: r.layout.into(),
                samples: r.trace.samples().to_vec(),
            })
            .collect(),
        summary: t,
        extra: vec![("contention_cases.csv".into(), per)],
        metrics: json!({ "writes": e4_writes(o.scale), "reads": E4_READS }),
    })
}

// ---------------------------------------------------------------------------
// E5-E8: covert-channel runs.

#[derive(Debug, Clone)]
pub struct CovertPoint {
    pub label: String,
    pub params: EncodingParams,
    pub seed: u64,
    pub run: CovertRun,
}

impl CovertPoint {
    pub fn error_rate(&self) -> f64 {
        self.run.metrics.error_rate
    }
}

/// Decoder state from the configured variant-1 setup; the sweeps and
/// mitigations reuse it, as an attacker calibrated on the default machine.
pub fn default_state(cfg: &HarnessConfig, seed: u64) -> Result<DecoderState, ExperimentError> {
    let setup = cfg.covert.setup(&cfg.soc, cfg.covert.params(false), seed);
    Ok(calibrate_setup(&setup)?.state)
}

fn send(setup: &CovertSetup, state: &DecoderState, bits: usize, seed: u64) -> Result<CovertRun, ExperimentError> {
    let mut s = setup.clone();
    s.oracle_sync_fallback = true;
    let secret = SecretMessage::random(bits, seed)?;
    Ok(transmit(&s, state, &secret)?)
}

fn covert_table(points: &[CovertPoint]) -> Table {
    let mut t = Table::new(&[
        "label", "seed", "stride_lines", "zero_factor", "local_threads", "global_threads", "bits", "errors",
        "error_rate", "bit_rate_bps", "sync", "phase_error",
    ]);
    for p in points {
        let m = &p.run.metrics;
        t.push(vec![
            p.label.clone(),
            p.seed.to_string(),
            p.params.stride_lines.to_string(),
            p.params.zero_factor.to_string(),
            p.params.local_threads.to_string(),
            p.params.global_threads.to_string(),
            m.bits.to_string(),
            m.errors.to_string(),
            f(m.error_rate),
            f(m.bit_rate_bps),
            if p.run.lock.is_some() { "locked".into() } else { "oracle".into() },
            p.run.phase_error_fraction().map_or("nan".into(), f),
        ]);
    }
    t
}

fn covert_raw(points: &[CovertPoint]) -> Vec<RawRun> {
    points
        .iter()
        .map(|p| RawRun {
            run_id: format!("{}_s{}", p.label, p.seed),
            samples: p.run.trace.samples().to_vec(),
        })
        .collect()
}

fn bits_csv(points: &[CovertPoint]) -> String {
    let mut s = String::from("run_id,bit_index,sent,decoded,mean_cycles,confidence,low_confidence\n");
    for p in points {
        for (i, (d, &b)) in p.run.decoded.decisions.iter().zip(p.run.sent.bits()).enumerate() {
            let _ = writeln!(
                s,
                "{}_s{},{i},{},{},{},{},{}",
                p.label,
                p.seed,
                b as u8,
                d.bit as u8,
                d.mean.map_or("nan".into(), f),
                f(d.confidence),
                d.low_confidence as u8
            );
        }
    }
    s
}

fn covert_artifacts(points: &[CovertPoint], metrics: serde_json::Value) -> Artifacts {
    Artifacts {
        raw: covert_raw(points),
        summary: covert_table(points),
        extra: vec![("bits.csv".into(), bits_csv(points))],
        metrics,
    }
}

fn sweep(
    cfg: &HarnessConfig,
    o: &RunOptions,
    e: Experiment,
    grid: Vec<(String, EncodingParams)>,
) -> Result<Vec<CovertPoint>, ExperimentError> {
    let state = default_state(cfg, o.seed)?;
    let bits = o.sweep_bits();
    let jobs: Vec<(String, EncodingParams, u64)> = o
        .seeds(e)
        .into_iter()
        .flat_map(|s| grid.iter().map(move |(l, p)| (l.clone(), p.clone(), s)))
        .collect();
    jobs.into_par_iter()
        .map(|(label, params, seed)| {
            let setup = cfg.covert.setup(&cfg.soc, params.clone(), seed);
            Ok(CovertPoint {
                run: send(&setup, &state, bits, seed)?,
                label,
                params,
                seed,
            })
        })
        .collect()
}

pub const E5_ZERO_FACTORS: [u32; 4] = [1, 2, 4, 8];
pub const E5_STRIDES: [u64; 3] = [8, 16, 32];

pub fn e5_points(cfg: &HarnessConfig, o: &RunOptions) -> Result<Vec<CovertPoint>, ExperimentError> {
    let base = cfg.covert.params(false);
    let grid = E5_STRIDES
        .iter()
        .flat_map(|&s| {
            let base = base.clone();
            E5_ZERO_FACTORS.iter().map(move |&z| {
                (
                    format!("S{s}_Z{z}"),
                    EncodingParams {
                        stride_lines: s,
                        zero_factor: z,
                        ..base.clone()
                    },
                )
            })
        })
        .collect();
    sweep(cfg, o, Experiment::E5SweepZeroFactor, grid)
}

fn e5(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let pts = e5_points(cfg, o)?;
    Ok(covert_artifacts(&pts, json!({ "bits": o.sweep_bits() })))
}

pub const E6_LOCAL: [u32; 5] = [8, 16, 32, 64, 128];
pub const E6_GLOBAL: [u32; 5] = [256, 512, 1024, 2048, 4096];

pub fn e6_points(cfg: &HarnessConfig, o: &RunOptions) -> Result<Vec<CovertPoint>, ExperimentError> {
    let base = cfg.covert.params(false);
    let mut grid = vec![];
    for l in E6_LOCAL {
        grid.push((
            format!("L{l}_G256"),
            EncodingParams {
                local_threads: l,
                global_threads: 256,
                ..base.clone()
            },
        ));
    }
    // L128_G256 is already in the local-thread sweep.
    for g in E6_GLOBAL.into_iter().filter(|&g| g != 256) {
        grid.push((
            format!("L128_G{g}"),
            EncodingParams {
                local_threads: 128,
                global_threads: g,
                ..base.clone()
            },
        ));
    }
    sweep(cfg, o, Experiment::E6SweepThreads, grid)
}

fn e6(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let pts = e6_points(cfg, o)?;
    Ok(covert_artifacts(&pts, json!({ "bits": o.sweep_bits() })))
}

/// Both variants over the repetition seeds, each seed calibrating its own
/// decoder; the secret length comes from the configuration.
pub fn e7_points(cfg: &HarnessConfig, o: &RunOptions) -> Result<Vec<CovertPoint>, ExperimentError> {
    let bits = o.bits.unwrap_or(cfg.covert.bits);
    let jobs: Vec<(bool, u64)> = [false, true]
        .iter()
        .flat_map(|&v2| o.seeds(Experiment::E7CovertEval).into_iter().map(move |s| (v2, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(v2, seed)| {
            let params = cfg.covert.params(v2);
            let setup = cfg.covert.setup(&cfg.soc, params.clone(), seed);
            let state = calibrate_setup(&setup)?.state;
            Ok(CovertPoint {
                label: if v2 { "variant2".into() } else { "variant1".into() },
                run: send(&setup, &state, bits, seed)?,
                params,
                seed,
            })
        })
        .collect()
}

fn e7(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let pts = e7_points(cfg, o)?;
    let agg = |l: &str| {
        let v: Vec<&CovertPoint> = pts.iter().filter(|p| p.label == l).collect();
        let n = v.len().max(1) as f64;
        json!({
            "mean_error_rate": v.iter().map(|p| p.error_rate()).sum::<f64>() / n,
            "max_error_rate": v.iter().map(|p| p.error_rate()).fold(0.0, f64::max),
            "mean_bit_rate_bps": v.iter().map(|p| p.run.metrics.bit_rate_bps).sum::<f64>() / n,
        })
    };
    let m = json!({ "variant1": agg("variant1"), "variant2": agg("variant2") });
    Ok(covert_artifacts(&pts, m))
}

#[derive(Debug, Clone)]
pub struct MitigationRow {
    pub point: CovertPoint,
    pub policy: &'static str,
    /// Spy slowdown under back-to-back `1` kernels in this setting.
    pub bit1_ratio: f64,
}

/// Variant 1 under each controller policy, decoded with the default-machine
/// threshold. Staged reads keep the trojan on bank groups with BG0 = 0 and
/// the spy on BG0 = 1; partitioning gives channel 0 to the accelerator and
/// confines the spy to channel 1.
pub fn e8_rows(cfg: &HarnessConfig, o: &RunOptions) -> Result<Vec<MitigationRow>, ExperimentError> {
    let state = default_state(cfg, o.seed)?;
    let bits = o.mitigation_bits();
    let channels = cfg.soc.mapping.channels();
    let groups = 1u32 << cfg.soc.mapping.bank_group_fns.len();
    let bg0 = |one: bool| (0..groups).filter(|g| (g & 1 == 1) == one).fold(0u32, |m, g| m | 1 << g);
    let mut partition = vec![ChannelOwner::Cpu; channels];
    partition[0] = ChannelOwner::Accelerator;
    let cases: Vec<(&'static str, ControllerPolicy)> = vec![
        ("drain_when_full", ControllerPolicy::DrainWhenFull),
        ("read_priority", ControllerPolicy::ReadPriority),
        ("channel_partition", ControllerPolicy::ChannelPartition(partition)),
        ("staged_reads", ControllerPolicy::StagedReads),
    ];
    let jobs: Vec<_> = o
        .seeds(Experiment::E8Mitigations)
        .into_iter()
        .flat_map(|s| cases.iter().cloned().map(move |c| (c, s)))
        .collect();
    jobs.into_par_iter()
        .map(|((policy, pol), seed)| {
            let mut soc = cfg.soc.clone();
            soc.mc.policy = pol;
            let mut params = cfg.covert.params(false);
            let mut setup = cfg.covert.setup(&soc, params.clone(), seed);
            match policy {
                "channel_partition" => setup.spy.filter.channel = Some(channels as u8 - 1),
                "staged_reads" => {
                    params.bank_group_mask = bg0(false);
                    setup.params = params.clone();
                    setup.spy.filter.bank_group_mask = bg0(true);
                }
                _ => {}
            }
            let bit1_ratio = bit_traffic(&setup, true, cfg.covert.calibration_kernels)?.ratio;
            Ok(MitigationRow {
                point: CovertPoint {
                    label: policy.into(),
                    run: send(&setup, &state, bits, seed)?,
                    params,
                    seed,
                },
                policy,
                bit1_ratio,
            })
        })
        .collect()
}

fn e8(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let rows = e8_rows(cfg, o)?;
    let pts: Vec<CovertPoint> = rows.iter().map(|r| r.point.clone()).collect();
    let mut a = covert_artifacts(&pts, json!({}));
    a.summary.header.push("bit1_slowdown_ratio".into());
    for (row, r) in a.summary.rows.iter_mut().zip(&rows) {
        row.push(f(r.bit1_ratio));
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// E9: mapping recovery.

#[derive(Debug, Clone)]
pub struct RecoveryRow {
    pub id: String,
    pub truth: AddressMapping,
    pub recovered: Result<AddressMapping, String>,
    pub partition_equal: bool,
}

pub const E9_RANDOM_MAPPINGS: u64 = 20;
const PARTITION_SAMPLES: usize = 10_000;

pub fn recover_with_probes(
    truth: &AddressMapping,
    soc: &SocConfig,
    params: &RecoveryParams,
) -> Result<AddressMapping, String> {
    let clock = ClockDomain::new("mc", soc.mc_hz).map_err(|e| e.to_string())?;
    let mut ch = DrainChannelProbe::new(truth.clone(), soc.dram, clock.clone());
    let mut bank = DramPairProbe::new(truth.clone(), soc.dram, clock);
    recover_mapping(&mut ch, &mut bank, params)
        .map(|r| r.mapping)
        .map_err(|e| e.to_string())
}

pub fn partition_sample(seed: u64, bits: u32) -> Vec<PhysAddr> {
    let mask = ((1u64 << bits) - 1) & !63;
    (0..PARTITION_SAMPLES as u64)
        .map(|i| PhysAddr(splitmix64(seed.rotate_left(32) ^ i) & mask))
        .collect()
}

pub fn e9_rows(cfg: &HarnessConfig, seed: u64) -> Vec<RecoveryRow> {
    let m = &cfg.soc.mapping;
    let params = RecoveryParams {
        row_shift: m.row_shift,
        bank_group_functions: m.bank_group_fns.len(),
        bank_functions: m.bank_fns.len(),
        seed,
        ..RecoveryParams::default()
    };
    let addrs = partition_sample(seed, 31);
    let mut cases = vec![("configured".to_string(), m.clone())];
    for i in 0..E9_RANDOM_MAPPINGS {
        cases.push((format!("random{i}"), random_mapping(seed * 1000 + i, 6..=20, m.row_shift)));
    }
    cases
        .into_par_iter()
        .map(|(id, truth)| {
            let p = RecoveryParams {
                bank_group_functions: truth.bank_group_fns.len(),
                bank_functions: truth.bank_fns.len(),
                ..params.clone()
            };
            let recovered = recover_with_probes(&truth, &cfg.soc, &p);
            let partition_equal = recovered.as_ref().is_ok_and(|r| same_partition(&truth, r, &addrs));
            RecoveryRow {
                id,
                truth,
                recovered,
                partition_equal,
            }
        })
        .collect()
}

fn masks(m: &AddressMapping) -> String {
    m.functions()
        .map(|x| format!("{}={:#x}", x.label(), x.mask()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn e9(cfg: &HarnessConfig, o: &RunOptions) -> Result<Artifacts, ExperimentError> {
    let rows = e9_rows(cfg, o.seed);
    let mut t = Table::new(&["mapping", "truth", "recovered", "partition_equal"]);
    for r in &rows {
        t.push(vec![
            r.id.clone(),
            masks(&r.truth),
            match &r.recovered {
                Ok(m) => masks(m),
                Err(e) => format!("error: {}", e.replace(',', ";")),
            },
            r.partition_equal.to_string(),
        ]);
    }
    let configured = rows[0].recovered.as_ref().map(mapping_text).unwrap_or_default();
    Ok(Artifacts {
        raw: vec![],
        summary: t,
        extra: vec![("recovered_mapping.conf".into(), configured)],
        metrics: json!({ "all_equal": rows.iter().all(|r| r.partition_equal) }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_prefixes() {
        assert_eq!(Experiment::parse("E7").unwrap(), Experiment::E7CovertEval);
        assert_eq!(Experiment::parse("e4_dram_contention").unwrap(), Experiment::E4DramContention);
        let e = Experiment::parse("E10").unwrap_err().to_string();
        assert!(e.contains("E9_recover_mapping") && e.contains("E1_cpu_cpu"));
    }

    #[test]
    fn normalized_quantiles() {
        let mut t = LatencyTrace::new();
        for i in 0..100u32 {
            t.push(SimTime::from_ns(i as u64 + 1), 100 + i, PhysAddr(0));
        }
        let n = normalized(t.samples(), 100.0);
        assert!((n.mean - 1.495).abs() < 1e-9);
        assert_eq!(n.median, 1.5);
        assert_eq!(n.p95, 1.94);
    }
}
