//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! Every key has a default, so any section (or the whole file) may be
//! omitted. Overrides use `section.key=value` and go through the same code
//! path as file lines.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use drainsim::addrmap::{AddressMapping, XorFunction};
use drainsim::cache::CacheGeometry;
use drainsim::covert::{CovertSetup, EncodingParams};
use drainsim::memctrl::{ChannelOwner, ControllerPolicy};
use drainsim::{SimTime, SocConfig};

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.conf");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line in the file; `None` for overrides and whole-config checks.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSettings {
    pub seed: u64,
    pub max_raw_samples_per_run: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            seed: 1,
            max_raw_samples_per_run: 200_000,
        }
    }
}

/// Trojan and spy parameters shared by the covert-channel experiments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovertSettings {
    pub bits: usize,
    pub v1_stride_lines: u64,
    pub v1_zero_factor: u32,
    pub v2_stride_lines: u64,
    pub v2_zero_factor: u32,
    pub v2_channel: u8,
    pub local_threads: u32,
    pub global_threads: u32,
    pub wavefront_size: u32,
    pub buffer_bytes: u64,
    pub spy_buffer_bytes: u64,
    pub spy_stride_lines: u64,
    pub idle_lead_us: u64,
    pub calibration_kernels: usize,
}

impl Default for CovertSettings {
    fn default() -> Self {
        let v1 = EncodingParams::variant1();
        let v2 = EncodingParams::variant2(0);
        let spy = v1.spy();
        CovertSettings {
            bits: 1024,
            v1_stride_lines: v1.stride_lines,
            v1_zero_factor: v1.zero_factor,
            v2_stride_lines: v2.stride_lines,
            v2_zero_factor: v2.zero_factor,
            v2_channel: 0,
            local_threads: v1.local_threads,
            global_threads: v1.global_threads,
            wavefront_size: v1.wavefront_size,
            buffer_bytes: v1.buffer_bytes,
            spy_buffer_bytes: spy.buffer_bytes,
            spy_stride_lines: spy.stride_lines,
            idle_lead_us: 300,
            calibration_kernels: 4,
        }
    }
}

impl CovertSettings {
    pub fn params(&self, variant2: bool) -> EncodingParams {
        let base = if variant2 {
            EncodingParams {
                stride_lines: self.v2_stride_lines,
                zero_factor: self.v2_zero_factor,
                ..EncodingParams::variant2(self.v2_channel)
            }
        } else {
            EncodingParams {
                stride_lines: self.v1_stride_lines,
                zero_factor: self.v1_zero_factor,
                ..EncodingParams::variant1()
            }
        };
        EncodingParams {
            local_threads: self.local_threads,
            global_threads: self.global_threads,
            wavefront_size: self.wavefront_size,
            buffer_bytes: self.buffer_bytes,
            ..base
        }
    }

    pub fn setup(&self, soc: &SocConfig, p: EncodingParams, seed: u64) -> CovertSetup {
        let mut s = CovertSetup::new(soc.clone(), p, seed);
        s.spy.buffer_bytes = self.spy_buffer_bytes;
        s.spy.stride_lines = self.spy_stride_lines;
        s.idle_lead = SimTime::from_us(self.idle_lead_us);
        s.calibration_kernels = self.calibration_kernels;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HarnessConfig {
    pub soc: SocConfig,
    pub run: RunSettings,
    pub covert: CovertSettings,
}

impl HarnessConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, Vec<ConfigError>> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            vec![ConfigError {
                line: None,
                message: format!("cannot read {}: {e}", path.display()),
            }]
        })?;
        Self::parse(&text, overrides)
    }

    /// Parses `text`, applies `overrides` and validates; reports every
    /// problem found.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, Vec<ConfigError>> {
        let mut b = Builder::default();
        let mut errors = vec![];
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| ConfigError {
                line: Some(i + 1),
                message: m,
            };
            if let Some(rest) = line.strip_prefix('[') {
                match rest.strip_suffix(']') {
                    Some(name) if SECTIONS.contains(&name.trim()) => section = name.trim().to_string(),
                    Some(name) => errors.push(err(format!("unknown section [{}]", name.trim()))),
                    None => errors.push(err(format!("malformed section header `{line}`"))),
                }
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !section.is_empty() => {
                    if let Err(m) = b.set(&section, k.trim(), v.trim()) {
                        errors.push(err(format!("{section}.{}: {m}", k.trim())));
                    }
                }
                Some(_) => errors.push(err("key outside of any section".into())),
                None => errors.push(err(format!("expected `key = value`, got `{line}`"))),
            }
        }
        for o in overrides {
            let err = |m: String| ConfigError {
                line: None,
                message: format!("override `{o}`: {m}"),
            };
            match o.split_once('=') {
                Some((path, v)) => match path.trim().split_once('.') {
                    Some((s, k)) if SECTIONS.contains(&s) => {
                        if let Err(m) = b.set(s, k, v.trim()) {
                            errors.push(err(m));
                        }
                    }
                    _ => errors.push(err("expected section.key=value".into())),
                },
                None => errors.push(err("expected section.key=value".into())),
            }
        }
        let cfg = b.finish(&mut errors);
        errors.extend(cfg.soc.validate().into_iter().map(|e| ConfigError {
            line: None,
            message: e.to_string(),
        }));
        errors.extend(cfg.covert_issues().into_iter().map(|m| ConfigError { line: None, message: m }));
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    fn covert_issues(&self) -> Vec<String> {
        let mut v = vec![];
        let c = &self.covert;
        if !(drainsim::covert::SecretMessage::MIN_BITS..=drainsim::covert::SecretMessage::MAX_BITS).contains(&c.bits) {
            v.push(format!("covert.bits: {} outside 128..=4096", c.bits));
        }
        for (k, x) in [
            ("covert.v1_stride_lines", c.v1_stride_lines),
            ("covert.v2_stride_lines", c.v2_stride_lines),
            ("covert.spy_stride_lines", c.spy_stride_lines),
            ("covert.v1_zero_factor", c.v1_zero_factor as u64),
            ("covert.v2_zero_factor", c.v2_zero_factor as u64),
        ] {
            if x == 0 {
                v.push(format!("{k} must be at least 1"));
            }
        }
        if c.v2_channel as usize >= self.soc.mapping.channels() {
            v.push(format!("covert.v2_channel: no channel {}", c.v2_channel));
        }
        for p in [self.covert.params(false), self.covert.params(true)] {
            if let Err(e) = drainsim::covert::encode_bit(true, &p).validate() {
                v.push(format!("covert: {e}"));
                break;
            }
        }
        v
    }

    /// Canonical text form; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let s = &self.soc;
        let c = &self.covert;
        let mut t = String::new();
        let mut sec = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(t, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(t, "{k} = {v}");
            }
            t.push('\n');
        };
        sec("run", vec![
            ("seed", self.run.seed.to_string()),
            ("max_raw_samples_per_run", self.run.max_raw_samples_per_run.to_string()),
        ]);
        sec("clocks", vec![
            ("cpu_hz", s.cpu_hz.to_string()),
            ("accel_hz", s.accel_hz.to_string()),
            ("mc_hz", s.mc_hz.to_string()),
        ]);
        sec("cache", vec![
            ("llc_size", size(s.llc.size_bytes)),
            ("llc_ways", s.llc.ways.to_string()),
            ("l2_size", size(s.l2.size_bytes)),
            ("l2_ways", s.l2.ways.to_string()),
            ("igpu_l3_size", size(s.accel_l3.size_bytes)),
            ("igpu_l3_ways", s.accel_l3.ways.to_string()),
            ("wb_entries", s.writeback_entries.to_string()),
        ]);
        let (policy, owners) = match &s.mc.policy {
            ControllerPolicy::DrainWhenFull => ("drain_when_full", None),
            ControllerPolicy::ReadPriority => ("read_priority", None),
            ControllerPolicy::StagedReads => ("staged_reads", None),
            ControllerPolicy::ChannelPartition(o) => ("channel_partition", Some(o)),
        };
        let mut mc = vec![
            ("policy", policy.to_string()),
            ("write_entries", s.mc.write_entries.to_string()),
            ("read_entries", s.mc.read_entries.to_string()),
            ("pending_entries", s.mc.pending_entries.to_string()),
        ];
        if let Some(o) = owners {
            let names: Vec<&str> = o.iter().map(|&x| owner_name(x)).collect();
            mc.push(("partition", format!("[{}]", names.join(", "))));
        }
        sec("memctrl", mc);
        let d = &s.dram;
        sec("dram", vec![
            ("row_hit_cycles", d.row_hit_cycles.to_string()),
            ("row_miss_cycles", d.row_miss_cycles.to_string()),
            ("row_conflict_cycles", d.row_conflict_cycles.to_string()),
            ("turnaround_rw_cycles", d.turnaround_rw_cycles.to_string()),
            ("turnaround_wr_cycles", d.turnaround_wr_cycles.to_string()),
        ]);
        t.push_str(&mapping_text(&s.mapping));
        t.push('\n');
        let l = &s.latencies;
        let mut sec = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(t, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(t, "{k} = {v}");
            }
            t.push('\n');
        };
        sec("latency", vec![
            ("l2_hit_cycles", l.l2_hit_cycles.to_string()),
            ("llc_hit_cycles", l.llc_hit_cycles.to_string()),
            ("uncore_cycles", l.uncore_cycles.to_string()),
            ("igpu_l3_hit_cycles", l.accel_l3_hit_cycles.to_string()),
            ("igpu_llc_cycles", l.accel_llc_cycles.to_string()),
            ("igpu_uncore_cycles", l.accel_uncore_cycles.to_string()),
            ("igpu_same_line_cycles", l.accel_same_line_cycles.to_string()),
        ]);
        let a = &s.accel;
        sec("accelerator", vec![
            ("subslices", a.geometry.subslices.to_string()),
            ("eus_per_subslice", a.geometry.eus_per_subslice.to_string()),
            ("threads_per_eu", a.geometry.threads_per_eu.to_string()),
            ("launch_overhead_ns", (a.launch_overhead.ps() / 1000).to_string()),
            ("kernel_gap_ns", (a.kernel_gap.ps() / 1000).to_string()),
            ("wg_dispatch_ns", (a.wg_dispatch.ps() / 1000).to_string()),
            ("wgs_per_subslice", a.wgs_per_subslice.to_string()),
            ("max_outstanding_reads", a.max_outstanding_reads.to_string()),
        ]);
        sec("cpu", vec![
            ("loop_overhead_cycles", s.cpu_loop.loop_overhead_cycles.to_string()),
            ("jitter_cycles", s.cpu_loop.jitter_cycles.to_string()),
        ]);
        sec("covert", vec![
            ("bits", c.bits.to_string()),
            ("v1_stride_lines", c.v1_stride_lines.to_string()),
            ("v1_zero_factor", c.v1_zero_factor.to_string()),
            ("v2_stride_lines", c.v2_stride_lines.to_string()),
            ("v2_zero_factor", c.v2_zero_factor.to_string()),
            ("v2_channel", c.v2_channel.to_string()),
            ("local_threads", c.local_threads.to_string()),
            ("global_threads", c.global_threads.to_string()),
            ("wavefront_size", c.wavefront_size.to_string()),
            ("buffer_size", size(c.buffer_bytes)),
            ("spy_buffer_size", size(c.spy_buffer_bytes)),
            ("spy_stride_lines", c.spy_stride_lines.to_string()),
            ("idle_lead_us", c.idle_lead_us.to_string()),
            ("calibration_kernels", c.calibration_kernels.to_string()),
        ]);
        t.truncate(t.trim_end().len());
        t.push('\n');
        t
    }
}

const SECTIONS: [&str; 10] = [
    "run", "clocks", "cache", "memctrl", "dram", "mapping", "latency", "accelerator", "cpu", "covert",
];

/// The `[mapping]` section for `m`.
pub fn mapping_text(m: &AddressMapping) -> String {
    let mut t = String::from("[mapping]\n");
    let list = |f: &XorFunction| {
        let b: Vec<String> = f.bits().iter().map(|x| x.to_string()).collect();
        format!("[{}]", b.join(", "))
    };
    let _ = writeln!(t, "channel = {}", m.channel_fn.as_ref().map_or("[]".into(), list));
    let _ = writeln!(t, "rank = {}", m.rank_fn.as_ref().map_or("[]".into(), list));
    let _ = writeln!(t, "bank_group_count = {}", m.bank_group_fns.len());
    for (i, f) in m.bank_group_fns.iter().enumerate() {
        let _ = writeln!(t, "bank_group{i} = {}", list(f));
    }
    let _ = writeln!(t, "bank_count = {}", m.bank_fns.len());
    for (i, f) in m.bank_fns.iter().enumerate() {
        let _ = writeln!(t, "bank{i} = {}", list(f));
    }
    let _ = writeln!(t, "row_shift = {}", m.row_shift);
    t
}

fn size(b: u64) -> String {
    for (s, u) in [(30, "GiB"), (20, "MiB"), (10, "KiB")] {
        if b >= 1 << s && b % (1 << s) == 0 {
            return format!("{}{u}", b >> s);
        }
    }
    b.to_string()
}

fn owner_name(o: ChannelOwner) -> &'static str {
    match o {
        ChannelOwner::Cpu => "cpu",
        ChannelOwner::Accelerator => "accelerator",
        ChannelOwner::Shared => "shared",
    }
}

pub fn parse_u64(v: &str) -> Result<u64, String> {
    let s: String = v.chars().filter(|&c| c != '_').collect();
    let (num, mul) = [("GiB", 1u64 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)]
        .iter()
        .find_map(|&(u, m)| s.strip_suffix(u).map(|n| (n.trim().to_string(), m)))
        .unwrap_or((s.clone(), 1));
    let n = match num.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => num.parse(),
    }
    .map_err(|_| format!("`{v}` is not a non-negative integer"))?;
    n.checked_mul(mul).ok_or_else(|| format!("`{v}` overflows"))
}

fn parse_num<T: TryFrom<u64>>(v: &str) -> Result<T, String> {
    T::try_from(parse_u64(v)?).map_err(|_| format!("`{v}` is out of range"))
}

fn parse_list(v: &str) -> Result<Vec<String>, String> {
    let inner = v
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("`{v}` is not a list like [8, 9]"))?;
    Ok(inner
        .split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect())
}

fn parse_bits(v: &str) -> Result<Vec<u32>, String> {
    parse_list(v)?.iter().map(|x| parse_num::<u32>(x)).collect()
}

fn parse_owner(v: &str) -> Result<ChannelOwner, String> {
    match v {
        "cpu" => Ok(ChannelOwner::Cpu),
        "accelerator" | "igpu" => Ok(ChannelOwner::Accelerator),
        "shared" => Ok(ChannelOwner::Shared),
        _ => Err(format!("`{v}` is not one of cpu, accelerator, shared")),
    }
}

#[derive(Default)]
struct Builder {
    cfg: HarnessConfig,
    policy: Option<String>,
    partition: Option<Vec<ChannelOwner>>,
    channel: Option<Vec<u32>>,
    rank: Option<Vec<u32>>,
    bank_groups: BTreeMap<usize, Vec<u32>>,
    banks: BTreeMap<usize, Vec<u32>>,
    bank_group_count: Option<usize>,
    bank_count: Option<usize>,
}

impl Builder {
    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let s = &mut self.cfg.soc;
        let c = &mut self.cfg.covert;
        match (section, key) {
            ("run", "seed") => self.cfg.run.seed = parse_u64(v)?,
            ("run", "max_raw_samples_per_run") => self.cfg.run.max_raw_samples_per_run = parse_num(v)?,
            ("clocks", "cpu_hz") => s.cpu_hz = parse_u64(v)?,
            ("clocks", "accel_hz") => s.accel_hz = parse_u64(v)?,
            ("clocks", "mc_hz") => s.mc_hz = parse_u64(v)?,
            ("cache", "llc_size") => s.llc = CacheGeometry::new(parse_u64(v)?, s.llc.ways),
            ("cache", "llc_ways") => s.llc = CacheGeometry::new(s.llc.size_bytes, parse_num(v)?),
            ("cache", "l2_size") => s.l2 = CacheGeometry::new(parse_u64(v)?, s.l2.ways),
            ("cache", "l2_ways") => s.l2 = CacheGeometry::new(s.l2.size_bytes, parse_num(v)?),
            ("cache", "igpu_l3_size") => s.accel_l3 = CacheGeometry::new(parse_u64(v)?, s.accel_l3.ways),
            ("cache", "igpu_l3_ways") => s.accel_l3 = CacheGeometry::new(s.accel_l3.size_bytes, parse_num(v)?),
            ("cache", "wb_entries") => s.writeback_entries = parse_num(v)?,
            ("memctrl", "policy") => match v {
                "drain_when_full" | "read_priority" | "staged_reads" | "channel_partition" => {
                    self.policy = Some(v.to_string())
                }
                _ => {
                    return Err(format!(
                        "`{v}` is not one of drain_when_full, read_priority, staged_reads, channel_partition"
                    ))
                }
            },
            ("memctrl", "partition") => {
                self.partition = Some(parse_list(v)?.iter().map(|x| parse_owner(x)).collect::<Result<_, _>>()?)
            }
            ("memctrl", "write_entries") => s.mc.write_entries = parse_num(v)?,
            ("memctrl", "read_entries") => s.mc.read_entries = parse_num(v)?,
            ("memctrl", "pending_entries") => s.mc.pending_entries = parse_num(v)?,
            ("dram", "row_hit_cycles") => s.dram.row_hit_cycles = parse_num(v)?,
            ("dram", "row_miss_cycles") => s.dram.row_miss_cycles = parse_num(v)?,
            ("dram", "row_conflict_cycles") => s.dram.row_conflict_cycles = parse_num(v)?,
            ("dram", "turnaround_rw_cycles") => s.dram.turnaround_rw_cycles = parse_num(v)?,
            ("dram", "turnaround_wr_cycles") => s.dram.turnaround_wr_cycles = parse_num(v)?,
            ("mapping", "channel") => self.channel = Some(parse_bits(v)?),
            ("mapping", "rank") => self.rank = Some(parse_bits(v)?),
            ("mapping", "row_shift") => s.mapping.row_shift = parse_num(v)?,
            ("mapping", "bank_group_count") => self.bank_group_count = Some(parse_num(v)?),
            ("mapping", "bank_count") => self.bank_count = Some(parse_num(v)?),
            ("mapping", k) if k.starts_with("bank_group") => {
                let i = k["bank_group".len()..].parse().map_err(|_| "unknown key".to_string())?;
                self.bank_groups.insert(i, parse_bits(v)?);
            }
            ("mapping", k) if k.starts_with("bank") => {
                let i = k["bank".len()..].parse().map_err(|_| "unknown key".to_string())?;
                self.banks.insert(i, parse_bits(v)?);
            }
            ("latency", "l2_hit_cycles") => s.latencies.l2_hit_cycles = parse_num(v)?,
            ("latency", "llc_hit_cycles") => s.latencies.llc_hit_cycles = parse_num(v)?,
            ("latency", "uncore_cycles") => s.latencies.uncore_cycles = parse_num(v)?,
            ("latency", "igpu_l3_hit_cycles") => s.latencies.accel_l3_hit_cycles = parse_num(v)?,
            ("latency", "igpu_llc_cycles") => s.latencies.accel_llc_cycles = parse_num(v)?,
            ("latency", "igpu_uncore_cycles") => s.latencies.accel_uncore_cycles = parse_num(v)?,
            ("latency", "igpu_same_line_cycles") => s.latencies.accel_same_line_cycles = parse_num(v)?,
            ("accelerator", "subslices") => s.accel.geometry.subslices = parse_num(v)?,
            ("accelerator", "eus_per_subslice") => s.accel.geometry.eus_per_subslice = parse_num(v)?,
            ("accelerator", "threads_per_eu") => s.accel.geometry.threads_per_eu = parse_num(v)?,
            ("accelerator", "launch_overhead_ns") => s.accel.launch_overhead = SimTime::from_ns(parse_u64(v)?),
            ("accelerator", "kernel_gap_ns") => s.accel.kernel_gap = SimTime::from_ns(parse_u64(v)?),
            ("accelerator", "wg_dispatch_ns") => s.accel.wg_dispatch = SimTime::from_ns(parse_u64(v)?),
            ("accelerator", "wgs_per_subslice") => s.accel.wgs_per_subslice = parse_num(v)?,
            ("accelerator", "max_outstanding_reads") => s.accel.max_outstanding_reads = parse_num(v)?,
            ("cpu", "loop_overhead_cycles") => s.cpu_loop.loop_overhead_cycles = parse_num(v)?,
            ("cpu", "jitter_cycles") => s.cpu_loop.jitter_cycles = parse_num(v)?,
            ("covert", "bits") => c.bits = parse_num(v)?,
            ("covert", "v1_stride_lines") => c.v1_stride_lines = parse_u64(v)?,
            ("covert", "v1_zero_factor") => c.v1_zero_factor = parse_num(v)?,
            ("covert", "v2_stride_lines") => c.v2_stride_lines = parse_u64(v)?,
            ("covert", "v2_zero_factor") => c.v2_zero_factor = parse_num(v)?,
            ("covert", "v2_channel") => c.v2_channel = parse_num(v)?,
            ("covert", "local_threads") => c.local_threads = parse_num(v)?,
            ("covert", "global_threads") => c.global_threads = parse_num(v)?,
            ("covert", "wavefront_size") => c.wavefront_size = parse_num(v)?,
            ("covert", "buffer_size") => c.buffer_bytes = parse_u64(v)?,
            ("covert", "spy_buffer_size") => c.spy_buffer_bytes = parse_u64(v)?,
            ("covert", "spy_stride_lines") => c.spy_stride_lines = parse_u64(v)?,
            ("covert", "idle_lead_us") => c.idle_lead_us = parse_u64(v)?,
            ("covert", "calibration_kernels") => c.calibration_kernels = parse_num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn finish(mut self, errors: &mut Vec<ConfigError>) -> HarnessConfig {
        let mut err = |m: String| errors.push(ConfigError { line: None, message: m });
        let m = &mut self.cfg.soc.mapping;
        let func = |label: String, bits: &[u32]| XorFunction::new(label, bits);
        if let Some(b) = &self.channel {
            m.channel_fn = if b.is_empty() { None } else { func("channel".into(), b).map_err(|e| err(format!("mapping.channel: {e}"))).ok() };
        }
        if let Some(b) = &self.rank {
            m.rank_fn = if b.is_empty() { None } else { func("rank".into(), b).map_err(|e| err(format!("mapping.rank: {e}"))).ok() };
        }
        for (list, set, count, name, prefix) in [
            (&mut m.bank_group_fns, &self.bank_groups, self.bank_group_count, "bank_group", "bg"),
            (&mut m.bank_fns, &self.banks, self.bank_count, "bank", "ba"),
        ] {
            for (&i, bits) in set {
                if i > list.len() {
                    err(format!("mapping.{name}{i}: previous {name} functions are missing"));
                    continue;
                }
                match func(format!("{prefix}{i}"), bits) {
                    Ok(f) if i == list.len() => list.push(f),
                    Ok(f) => list[i] = f,
                    Err(e) => err(format!("mapping.{name}{i}: {e}")),
                }
            }
            if let Some(n) = count {
                if n > list.len() {
                    err(format!("mapping.{name}_count = {n} but only {} functions given", list.len()));
                } else {
                    list.truncate(n);
                }
            }
        }
        let owners = self.partition.clone();
        let channels = self.cfg.soc.mapping.channels();
        self.cfg.soc.mc.policy = match self.policy.as_deref() {
            None => match (&self.cfg.soc.mc.policy, owners) {
                (ControllerPolicy::ChannelPartition(_), Some(o)) => ControllerPolicy::ChannelPartition(o),
                (p, _) => p.clone(),
            },
            Some("read_priority") => ControllerPolicy::ReadPriority,
            Some("staged_reads") => ControllerPolicy::StagedReads,
            Some("channel_partition") => ControllerPolicy::ChannelPartition(owners.unwrap_or_else(|| {
                let mut o = vec![ChannelOwner::Cpu; channels];
                o[0] = ChannelOwner::Accelerator;
                o
            })),
            Some(_) => ControllerPolicy::DrainWhenFull,
        };
        self.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_is_the_builtin_default() {
        let cfg = HarnessConfig::parse(DEFAULT_CONFIG, &[]).unwrap();
        assert_eq!(cfg, HarnessConfig::default());
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = HarnessConfig::default();
        cfg.soc.mc.policy = ControllerPolicy::ChannelPartition(vec![ChannelOwner::Accelerator, ChannelOwner::Cpu]);
        cfg.run.seed = 9;
        cfg.covert.bits = 256;
        assert_eq!(HarnessConfig::parse(&cfg.to_text(), &[]).unwrap(), cfg);
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(HarnessConfig::parse("", &[]).unwrap(), HarnessConfig::default());
        let no_dram = "[memctrl]\nwrite_entries = 64\n";
        assert_eq!(HarnessConfig::parse(no_dram, &[]).unwrap().soc.dram, Default::default());
    }

    #[test]
    fn errors_are_aggregated_with_lines() {
        let text = "[cache]\nllc_ways = 0\n[dram]\nrow_hit_cycles = x\nbogus = 1\n[nope]\n";
        let e = HarnessConfig::parse(text, &[]).unwrap_err();
        assert!(e.iter().any(|e| e.line == Some(4) && e.message.contains("row_hit_cycles")), "{e:?}");
        assert!(e.iter().any(|e| e.line == Some(5) && e.message.contains("unknown key")));
        assert!(e.iter().any(|e| e.line == Some(6) && e.message.contains("[nope]")));
        assert!(e.iter().any(|e| e.line.is_none() && e.message.starts_with("llc")), "{e:?}");
    }

    #[test]
    fn override_equals_file_edit() {
        let edited = HarnessConfig::parse("[memctrl]\npolicy = read_priority\n[covert]\nbits = 512\n", &[]).unwrap();
        let ov = HarnessConfig::parse(
            DEFAULT_CONFIG,
            &["memctrl.policy=read_priority".into(), "covert.bits=512".into()],
        )
        .unwrap();
        assert_eq!(edited, ov);
        let bad = HarnessConfig::parse("", &["memctrl.policy".into(), "x.y=1".into()]).unwrap_err();
        assert_eq!(bad.len(), 2);
    }

    #[test]
    fn values() {
        assert_eq!(parse_u64("32MiB"), Ok(32 << 20));
        assert_eq!(parse_u64("0x40"), Ok(64));
        assert_eq!(parse_u64("1_000"), Ok(1000));
        assert!(parse_u64("-1").is_err());
        assert_eq!(parse_bits("[8, 9,12]"), Ok(vec![8, 9, 12]));
        assert_eq!(parse_bits("[]"), Ok(vec![]));
    }

    #[test]
    fn mapping_section_edits_single_functions() {
        let cfg = HarnessConfig::parse("[mapping]\nbank1 = [17, 21]\n", &[]).unwrap();
        assert_eq!(cfg.soc.mapping.bank_fns[1].bits(), vec![17, 21]);
        assert_eq!(cfg.soc.mapping.bank_fns[0].bits(), vec![16, 19]);
        let e = HarnessConfig::parse("[mapping]\nbank5 = [30]\n", &[]).unwrap_err();
        assert!(e[0].message.contains("bank5"));
    }
}
