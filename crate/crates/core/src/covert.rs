//! The write-drain covert channel: bit encoding on the trojan side,
//! threshold decoding on the spy side, preamble handshake and channel
//! metrics, plus a driver that runs one transmission end to end.

use rand::Rng;
use thiserror::Error;

use crate::addrmap::PhysAddr;
use crate::agents::{
    AddressFilter, AgentError, KernelConfig, LatencySample, LatencyTrace, SpyConfig, TargetLines,
};
use crate::config::SocConfig;
use crate::memctrl::{AccessKind, ControllerStats, Origin};
use crate::simcore::{SimRng, SimTime};
use crate::system::{KernelRecord, System};

pub const PREAMBLE: [bool; 8] = [true, false, true, false, true, false, true, true];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovertError {
    #[error("secret length {0} outside 128..=4096")]
    Length(usize),
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("weak separation: idle mean {idle:.1} cycles, contended mean {contended:.1} cycles")]
    WeakSeparation { idle: f64, contended: f64 },
    #[error("sync failure: {0}")]
    SyncFailure(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretMessage {
    bits: Vec<bool>,
}

impl SecretMessage {
    pub const MIN_BITS: usize = 128;
    pub const MAX_BITS: usize = 4096;

    pub fn from_bits(bits: Vec<bool>) -> Result<Self, CovertError> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&bits.len()) {
            return Err(CovertError::Length(bits.len()));
        }
        Ok(SecretMessage { bits })
    }

    /// Uniform random secret from the seed's `secret` stream.
    pub fn random(len: usize, seed: u64) -> Result<Self, CovertError> {
        let mut rng = SimRng::new(seed).stream("secret");
        Self::from_bits((0..len).map(|_| rng.gen()).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

pub fn bit_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ChannelOblivious,
    SingleChannel(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingParams {
    pub stride_lines: u64,
    pub zero_factor: u32,
    pub local_threads: u32,
    pub global_threads: u32,
    pub wavefront_size: u32,
    pub buffer_bytes: u64,
    pub base: PhysAddr,
    pub index_base: PhysAddr,
    pub variant: Variant,
    /// Further restricts trojan stores to these bank groups (0: all).
    pub bank_group_mask: u32,
}

impl EncodingParams {
    pub fn variant1() -> Self {
        EncodingParams {
            stride_lines: 8,
            zero_factor: 8,
            local_threads: 128,
            global_threads: 256,
            wavefront_size: 16,
            buffer_bytes: 32 << 20,
            base: PhysAddr(0x4000_0000),
            index_base: PhysAddr(0x3000_0000),
            variant: Variant::ChannelOblivious,
            bank_group_mask: 0,
        }
    }

    pub fn variant2(channel: u8) -> Self {
        EncodingParams {
            stride_lines: 4,
            zero_factor: 2,
            variant: Variant::SingleChannel(channel),
            ..Self::variant1()
        }
    }

    pub fn filter(&self) -> AddressFilter {
        AddressFilter {
            channel: match self.variant {
                Variant::ChannelOblivious => None,
                Variant::SingleChannel(c) => Some(c),
            },
            bank_group_mask: self.bank_group_mask,
        }
    }

    /// Spy configuration matching this variant (the second variant reads
    /// only the agreed channel).
    pub fn spy(&self) -> SpyConfig {
        SpyConfig {
            filter: self.filter(),
            ..SpyConfig::default()
        }
    }
}

/// Kernel that transmits one bit: distinct-line stores for `1`, the same
/// number of stores times the zero factor to a single line for `0`.
pub fn encode_bit(bit: bool, p: &EncodingParams) -> KernelConfig {
    let single = matches!(p.variant, Variant::SingleChannel(_));
    KernelConfig {
        base: p.base,
        buffer_bytes: p.buffer_bytes,
        stride_lines: p.stride_lines,
        global_threads: p.global_threads,
        local_threads: p.local_threads,
        wavefront_size: p.wavefront_size,
        access_kind: AccessKind::Write,
        target_lines: if bit {
            TargetLines::Distinct
        } else {
            TargetLines::Same
        },
        repeat: if bit { 1 } else { p.zero_factor },
        accesses: None,
        filter: p.filter(),
        index_read_first: single,
        index_base: p.index_base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderState {
    pub threshold: f64,
    pub baseline: f64,
    pub contended: f64,
    /// Typical delay between a `1` kernel starting and the spy seeing it.
    pub onset_delay: SimTime,
}

/// Threshold halfway between the idle and contended means.
pub fn calibrate(idle: &[LatencySample], contended: &[LatencySample]) -> Result<DecoderState, CovertError> {
    let b = LatencyTrace::mean_latency(idle).ok_or(CovertError::EmptyTrace)?;
    let c = LatencyTrace::mean_latency(contended).ok_or(CovertError::EmptyTrace)?;
    if c < 2.0 * b {
        return Err(CovertError::WeakSeparation {
            idle: b,
            contended: c,
        });
    }
    Ok(DecoderState {
        threshold: (b + c) / 2.0,
        baseline: b,
        contended: c,
        onset_delay: SimTime::ZERO,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeParams {
    pub bin: SimTime,
    /// Quiet bins required before an onset counts.
    pub quiet_bins: u32,
    /// How long after the spy's first sample the preamble may begin.
    pub horizon: SimTime,
}

impl Default for HandshakeParams {
    fn default() -> Self {
        HandshakeParams {
            bin: SimTime::from_us(4),
            quiet_bins: 8,
            horizon: SimTime::from_us(2_000),
        }
    }
}

/// Start of the first bin whose mean exceeds `threshold` after at least
/// `quiet_bins` bins at or below it.
pub fn find_onset(samples: &[LatencySample], threshold: f64, bin: SimTime, quiet_bins: u32) -> Option<SimTime> {
    let first = samples.first()?.issue;
    let mut quiet = 0u32;
    let mut i = 0;
    let mut lo = first;
    while i < samples.len() {
        let hi = lo + bin;
        let (mut sum, mut n) = (0u64, 0u64);
        while i < samples.len() && samples[i].issue < hi {
            sum += samples[i].latency_cycles as u64;
            n += 1;
            i += 1;
        }
        if n > 0 && sum as f64 / n as f64 > threshold {
            if quiet >= quiet_bins {
                return Some(lo);
            }
            quiet = 0;
        } else {
            quiet += 1;
        }
        lo = hi;
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitDecision {
    pub bit: bool,
    pub mean: Option<f64>,
    pub samples: usize,
    pub confidence: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMessage {
    pub bits: Vec<bool>,
    pub decisions: Vec<BitDecision>,
}

/// Per window, `1` iff the mean sample latency exceeds the threshold.
pub fn decode(trace: &LatencyTrace, state: &DecoderState, windows: &[(SimTime, SimTime)]) -> DecodedMessage {
    let span = (state.contended - state.baseline).max(f64::EPSILON);
    let decisions: Vec<BitDecision> = windows
        .iter()
        .map(|&(a, b)| {
            let w = trace.window(a, b);
            let mean = LatencyTrace::mean_latency(w);
            let bit = mean.is_some_and(|m| m > state.threshold);
            BitDecision {
                bit,
                mean,
                samples: w.len(),
                confidence: mean.map_or(0.0, |m| (m - state.threshold).abs() / span),
                low_confidence: w.len() < 3,
            }
        })
        .collect();
    DecodedMessage {
        bits: decisions.iter().map(|d| d.bit).collect(),
        decisions,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lock {
    /// Estimated start of the preamble.
    pub preamble_start: SimTime,
    pub payload_start: SimTime,
    /// Estimated minus true preamble start, in picoseconds.
    pub phase_error_ps: i64,
    pub preamble: Vec<bool>,
}

/// Finds the preamble's first `1` in the spy trace, aligns the trojan's
/// relative bit boundaries (`offsets`, one per bit plus the end) to it and
/// checks that the preamble decodes verbatim.
pub fn handshake(
    trace: &LatencyTrace,
    state: &DecoderState,
    hp: &HandshakeParams,
    offsets: &[SimTime],
    true_start: SimTime,
) -> Result<Lock, CovertError> {
    let first = trace.samples().first().ok_or(CovertError::EmptyTrace)?.issue;
    let onset = find_onset(trace.samples(), state.threshold, hp.bin, hp.quiet_bins)
        .ok_or_else(|| CovertError::SyncFailure("no onset above threshold".into()))?;
    if onset - first > hp.horizon {
        return Err(CovertError::SyncFailure(format!(
            "first onset {:.1} us after the spy started, beyond the scan horizon",
            (onset - first).as_us_f64()
        )));
    }
    let start = if onset.ps() > state.onset_delay.ps() {
        onset - state.onset_delay
    } else {
        SimTime::ZERO
    };
    if offsets.len() < PREAMBLE.len() + 1 {
        return Err(CovertError::SyncFailure("frame shorter than the preamble".into()));
    }
    let windows: Vec<_> = (0..PREAMBLE.len())
        .map(|i| (start + offsets[i], start + offsets[i + 1]))
        .collect();
    let pre = decode(trace, state, &windows).bits;
    if pre != PREAMBLE {
        return Err(CovertError::SyncFailure(format!(
            "decoded preamble {} instead of {}",
            bit_string(&pre),
            bit_string(&PREAMBLE)
        )));
    }
    Ok(Lock {
        preamble_start: start,
        payload_start: start + offsets[PREAMBLE.len()],
        phase_error_ps: start.ps() as i64 - true_start.ps() as i64,
        preamble: pre,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMetrics {
    pub bits: usize,
    pub errors: usize,
    pub error_rate: f64,
    pub bit_rate_bps: f64,
    pub per_bit_confidence: Vec<f64>,
}

/// Hamming error rate and bits per simulated second over the payload's
/// sample span.
pub fn evaluate(sent: &SecretMessage, decoded: &DecodedMessage, span: (SimTime, SimTime)) -> ChannelMetrics {
    assert_eq!(sent.len(), decoded.bits.len(), "decoded length differs from secret");
    let errors = sent
        .bits()
        .iter()
        .zip(&decoded.bits)
        .filter(|(a, b)| a != b)
        .count();
    let secs = (span.1 - span.0).as_secs_f64();
    ChannelMetrics {
        bits: sent.len(),
        errors,
        error_rate: errors as f64 / sent.len() as f64,
        bit_rate_bps: if secs > 0.0 {
            sent.len() as f64 / secs
        } else {
            0.0
        },
        per_bit_confidence: decoded.decisions.iter().map(|d| d.confidence).collect(),
    }
}

/// Everything needed for one transmission.
#[derive(Debug, Clone)]
pub struct CovertSetup {
    pub soc: SocConfig,
    pub params: EncodingParams,
    pub spy: SpyConfig,
    pub handshake: HandshakeParams,
    /// Quiet time before the trojan's first kernel is launched.
    pub idle_lead: SimTime,
    pub spy_start: SimTime,
    /// Start with the trojan's `1` footprint dirty in the LLC, as after
    /// earlier activity.
    pub warm_llc: bool,
    pub calibration_kernels: usize,
    /// On a failed handshake, decode with the true kernel windows instead of
    /// returning `SyncFailure`.
    pub oracle_sync_fallback: bool,
    pub seed: u64,
}

impl CovertSetup {
    pub fn new(soc: SocConfig, params: EncodingParams, seed: u64) -> Self {
        CovertSetup {
            soc,
            spy: params.spy(),
            params,
            handshake: HandshakeParams::default(),
            idle_lead: SimTime::from_us(300),
            spy_start: SimTime::ZERO,
            warm_llc: true,
            calibration_kernels: 4,
            oracle_sync_fallback: false,
            seed,
        }
    }

    fn system(&self) -> Result<System, CovertError> {
        let mut sys = System::new(&self.soc, self.seed).map_err(|es| {
            CovertError::Config(es.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))
        })?;
        if self.warm_llc {
            let plan = encode_bit(true, &self.params).plan(&self.soc.mapping)?;
            sys.warm_llc_dirty(plan.footprint(), Origin::Accelerator);
        }
        Ok(sys)
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub state: DecoderState,
    pub idle_mean: f64,
    pub contended_mean: f64,
    pub kernel_period: SimTime,
}

/// Spy trace over an idle lead followed by back-to-back kernels that all
/// send `bit`.
#[derive(Debug, Clone)]
pub struct SlowdownProbe {
    pub trace: LatencyTrace,
    pub first_start: SimTime,
    pub last_end: SimTime,
    pub kernels: usize,
}

impl SlowdownProbe {
    pub fn idle(&self, lead: SimTime) -> &[LatencySample] {
        self.trace.window(SimTime::ZERO, lead)
    }

    pub fn busy(&self) -> &[LatencySample] {
        self.trace.window(self.first_start, self.last_end)
    }

    /// Busy mean over idle mean.
    pub fn ratio(&self, lead: SimTime) -> Option<f64> {
        Some(LatencyTrace::mean_latency(self.busy())? / LatencyTrace::mean_latency(self.idle(lead))?)
    }

    pub fn kernel_period(&self) -> SimTime {
        SimTime::from_ps((self.last_end - self.first_start).ps() / self.kernels as u64)
    }
}

pub fn probe_slowdown(setup: &CovertSetup, bit: bool, kernels: usize) -> Result<SlowdownProbe, CovertError> {
    let mut sys = setup.system()?;
    let spy = sys.add_spy(&setup.spy, SimTime::ZERO, SimTime::MAX)?;
    let k = encode_bit(bit, &setup.params);
    sys.launch_kernels(&vec![k; kernels.max(1)], setup.idle_lead)?;
    sys.run_to_completion(SimTime::from_us(20), SimTime::from_secs_f64(10.0));
    let ks = sys.kernels();
    let (first_start, last_end) = (ks[0].start, ks.last().and_then(|k| k.end).expect("kernels finished"));
    Ok(SlowdownProbe {
        kernels: ks.len(),
        first_start,
        last_end,
        trace: sys.take_trace(spy),
    })
}

/// Idle spy phase followed by back-to-back `1` kernels: the threshold is
/// the midpoint of the two means, the onset delay the lag between the first
/// kernel starting and its detection.
pub fn calibrate_setup(setup: &CovertSetup) -> Result<Calibration, CovertError> {
    let p = probe_slowdown(setup, true, setup.calibration_kernels)?;
    let mut state = calibrate(p.idle(setup.idle_lead), p.busy())?;
    let onset = find_onset(p.trace.samples(), state.threshold, setup.handshake.bin, setup.handshake.quiet_bins)
        .ok_or_else(|| CovertError::SyncFailure("calibration kernels never detected".into()))?;
    state.onset_delay = onset.saturating_sub(p.first_start);
    Ok(Calibration {
        idle_mean: state.baseline,
        contended_mean: state.contended,
        kernel_period: p.kernel_period(),
        state,
    })
}

#[derive(Debug, Clone)]
pub struct CovertRun {
    pub sent: SecretMessage,
    pub decoded: DecodedMessage,
    /// `None` when the handshake failed and ground-truth windows were used.
    pub lock: Option<Lock>,
    pub sync_error: Option<String>,
    pub metrics: ChannelMetrics,
    pub trace: LatencyTrace,
    pub kernels: Vec<KernelRecord>,
    /// Ground-truth payload bit windows.
    pub true_windows: Vec<(SimTime, SimTime)>,
    pub windows: Vec<(SimTime, SimTime)>,
    pub mc: Vec<ControllerStats>,
    pub events: u64,
}

impl CovertRun {
    pub fn mean_bit_period(&self) -> SimTime {
        let (a, b) = (self.true_windows[0].0, self.true_windows.last().expect("payload").1);
        SimTime::from_ps((b - a).ps() / self.true_windows.len() as u64)
    }

    /// Phase error as a fraction of the mean bit period.
    pub fn phase_error_fraction(&self) -> Option<f64> {
        let l = self.lock.as_ref()?;
        Some(l.phase_error_ps.unsigned_abs() as f64 / self.mean_bit_period().ps() as f64)
    }
}

/// Sends preamble + secret, one kernel per bit queued back to back, while
/// the spy samples; then locks, decodes and scores.
pub fn transmit(setup: &CovertSetup, state: &DecoderState, secret: &SecretMessage) -> Result<CovertRun, CovertError> {
    let mut sys = setup.system()?;
    let spy = sys.add_spy(&setup.spy, setup.spy_start, SimTime::MAX)?;
    let frame: Vec<bool> = PREAMBLE.iter().chain(secret.bits()).copied().collect();
    let kernels: Vec<_> = frame.iter().map(|&b| encode_bit(b, &setup.params)).collect();
    sys.launch_kernels(&kernels, setup.idle_lead)?;
    let stats = sys.run_to_completion(SimTime::from_us(20), SimTime::from_secs_f64(100.0));
    let ks = sys.kernels().to_vec();
    if ks.len() != frame.len() || ks.iter().any(|k| k.end.is_none()) {
        return Err(CovertError::Config("trojan kernels did not finish".into()));
    }
    let true_start = ks[0].start;
    let mut offsets = vec![SimTime::ZERO];
    offsets.extend(ks.iter().map(|k| k.end.expect("checked") - true_start));
    let trace = sys.take_trace(spy);
    let (lock, sync_error) = match handshake(&trace, state, &setup.handshake, &offsets, true_start) {
        Ok(l) => (Some(l), None),
        Err(CovertError::SyncFailure(why)) if setup.oracle_sync_fallback => (None, Some(why)),
        Err(e) => return Err(e),
    };
    let origin = lock.as_ref().map_or(true_start, |l| l.preamble_start);
    let p = PREAMBLE.len();
    let windows: Vec<_> = (p..frame.len())
        .map(|i| (origin + offsets[i], origin + offsets[i + 1]))
        .collect();
    let true_windows: Vec<_> = (p..frame.len())
        .map(|i| (true_start + offsets[i], true_start + offsets[i + 1]))
        .collect();
    let decoded = decode(&trace, state, &windows);
    let span = {
        let (a, b) = (windows[0].0, windows.last().expect("payload").1);
        let w = trace.window(a, b);
        match (w.first(), w.last()) {
            (Some(f), Some(l)) if l.issue > f.issue => (f.issue, l.issue),
            _ => (a, b),
        }
    };
    let metrics = evaluate(secret, &decoded, span);
    Ok(CovertRun {
        sent: secret.clone(),
        decoded,
        lock,
        sync_error,
        metrics,
        trace,
        kernels: ks,
        true_windows,
        windows,
        mc: sys.mc_stats(),
        events: stats.events_fired,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(us: u64, lat: u32) -> LatencySample {
        let mut t = LatencyTrace::new();
        t.push(SimTime::from_us(us), lat, PhysAddr(0));
        t.samples()[0]
    }

    #[test]
    fn calibration_midpoint_and_gate() {
        let idle = [sample(1, 100), sample(2, 100)];
        let busy = [sample(3, 500), sample(4, 500)];
        let s = calibrate(&idle, &busy).unwrap();
        assert_eq!(s.threshold, 300.0);
        let weak = [sample(3, 150)];
        assert!(matches!(calibrate(&idle, &weak), Err(CovertError::WeakSeparation { .. })));
        assert_eq!(calibrate(&[], &busy), Err(CovertError::EmptyTrace));
    }

    #[test]
    fn secret_length_bounds() {
        assert!(SecretMessage::random(127, 1).is_err());
        assert!(SecretMessage::random(4097, 1).is_err());
        let a = SecretMessage::random(1024, 3).unwrap();
        assert_eq!(a, SecretMessage::random(1024, 3).unwrap());
        assert_ne!(a, SecretMessage::random(1024, 4).unwrap());
    }

    #[test]
    fn encoding_symmetry() {
        let p = EncodingParams::variant1();
        let one = encode_bit(true, &p);
        let zero = encode_bit(false, &p);
        assert_eq!(one.target_lines, TargetLines::Distinct);
        assert_eq!(zero.target_lines, TargetLines::Same);
        assert_eq!(zero.repeat, 8);
        let m = crate::addrmap::AddressMapping::default();
        let (p1, p0) = (one.plan(&m).unwrap(), zero.plan(&m).unwrap());
        assert_eq!(p1.accesses, 1 << 16);
        assert_eq!(p0.accesses, 8 << 16);
        let v2 = EncodingParams::variant2(1);
        let k = encode_bit(true, &v2);
        assert!(k.index_read_first);
        assert_eq!(k.plan(&m).unwrap().accesses, 1 << 16);
    }

    #[test]
    fn decode_windows_by_mean() {
        let mut t = LatencyTrace::new();
        for i in 0..100u64 {
            t.push(SimTime::from_us(i), if (i / 10) % 2 == 0 { 600 } else { 100 }, PhysAddr(0));
        }
        let s = DecoderState {
            threshold: 300.0,
            baseline: 100.0,
            contended: 500.0,
            onset_delay: SimTime::ZERO,
        };
        let w: Vec<_> = (0..10u64)
            .map(|i| (SimTime::from_us(i * 10), SimTime::from_us(i * 10 + 10)))
            .collect();
        let d = decode(&t, &s, &w);
        assert_eq!(bit_string(&d.bits), "1010101010");
        assert!(d.decisions.iter().all(|x| !x.low_confidence));
        let empty = decode(&t, &s, &[(SimTime::from_us(500), SimTime::from_us(510))]);
        assert!(!empty.bits[0] && empty.decisions[0].low_confidence);
    }

    #[test]
    fn onset_needs_quiet_history() {
        let mut v = vec![];
        for i in 0..40u64 {
            v.push(sample(i, if i >= 20 { 900 } else { 100 }));
        }
        assert_eq!(find_onset(&v, 300.0, SimTime::from_us(1), 8), Some(SimTime::from_us(20)));
        assert_eq!(find_onset(&v[20..], 300.0, SimTime::from_us(1), 8), None);
    }

    #[test]
    fn evaluate_counts_errors() {
        let s = SecretMessage::from_bits(vec![true; 128]).unwrap();
        let mut bits = vec![true; 128];
        bits[5] = false;
        let d = DecodedMessage {
            decisions: bits
                .iter()
                .map(|&bit| BitDecision {
                    bit,
                    mean: None,
                    samples: 0,
                    confidence: 0.0,
                    low_confidence: true,
                })
                .collect(),
            bits,
        };
        let m = evaluate(&s, &d, (SimTime::ZERO, SimTime::from_secs_f64(0.5)));
        assert_eq!(m.errors, 1);
        assert!((m.bit_rate_bps - 256.0).abs() < 1e-9);
    }
}
