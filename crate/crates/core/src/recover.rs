//! Recovery of the XOR address mapping from timing alone: a channel probe
//! (does a read wait behind another address's write drain?) and a bank probe
//! (do two addresses row-conflict?), solved over GF(2).

use std::collections::HashMap;
use std::ops::RangeInclusive;

use rand::Rng;
use thiserror::Error;

use crate::addrmap::{AddressMapping, DramCoord, MappingError, PhysAddr, XorFunction};
use crate::gf2;
use crate::simcore::SimRng;

/// Anything that times an address pair.
pub trait PairOracle {
    fn measure(&mut self, a: PhysAddr, b: PhysAddr) -> u64;
}

impl<F: FnMut(PhysAddr, PhysAddr) -> u64> PairOracle for F {
    fn measure(&mut self, a: PhysAddr, b: PhysAddr) -> u64 {
        self(a, b)
    }
}

impl PairOracle for crate::dram::DramPairProbe {
    fn measure(&mut self, a: PhysAddr, b: PhysAddr) -> u64 {
        crate::dram::DramPairProbe::measure(self, a, b)
    }
}

impl PairOracle for crate::memctrl::DrainChannelProbe {
    fn measure(&mut self, a: PhysAddr, b: PhysAddr) -> u64 {
        crate::memctrl::DrainChannelProbe::measure(self, a, b)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("{what}: timing clusters not separable; ambiguous bits {ambiguous:?}")]
    InsufficientSamples { what: &'static str, ambiguous: Vec<u32> },
    #[error("recovered functions invalid: {0}")]
    Mapping(#[from] MappingError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryParams {
    pub candidate_bits: RangeInclusive<u32>,
    pub channel_rounds: usize,
    pub bank_rounds: usize,
    pub bank_group_functions: usize,
    pub bank_functions: usize,
    /// Row addressing is not recovered; it is carried into the result.
    pub row_shift: u32,
    pub seed: u64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams {
            candidate_bits: 6..=30,
            channel_rounds: 256,
            bank_rounds: 4096,
            bank_group_functions: 2,
            bank_functions: 2,
            row_shift: 17,
            seed: 1,
        }
    }
}

impl RecoveryParams {
    pub fn support(&self) -> u64 {
        self.candidate_bits.clone().fold(0u64, |m, b| m | 1 << b)
    }
}

/// Splits measurements at the widest gap between distinct values; returns
/// the threshold (values above it are "high").
pub fn split_threshold(values: &[u64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    let (i, gap) = v
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i, w[1] - w[0]))
        .max_by_key(|&(i, g)| (g, std::cmp::Reverse(i)))?;
    (gap > 0).then(|| (v[i] + v[i + 1]) as f64 / 2.0)
}

fn bits_of(mask: u64) -> Vec<u32> {
    (0..64).filter(|b| mask >> b & 1 == 1).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub mapping: AddressMapping,
    pub channel_probes: usize,
    pub bank_probes: usize,
    pub conflict_pairs: usize,
}

/// Recovers the channel function from `channel` and the bank functions
/// from `bank`, using address pairs `a`, `a ^ d` with random deltas `d`
/// over the candidate bits.
pub fn recover_mapping(
    channel: &mut dyn PairOracle,
    bank: &mut dyn PairOracle,
    p: &RecoveryParams,
) -> Result<Recovered, RecoveryError> {
    let support = p.support();
    let mut rng = SimRng::new(p.seed).stream("recover");
    let pair = |rng: &mut rand_chacha::ChaCha8Rng| {
        let a = rng.gen::<u64>() & support;
        let d = loop {
            let d = rng.gen::<u64>() & support;
            if d != 0 {
                break d;
            }
        };
        (a, d)
    };

    let mut deltas = Vec::with_capacity(p.channel_rounds);
    let mut times = Vec::with_capacity(p.channel_rounds);
    for _ in 0..p.channel_rounds {
        let (a, d) = pair(&mut rng);
        times.push(channel.measure(PhysAddr(a), PhysAddr(a ^ d)));
        deltas.push(d);
    }
    let th = split_threshold(&times).ok_or(RecoveryError::InsufficientSamples {
        what: "channel",
        ambiguous: bits_of(support),
    })?;
    // A long wait means both addresses share the draining channel.
    let rhs: Vec<bool> = times.iter().map(|&t| (t as f64) < th).collect();
    let (channel_mask, free) = gf2::solve(&deltas, &rhs, support).ok_or(
        RecoveryError::InsufficientSamples {
            what: "channel",
            ambiguous: bits_of(support),
        },
    )?;
    if free != 0 || channel_mask == 0 {
        return Err(RecoveryError::InsufficientSamples {
            what: "channel",
            ambiguous: bits_of(free),
        });
    }

    let mut measured = Vec::with_capacity(p.bank_rounds);
    for _ in 0..p.bank_rounds {
        let (a, d) = pair(&mut rng);
        measured.push((d, bank.measure(PhysAddr(a), PhysAddr(a ^ d))));
    }
    let times: Vec<u64> = measured.iter().map(|m| m.1).collect();
    let th = split_threshold(&times).ok_or(RecoveryError::InsufficientSamples {
        what: "bank",
        ambiguous: bits_of(support),
    })?;
    let conflicts: Vec<u64> = measured
        .iter()
        .filter(|m| m.1 as f64 > th)
        .map(|m| m.0)
        .collect();
    // Every function is orthogonal to every conflicting delta; with enough
    // conflicts the orthogonal space is exactly their span.
    let space = gf2::nullspace(&conflicts, support);
    let want = 1 + p.bank_group_functions + p.bank_functions;
    let in_space = gf2::rank(&[space.clone(), vec![channel_mask]].concat()) == space.len();
    if space.len() != want || !in_space {
        let ambiguous = space.iter().fold(0u64, |m, v| m | v);
        return Err(RecoveryError::InsufficientSamples {
            what: "bank",
            ambiguous: bits_of(ambiguous),
        });
    }
    let mut candidates = gf2::span(&space);
    candidates.retain(|&v| v != 0 && v != channel_mask);
    candidates.sort_by_key(|&v| (v.count_ones(), v.trailing_zeros(), v));
    let mut basis = vec![channel_mask];
    let mut chosen = vec![];
    for v in candidates {
        if chosen.len() == want - 1 {
            break;
        }
        let mut trial = basis.clone();
        trial.push(v);
        if gf2::rank(&trial) == trial.len() {
            basis.push(v);
            chosen.push(v);
        }
    }
    chosen.sort_by_key(|&v| (v.trailing_zeros(), v));
    let (bg, ba) = chosen.split_at(p.bank_group_functions);
    let mk = |prefix: &str, ms: &[u64]| -> Result<Vec<XorFunction>, MappingError> {
        ms.iter()
            .enumerate()
            .map(|(i, &m)| XorFunction::from_mask(format!("{prefix}{i}"), m))
            .collect()
    };
    let mapping = AddressMapping {
        channel_fn: Some(XorFunction::from_mask("channel", channel_mask)?),
        rank_fn: None,
        bank_group_fns: mk("bg", bg)?,
        bank_fns: mk("ba", ba)?,
        row_shift: p.row_shift,
    };
    Ok(Recovered {
        mapping,
        channel_probes: p.channel_rounds,
        bank_probes: p.bank_rounds,
        conflict_pairs: conflicts.len(),
    })
}

/// Whether two mappings split `addrs` into the same channels and the same
/// banks (labels may differ).
pub fn same_partition(a: &AddressMapping, b: &AddressMapping, addrs: &[PhysAddr]) -> bool {
    let key = |m: &AddressMapping, x: PhysAddr| {
        let c = m.map(x);
        DramCoord { row: 0, ..c }
    };
    let mut fwd: HashMap<DramCoord, DramCoord> = HashMap::new();
    let mut back: HashMap<DramCoord, DramCoord> = HashMap::new();
    for &x in addrs {
        let (ka, kb) = (key(a, x), key(b, x));
        if *fwd.entry(ka).or_insert(kb) != kb || *back.entry(kb).or_insert(ka) != ka {
            return false;
        }
    }
    true
}

/// Random ground-truth mapping with independent masks over `bits`.
pub fn random_mapping(seed: u64, bits: RangeInclusive<u32>, row_shift: u32) -> AddressMapping {
    let support = bits.clone().fold(0u64, |m, b| m | 1 << b);
    let mut rng = SimRng::new(seed).stream("random-mapping");
    loop {
        let masks: Vec<u64> = (0..5)
            .map(|_| loop {
                let m = rng.gen::<u64>() & support;
                if (2..=6).contains(&m.count_ones()) {
                    break m;
                }
            })
            .collect();
        if gf2::rank(&masks) < 5 {
            continue;
        }
        let f = |l: &str, m: u64| XorFunction::from_mask(l, m).expect("non-zero mask");
        return AddressMapping {
            channel_fn: Some(f("channel", masks[0])),
            rank_fn: None,
            bank_group_fns: vec![f("bg0", masks[1]), f("bg1", masks[2])],
            bank_fns: vec![f("ba0", masks[3]), f("ba1", masks[4])],
            row_shift,
        };
    }
}
