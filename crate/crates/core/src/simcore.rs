//! Event queue, simulated time and clock domains.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PS_PER_SECOND: u64 = 1_000_000_000_000;

/// Simulated time in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns.checked_mul(1_000).expect("simulated time overflow"))
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us.checked_mul(1_000_000).expect("simulated time overflow"))
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        assert!(secs >= 0.0 && secs.is_finite(), "invalid duration {secs}");
        SimTime((secs * PS_PER_SECOND as f64).round() as u64)
    }

    pub const fn ps(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PS_PER_SECOND as f64
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn checked_add(self, rhs: SimTime) -> Option<SimTime> {
        self.0.checked_add(rhs.0).map(SimTime)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("simulated time overflow"))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("negative simulated duration"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ps", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("clock `{0}` must have a positive frequency")]
    ZeroFrequency(String),
}

/// A named clock. Cycle/time conversions round down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClockDomain {
    name: String,
    frequency_hz: u64,
}

impl ClockDomain {
    pub fn new(name: impl Into<String>, frequency_hz: u64) -> Result<Self, ClockError> {
        let name = name.into();
        if frequency_hz == 0 {
            return Err(ClockError::ZeroFrequency(name));
        }
        Ok(ClockDomain { name, frequency_hz })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frequency_hz(&self) -> u64 {
        self.frequency_hz
    }

    /// Duration of `cycles` cycles, floor(cycles * 1e12 / f) picoseconds.
    pub fn cycles_to_time(&self, cycles: u64) -> SimTime {
        let ps = cycles as u128 * PS_PER_SECOND as u128 / self.frequency_hz as u128;
        SimTime(u64::try_from(ps).expect("simulated time overflow"))
    }

    /// Whole cycles elapsed in `t`.
    pub fn time_to_cycles(&self, t: SimTime) -> u64 {
        (t.0 as u128 * self.frequency_hz as u128 / PS_PER_SECOND as u128) as u64
    }

    pub fn period(&self) -> SimTime {
        self.cycles_to_time(1)
    }
}

pub fn cycles_to_time(cycles: u64, domain: &ClockDomain) -> SimTime {
    domain.cycles_to_time(cycles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComponentId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub target: ComponentId,
    pub payload: P,
}

struct Entry<P>(Event<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_time == other.0.fire_time && self.0.sequence == other.0.sequence
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_time, other.0.sequence).cmp(&(self.0.fire_time, self.0.sequence))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("cannot schedule at {at} before current time {now}")]
    InThePast { at: SimTime, now: SimTime },
}

/// Pending-event set plus the current time.
pub struct Scheduler<P> {
    now: SimTime,
    heap: BinaryHeap<Entry<P>>,
    next_seq: u64,
    cancelled: HashSet<u64>,
    fired: u64,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            heap: BinaryHeap::new(),
            next_seq: 0,
            cancelled: HashSet::new(),
            fired: 0,
        }
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn events_fired(&self) -> u64 {
        self.fired
    }

    pub fn try_schedule(
        &mut self,
        at: SimTime,
        target: ComponentId,
        payload: P,
    ) -> Result<EventHandle, ScheduleError> {
        if at < self.now {
            return Err(ScheduleError::InThePast { at, now: self.now });
        }
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(Event {
            fire_time: at,
            sequence,
            target,
            payload,
        }));
        Ok(EventHandle(sequence))
    }

    /// Panics when `at` lies before the current time.
    pub fn schedule(&mut self, at: SimTime, target: ComponentId, payload: P) -> EventHandle {
        match self.try_schedule(at, target, payload) {
            Ok(h) => h,
            Err(e) => panic!("{e}"),
        }
    }

    pub fn schedule_in(&mut self, delay: SimTime, target: ComponentId, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, target, payload)
    }

    /// Returns false when the event already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_seq {
            return false;
        }
        let live = self.heap.iter().any(|e| e.0.sequence == handle.0);
        live && self.cancelled.insert(handle.0)
    }

    /// Pops the next event with `fire_time <= deadline`, advancing the clock.
    pub fn pop_until(&mut self, deadline: SimTime) -> Option<Event<P>> {
        loop {
            let head = self.heap.peek()?;
            if head.0.fire_time > deadline {
                return None;
            }
            let Entry(ev) = self.heap.pop().expect("peeked");
            if !self.cancelled.is_empty() && self.cancelled.remove(&ev.sequence) {
                continue;
            }
            debug_assert!(ev.fire_time >= self.now);
            self.now = ev.fire_time;
            self.fired += 1;
            return Some(ev);
        }
    }
}

pub trait Handler<P> {
    fn handle(&mut self, event: Event<P>, sched: &mut Scheduler<P>);
}

impl<P, F: FnMut(Event<P>, &mut Scheduler<P>)> Handler<P> for F {
    fn handle(&mut self, event: Event<P>, sched: &mut Scheduler<P>) {
        self(event, sched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimStats {
    pub events_fired: u64,
    pub final_time: SimTime,
}

/// Scheduler plus the run's single random source.
pub struct Engine<P> {
    pub sched: Scheduler<P>,
    rng: SimRng,
}

impl<P> Engine<P> {
    pub fn new(seed: u64) -> Self {
        Engine {
            sched: Scheduler::new(),
            rng: SimRng::new(seed),
        }
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn rng(&self) -> &SimRng {
        &self.rng
    }

    pub fn schedule(&mut self, at: SimTime, target: ComponentId, payload: P) -> EventHandle {
        self.sched.schedule(at, target, payload)
    }

    /// Fires every event with `fire_time <= deadline` in (time, sequence) order.
    pub fn run_until<H: Handler<P>>(&mut self, deadline: SimTime, handler: &mut H) -> SimStats {
        while let Some(ev) = self.sched.pop_until(deadline) {
            handler.handle(ev, &mut self.sched);
        }
        SimStats {
            events_fired: self.sched.events_fired(),
            final_time: self.sched.now().min(deadline),
        }
    }
}

/// Root seed from which named, independent streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimRng {
    seed: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
