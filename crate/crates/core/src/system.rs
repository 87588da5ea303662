//! The simulated SoC: CPU cores, the accelerator, the shared LLC with its
//! writeback buffer and the memory controller, all driven by one event queue.

use std::collections::VecDeque;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::addrmap::PhysAddr;
use crate::agents::{
    assign_work_groups, CpuWorkerConfig, KernelConfig, KernelPlan, LatencyTrace, SpyConfig,
};
use crate::cache::{coalesce_lines, Llc, SetAssocCache, WriteOutcome};
use crate::config::{ConfigIssue, SocConfig};
use crate::memctrl::{
    AccessKind, Acceptance, CaseCounts, ContentionCounter, ControllerStats, Dispatch,
    DrainEpisode, MemoryController, MemoryRequest, Origin,
};
use crate::simcore::{ClockDomain, ComponentId, Event, Scheduler, SimRng, SimStats, SimTime};

const CPU: ComponentId = ComponentId(1);
const ACCEL: ComponentId = ComponentId(2);
const MC: ComponentId = ComponentId(3);
const LLC: ComponentId = ComponentId(4);

#[derive(Debug, Clone, Copy)]
enum Ev {
    CpuIssue(u8),
    CpuDone(u8),
    McArrive(u32),
    McWake(u8),
    WbXfer,
    ReadReturn(u32),
    KernelStart,
    WgReady(u8),
    ThreadStep(u32),
    PortWake,
    AccelLoadDone(u32),
}

#[derive(Clone, Copy)]
enum Requester {
    Cpu(u8),
    Accel(u32),
}

#[derive(Clone, Copy)]
enum Waiter {
    Port,
    Cpu(u8),
}

struct Lat {
    l2_hit: SimTime,
    llc_hit: SimTime,
    uncore: SimTime,
    accel_cycle: SimTime,
    l3_hit: SimTime,
    accel_llc: SimTime,
    accel_uncore: SimTime,
    same_line: SimTime,
    mc_cycle: SimTime,
    loop_overhead: u32,
    jitter: u32,
}

#[derive(PartialEq, Eq)]
enum CpuRole {
    Spy,
    Worker,
}

struct CpuAgent {
    role: CpuRole,
    addrs: Vec<PhysAddr>,
    next: usize,
    kind: AccessKind,
    use_flush: bool,
    remaining: Option<u64>,
    start: SimTime,
    stop: SimTime,
    l2: SetAssocCache,
    trace: LatencyTrace,
    issued_at: SimTime,
    cur: PhysAddr,
    done_at: Option<SimTime>,
    rng: ChaCha8Rng,
}

/// Timeline and traffic of one kernel.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KernelRecord {
    pub start: SimTime,
    pub end: Option<SimTime>,
    /// Per-thread accesses before coalescing.
    pub raw_accesses: u64,
    /// Coalesced requests accepted by the LLC.
    pub requests: u64,
    pub llc_write_hits: u64,
    pub dirty_evictions: u64,
}

struct Running {
    plan: Rc<KernelPlan>,
    kind: AccessKind,
    g: u64,
    l: u32,
    wf: u32,
    index_first: bool,
    iters: u32,
    wgs_left: u32,
    wg_threads_left: Vec<u32>,
    record: usize,
}

#[derive(Default)]
struct Subslice {
    queue: VecDeque<u32>,
    resident: u32,
    dispatching: bool,
}

#[derive(Clone, Copy)]
struct Thread {
    wg: u32,
    subslice: u8,
    first: u32,
    lanes: u32,
    iter: u32,
    outstanding: u32,
    in_index: bool,
    index_done: bool,
}

#[derive(Clone, Copy)]
struct PortReq {
    addr: PhysAddr,
    kind: AccessKind,
    thread: u32,
}

struct Accel {
    jobs: VecDeque<Rc<(KernelConfig, Rc<KernelPlan>)>>,
    run: Option<Running>,
    subslices: Vec<Subslice>,
    threads: Vec<Thread>,
    port: VecDeque<PortReq>,
    port_free: SimTime,
    port_wake: Option<SimTime>,
    port_wait_wb: bool,
    port_wait_mshr: bool,
    last_line: u64,
    last_line_done: SimTime,
    outstanding_reads: u32,
    l3: SetAssocCache,
    records: Vec<KernelRecord>,
    plan_cache: Vec<(KernelConfig, Rc<KernelPlan>)>,
    scratch: Vec<PhysAddr>,
    lines: Vec<PhysAddr>,
}

struct World {
    cfg: SocConfig,
    lat: Lat,
    cpu_clock: ClockDomain,
    llc: Llc,
    mc: MemoryController,
    mc_wake: Vec<Option<SimTime>>,
    wb_next_xfer: SimTime,
    wb_xfer_at: Option<SimTime>,
    wb_stalled: bool,
    wb_waiters: VecDeque<Waiter>,
    cpus: Vec<CpuAgent>,
    accel: Accel,
    slab: Vec<Option<(MemoryRequest, Requester)>>,
    free_slots: Vec<u32>,
    next_req_id: u64,
    contention: Option<ContentionCounter>,
    dispatches: Vec<Dispatch>,
    open_tasks: u32,
    rng: SimRng,
}

/// Builder and runner for one simulation.
pub struct System {
    sched: Scheduler<Ev>,
    w: World,
}

impl System {
    pub fn new(cfg: &SocConfig, seed: u64) -> Result<System, Vec<ConfigIssue>> {
        let issues = cfg.validate();
        if !issues.is_empty() {
            return Err(issues);
        }
        let cpu = ClockDomain::new("cpu", cfg.cpu_hz).expect("validated");
        let gpu = ClockDomain::new("accelerator", cfg.accel_hz).expect("validated");
        let mcc = ClockDomain::new("memctrl", cfg.mc_hz).expect("validated");
        let l = &cfg.latencies;
        let lat = Lat {
            l2_hit: cpu.cycles_to_time(l.l2_hit_cycles as u64),
            llc_hit: cpu.cycles_to_time(l.llc_hit_cycles as u64),
            uncore: cpu.cycles_to_time(l.uncore_cycles as u64),
            accel_cycle: gpu.period(),
            l3_hit: gpu.cycles_to_time(l.accel_l3_hit_cycles as u64),
            accel_llc: gpu.cycles_to_time(l.accel_llc_cycles as u64),
            accel_uncore: gpu.cycles_to_time(l.accel_uncore_cycles as u64),
            same_line: gpu.cycles_to_time(l.accel_same_line_cycles as u64),
            mc_cycle: mcc.period(),
            loop_overhead: cfg.cpu_loop.loop_overhead_cycles,
            jitter: cfg.cpu_loop.jitter_cycles,
        };
        let mc = MemoryController::new(cfg.mc.clone(), cfg.dram, cfg.mapping.clone(), mcc);
        let channels = mc.channel_count();
        let subslices = (0..cfg.accel.geometry.subslices)
            .map(|_| Subslice::default())
            .collect();
        let w = World {
            lat,
            cpu_clock: cpu,
            llc: Llc::new(cfg.llc, cfg.writeback_entries).expect("validated"),
            mc,
            mc_wake: vec![None; channels],
            wb_next_xfer: SimTime::ZERO,
            wb_xfer_at: None,
            wb_stalled: false,
            wb_waiters: VecDeque::new(),
            cpus: vec![],
            accel: Accel {
                jobs: VecDeque::new(),
                run: None,
                subslices,
                threads: vec![],
                port: VecDeque::new(),
                port_free: SimTime::ZERO,
                port_wake: None,
                port_wait_wb: false,
                port_wait_mshr: false,
                last_line: u64::MAX,
                last_line_done: SimTime::ZERO,
                outstanding_reads: 0,
                l3: SetAssocCache::new(cfg.accel_l3).expect("validated"),
                records: vec![],
                plan_cache: vec![],
                scratch: Vec::with_capacity(32),
                lines: Vec::with_capacity(32),
            },
            slab: vec![],
            free_slots: vec![],
            next_req_id: 0,
            contention: None,
            dispatches: Vec::with_capacity(4),
            open_tasks: 0,
            rng: SimRng::new(seed),
            cfg: cfg.clone(),
        };
        Ok(System {
            sched: Scheduler::new(),
            w,
        })
    }

    pub fn config(&self) -> &SocConfig {
        &self.w.cfg
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    /// Counts, for each spy read reaching memory, accelerator requests
    /// sharing its channel, bank group and bank.
    pub fn track_contention(&mut self) {
        self.w.contention = Some(ContentionCounter::new(self.w.cfg.mapping.clone()));
    }

    pub fn record_drains(&mut self) {
        self.w.mc.record_episodes(true);
    }

    fn add_cpu(&mut self, role: CpuRole, addrs: Vec<PhysAddr>, kind: AccessKind, use_flush: bool, remaining: Option<u64>, start: SimTime, stop: SimTime) -> usize {
        let id = self.w.cpus.len();
        assert!(id < 250, "too many CPU agents");
        let name = format!("cpu{id}");
        self.w.cpus.push(CpuAgent {
            role,
            addrs,
            next: 0,
            kind,
            use_flush,
            remaining,
            start,
            stop,
            l2: SetAssocCache::new(self.w.cfg.l2).expect("validated"),
            trace: LatencyTrace::new(),
            issued_at: SimTime::ZERO,
            cur: PhysAddr(0),
            done_at: None,
            rng: self.w.rng.stream(&name),
        });
        self.sched.schedule(start, CPU, Ev::CpuIssue(id as u8));
        id
    }

    /// The spy core's measurement loop over `[start, stop)`.
    pub fn add_spy(&mut self, cfg: &SpyConfig, start: SimTime, stop: SimTime) -> Result<usize, crate::agents::AgentError> {
        let addrs = cfg.addresses(&self.w.cfg.mapping)?;
        Ok(self.add_cpu(CpuRole::Spy, addrs, AccessKind::Read, cfg.use_flush, None, start, stop))
    }

    /// A spy that stops after `count` reads.
    pub fn add_counted_spy(&mut self, cfg: &SpyConfig, start: SimTime, count: u64) -> Result<usize, crate::agents::AgentError> {
        let addrs = cfg.addresses(&self.w.cfg.mapping)?;
        self.w.open_tasks += 1;
        Ok(self.add_cpu(CpuRole::Spy, addrs, AccessKind::Read, cfg.use_flush, Some(count), start, SimTime::MAX))
    }

    pub fn add_worker(&mut self, cfg: &CpuWorkerConfig, start: SimTime) -> Result<usize, crate::agents::AgentError> {
        let addrs = cfg.addresses(&self.w.cfg.mapping)?;
        self.w.open_tasks += 1;
        Ok(self.add_cpu(
            CpuRole::Worker,
            addrs,
            cfg.kind,
            cfg.use_flush,
            Some(cfg.count),
            start,
            SimTime::MAX,
        ))
    }

    /// Enqueues kernels that run back to back; the first starts after the
    /// launch overhead.
    pub fn launch_kernels(&mut self, kernels: &[KernelConfig], at: SimTime) -> Result<(), crate::agents::AgentError> {
        let idle = self.w.accel.jobs.is_empty() && self.w.accel.run.is_none();
        for k in kernels {
            let plan = match self.w.accel.plan_cache.iter().find(|(c, _)| c == k) {
                Some((_, p)) => p.clone(),
                None => {
                    let p = Rc::new(k.plan(&self.w.cfg.mapping)?);
                    self.w.accel.plan_cache.push((k.clone(), p.clone()));
                    p
                }
            };
            self.w.accel.jobs.push_back(Rc::new((k.clone(), plan)));
            self.w.open_tasks += 1;
        }
        if idle && !kernels.is_empty() {
            let t = at + self.w.cfg.accel.launch_overhead;
            self.sched.schedule(t, ACCEL, Ev::KernelStart);
        }
        Ok(())
    }

    /// Marks lines as already present and dirty in the LLC.
    pub fn warm_llc_dirty(&mut self, lines: impl IntoIterator<Item = PhysAddr>, origin: Origin) {
        self.w.llc.prefill_dirty(lines, origin);
    }

    pub fn warm_llc_clean(&mut self, lines: impl IntoIterator<Item = PhysAddr>) {
        self.w.llc.prefill_clean(lines);
    }

    pub fn run_until(&mut self, deadline: SimTime) -> SimStats {
        while let Some(ev) = self.sched.pop_until(deadline) {
            self.w.handle(ev, &mut self.sched);
        }
        SimStats {
            events_fired: self.sched.events_fired(),
            final_time: self.sched.now().min(deadline),
        }
    }

    /// Runs until every worker and kernel has finished, then `margin` more;
    /// never beyond `limit`.
    pub fn run_to_completion(&mut self, margin: SimTime, limit: SimTime) -> SimStats {
        let mut deadline = limit;
        let mut closed = false;
        while let Some(ev) = self.sched.pop_until(deadline) {
            self.w.handle(ev, &mut self.sched);
            if !closed && self.w.open_tasks == 0 {
                closed = true;
                deadline = deadline.min(self.sched.now() + margin);
            }
        }
        SimStats {
            events_fired: self.sched.events_fired(),
            final_time: self.sched.now().min(deadline),
        }
    }

    pub fn open_tasks(&self) -> u32 {
        self.w.open_tasks
    }

    pub fn trace(&self, agent: usize) -> &LatencyTrace {
        &self.w.cpus[agent].trace
    }

    pub fn take_trace(&mut self, agent: usize) -> LatencyTrace {
        std::mem::take(&mut self.w.cpus[agent].trace)
    }

    pub fn agent_done(&self, agent: usize) -> Option<SimTime> {
        self.w.cpus[agent].done_at
    }

    pub fn agent_start(&self, agent: usize) -> SimTime {
        self.w.cpus[agent].start
    }

    pub fn kernels(&self) -> &[KernelRecord] {
        &self.w.accel.records
    }

    pub fn mc(&self) -> &MemoryController {
        &self.w.mc
    }

    pub fn mc_stats(&self) -> Vec<ControllerStats> {
        (0..self.w.mc.channel_count())
            .map(|c| self.w.mc.stats(c).clone())
            .collect()
    }

    pub fn drain_episodes(&self, ch: usize) -> &[DrainEpisode] {
        self.w.mc.episodes(ch)
    }

    pub fn llc(&self) -> &Llc {
        &self.w.llc
    }

    pub fn contention(&self) -> Option<&ContentionCounter> {
        self.w.contention.as_ref()
    }

    pub fn contention_per_read(&self) -> Vec<CaseCounts> {
        self.w
            .contention
            .as_ref()
            .map(|c| c.per_read())
            .unwrap_or_default()
    }

    pub fn cpu_clock(&self) -> &ClockDomain {
        &self.w.cpu_clock
    }
}

impl World {
    fn handle(&mut self, ev: Event<Ev>, s: &mut Scheduler<Ev>) {
        let now = ev.fire_time;
        match ev.payload {
            Ev::CpuIssue(a) => self.cpu_issue(a, now, s),
            Ev::CpuDone(a) => self.cpu_done(a, now, s),
            Ev::McArrive(slot) => self.mc_arrive(slot, now, s),
            Ev::McWake(ch) => self.mc_wake(ch, now, s),
            Ev::WbXfer => {
                if self.wb_xfer_at == Some(now) {
                    self.wb_xfer_at = None;
                    self.pump_wb(now, s);
                }
            }
            Ev::ReadReturn(slot) => self.read_return(slot, now, s),
            Ev::KernelStart => self.kernel_start(now, s),
            Ev::WgReady(ss) => self.wg_ready(ss, now, s),
            Ev::ThreadStep(t) => self.thread_step(t, now, s),
            Ev::PortWake => {
                if self.accel.port_wake == Some(now) {
                    self.accel.port_wake = None;
                    self.run_port(now, s);
                }
            }
            Ev::AccelLoadDone(t) => self.access_done(t, now, s),
        }
    }

    fn alloc_slot(&mut self, req: MemoryRequest, who: Requester) -> u32 {
        match self.free_slots.pop() {
            Some(i) => {
                self.slab[i as usize] = Some((req, who));
                i
            }
            None => {
                self.slab.push(Some((req, who)));
                (self.slab.len() - 1) as u32
            }
        }
    }

    fn new_request(&mut self, kind: AccessKind, addr: PhysAddr, origin: Origin, now: SimTime) -> MemoryRequest {
        self.next_req_id += 1;
        MemoryRequest::new(self.next_req_id, kind, addr, origin, now)
    }

    // ---- CPU cores ----

    fn cpu_issue(&mut self, a: u8, now: SimTime, s: &mut Scheduler<Ev>) {
        let ai = a as usize;
        let ag = &mut self.cpus[ai];
        if now >= ag.stop || ag.remaining == Some(0) {
            ag.done_at = Some(now);
            return;
        }
        let addr = ag.addrs[ag.next];
        ag.next = (ag.next + 1) % ag.addrs.len();
        ag.issued_at = now;
        ag.cur = addr;
        match ag.kind {
            AccessKind::Read => {
                if ag.use_flush {
                    ag.l2.invalidate(addr);
                    if self.llc.flush_line(addr) && !self.llc.wb().is_empty() {
                        self.kick_wb(now, s);
                    }
                }
                let ag = &mut self.cpus[ai];
                if ag.l2.lookup(addr, false) {
                    s.schedule(now + self.lat.l2_hit, CPU, Ev::CpuDone(a));
                } else if self.llc.read(addr) {
                    ag.l2.install(addr, false);
                    s.schedule(now + self.lat.llc_hit, CPU, Ev::CpuDone(a));
                } else {
                    let is_spy = ag.role == CpuRole::Spy;
                    if is_spy {
                        if let Some(c) = &mut self.contention {
                            c.record_read(addr);
                        }
                    }
                    let req = self.new_request(AccessKind::Read, addr, Origin::Cpu(a), now);
                    let slot = self.alloc_slot(req, Requester::Cpu(a));
                    s.schedule(now + self.lat.llc_hit + self.lat.uncore, MC, Ev::McArrive(slot));
                }
            }
            AccessKind::Write => self.cpu_write(a, now, s),
        }
    }

    fn cpu_write(&mut self, a: u8, now: SimTime, s: &mut Scheduler<Ev>) {
        let ag = &mut self.cpus[a as usize];
        let addr = ag.cur;
        ag.l2.invalidate(addr);
        match self.llc.write(addr, Origin::Cpu(a)) {
            WriteOutcome::StalledWbFull => self.wb_waiters.push_back(Waiter::Cpu(a)),
            WriteOutcome::Hit => {
                s.schedule(now + self.lat.llc_hit, CPU, Ev::CpuDone(a));
            }
            WriteOutcome::Allocated { writeback } => {
                if writeback.is_some() {
                    self.kick_wb(now, s);
                }
                s.schedule(now + self.lat.llc_hit, CPU, Ev::CpuDone(a));
            }
        }
    }

    fn cpu_done(&mut self, a: u8, now: SimTime, s: &mut Scheduler<Ev>) {
        let lat = &self.lat;
        let ag = &mut self.cpus[a as usize];
        let cycles = self.cpu_clock.time_to_cycles(now - ag.issued_at);
        if ag.role == CpuRole::Spy {
            ag.trace.push(ag.issued_at, cycles.min(u32::MAX as u64) as u32, ag.cur);
        }
        if let Some(r) = &mut ag.remaining {
            *r -= 1;
            if *r == 0 {
                ag.done_at = Some(now);
                self.open_tasks -= 1;
                return;
            }
        }
        let gap = if ag.role == CpuRole::Spy {
            let j = if lat.jitter > 0 {
                ag.rng.gen_range(0..=lat.jitter)
            } else {
                0
            };
            (lat.loop_overhead + j) as u64
        } else {
            1
        };
        let next = now + self.cpu_clock.cycles_to_time(gap);
        if next >= ag.stop {
            ag.done_at = Some(now);
            return;
        }
        s.schedule(next, CPU, Ev::CpuIssue(a));
    }

    // ---- memory controller and writeback path ----

    fn ensure_mc_wake(&mut self, ch: usize, t: SimTime, s: &mut Scheduler<Ev>) {
        if self.mc_wake[ch].map_or(true, |w| t < w) {
            self.mc_wake[ch] = Some(t);
            s.schedule(t, MC, Ev::McWake(ch as u8));
        }
    }

    fn wake_after_enqueue(&mut self, ch: usize, now: SimTime, s: &mut Scheduler<Ev>) {
        if let Some(t) = self.mc.next_wake(ch, now) {
            self.ensure_mc_wake(ch, t, s);
        }
    }

    fn mc_arrive(&mut self, slot: u32, now: SimTime, s: &mut Scheduler<Ev>) {
        let (mut req, _) = self.slab[slot as usize].expect("live slot");
        req.tag = slot;
        match self.mc.enqueue(req, now) {
            Acceptance::Accepted => {
                let ch = self.mc.route(req.addr, req.origin);
                let due = self.mc.next_wake(ch, now).is_some_and(|t| t <= now + self.lat.mc_cycle);
                if due && !self.mc.buffers(ch).draining && self.mc_wake[ch].map_or(true, |w| w > now) {
                    self.mc_wake[ch] = Some(now);
                    self.mc_wake(ch as u8, now, s);
                } else {
                    self.wake_after_enqueue(ch, now, s);
                }
            }
            Acceptance::StalledFull => {
                s.schedule(now + self.lat.mc_cycle, MC, Ev::McArrive(slot));
            }
        }
    }

    fn mc_wake(&mut self, ch: u8, now: SimTime, s: &mut Scheduler<Ev>) {
        let c = ch as usize;
        if self.mc_wake[c] != Some(now) {
            return;
        }
        self.mc_wake[c] = None;
        let mut out = std::mem::take(&mut self.dispatches);
        let (next, _) = self.mc.tick_channel(c, now, &mut out);
        for d in out.drain(..) {
            if d.req.kind == AccessKind::Read {
                let back = match d.req.origin {
                    Origin::Cpu(_) => self.lat.uncore,
                    Origin::Accelerator => self.lat.accel_uncore,
                };
                s.schedule(d.completion + back, MC, Ev::ReadReturn(d.req.tag));
            }
        }
        self.dispatches = out;
        if let Some(t) = next {
            self.ensure_mc_wake(c, t, s);
        }
        if self.wb_stalled {
            self.pump_wb(now, s);
        }
    }

    fn kick_wb(&mut self, now: SimTime, s: &mut Scheduler<Ev>) {
        if self.wb_stalled || self.llc.wb().is_empty() {
            return;
        }
        if now >= self.wb_next_xfer && self.wb_xfer_at.is_none() {
            self.pump_wb(now, s);
            return;
        }
        let t = now.max(self.wb_next_xfer);
        if self.wb_xfer_at.map_or(true, |w| t < w) {
            self.wb_xfer_at = Some(t);
            s.schedule(t, LLC, Ev::WbXfer);
        }
    }

    /// Moves at most one writeback into the controller (one per MC cycle),
    /// choosing the oldest entry whose channel can take it.
    fn pump_wb(&mut self, now: SimTime, s: &mut Scheduler<Ev>) {
        if self.llc.wb().is_empty() {
            self.wb_stalled = false;
            return;
        }
        if now < self.wb_next_xfer {
            self.wb_stalled = false;
            self.kick_wb(now, s);
            return;
        }
        let mc = &self.mc;
        let mut open = [false; 8];
        let (mut any, mut all) = (false, true);
        for (ch, o) in open.iter_mut().enumerate().take(mc.channel_count()) {
            *o = mc.accepts_write_on(ch);
            any |= *o;
            all &= *o;
        }
        let idx = if all {
            Some(0)
        } else if any {
            self.llc
                .wb()
                .iter()
                .position(|w| open[mc.route(w.addr, w.origin)])
        } else {
            None
        };
        let Some(i) = idx else {
            self.wb_stalled = true;
            return;
        };
        self.wb_stalled = false;
        let wb = self.llc.take_writeback(i).expect("index valid");
        let req = self.new_request(AccessKind::Write, wb.addr, wb.origin, now);
        let acc = self.mc.enqueue(req, now);
        debug_assert_eq!(acc, Acceptance::Accepted);
        let ch = self.mc.route(wb.addr, wb.origin);
        self.wake_after_enqueue(ch, now, s);
        self.wb_next_xfer = now + self.lat.mc_cycle;
        self.wb_slot_freed(now, s);
        self.kick_wb(now, s);
    }

    fn wb_slot_freed(&mut self, now: SimTime, s: &mut Scheduler<Ev>) {
        while !self.llc.wb_blocked() {
            match self.wb_waiters.pop_front() {
                None => break,
                Some(Waiter::Port) => {
                    // A port stalled on the buffer retries as soon as a slot frees.
                    self.accel.port_wait_wb = false;
                    self.accel.port_free = self.accel.port_free.min(now);
                    self.run_port(now, s);
                }
                Some(Waiter::Cpu(a)) => self.cpu_write(a, now, s),
            }
        }
    }

    fn read_return(&mut self, slot: u32, now: SimTime, s: &mut Scheduler<Ev>) {
        let (req, who) = self.slab[slot as usize].take().expect("live slot");
        self.free_slots.push(slot);
        self.llc.fill(req.addr);
        if !self.llc.wb().is_empty() {
            self.kick_wb(now, s);
        }
        match who {
            Requester::Cpu(a) => {
                self.cpus[a as usize].l2.install(req.addr, false);
                self.cpu_done(a, now, s);
            }
            Requester::Accel(t) => {
                self.accel.outstanding_reads -= 1;
                self.accel.l3.install(req.addr, false);
                self.access_done(t, now, s);
                if self.accel.port_wait_mshr {
                    self.accel.port_wait_mshr = false;
                    self.run_port(now, s);
                }
            }
        }
    }

    // ---- accelerator ----

    fn kernel_start(&mut self, now: SimTime, s: &mut Scheduler<Ev>) {
        let Some(job) = self.accel.jobs.pop_front() else {
            return;
        };
        let (k, plan) = (&job.0, job.1.clone());
        let wgs = k.work_groups();
        let g = k.global_threads as u64;
        let iters = plan.accesses.div_ceil(g) as u32;
        let mut wg_threads_left = Vec::with_capacity(wgs as usize);
        for wg in 0..wgs {
            let lanes = (k.global_threads - wg * k.local_threads).min(k.local_threads);
            wg_threads_left.push(lanes.div_ceil(k.wavefront_size));
        }
        self.accel.records.push(KernelRecord {
            start: now,
            ..KernelRecord::default()
        });
        self.accel.run = Some(Running {
            plan,
            kind: k.access_kind,
            g,
            l: k.local_threads,
            wf: k.wavefront_size,
            index_first: k.index_read_first,
            iters,
            wgs_left: wgs,
            wg_threads_left,
            record: self.accel.records.len() - 1,
        });
        self.accel.threads.clear();
        let n = self.accel.subslices.len() as u32;
        for (ss, list) in assign_work_groups(wgs, n).into_iter().enumerate() {
            self.accel.subslices[ss].queue = list.into();
            self.try_dispatch_wg(ss, now, s);
        }
    }

    fn try_dispatch_wg(&mut self, ss: usize, now: SimTime, s: &mut Scheduler<Ev>) {
        let limit = self.cfg.accel.wgs_per_subslice;
        let sub = &mut self.accel.subslices[ss];
        if !sub.dispatching && sub.resident < limit && !sub.queue.is_empty() {
            sub.dispatching = true;
            s.schedule(now + self.cfg.accel.wg_dispatch, ACCEL, Ev::WgReady(ss as u8));
        }
    }

    fn wg_ready(&mut self, ss: u8, now: SimTime, s: &mut Scheduler<Ev>) {
        let sub = &mut self.accel.subslices[ss as usize];
        sub.dispatching = false;
        let Some(wg) = sub.queue.pop_front() else {
            return;
        };
        sub.resident += 1;
        let run = self.accel.run.as_ref().expect("kernel running");
        let wavefronts = run.wg_threads_left[wg as usize];
        let (l, wf) = (run.l, run.wf);
        let lanes_in_wg = (run.g as u32 - wg * l).min(l);
        for w in 0..wavefronts {
            let id = self.accel.threads.len() as u32;
            self.accel.threads.push(Thread {
                wg,
                subslice: ss,
                first: wg * l + w * wf,
                lanes: (lanes_in_wg - w * wf).min(wf),
                iter: 0,
                outstanding: 0,
                in_index: false,
                index_done: false,
            });
            s.schedule(now, ACCEL, Ev::ThreadStep(id));
        }
        self.try_dispatch_wg(ss as usize, now, s);
    }

    fn thread_step(&mut self, t: u32, now: SimTime, s: &mut Scheduler<Ev>) {
        let a = &mut self.accel;
        let run = a.run.as_ref().expect("kernel running");
        let th = a.threads[t as usize];
        let base_k = th.iter as u64 * run.g;
        let accesses = run.plan.accesses;
        if th.iter >= run.iters || base_k + th.first as u64 >= accesses {
            self.finish_thread(t, now, s);
            return;
        }
        let live = (accesses - base_k - th.first as u64).min(th.lanes as u64) as u32;
        let index_phase = run.index_first && !th.index_done;
        a.scratch.clear();
        for lane in 0..live {
            let k = base_k + (th.first + lane) as u64;
            a.scratch.push(if index_phase {
                run.plan.index_address(k)
            } else {
                run.plan.address(k)
            });
        }
        let mut lines = std::mem::take(&mut a.lines);
        coalesce_lines(a.scratch.iter().copied(), &mut lines);
        let kind = if index_phase {
            AccessKind::Read
        } else {
            run.kind
        };
        let rec = run.record;
        if !index_phase {
            a.records[rec].raw_accesses += live as u64;
        }
        let th = &mut a.threads[t as usize];
        th.outstanding = lines.len() as u32;
        th.in_index = index_phase;
        for &line in &lines {
            match kind {
                AccessKind::Write => a.port.push_back(PortReq {
                    addr: line,
                    kind,
                    thread: t,
                }),
                AccessKind::Read => {
                    if a.l3.lookup(line, false) {
                        s.schedule(now + self.lat.l3_hit, ACCEL, Ev::AccelLoadDone(t));
                    } else {
                        a.port.push_back(PortReq {
                            addr: line,
                            kind,
                            thread: t,
                        });
                    }
                }
            }
        }
        a.lines = lines;
        self.run_port(now, s);
    }

    fn access_done(&mut self, t: u32, now: SimTime, s: &mut Scheduler<Ev>) {
        let th = &mut self.accel.threads[t as usize];
        th.outstanding -= 1;
        if th.outstanding > 0 {
            return;
        }
        if th.in_index {
            th.in_index = false;
            th.index_done = true;
        } else {
            th.iter += 1;
            th.index_done = false;
        }
        s.schedule(now + self.lat.accel_cycle, ACCEL, Ev::ThreadStep(t));
    }

    fn finish_thread(&mut self, t: u32, now: SimTime, s: &mut Scheduler<Ev>) {
        let th = self.accel.threads[t as usize];
        let run = self.accel.run.as_mut().expect("kernel running");
        let left = &mut run.wg_threads_left[th.wg as usize];
        *left -= 1;
        if *left > 0 {
            return;
        }
        run.wgs_left -= 1;
        let done = run.wgs_left == 0;
        let rec = run.record;
        self.accel.subslices[th.subslice as usize].resident -= 1;
        if done {
            self.accel.records[rec].end = Some(now);
            self.accel.run = None;
            self.open_tasks -= 1;
            if !self.accel.jobs.is_empty() {
                s.schedule(now + self.cfg.accel.kernel_gap, ACCEL, Ev::KernelStart);
            }
        } else {
            self.try_dispatch_wg(th.subslice as usize, now, s);
        }
    }

    fn ensure_port_wake(&mut self, t: SimTime, s: &mut Scheduler<Ev>) {
        if self.accel.port_wake.map_or(true, |w| t < w) {
            self.accel.port_wake = Some(t);
            s.schedule(t, ACCEL, Ev::PortWake);
        }
    }

    /// The accelerator's LLC port: one request per accelerator cycle, stores
    /// to one line serialized, stalls on a full writeback buffer or when too
    /// many reads are outstanding.
    fn run_port(&mut self, now: SimTime, s: &mut Scheduler<Ev>) {
        if self.accel.port_wait_wb || self.accel.port_wait_mshr {
            return;
        }
        let Some(req) = self.accel.port.front().copied() else {
            return;
        };
        let ready = self.port_ready_at(&req);
        if ready > now {
            self.ensure_port_wake(ready, s);
            return;
        }
        match req.kind {
            AccessKind::Write => {
                let line = req.addr.line();
                let out = self.llc.write(req.addr, Origin::Accelerator);
                let rec = self.accel.run.as_ref().map(|r| r.record);
                match out {
                    WriteOutcome::StalledWbFull => {
                        self.accel.port_wait_wb = true;
                        self.wb_waiters.push_back(Waiter::Port);
                        return;
                    }
                    WriteOutcome::Hit => {
                        if let Some(r) = rec {
                            self.accel.records[r].llc_write_hits += 1;
                        }
                    }
                    WriteOutcome::Allocated { writeback } => {
                        if writeback.is_some() {
                            if let Some(r) = rec {
                                self.accel.records[r].dirty_evictions += 1;
                            }
                            self.kick_wb(now, s);
                        }
                    }
                }
                if let Some(r) = rec {
                    self.accel.records[r].requests += 1;
                }
                if let Some(c) = &mut self.contention {
                    c.record_write(req.addr);
                }
                self.accel.l3.invalidate(req.addr);
                self.accel.last_line = line;
                self.accel.last_line_done = now + self.lat.same_line;
                self.accel.port.pop_front();
                self.accel.port_free = now + self.lat.accel_cycle;
                self.access_done(req.thread, now, s);
            }
            AccessKind::Read => {
                if self.llc.read(req.addr) {
                    self.accel.l3.install(req.addr, false);
                    s.schedule(now + self.lat.accel_llc, ACCEL, Ev::AccelLoadDone(req.thread));
                } else {
                    if self.accel.outstanding_reads >= self.cfg.accel.max_outstanding_reads {
                        self.accel.port_wait_mshr = true;
                        return;
                    }
                    self.accel.outstanding_reads += 1;
                    let mreq = self.new_request(AccessKind::Read, req.addr, Origin::Accelerator, now);
                    let slot = self.alloc_slot(mreq, Requester::Accel(req.thread));
                    s.schedule(now + self.lat.accel_llc, MC, Ev::McArrive(slot));
                }
                if let Some(r) = self.accel.run.as_ref().map(|r| r.record) {
                    self.accel.records[r].requests += 1;
                }
                self.accel.port.pop_front();
                self.accel.port_free = now + self.lat.accel_cycle;
            }
        }
        match self.accel.port.front() {
            Some(r) if r.kind == AccessKind::Write && self.llc.wb_blocked() => {
                self.accel.port_wait_wb = true;
                self.wb_waiters.push_back(Waiter::Port);
            }
            Some(r) => {
                let t = self.port_ready_at(&r.clone());
                self.ensure_port_wake(t, s);
            }
            None => {}
        }
    }

    fn port_ready_at(&self, r: &PortReq) -> SimTime {
        let a = &self.accel;
        if r.kind == AccessKind::Write && r.addr.line() == a.last_line {
            a.port_free.max(a.last_line_done)
        } else {
            a.port_free
        }
    }
}
