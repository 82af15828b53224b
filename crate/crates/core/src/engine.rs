//! Discrete-event virtual-time core shared by the recorder and the replayer.
//!
//! Time advances in instants. At each instant every ready thread whose
//! clock equals the instant runs until it blocks or its clock moves past
//! the instant; then pending gates and lock requests are resolved, and the
//! instant repeats until nothing changes. Memory effects take place at an
//! event's start time.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::trace::{
    Addr, CsId, EventKind, EventRef, LockId, Reg, SectionMeta, ThreadId, TraceEvent,
};
use crate::transform::dynamic_lockset;
use crate::workload::ThreadCursor;

/// How a free lock picks among waiting threads.
pub(crate) enum Arbiter {
    /// Earliest request wins; equal request times are broken by the RNG.
    Earliest(Box<ChaCha8Rng>),
    /// Grants follow a fixed per-lock order of acquisition events.
    Fixed(BTreeMap<LockId, Vec<EventRef>>),
}

pub(crate) enum Source<'a> {
    Fixed(&'a [TraceEvent]),
    Live {
        cursor: ThreadCursor<'a>,
        buf: Vec<TraceEvent>,
    },
}

impl Source<'_> {
    fn get(&mut self, pos: u32, regs: &HashMap<Reg, i64>) -> Option<&TraceEvent> {
        match self {
            Source::Fixed(events) => events.get(pos as usize),
            Source::Live { cursor, buf } => {
                if pos as usize == buf.len() {
                    let ev = cursor.next_event(regs)?;
                    buf.push(ev);
                }
                buf.get(pos as usize)
            }
        }
    }

    fn set_acq_ord(&mut self, pos: u32, ord: u32) {
        if let Source::Live { buf, .. } = self {
            buf[pos as usize].acq_ord = Some(ord);
        }
    }
}

pub(crate) struct EngineConfig<'a> {
    pub arbiter: Arbiter,
    /// The event at the key position may start only once every listed
    /// thread has reached the listed position.
    pub gates: HashMap<EventRef, Vec<EventRef>>,
    /// Section metadata of a transformed trace, used for dynamic locking.
    pub sections: &'a [SectionMeta],
    pub dynamic_locking: bool,
    pub probes: HashSet<EventRef>,
    pub collect_log: bool,
}

impl Default for EngineConfig<'_> {
    fn default() -> Self {
        EngineConfig {
            arbiter: Arbiter::Fixed(BTreeMap::new()),
            gates: HashMap::new(),
            sections: &[],
            dynamic_locking: false,
            probes: HashSet::new(),
            collect_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Snapshot {
    pub memory: BTreeMap<Addr, i64>,
    pub regs: HashMap<Reg, i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Executed {
    pub at: EventRef,
    pub start: u64,
    pub end: u64,
}

/// Executed events plus the synchronization edges that ordered them.
#[derive(Debug, Clone, Default)]
pub(crate) struct ExecLog {
    pub executed: Vec<Executed>,
    pub sync: Vec<(EventRef, EventRef)>,
}

pub(crate) struct ThreadRun {
    pub tid: ThreadId,
    pub completion: u64,
    pub busy: u64,
    pub wait: u64,
    /// `reach[p]`: time the thread arrived at position `p`.
    pub reach: Vec<u64>,
    pub events: Vec<TraceEvent>,
}

pub(crate) struct Outcome {
    pub threads: Vec<ThreadRun>,
    pub final_memory: BTreeMap<Addr, i64>,
    pub realized: BTreeMap<LockId, Vec<EventRef>>,
    pub aux_acquisitions: u64,
    /// Memory events in the order they executed.
    pub mem_order: Vec<EventRef>,
    pub probes: HashMap<EventRef, Snapshot>,
    pub log: Option<ExecLog>,
}

/// Why the simulation could not make progress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Stuck {
    pub cycle: Vec<ThreadId>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum State {
    Ready,
    Lock { lock: LockId, since: u64 },
    Gate { since: u64 },
    Done,
}

struct Thread<'a> {
    tid: ThreadId,
    src: Source<'a>,
    pos: u32,
    clock: u64,
    busy: u64,
    wait: u64,
    reach: Vec<u64>,
    regs: HashMap<Reg, i64>,
    state: State,
    gate_passed: Option<u32>,
    decided: Option<u32>,
    elided: HashSet<u32>,
}

struct LockState {
    holder: Option<usize>,
    last_release: Option<EventRef>,
    next: usize,
    granted: u32,
}

pub(crate) struct Engine<'a> {
    threads: Vec<Thread<'a>>,
    index: HashMap<ThreadId, usize>,
    memory: HashMap<Addr, i64>,
    locks: BTreeMap<LockId, LockState>,
    cfg: EngineConfig<'a>,
    section_at: HashMap<EventRef, usize>,
    section_by_id: HashMap<CsId, usize>,
    out: Outcome,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        sources: Vec<(ThreadId, Source<'a>)>,
        initial_memory: &BTreeMap<Addr, i64>,
        cfg: EngineConfig<'a>,
    ) -> Self {
        let index = sources
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (*t, i))
            .collect();
        let threads = sources
            .into_iter()
            .map(|(tid, src)| Thread {
                tid,
                src,
                pos: 0,
                clock: 0,
                busy: 0,
                wait: 0,
                reach: vec![0],
                regs: HashMap::new(),
                state: State::Ready,
                gate_passed: None,
                decided: None,
                elided: HashSet::new(),
            })
            .collect();
        let section_at = cfg
            .sections
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    EventRef {
                        tid: s.id.tid,
                        seq: s.begin,
                    },
                    i,
                )
            })
            .collect();
        let section_by_id = cfg
            .sections
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect();
        let log = cfg.collect_log.then(ExecLog::default);
        Engine {
            threads,
            index,
            memory: initial_memory
                .iter()
                .map(|(a, v)| (a.clone(), *v))
                .collect(),
            locks: BTreeMap::new(),
            cfg,
            section_at,
            section_by_id,
            out: Outcome {
                threads: Vec::new(),
                final_memory: BTreeMap::new(),
                realized: BTreeMap::new(),
                aux_acquisitions: 0,
                mem_order: Vec::new(),
                probes: HashMap::new(),
                log,
            },
        }
    }

    pub(crate) fn run(mut self) -> Result<Outcome, Stuck> {
        let mut now = 0u64;
        loop {
            loop {
                let mut changed = false;
                for i in 0..self.threads.len() {
                    if self.threads[i].state == State::Ready && self.threads[i].clock == now {
                        self.run_thread(i, now);
                        changed = true;
                    }
                }
                changed |= self.resolve(now);
                if !changed {
                    break;
                }
            }
            if self.threads.iter().all(|t| t.state == State::Done) {
                break;
            }
            match self
                .threads
                .iter()
                .filter(|t| t.state == State::Ready)
                .map(|t| t.clock)
                .min()
            {
                Some(t) => now = t,
                None => return Err(self.stuck()),
            }
        }
        Ok(self.finish())
    }

    fn run_thread(&mut self, i: usize, now: u64) {
        while self.threads[i].state == State::Ready && self.threads[i].clock == now {
            self.step(i);
        }
    }

    /// Advances thread `i` by at most one event.
    fn step(&mut self, i: usize) {
        let th = &mut self.threads[i];
        let pos = th.pos;
        let at = EventRef {
            tid: th.tid,
            seq: pos,
        };
        let Some(ev) = th.src.get(pos, &th.regs) else {
            th.state = State::Done;
            return;
        };
        let kind = ev.kind;
        let lock = ev.lock.clone();

        if th.gate_passed != Some(pos) && self.cfg.gates.contains_key(&at) {
            let since = th.clock;
            match self.gate_ready(at) {
                Some(r) => {
                    let th = &mut self.threads[i];
                    th.gate_passed = Some(pos);
                    if r > since {
                        th.wait += r - since;
                        th.clock = r;
                        return;
                    }
                }
                None => {
                    self.threads[i].state = State::Gate { since };
                    return;
                }
            }
        }

        if self.cfg.dynamic_locking && self.threads[i].decided != Some(pos) {
            if let Some(&s) = self.section_at.get(&at) {
                self.threads[i].decided = Some(pos);
                self.decide_elision(i, s);
            }
        }

        let th = &mut self.threads[i];
        if th.elided.contains(&pos) {
            th.pos += 1;
            th.reach.push(th.clock);
            if let Some(log) = &mut self.out.log {
                log.executed.push(Executed {
                    at,
                    start: th.clock,
                    end: th.clock,
                });
            }
            return;
        }

        match kind {
            EventKind::LockAcq => {
                th.state = State::Lock {
                    lock: lock.expect("validated"),
                    since: th.clock,
                };
            }
            EventKind::LockRel => {
                let lock = lock.expect("validated");
                self.exec(i);
                let st = self
                    .locks
                    .get_mut(&lock)
                    .expect("released lock was acquired");
                st.holder = None;
                st.last_release = Some(at);
            }
            EventKind::ThreadEnd => {
                self.exec(i);
                self.threads[i].state = State::Done;
            }
            _ => self.exec(i),
        }
    }

    /// Executes the event at the thread's position starting at its clock.
    fn exec(&mut self, i: usize) {
        let th = &mut self.threads[i];
        let pos = th.pos;
        let at = EventRef {
            tid: th.tid,
            seq: pos,
        };
        let start = th.clock;
        if self.cfg.probes.contains(&at) {
            let snap = Snapshot {
                memory: self.memory.iter().map(|(a, v)| (a.clone(), *v)).collect(),
                regs: th.regs.clone(),
            };
            self.out.probes.insert(at, snap);
        }
        let ev = th.src.get(pos, &th.regs).expect("event present");
        let cost = ev.cost();
        match ev.kind {
            EventKind::Read => {
                let addr = ev.addr.as_ref().expect("validated");
                let v = self.memory.get(addr).copied().unwrap_or(0);
                let reg = ev.reg.clone().expect("validated");
                th.regs.insert(reg, v);
                self.out.mem_order.push(at);
            }
            EventKind::Write => {
                if let Some(val) = &ev.valexpr {
                    let v = val.eval(&th.regs);
                    self.memory.insert(ev.addr.clone().expect("validated"), v);
                }
                self.out.mem_order.push(at);
            }
            _ => {}
        }
        th.clock += cost;
        th.busy += cost;
        th.pos += 1;
        th.reach.push(th.clock);
        if let Some(log) = &mut self.out.log {
            log.executed.push(Executed {
                at,
                start,
                end: th.clock,
            });
        }
    }

    /// Earliest time at which every gate of `at` is satisfied, if all
    /// target threads have already passed their positions.
    fn gate_ready(&mut self, at: EventRef) -> Option<u64> {
        let mut ready = 0;
        for target in &self.cfg.gates[&at] {
            let t = &self.threads[self.index[&target.tid]];
            if t.pos < target.seq {
                return None;
            }
            ready = ready.max(t.reach[target.seq as usize]);
        }
        if let Some(log) = &mut self.out.log {
            for target in &self.cfg.gates[&at] {
                if target.seq > 0 {
                    log.sync.push((
                        EventRef {
                            tid: target.tid,
                            seq: target.seq - 1,
                        },
                        at,
                    ));
                }
            }
        }
        Some(ready)
    }

    fn decide_elision(&mut self, i: usize, s: usize) {
        let sections: &'a [SectionMeta] = self.cfg.sections;
        let meta = &sections[s];
        let now = self.threads[i].clock;
        let finished = |id: CsId| {
            let src = &sections[self.section_by_id[&id]];
            let t = &self.threads[self.index[&id.tid]];
            t.pos > src.end && t.reach[src.end as usize + 1] <= now
        };
        let sources = meta
            .sources
            .iter()
            .filter_map(|id| self.section_by_id.get(id).map(|&k| &sections[k]));
        let effective = dynamic_lockset(meta, sources, finished);
        let dropped: Vec<&LockId> = meta
            .lockset
            .iter()
            .filter(|l| !effective.contains(l))
            .collect();
        if dropped.is_empty() {
            return;
        }
        if let Some(log) = &mut self.out.log {
            // Reading a source's end flag orders its release before this section.
            let begin = EventRef {
                tid: meta.id.tid,
                seq: meta.begin,
            };
            for src in &meta.sources {
                let Some(&k) = self.section_by_id.get(src) else {
                    continue;
                };
                if finished(*src) {
                    log.sync.push((
                        EventRef {
                            tid: src.tid,
                            seq: sections[k].end,
                        },
                        begin,
                    ));
                }
            }
        }
        let th = &mut self.threads[i];
        let mut elided = Vec::new();
        for pos in meta.begin..meta.end {
            let Some(ev) = th.src.get(pos, &th.regs) else {
                break;
            };
            if matches!(ev.kind, EventKind::LockAcq | EventKind::LockRel)
                && ev.lock.as_ref().is_some_and(|l| dropped.contains(&l))
            {
                elided.push(pos);
            }
        }
        th.elided.extend(elided);
    }

    fn resolve(&mut self, now: u64) -> bool {
        let mut changed = false;
        for i in 0..self.threads.len() {
            if let State::Gate { since } = self.threads[i].state {
                let at = EventRef {
                    tid: self.threads[i].tid,
                    seq: self.threads[i].pos,
                };
                if let Some(r) = self.gate_ready(at) {
                    let th = &mut self.threads[i];
                    let resume = r.max(since).max(now);
                    th.wait += resume - since;
                    th.clock = resume;
                    th.gate_passed = Some(th.pos);
                    th.state = State::Ready;
                    changed = true;
                }
            }
        }
        let mut pending: BTreeMap<LockId, Vec<(u64, usize)>> = BTreeMap::new();
        for (i, th) in self.threads.iter().enumerate() {
            if let State::Lock { lock, since } = &th.state {
                pending.entry(lock.clone()).or_default().push((*since, i));
            }
        }
        for (lock, waiters) in pending {
            let st = self.locks.entry(lock.clone()).or_insert(LockState {
                holder: None,
                last_release: None,
                next: 0,
                granted: 0,
            });
            if st.holder.is_some() {
                continue;
            }
            let chosen = match &mut self.cfg.arbiter {
                Arbiter::Earliest(rng) => {
                    let first = waiters.iter().map(|w| w.0).min().expect("non-empty");
                    let tied: Vec<usize> = waiters
                        .iter()
                        .filter(|w| w.0 == first)
                        .map(|w| w.1)
                        .collect();
                    if tied.len() == 1 {
                        Some(tied[0])
                    } else {
                        Some(tied[rng.random_range(0..tied.len())])
                    }
                }
                Arbiter::Fixed(orders) => {
                    let order = orders.get(&lock).map(Vec::as_slice).unwrap_or(&[]);
                    while let Some(e) = order.get(st.next) {
                        let t = &self.threads[self.index[&e.tid]];
                        if t.elided.contains(&e.seq) {
                            st.next += 1;
                        } else {
                            break;
                        }
                    }
                    order.get(st.next).and_then(|e| {
                        waiters
                            .iter()
                            .map(|w| w.1)
                            .find(|&i| self.threads[i].tid == e.tid && self.threads[i].pos == e.seq)
                    })
                }
            };
            let Some(i) = chosen else { continue };
            let State::Lock { since, .. } = self.threads[i].state else {
                unreachable!("waiter is blocked on a lock")
            };
            st.holder = Some(i);
            st.next += 1;
            let ord = st.granted;
            st.granted += 1;
            let last_release = st.last_release;
            let th = &mut self.threads[i];
            let at = EventRef {
                tid: th.tid,
                seq: th.pos,
            };
            th.wait += now - since;
            th.clock = now;
            th.state = State::Ready;
            th.src.set_acq_ord(th.pos, ord);
            self.out.realized.entry(lock.clone()).or_default().push(at);
            if lock.is_aux() {
                self.out.aux_acquisitions += 1;
            }
            if let (Some(log), Some(rel)) = (&mut self.out.log, last_release) {
                log.sync.push((rel, at));
            }
            self.exec(i);
            changed = true;
        }
        changed
    }

    fn stuck(&self) -> Stuck {
        let holder_of = |lock: &LockId| self.locks.get(lock).and_then(|s| s.holder);
        let mut blocked = Vec::new();
        for th in &self.threads {
            match &th.state {
                State::Lock { lock, .. } => blocked.push(format!(
                    "T{} waits for {lock}{}",
                    th.tid,
                    holder_of(lock)
                        .map(|h| format!(" held by T{}", self.threads[h].tid))
                        .unwrap_or_default()
                )),
                State::Gate { .. } => blocked.push(format!(
                    "T{} waits on an ordering constraint at #{}",
                    th.tid, th.pos
                )),
                _ => {}
            }
        }
        // Follow lock wait-for edges from each blocked thread to find a cycle.
        let mut cycle = Vec::new();
        'outer: for start in 0..self.threads.len() {
            let mut path = vec![start];
            let mut cur = start;
            while let State::Lock { lock, .. } = &self.threads[cur].state {
                let Some(h) = holder_of(lock) else { break };
                if let Some(k) = path.iter().position(|&p| p == h) {
                    cycle = path[k..].iter().map(|&p| self.threads[p].tid).collect();
                    break 'outer;
                }
                path.push(h);
                cur = h;
            }
        }
        if cycle.is_empty() {
            cycle = self
                .threads
                .iter()
                .filter(|t| matches!(t.state, State::Lock { .. } | State::Gate { .. }))
                .map(|t| t.tid)
                .collect();
        }
        Stuck {
            cycle,
            detail: blocked.join("; "),
        }
    }

    fn finish(mut self) -> Outcome {
        self.out.final_memory = self.memory.into_iter().collect();
        self.out.threads = self
            .threads
            .into_iter()
            .map(|t| ThreadRun {
                tid: t.tid,
                completion: t.clock,
                busy: t.busy,
                wait: t.wait,
                reach: t.reach,
                events: match t.src {
                    Source::Live { buf, .. } => buf,
                    Source::Fixed(_) => Vec::new(),
                },
            })
            .collect();
        self.out
    }
}
