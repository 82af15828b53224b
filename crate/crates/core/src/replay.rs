//! Virtual-time recording of workloads and policy-driven replay of traces.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Arbiter, Engine, EngineConfig, ExecLog, Outcome, Snapshot, Source, Stuck};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::trace::{
    extract_critical_sections, Addr, CsId, EventKind, EventRef, LockId, ThreadId, Trace,
};
use crate::workload::{ThreadCursor, WorkloadProgram};

/// Seed used when the caller does not supply one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReplayPolicy {
    /// Free scheduling; simultaneous lock requests broken by a seeded RNG.
    OrigS,
    /// Per-lock round-robin over thread ids, independent of recorded timing.
    SyncS,
    /// Recorded lock order plus a total order over memory accesses.
    MemS,
    /// Recorded per-lock acquisition order.
    ElscS,
}

impl ReplayPolicy {
    pub const ALL: [ReplayPolicy; 4] = [
        ReplayPolicy::OrigS,
        ReplayPolicy::SyncS,
        ReplayPolicy::MemS,
        ReplayPolicy::ElscS,
    ];

    pub fn is_deterministic(self) -> bool {
        self != ReplayPolicy::OrigS
    }
}

impl fmt::Display for ReplayPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayPolicy::OrigS => "orig",
            ReplayPolicy::SyncS => "sync",
            ReplayPolicy::MemS => "mem",
            ReplayPolicy::ElscS => "elsc",
        })
    }
}

impl FromStr for ReplayPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .to_ascii_lowercase()
            .trim_end_matches("_s")
            .trim_end_matches("-s")
        {
            "orig" => Ok(ReplayPolicy::OrigS),
            "sync" => Ok(ReplayPolicy::SyncS),
            "mem" => Ok(ReplayPolicy::MemS),
            "elsc" => Ok(ReplayPolicy::ElscS),
            _ => Err(Error::InvalidArgument(format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    pub policy: ReplayPolicy,
    /// Only consulted by `ORIG_S`.
    pub seed: u64,
    /// Prune auxiliary locksets using predecessor completion flags.
    pub dynamic_locking: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            policy: ReplayPolicy::ElscS,
            seed: DEFAULT_SEED,
            dynamic_locking: true,
        }
    }
}

impl ReplayOptions {
    pub fn new(policy: ReplayPolicy) -> Self {
        ReplayOptions {
            policy,
            ..Default::default()
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dynamic_locking(mut self, on: bool) -> Self {
        self.dynamic_locking = on;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadTimes {
    pub completion: u64,
    pub busy: u64,
    pub wait: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub policy: ReplayPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub makespan: u64,
    pub per_thread: BTreeMap<ThreadId, ThreadTimes>,
    /// `"<section>/pre"` and `"<section>/post"` segment boundaries.
    pub timestamps: BTreeMap<String, u64>,
    pub final_memory: BTreeMap<Addr, i64>,
    pub realized_lock_order: BTreeMap<LockId, Vec<EventRef>>,
    /// Sections of each original lock in the order they were entered.
    pub section_order: BTreeMap<LockId, Vec<CsId>>,
    pub aux_acquisitions: u64,
}

impl ReplayResult {
    pub fn label(&self, label: &str) -> Result<u64> {
        self.timestamps
            .get(label)
            .copied()
            .ok_or_else(|| Error::MissingLabel(label.to_string()))
    }
}

pub fn pre_label(id: CsId) -> String {
    format!("{id}/pre")
}

pub fn post_label(id: CsId) -> String {
    format!("{id}/post")
}

/// Outcome of recording a workload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub makespan: u64,
    pub per_thread: BTreeMap<ThreadId, ThreadTimes>,
    pub final_memory: BTreeMap<Addr, i64>,
}

/// Executes `program` under virtual time with seeded tie-breaking and
/// returns the canonical trace of the realized execution.
pub fn record(program: &WorkloadProgram, seed: u64) -> Result<(Trace, RunStats)> {
    let sources = program
        .threads
        .iter()
        .enumerate()
        .map(|(tid, body)| {
            let tid = tid as ThreadId;
            (
                tid,
                Source::Live {
                    cursor: ThreadCursor::new(tid, body),
                    buf: Vec::new(),
                },
            )
        })
        .collect();
    let cfg = EngineConfig {
        arbiter: Arbiter::Earliest(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        ..Default::default()
    };
    let out = Engine::new(sources, &program.initial_memory, cfg)
        .run()
        .map_err(|s| Error::Deadlock { cycle: s.cycle })?;
    let stats = RunStats {
        makespan: makespan(&out),
        per_thread: per_thread(&out),
        final_memory: out.final_memory.clone(),
    };
    let threads = out.threads.into_iter().map(|t| (t.tid, t.events)).collect();
    let trace = Trace::from_threads(threads, program.initial_memory.clone())?;
    Ok((trace, stats))
}

pub fn replay(trace: &Trace, policy: ReplayPolicy, seed: u64) -> Result<ReplayResult> {
    replay_with(trace, &ReplayOptions::new(policy).seed(seed))
}

pub fn replay_with(trace: &Trace, opts: &ReplayOptions) -> Result<ReplayResult> {
    Ok(run(trace, opts, &Extras::default())?.0)
}

#[derive(Default)]
pub(crate) struct Extras {
    pub probes: HashSet<EventRef>,
    pub collect_log: bool,
}

pub(crate) struct Observed {
    pub probes: HashMap<EventRef, Snapshot>,
    pub log: Option<ExecLog>,
    pub mem_order: Vec<EventRef>,
}

pub(crate) fn run(
    trace: &Trace,
    opts: &ReplayOptions,
    extras: &Extras,
) -> Result<(ReplayResult, Observed)> {
    let mut gates = partial_order_gates(trace)?;
    let arbiter = match opts.policy {
        ReplayPolicy::OrigS => Arbiter::Earliest(Box::new(ChaCha8Rng::seed_from_u64(opts.seed))),
        ReplayPolicy::ElscS => Arbiter::Fixed(trace.lock_orders.clone()),
        ReplayPolicy::SyncS => Arbiter::Fixed(round_robin_orders(trace)),
        ReplayPolicy::MemS => {
            if !trace.has_memory_events() {
                return Err(Error::PolicyPrerequisite(
                    "MEM_S needs memory events, but the trace was recorded without them".into(),
                ));
            }
            let elsc = ReplayOptions {
                policy: ReplayPolicy::ElscS,
                ..*opts
            };
            let (_, seen) = run(trace, &elsc, &Extras::default())?;
            for pair in seen.mem_order.windows(2) {
                let (prev, cur) = (pair[0], pair[1]);
                gates.entry(cur).or_default().push(EventRef {
                    tid: prev.tid,
                    seq: prev.seq + 1,
                });
            }
            Arbiter::Fixed(trace.lock_orders.clone())
        }
    };
    let sections = trace
        .transform
        .as_ref()
        .map(|t| t.sections.as_slice())
        .unwrap_or(&[]);
    let cfg = EngineConfig {
        arbiter,
        gates,
        sections,
        dynamic_locking: opts.dynamic_locking,
        probes: extras.probes.clone(),
        collect_log: extras.collect_log,
    };
    let sources = trace
        .threads
        .iter()
        .map(|(tid, events)| (*tid, Source::Fixed(events)))
        .collect();
    let out = Engine::new(sources, &trace.initial_memory, cfg)
        .run()
        .map_err(unsatisfiable)?;
    let result = ReplayResult {
        policy: opts.policy,
        seed: (opts.policy == ReplayPolicy::OrigS).then_some(opts.seed),
        makespan: makespan(&out),
        per_thread: per_thread(&out),
        timestamps: timestamps(trace, &out),
        section_order: section_order(trace, &out),
        final_memory: out.final_memory.clone(),
        realized_lock_order: out.realized.clone(),
        aux_acquisitions: out.aux_acquisitions,
    };
    let observed = Observed {
        probes: out.probes,
        log: out.log,
        mem_order: out.mem_order,
    };
    Ok((result, observed))
}

fn unsatisfiable(s: Stuck) -> Error {
    let cycle = s
        .cycle
        .iter()
        .map(|t| format!("T{t}"))
        .collect::<Vec<_>>()
        .join(" -> ");
    Error::OrderUnsatisfiable {
        detail: format!("blocked threads {cycle}: {}", s.detail),
    }
}

fn makespan(out: &Outcome) -> u64 {
    out.threads.iter().map(|t| t.completion).max().unwrap_or(0)
}

fn per_thread(out: &Outcome) -> BTreeMap<ThreadId, ThreadTimes> {
    out.threads
        .iter()
        .map(|t| {
            (
                t.tid,
                ThreadTimes {
                    completion: t.completion,
                    busy: t.busy,
                    wait: t.wait,
                },
            )
        })
        .collect()
}

/// Ordering constraints of a transformed trace: each causal-edge node
/// starts only after its predecessor in the same original lock ends.
fn partial_order_gates(trace: &Trace) -> Result<HashMap<EventRef, Vec<EventRef>>> {
    let mut gates: HashMap<EventRef, Vec<EventRef>> = HashMap::new();
    let Some(info) = &trace.transform else {
        return Ok(gates);
    };
    let meta: HashMap<CsId, _> = info.sections.iter().map(|s| (s.id, s)).collect();
    for (lock, chain) in &info.partial_orders {
        for pair in chain.windows(2) {
            let (Some(prev), Some(cur)) = (meta.get(&pair[0]), meta.get(&pair[1])) else {
                return Err(Error::invariant(
                    format!("partial order of {lock} names known sections"),
                    None,
                ));
            };
            gates
                .entry(EventRef {
                    tid: cur.id.tid,
                    seq: cur.begin,
                })
                .or_default()
                .push(EventRef {
                    tid: prev.id.tid,
                    seq: prev.end,
                });
        }
    }
    Ok(gates)
}

/// Per-lock order that cycles through thread ids in ascending order,
/// taking each thread's acquisitions in program order.
fn round_robin_orders(trace: &Trace) -> BTreeMap<LockId, Vec<EventRef>> {
    let mut queues: BTreeMap<LockId, BTreeMap<ThreadId, VecDeque<EventRef>>> = BTreeMap::new();
    for ev in trace.events() {
        if ev.kind == EventKind::LockAcq {
            queues
                .entry(ev.lock.clone().expect("validated"))
                .or_default()
                .entry(ev.tid)
                .or_default()
                .push_back(ev.at());
        }
    }
    queues
        .into_iter()
        .map(|(lock, mut per_thread)| {
            let mut order = Vec::new();
            while per_thread.values().any(|q| !q.is_empty()) {
                for q in per_thread.values_mut() {
                    if let Some(e) = q.pop_front() {
                        order.push(e);
                    }
                }
            }
            (lock, order)
        })
        .collect()
}

/// Segment boundaries per section: `pre` is where the previous section of
/// the thread ended (or 0); `post` is where the next one begins (or the
/// thread's completion).
fn timestamps(trace: &Trace, out: &Outcome) -> BTreeMap<String, u64> {
    let mut spans: BTreeMap<ThreadId, Vec<(CsId, u32, u32)>> = BTreeMap::new();
    for cs in extract_critical_sections(trace) {
        spans
            .entry(cs.tid)
            .or_default()
            .push((cs.id, cs.span.0, cs.span.1));
    }
    let runs: HashMap<ThreadId, &[u64]> = out
        .threads
        .iter()
        .map(|t| (t.tid, t.reach.as_slice()))
        .collect();
    let mut labels = BTreeMap::new();
    for (tid, list) in spans {
        let reach = runs[&tid];
        let completion = *reach.last().expect("reach starts at 0");
        for &(id, begin, end) in &list {
            let pre = list
                .iter()
                .filter(|s| s.2 <= begin)
                .map(|s| s.2)
                .max()
                .map_or(0, |p| reach[p as usize]);
            let post = list
                .iter()
                .filter(|s| s.1 >= end && s.0 != id)
                .map(|s| s.1)
                .min()
                .map_or(completion, |p| reach[p as usize]);
            labels.insert(pre_label(id), pre);
            labels.insert(post_label(id), post);
        }
    }
    labels
}

fn section_order(trace: &Trace, out: &Outcome) -> BTreeMap<LockId, Vec<CsId>> {
    let runs: HashMap<ThreadId, &[u64]> = out
        .threads
        .iter()
        .map(|t| (t.tid, t.reach.as_slice()))
        .collect();
    // ((entry instant, exit instant), section)
    type Entered = ((u64, u64), CsId);
    let mut entered: BTreeMap<LockId, Vec<Entered>> = BTreeMap::new();
    for cs in extract_critical_sections(trace) {
        let reach = runs[&cs.tid];
        let key = (reach[cs.span.0 as usize + 1], reach[cs.span.1 as usize]);
        entered.entry(cs.lock).or_default().push((key, cs.id));
    }
    entered
        .into_iter()
        .map(|(lock, mut v)| {
            v.sort();
            (lock, v.into_iter().map(|(_, id)| id).collect())
        })
        .collect()
}

/// Results of repeated replays with their makespan spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBatch {
    pub policy: ReplayPolicy,
    pub runs: Vec<ReplayResult>,
    pub makespans: Vec<u64>,
    pub mean: f64,
    /// Population variance of the makespans.
    pub variance: f64,
    pub distinct_makespans: Vec<u64>,
}

/// Replays `runs` times. `ORIG_S` uses seeds `seed, seed+1, ..`; the
/// other policies ignore the seed and must agree on every run.
pub fn replay_n(
    trace: &Trace,
    opts: &ReplayOptions,
    runs: usize,
    exec: Exec,
) -> Result<ReplayBatch> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..runs as u64)
        .map(|i| opts.seed.wrapping_add(i))
        .collect();
    let results = exec
        .map(&seeds, |&seed| {
            replay_with(trace, &ReplayOptions { seed, ..*opts })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let makespans: Vec<u64> = results.iter().map(|r| r.makespan).collect();
    let n = makespans.len() as f64;
    let mean = makespans.iter().map(|&m| m as f64).sum::<f64>() / n;
    let variance = makespans
        .iter()
        .map(|&m| (m as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let mut distinct = makespans.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(ReplayBatch {
        policy: opts.policy,
        runs: results,
        makespans,
        mean,
        variance,
        distinct_makespans: distinct,
    })
}
