//! Causal-order topology and the ULCP-free trace.
//!
//! Edges connect each section to the first later same-lock section of
//! every other thread that truly conflicts with it. Edge endpoints are
//! re-synchronized with auxiliary locks: a source owns a fresh lock, and
//! each section acquires its own lock plus its sources' locks. Two
//! sections exclude each other iff their locksets intersect.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use petgraph::algo::toposort;
use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};

use crate::detect::{Category, PairClassifier, UlcpPair};
use crate::engine::ExecLog;
use crate::error::{Error, Result};
use crate::replay::{self, Extras, ReplayOptions, ReplayPolicy};
use crate::trace::{
    extract_critical_sections, Addr, CsId, EventKind, EventRef, LockId, SectionMeta, ThreadId,
    Trace, TraceEvent, TransformInfo, AUX_LOCK_PREFIX,
};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: BTreeSet<CsId>,
    pub edges: BTreeSet<(CsId, CsId)>,
    pub partial_orders: BTreeMap<LockId, Vec<CsId>>,
    pub standalone: BTreeSet<CsId>,
}

impl Topology {
    pub fn sources_of(&self, node: CsId) -> impl Iterator<Item = CsId> + '_ {
        self.edges.iter().filter(move |e| e.1 == node).map(|e| e.0)
    }

    pub fn out_degree(&self, node: CsId) -> usize {
        self.edges.iter().filter(|e| e.0 == node).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocksetAssignment {
    pub out_lock: BTreeMap<CsId, LockId>,
    pub lockset: BTreeMap<CsId, Vec<LockId>>,
    pub end_flags: BTreeMap<CsId, String>,
}

/// Builds the causal edges. Verdicts for adjacent pairs come from `pairs`;
/// other pairs are classified on demand.
pub fn build_topology(trace: &Trace, pairs: &[UlcpPair]) -> Result<Topology> {
    let mut classifier = PairClassifier::new(trace)?;
    build_with(&mut classifier, pairs)
}

pub(crate) fn build_with(classifier: &mut PairClassifier, pairs: &[UlcpPair]) -> Result<Topology> {
    let known: HashMap<(CsId, CsId), Category> =
        pairs.iter().map(|p| ((p.c1, p.c2), p.category)).collect();
    let mut by_lock: BTreeMap<LockId, Vec<(u32, CsId)>> = BTreeMap::new();
    for cs in classifier.sections() {
        by_lock
            .entry(cs.lock.clone())
            .or_default()
            .push((cs.acq_ord, cs.id));
    }
    let mut topo = Topology::default();
    for list in by_lock.values_mut() {
        list.sort();
        for (i, &(_, cur)) in list.iter().enumerate() {
            topo.nodes.insert(cur);
            let mut matched: BTreeSet<ThreadId> = BTreeSet::new();
            for &(_, later) in &list[i + 1..] {
                if later.tid == cur.tid || matched.contains(&later.tid) {
                    continue;
                }
                let category = match known.get(&(cur, later)) {
                    Some(c) => *c,
                    None => classifier.classify(cur, later)?.0,
                };
                if !category.is_ulcp() {
                    topo.edges.insert((cur, later));
                    matched.insert(later.tid);
                }
            }
        }
    }
    let linked: BTreeSet<CsId> = topo.edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    topo.standalone = topo.nodes.difference(&linked).copied().collect();
    Ok(topo)
}

/// Lists each lock's edge endpoints in original acquisition order.
pub fn pin_partial_order(mut topo: Topology, trace: &Trace) -> Topology {
    let linked: BTreeSet<CsId> = topo.edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    topo.partial_orders.clear();
    for cs in extract_critical_sections(trace) {
        if linked.contains(&cs.id) {
            topo.partial_orders.entry(cs.lock).or_default().push(cs.id);
        }
    }
    topo
}

pub fn aux_lock_name(node: CsId) -> LockId {
    LockId::new(format!("{AUX_LOCK_PREFIX}{}.{}", node.tid, node.ord))
}

pub fn assign_locksets(topo: &Topology) -> LocksetAssignment {
    let mut a = LocksetAssignment::default();
    for &(src, _) in &topo.edges {
        a.out_lock.entry(src).or_insert_with(|| aux_lock_name(src));
        a.end_flags
            .entry(src)
            .or_insert_with(|| format!("{src}.END"));
    }
    for &node in &topo.nodes {
        let mut set: BTreeSet<LockId> = topo
            .sources_of(node)
            .map(|s| a.out_lock[&s].clone())
            .collect();
        if let Some(own) = a.out_lock.get(&node) {
            set.insert(own.clone());
        }
        a.lockset.insert(node, set.into_iter().collect());
    }
    a
}

/// Lockset of `meta` minus the out-locks of sources already finished.
pub fn dynamic_lockset<'m>(
    meta: &SectionMeta,
    sources: impl IntoIterator<Item = &'m SectionMeta>,
    finished: impl Fn(CsId) -> bool,
) -> Vec<LockId> {
    let mut set = meta.lockset.clone();
    for src in sources {
        if finished(src.id) {
            if let Some(out) = &src.out_lock {
                if Some(out) != meta.out_lock.as_ref() {
                    set.retain(|l| l != out);
                }
            }
        }
    }
    set
}

/// Rewrites lock events according to `assignment`. Sections with an empty
/// lockset lose their lock events; the others acquire their lockset in
/// sorted order and release it in reverse.
pub fn emit_ulcp_free_trace(
    trace: &Trace,
    topo: &Topology,
    assignment: &LocksetAssignment,
) -> Result<Trace> {
    if trace.transform.is_some() {
        return Err(Error::InvalidArgument(
            "trace is already transformed".into(),
        ));
    }
    check_constraints(trace, topo)?;
    let sections = extract_critical_sections(trace);
    let mut at_acq: HashMap<EventRef, usize> = HashMap::new();
    let mut at_rel: HashMap<EventRef, usize> = HashMap::new();
    for (i, cs) in sections.iter().enumerate() {
        at_acq.insert(
            EventRef {
                tid: cs.tid,
                seq: cs.acq_seq(),
            },
            i,
        );
        at_rel.insert(
            EventRef {
                tid: cs.tid,
                seq: cs.rel_seq(),
            },
            i,
        );
    }
    let empty = Vec::new();
    let lockset = |i: usize| assignment.lockset.get(&sections[i].id).unwrap_or(&empty);

    let mut threads: BTreeMap<ThreadId, Vec<TraceEvent>> = BTreeMap::new();
    let mut bounds: HashMap<usize, (u32, u32)> = HashMap::new();
    for (tid, events) in &trace.threads {
        let mut out: Vec<TraceEvent> = Vec::with_capacity(events.len());
        for ev in events {
            let at = ev.at();
            if let Some(&i) = at_acq.get(&at) {
                bounds.insert(i, (out.len() as u32, 0));
                let locks = lockset(i);
                for (k, l) in locks.iter().enumerate() {
                    let mut acq = TraceEvent::lock_acq(*tid, l.clone(), sections[i].site);
                    if k == 0 {
                        acq.cost = ev.cost;
                    }
                    out.push(acq);
                }
                if locks.is_empty() && ev.cost() > 0 {
                    out.push(TraceEvent::compute(*tid, ev.cost()));
                }
            } else if let Some(&i) = at_rel.get(&at) {
                let locks = lockset(i);
                for (k, l) in locks.iter().rev().enumerate() {
                    let mut rel = TraceEvent::lock_rel(*tid, l.clone());
                    if k + 1 == locks.len() {
                        rel.cost = ev.cost;
                    }
                    out.push(rel);
                }
                if locks.is_empty() && ev.cost() > 0 {
                    out.push(TraceEvent::compute(*tid, ev.cost()));
                }
                bounds.get_mut(&i).expect("acquire precedes release").1 = out.len() as u32;
            } else {
                out.push(ev.clone());
            }
        }
        for (seq, ev) in out.iter_mut().enumerate() {
            ev.tid = *tid;
            ev.seq = seq as u32;
        }
        threads.insert(*tid, out);
    }

    // Auxiliary acquisitions follow the original acquisition order.
    let mut aux_order: BTreeMap<LockId, Vec<(u32, CsId, usize)>> = BTreeMap::new();
    for (i, cs) in sections.iter().enumerate() {
        let (begin, _) = bounds[&i];
        for (k, l) in lockset(i).iter().enumerate() {
            aux_order
                .entry(l.clone())
                .or_default()
                .push((cs.acq_ord, cs.id, begin as usize + k));
        }
    }
    for list in aux_order.values_mut() {
        list.sort();
        for (ord, (_, id, pos)) in list.iter().enumerate() {
            threads.get_mut(&id.tid).expect("thread")[*pos].acq_ord = Some(ord as u32);
        }
    }

    let mut metas: Vec<SectionMeta> = sections
        .iter()
        .enumerate()
        .map(|(i, cs)| SectionMeta {
            id: cs.id,
            lock: cs.lock.clone(),
            acq_ord: cs.acq_ord,
            site: cs.site,
            begin: bounds[&i].0,
            end: bounds[&i].1,
            lockset: lockset(i).clone(),
            out_lock: assignment.out_lock.get(&cs.id).cloned(),
            sources: topo.sources_of(cs.id).collect(),
            end_flag: assignment.end_flags.get(&cs.id).cloned(),
        })
        .collect();
    metas.sort_by_key(|m| m.id);
    let mut out = Trace {
        version: trace.version,
        threads,
        lock_orders: BTreeMap::new(),
        aux_locks: BTreeSet::new(),
        initial_memory: trace.initial_memory.clone(),
        capabilities: trace.capabilities.clone(),
        transform: Some(TransformInfo {
            sections: metas,
            partial_orders: topo.partial_orders.clone(),
        }),
    };
    out.finish()?;
    Ok(out)
}

/// Program order, causal edges and partial orders must form a DAG.
fn check_constraints(trace: &Trace, topo: &Topology) -> Result<()> {
    let mut g: DiGraphMap<CsId, ()> = DiGraphMap::new();
    let mut per_thread: BTreeMap<ThreadId, Vec<(u32, CsId)>> = BTreeMap::new();
    for cs in extract_critical_sections(trace) {
        g.add_node(cs.id);
        per_thread
            .entry(cs.tid)
            .or_default()
            .push((cs.acq_seq(), cs.id));
    }
    for list in per_thread.values_mut() {
        list.sort();
        for w in list.windows(2) {
            g.add_edge(w[0].1, w[1].1, ());
        }
    }
    for &(a, b) in &topo.edges {
        g.add_edge(a, b, ());
    }
    for chain in topo.partial_orders.values() {
        for w in chain.windows(2) {
            g.add_edge(w[0], w[1], ());
        }
    }
    toposort(&g, None)
        .map(|_| ())
        .map_err(|c| Error::CyclicConstraint(format!("cycle through section {}", c.node_id())))
}

/// Runs detection and all transformation steps.
pub fn transform(
    trace: &Trace,
    pairs: &[UlcpPair],
) -> Result<(Trace, Topology, LocksetAssignment)> {
    let topo = pin_partial_order(build_topology(trace, pairs)?, trace);
    let assignment = assign_locksets(&topo);
    let free = emit_ulcp_free_trace(trace, &topo, &assignment)?;
    Ok((free, topo, assignment))
}

/// One side of a reported race.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Access {
    pub at: EventRef,
    pub write: bool,
    /// Enclosing section id, or `t<tid>.s<k>` for the k-th stretch of the
    /// thread outside any section.
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Race {
    pub addr: Addr,
    pub first: Access,
    pub second: Access,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RaceReport {
    pub memory_matches: bool,
    /// Addresses whose final values differ.
    pub diverged: Vec<Addr>,
    pub races: Vec<Race>,
}

impl RaceReport {
    pub fn is_empty(&self) -> bool {
        self.races.is_empty()
    }
}

/// Replays both traces under the recorded order and, when their final
/// memories differ, reports every pair of accesses to a common address
/// (at least one a write) left unordered by the transformed replay.
pub fn check_transform_races(original: &Trace, transformed: &Trace) -> Result<RaceReport> {
    let opts = ReplayOptions::new(ReplayPolicy::ElscS);
    let before = replay::replay_with(original, &opts)?;
    let extras = Extras {
        probes: Default::default(),
        collect_log: true,
    };
    let (after, seen) = replay::run(transformed, &opts, &extras)?;
    let addrs: BTreeSet<&Addr> = before
        .final_memory
        .keys()
        .chain(after.final_memory.keys())
        .collect();
    let diverged: Vec<Addr> = addrs
        .into_iter()
        .filter(|a| {
            before.final_memory.get(*a).copied().unwrap_or(0)
                != after.final_memory.get(*a).copied().unwrap_or(0)
        })
        .cloned()
        .collect();
    if diverged.is_empty() {
        return Ok(RaceReport {
            memory_matches: true,
            diverged,
            races: Vec::new(),
        });
    }
    let races = unordered_conflicts(transformed, seen.log.as_ref().expect("log requested"));
    Ok(RaceReport {
        memory_matches: false,
        diverged,
        races,
    })
}

fn regions(trace: &Trace) -> HashMap<EventRef, String> {
    let info = trace.transform.as_ref();
    let mut spans: BTreeMap<ThreadId, Vec<(u32, u32, CsId)>> = BTreeMap::new();
    if let Some(info) = info {
        for m in &info.sections {
            spans
                .entry(m.id.tid)
                .or_default()
                .push((m.begin, m.end, m.id));
        }
    } else {
        for cs in extract_critical_sections(trace) {
            spans
                .entry(cs.tid)
                .or_default()
                .push((cs.span.0, cs.span.1, cs.id));
        }
    }
    let mut out = HashMap::new();
    for (tid, events) in &trace.threads {
        let list = spans.remove(tid).unwrap_or_default();
        let mut segment = 0u32;
        let mut inside_prev = false;
        for ev in events {
            let seq = ev.seq;
            // Innermost section wins for nested spans.
            let owner = list
                .iter()
                .filter(|s| s.0 <= seq && seq < s.1)
                .min_by_key(|s| s.1 - s.0)
                .map(|s| s.2);
            let region = match owner {
                Some(id) => {
                    inside_prev = true;
                    id.to_string()
                }
                None => {
                    if inside_prev {
                        segment += 1;
                        inside_prev = false;
                    }
                    format!("t{tid}.s{segment}")
                }
            };
            out.insert(ev.at(), region);
        }
    }
    out
}

/// Vector-clock happens-before over the replay log.
fn unordered_conflicts(trace: &Trace, log: &ExecLog) -> Vec<Race> {
    let index: HashMap<ThreadId, usize> = trace
        .threads
        .keys()
        .enumerate()
        .map(|(i, t)| (*t, i))
        .collect();
    let n = index.len();
    let mut incoming: HashMap<EventRef, Vec<EventRef>> = HashMap::new();
    for &(from, to) in &log.sync {
        incoming.entry(to).or_default().push(from);
    }
    let mut thread_clock: Vec<Vec<u64>> = vec![vec![0; n]; n];
    let mut stamp: HashMap<EventRef, Vec<u64>> = HashMap::new();
    // (event, is_write, vector clock)
    type Stamped = (EventRef, bool, Vec<u64>);
    let mut accesses: BTreeMap<&Addr, Vec<Stamped>> = BTreeMap::new();
    for ex in &log.executed {
        let i = index[&ex.at.tid];
        let mut vc = thread_clock[i].clone();
        for from in incoming.get(&ex.at).into_iter().flatten() {
            if let Some(other) = stamp.get(from) {
                for (v, o) in vc.iter_mut().zip(other) {
                    *v = (*v).max(*o);
                }
            }
        }
        vc[i] += 1;
        thread_clock[i] = vc.clone();
        let ev = trace.event(ex.at).expect("logged event exists");
        if ev.kind.is_memory() {
            accesses
                .entry(ev.addr.as_ref().expect("validated"))
                .or_default()
                .push((ex.at, ev.kind == EventKind::Write, vc.clone()));
        }
        stamp.insert(ex.at, vc);
    }
    let before = |a: &[u64], b: &[u64]| a.iter().zip(b).all(|(x, y)| x <= y);
    let region = regions(trace);
    let mut races = BTreeSet::new();
    for (addr, list) in accesses {
        for (k, (a, aw, avc)) in list.iter().enumerate() {
            for (b, bw, bvc) in &list[k + 1..] {
                if a.tid == b.tid || !(*aw || *bw) {
                    continue;
                }
                if before(avc, bvc) || before(bvc, avc) {
                    continue;
                }
                let access = |at: &EventRef, write: bool| Access {
                    at: *at,
                    write,
                    region: region[at].clone(),
                };
                let (x, y) = if a <= b {
                    (access(a, *aw), access(b, *bw))
                } else {
                    (access(b, *bw), access(a, *aw))
                };
                races.insert(Race {
                    addr: addr.clone(),
                    first: x,
                    second: y,
                });
            }
        }
    }
    races.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::detect_all;
    use crate::replay::{record, replay_with};
    use crate::workload::parse_workload;

    fn recorded(src: &str) -> Trace {
        record(&parse_workload(src).unwrap(), 0).unwrap().0
    }

    fn full(src: &str) -> (Trace, Trace, Topology, LocksetAssignment) {
        let t = recorded(src);
        let pairs = detect_all(&t).unwrap();
        let (free, topo, a) = transform(&t, &pairs).unwrap();
        (t, free, topo, a)
    }

    #[test]
    fn all_ulcp_trace_has_no_edges() {
        let (_, free, topo, _) = full(
            "thread { lock L @1; read x -> r; unlock L } thread { lock L @2; read x -> r; unlock L }",
        );
        assert!(topo.edges.is_empty());
        assert_eq!(topo.standalone.len(), 2);
        assert!(topo.partial_orders.is_empty());
        assert_eq!(free.lock_acq_count(), 0);
    }

    #[test]
    fn two_writers_give_one_edge() {
        let (_, _, topo, a) = full(
            "thread { lock L @1; write x = 1; unlock L } thread { compute 1; lock L @2; write x = 2; unlock L }",
        );
        let edge = (CsId::new(0, 0), CsId::new(1, 0));
        assert_eq!(topo.edges, BTreeSet::from([edge]));
        assert_eq!(
            topo.partial_orders[&LockId::from("L")],
            vec![edge.0, edge.1]
        );
        assert_eq!(a.lockset[&edge.1], vec![a.out_lock[&edge.0].clone()]);
        assert_eq!(a.lockset[&edge.0], vec![a.out_lock[&edge.0].clone()]);
    }

    #[test]
    fn chain_locksets() {
        let (a, b, c) = (CsId::new(0, 0), CsId::new(1, 0), CsId::new(2, 0));
        let topo = Topology {
            nodes: [a, b, c].into(),
            edges: [(a, b), (b, c)].into(),
            ..Default::default()
        };
        let asg = assign_locksets(&topo);
        assert_eq!(asg.lockset[&c], vec![asg.out_lock[&b].clone()]);
        let mut expect = vec![asg.out_lock[&a].clone(), asg.out_lock[&b].clone()];
        expect.sort();
        assert_eq!(asg.lockset[&b], expect);
        assert!(!asg.out_lock.contains_key(&c));
    }

    #[test]
    fn dynamic_lockset_drops_finished_sources() {
        let meta = |id: CsId, out: Option<&str>, set: &[&str]| SectionMeta {
            id,
            lock: "L".into(),
            acq_ord: 0,
            site: crate::trace::CodeRegion::new(1, 1, 1),
            begin: 0,
            end: 0,
            lockset: set.iter().map(|s| LockId::from(*s)).collect(),
            out_lock: out.map(LockId::from),
            sources: vec![],
            end_flag: None,
        };
        let src = meta(CsId::new(0, 0), Some("@L0.0"), &["@L0.0"]);
        let node = meta(CsId::new(1, 0), Some("@L1.0"), &["@L0.0", "@L1.0"]);
        assert_eq!(
            dynamic_lockset(&node, [&src], |_| true),
            vec![LockId::from("@L1.0")]
        );
        assert_eq!(dynamic_lockset(&node, [&src], |_| false), node.lockset);
    }

    #[test]
    fn single_thread_transform_keeps_makespan() {
        let (t, free, _, _) =
            full("thread { lock L @1; write x = 1; compute 2; unlock L; compute 3 }");
        let opts = ReplayOptions::default();
        let a = replay_with(&t, &opts).unwrap();
        let b = replay_with(&free, &opts).unwrap();
        assert_eq!(a.makespan, b.makespan);
        assert_eq!(a.final_memory, b.final_memory);
        assert_eq!(free.lock_acq_count(), 0);
    }

    #[test]
    fn transformed_trace_round_trips() {
        let (_, free, _, _) = full(
            "thread { lock L @1; write x = 1; unlock L } thread { compute 1; lock L @2; write x = 2; unlock L }",
        );
        let text = crate::trace::serialize_trace(&free);
        assert_eq!(crate::trace::parse_trace(text.as_bytes()).unwrap(), free);
    }

    #[test]
    fn injected_conflict_is_reported() {
        let (t, free, _, _) = full(
            "thread { compute 1; lock L @1; compute 4; write x = 1; unlock L }
             thread { compute 2; lock L @2; read y -> r; unlock L; write x = 2 }",
        );
        let report = check_transform_races(&t, &free).unwrap();
        assert!(!report.memory_matches);
        assert!(report.races.iter().any(|r| r.addr == "x"));
    }

    #[test]
    fn identical_traces_report_nothing() {
        let t = recorded("thread { lock L @1; write x = 1; unlock L } thread { lock L @2; write x = 2; unlock L }");
        let pairs = detect_all(&t).unwrap();
        let (free, _, _) = transform(&t, &pairs).unwrap();
        let report = check_transform_races(&t, &free).unwrap();
        assert!(report.memory_matches && report.is_empty());
    }
}
