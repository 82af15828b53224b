//! Classification of same-lock critical-section pairs.
//!
//! Shadow sets decide the three syntactic categories. Pairs that conflict
//! syntactically are re-executed in both orders from the memory state at
//! the first section's entry; identical results make them benign.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::Snapshot;
use crate::error::{Error, Result};
use crate::replay::{self, Extras, ReplayOptions, ReplayPolicy};
use crate::trace::{
    extract_critical_sections, Addr, CodeRegion, CriticalSection, CsId, EventKind, EventRef,
    LockId, Reg, Trace, TraceEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    NullLock,
    ReadRead,
    DisjointWrite,
    Benign,
    Tlcp,
    /// The trace carries no memory events, so nothing can be concluded.
    Unknown,
}

impl Category {
    pub fn is_ulcp(self) -> bool {
        matches!(
            self,
            Category::NullLock | Category::ReadRead | Category::DisjointWrite | Category::Benign
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("category serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

/// Shadow-set verdict. `None` means the sections conflict and need the
/// reversed re-execution to decide.
pub fn classify_pair(c1: &CriticalSection, c2: &CriticalSection) -> Option<Category> {
    if c1.is_empty() || c2.is_empty() {
        return Some(Category::NullLock);
    }
    if c1.s_wr.is_empty() && c2.s_wr.is_empty() {
        return Some(Category::ReadRead);
    }
    let disjoint = c1.s_rd.is_disjoint(&c2.s_wr)
        && c1.s_wr.is_disjoint(&c2.s_rd)
        && c1.s_wr.is_disjoint(&c2.s_wr);
    disjoint.then_some(Category::DisjointWrite)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BenignVerdict {
    Benign,
    Tlcp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UlcpPair {
    pub lock: LockId,
    pub c1: CsId,
    pub c2: CsId,
    pub category: Category,
    pub sites: (CodeRegion, CodeRegion),
    /// Set when the verdict is a conservative fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl UlcpPair {
    pub fn key(&self) -> String {
        format!("{}:{}~{}", self.lock, self.c1, self.c2)
    }
}

/// Entry state of one section for re-execution.
struct Entry<'t> {
    events: Vec<&'t TraceEvent>,
    regs: HashMap<Reg, i64>,
    /// Positions (within `events`) of reads whose value is observable.
    observable: Vec<usize>,
}

/// Classifies arbitrary same-lock pairs of one recorded trace, running the
/// snapshot replay at most once.
pub struct PairClassifier<'t> {
    trace: &'t Trace,
    sections: Vec<CriticalSection>,
    by_id: HashMap<CsId, usize>,
    snapshots: Option<HashMap<EventRef, Snapshot>>,
}

impl<'t> PairClassifier<'t> {
    pub fn new(trace: &'t Trace) -> Result<Self> {
        if trace.transform.is_some() {
            return Err(Error::InvalidArgument(
                "detection applies to recorded traces, not transformed ones".into(),
            ));
        }
        let sections = extract_critical_sections(trace);
        let by_id = sections
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();
        Ok(PairClassifier {
            trace,
            sections,
            by_id,
            snapshots: None,
        })
    }

    pub fn sections(&self) -> &[CriticalSection] {
        &self.sections
    }

    pub fn section(&self, id: CsId) -> &CriticalSection {
        &self.sections[self.by_id[&id]]
    }

    /// Full verdict for `c1` preceding `c2` on the same lock, with an
    /// optional warning when the verdict is a conservative fallback.
    pub fn classify(&mut self, c1: CsId, c2: CsId) -> Result<(Category, Option<String>)> {
        if !self.trace.has_memory_events() {
            return Ok((Category::Unknown, None));
        }
        let (a, b) = (self.section(c1), self.section(c2));
        if let Some(cat) = classify_pair(a, b) {
            return Ok((cat, None));
        }
        match self.benign(c1, c2) {
            Ok(BenignVerdict::Benign) => Ok((Category::Benign, None)),
            Ok(BenignVerdict::Tlcp) => Ok((Category::Tlcp, None)),
            Err(e @ Error::NotReexecutable(_)) => Ok((Category::Tlcp, Some(e.code().to_string()))),
            Err(e) => Err(e),
        }
    }

    /// Re-executes both orders of a syntactically conflicting pair.
    pub fn benign(&mut self, c1: CsId, c2: CsId) -> Result<BenignVerdict> {
        self.ensure_snapshots()?;
        let snaps = self.snapshots.as_ref().expect("filled");
        let first = self.entry(c1, snaps)?;
        let second = self.entry(c2, snaps)?;
        let a = &self.sections[self.by_id[&c1]];
        let memory = snaps[&EventRef {
            tid: a.tid,
            seq: a.acq_seq(),
        }]
            .memory
            .clone();
        let (mem_ab, reads_ab) = reexecute(&memory, [&first, &second]);
        let (mem_ba, reads_ba) = reexecute(&memory, [&second, &first]);
        let reads_ba = [reads_ba[1].clone(), reads_ba[0].clone()];
        let same = mem_ab == mem_ba && reads_ab == reads_ba;
        Ok(if same {
            BenignVerdict::Benign
        } else {
            BenignVerdict::Tlcp
        })
    }

    fn ensure_snapshots(&mut self) -> Result<()> {
        if self.snapshots.is_none() {
            let probes = self
                .sections
                .iter()
                .map(|c| EventRef {
                    tid: c.tid,
                    seq: c.acq_seq(),
                })
                .collect();
            let extras = Extras {
                probes,
                collect_log: false,
            };
            let opts = ReplayOptions::new(ReplayPolicy::ElscS);
            let (_, seen) = replay::run(self.trace, &opts, &extras)?;
            self.snapshots = Some(seen.probes);
        }
        Ok(())
    }

    fn entry(&self, id: CsId, snaps: &HashMap<EventRef, Snapshot>) -> Result<Entry<'t>> {
        let cs = &self.sections[self.by_id[&id]];
        let thread: &'t [TraceEvent] = &self.trace.threads[&cs.tid];
        let events: Vec<&'t TraceEvent> = thread[cs.span.0 as usize..cs.span.1 as usize]
            .iter()
            .filter(|e| e.kind.is_memory())
            .collect();
        if events
            .iter()
            .any(|e| e.kind == EventKind::Write && e.valexpr.is_none())
        {
            return Err(Error::NotReexecutable(id));
        }
        let observable = observable_reads(thread, cs.span, &events);
        let regs = snaps[&EventRef {
            tid: cs.tid,
            seq: cs.acq_seq(),
        }]
            .regs
            .clone();
        Ok(Entry {
            events,
            regs,
            observable,
        })
    }
}

/// A read is unobservable when its register feeds only writes inside the
/// same section and is dead after the section; every other read is
/// observable (it may have steered a branch or escaped the section).
fn observable_reads(thread: &[TraceEvent], span: (u32, u32), events: &[&TraceEvent]) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, ev) in events.iter().enumerate() {
        if ev.kind != EventKind::Read {
            continue;
        }
        let reg = ev.reg.as_deref().expect("validated");
        let mut used_inside = false;
        let mut escapes = false;
        for later in &thread[ev.seq as usize + 1..] {
            let inside = later.seq < span.1;
            if later.kind == EventKind::Write
                && later
                    .valexpr
                    .as_ref()
                    .is_some_and(|v| v.regs().any(|r| r == reg))
            {
                if inside {
                    used_inside = true;
                } else {
                    escapes = true;
                    break;
                }
            }
            if later.kind == EventKind::Read && later.reg.as_deref() == Some(reg) {
                break;
            }
        }
        if escapes || !used_inside {
            out.push(k);
        }
    }
    out
}

fn reexecute(
    memory: &BTreeMap<Addr, i64>,
    order: [&Entry; 2],
) -> (BTreeMap<Addr, i64>, [Vec<i64>; 2]) {
    let mut mem = memory.clone();
    let mut seen: [Vec<i64>; 2] = [Vec::new(), Vec::new()];
    for (slot, entry) in order.iter().enumerate() {
        let mut regs = entry.regs.clone();
        for (k, ev) in entry.events.iter().enumerate() {
            let addr = ev.addr.as_ref().expect("validated");
            match ev.kind {
                EventKind::Read => {
                    let v = mem.get(addr).copied().unwrap_or(0);
                    regs.insert(ev.reg.clone().expect("validated"), v);
                    if entry.observable.contains(&k) {
                        seen[slot].push(v);
                    }
                }
                EventKind::Write => {
                    let v = ev.valexpr.as_ref().expect("checked").eval(&regs);
                    mem.insert(addr.clone(), v);
                }
                _ => {}
            }
        }
    }
    (mem, seen)
}

/// Benign check for a single pair.
pub fn benign_check(trace: &Trace, c1: CsId, c2: CsId) -> Result<BenignVerdict> {
    PairClassifier::new(trace)?.benign(c1, c2)
}

/// Classifies every adjacent cross-thread pair of each lock's acquisition
/// order, ordered by `(lock, c1.acq_ord)`.
pub fn detect_all(trace: &Trace) -> Result<Vec<UlcpPair>> {
    let mut classifier = PairClassifier::new(trace)?;
    detect_with(&mut classifier)
}

pub(crate) fn detect_with(classifier: &mut PairClassifier) -> Result<Vec<UlcpPair>> {
    let adjacent: Vec<(CsId, CsId)> = classifier
        .sections()
        .windows(2)
        .filter(|w| w[0].lock == w[1].lock && w[0].tid != w[1].tid)
        .map(|w| (w[0].id, w[1].id))
        .collect();
    let mut out = Vec::with_capacity(adjacent.len());
    for (c1, c2) in adjacent {
        let (category, warning) = classifier.classify(c1, c2)?;
        let (a, b) = (classifier.section(c1), classifier.section(c2));
        out.push(UlcpPair {
            lock: a.lock.clone(),
            c1,
            c2,
            category,
            sites: (a.site, b.site),
            warning,
        });
    }
    Ok(out)
}

/// Histogram of categories.
pub fn category_counts(pairs: &[UlcpPair]) -> BTreeMap<Category, usize> {
    let mut counts = BTreeMap::new();
    for p in pairs {
        *counts.entry(p.category).or_insert(0) += 1;
    }
    counts
}
