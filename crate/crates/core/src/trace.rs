//! Canonical trace representation and its line-delimited file format.
//!
//! A trace file is one JSON object per line. The first line is the header
//! (`{"v":1}` plus optional `mem`, `caps` and `transform` keys); every
//! following line is one [`TraceEvent`]. Fields that do not apply to an
//! event kind are omitted, as is `cost` when it equals the kind's default.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ThreadId = u32;
pub type Addr = String;
pub type Reg = String;

pub const FORMAT_VERSION: u32 = 1;
pub const AUX_LOCK_PREFIX: &str = "@L";

/// Capability flag carried by traces whose producer could not observe
/// memory accesses (the native interposition shim).
pub const CAP_NO_MEMORY_EVENTS: &str = "no_memory_events";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LockId(pub String);

impl LockId {
    pub fn new(name: impl Into<String>) -> Self {
        LockId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_aux(&self) -> bool {
        self.0.starts_with(AUX_LOCK_PREFIX)
    }
}

impl fmt::Display for LockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LockId {
    fn from(s: &str) -> Self {
        LockId(s.to_string())
    }
}

/// Position of one event: thread plus per-thread sequence index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(ThreadId, u32)", into = "(ThreadId, u32)")]
pub struct EventRef {
    pub tid: ThreadId,
    pub seq: u32,
}

impl From<(ThreadId, u32)> for EventRef {
    fn from((tid, seq): (ThreadId, u32)) -> Self {
        EventRef { tid, seq }
    }
}

impl From<EventRef> for (ThreadId, u32) {
    fn from(e: EventRef) -> Self {
        (e.tid, e.seq)
    }
}

impl fmt::Display for EventRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}#{}", self.tid, self.seq)
    }
}

/// Critical-section identity: owning thread plus the ordinal of its
/// acquisition among that thread's acquisitions. Stable across the
/// ULCP-free transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CsId {
    pub tid: ThreadId,
    pub ord: u32,
}

impl CsId {
    pub fn new(tid: ThreadId, ord: u32) -> Self {
        CsId { tid, ord }
    }
}

impl fmt::Display for CsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}.c{}", self.tid, self.ord)
    }
}

impl FromStr for CsId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("bad section id `{s}`");
        let rest = s.strip_prefix('t').ok_or_else(bad)?;
        let (tid, ord) = rest.split_once(".c").ok_or_else(bad)?;
        Ok(CsId {
            tid: tid.parse().map_err(|_| bad())?,
            ord: ord.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for CsId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CsId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    ThreadStart,
    ThreadEnd,
    LockAcq,
    LockRel,
    Read,
    Write,
    Compute,
    Marker,
}

impl EventKind {
    pub fn default_cost(self) -> u64 {
        match self {
            EventKind::Read | EventKind::Write => 1,
            _ => 0,
        }
    }

    pub fn is_memory(self) -> bool {
        matches!(self, EventKind::Read | EventKind::Write)
    }
}

/// Code region: a source "file" id plus an inclusive line interval.
/// Overlap is the meet used by fusion, the interval hull is the join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeRegion {
    pub id: u32,
    pub span: (u32, u32),
}

impl CodeRegion {
    pub fn new(id: u32, lo: u32, hi: u32) -> Self {
        CodeRegion {
            id,
            span: (lo.min(hi), lo.max(hi)),
        }
    }

    pub fn lo(&self) -> u32 {
        self.span.0
    }

    pub fn hi(&self) -> u32 {
        self.span.1
    }

    pub fn overlaps(&self, other: &CodeRegion) -> bool {
        self.id == other.id && self.lo() <= other.hi() && other.lo() <= self.hi()
    }

    pub fn hull(&self, other: &CodeRegion) -> CodeRegion {
        CodeRegion {
            id: self.id.min(other.id),
            span: (self.lo().min(other.lo()), self.hi().max(other.hi())),
        }
    }
}

impl fmt::Display for CodeRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}:{}-{}", self.id, self.lo(), self.hi())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Copy,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Const(i64),
    Reg(Reg),
}

impl Operand {
    pub fn eval(&self, regs: &HashMap<Reg, i64>) -> i64 {
        match self {
            Operand::Const(k) => *k,
            Operand::Reg(r) => regs.get(r).copied().unwrap_or(0),
        }
    }

    pub fn reg(&self) -> Option<&str> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Const(_) => None,
        }
    }
}

/// Re-executable value of a WRITE.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ValExprRepr", into = "ValExprRepr")]
pub enum ValExpr {
    Const(i64),
    Op { op: BinOp, a: Operand, b: Operand },
}

impl ValExpr {
    pub fn copy(a: Operand) -> Self {
        ValExpr::Op {
            op: BinOp::Copy,
            a,
            b: Operand::Const(0),
        }
    }

    pub fn eval(&self, regs: &HashMap<Reg, i64>) -> i64 {
        match self {
            ValExpr::Const(k) => *k,
            ValExpr::Op { op, a, b } => {
                let a = a.eval(regs);
                match op {
                    BinOp::Add => a.wrapping_add(b.eval(regs)),
                    BinOp::Sub => a.wrapping_sub(b.eval(regs)),
                    BinOp::Copy => a,
                }
            }
        }
    }

    /// Registers read by this expression.
    pub fn regs(&self) -> impl Iterator<Item = &str> {
        let (a, b) = match self {
            ValExpr::Const(_) => (None, None),
            ValExpr::Op { op, a, b } => (a.reg(), if *op == BinOp::Copy { None } else { b.reg() }),
        };
        a.into_iter().chain(b)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValExprRepr {
    #[serde(rename = "const", default, skip_serializing_if = "Option::is_none")]
    konst: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    op: Option<BinOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Operand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Operand>,
}

impl TryFrom<ValExprRepr> for ValExpr {
    type Error = String;

    fn try_from(r: ValExprRepr) -> std::result::Result<Self, String> {
        match (r.konst, r.op, r.a, r.b) {
            (Some(k), None, None, None) => Ok(ValExpr::Const(k)),
            (None, Some(BinOp::Copy), Some(a), None) => Ok(ValExpr::copy(a)),
            (None, Some(op @ (BinOp::Add | BinOp::Sub)), Some(a), Some(b)) => {
                Ok(ValExpr::Op { op, a, b })
            }
            _ => Err("valexpr must be {\"const\":k}, {\"op\":\"copy\",\"a\":..} or {\"op\":\"add|sub\",\"a\":..,\"b\":..}".into()),
        }
    }
}

impl From<ValExpr> for ValExprRepr {
    fn from(v: ValExpr) -> Self {
        match v {
            ValExpr::Const(k) => ValExprRepr {
                konst: Some(k),
                op: None,
                a: None,
                b: None,
            },
            ValExpr::Op { op, a, b } => ValExprRepr {
                konst: None,
                op: Some(op),
                a: Some(a),
                b: if op == BinOp::Copy { None } else { Some(b) },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub tid: ThreadId,
    pub seq: u32,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock: Option<LockId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acq_ord: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<CodeRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<Reg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valexpr: Option<ValExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<u64>,
    /// Marker name; present iff `kind == MARKER`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<String>,
}

impl TraceEvent {
    fn bare(tid: ThreadId, kind: EventKind) -> Self {
        TraceEvent {
            tid,
            seq: 0,
            kind,
            lock: None,
            acq_ord: None,
            site: None,
            addr: None,
            reg: None,
            valexpr: None,
            cost: None,
            marker: None,
        }
    }

    pub fn thread_start(tid: ThreadId) -> Self {
        Self::bare(tid, EventKind::ThreadStart)
    }

    pub fn thread_end(tid: ThreadId) -> Self {
        Self::bare(tid, EventKind::ThreadEnd)
    }

    pub fn lock_acq(tid: ThreadId, lock: LockId, site: CodeRegion) -> Self {
        TraceEvent {
            lock: Some(lock),
            site: Some(site),
            acq_ord: Some(0),
            ..Self::bare(tid, EventKind::LockAcq)
        }
    }

    pub fn lock_rel(tid: ThreadId, lock: LockId) -> Self {
        TraceEvent {
            lock: Some(lock),
            ..Self::bare(tid, EventKind::LockRel)
        }
    }

    pub fn read(tid: ThreadId, addr: impl Into<Addr>, reg: impl Into<Reg>) -> Self {
        TraceEvent {
            addr: Some(addr.into()),
            reg: Some(reg.into()),
            ..Self::bare(tid, EventKind::Read)
        }
    }

    pub fn write(tid: ThreadId, addr: impl Into<Addr>, val: ValExpr) -> Self {
        TraceEvent {
            addr: Some(addr.into()),
            valexpr: Some(val),
            ..Self::bare(tid, EventKind::Write)
        }
    }

    pub fn compute(tid: ThreadId, cost: u64) -> Self {
        TraceEvent {
            cost: Some(cost),
            ..Self::bare(tid, EventKind::Compute)
        }
    }

    pub fn marker(tid: ThreadId, name: impl Into<String>) -> Self {
        TraceEvent {
            marker: Some(name.into()),
            ..Self::bare(tid, EventKind::Marker)
        }
    }

    pub fn with_cost(mut self, cost: u64) -> Self {
        self.cost = Some(cost);
        self
    }

    /// Effective duration in virtual-time units.
    pub fn cost(&self) -> u64 {
        self.cost.unwrap_or_else(|| self.kind.default_cost())
    }

    pub fn at(&self) -> EventRef {
        EventRef {
            tid: self.tid,
            seq: self.seq,
        }
    }

    /// Drops an explicit cost that equals the default so serialization is canonical.
    fn canonicalize(&mut self) {
        if self.kind != EventKind::Compute && self.cost == Some(self.kind.default_cost()) {
            self.cost = None;
        }
    }
}

/// Per-section bookkeeping carried by ULCP-free traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionMeta {
    pub id: CsId,
    /// The original lock this section was guarded by.
    pub lock: LockId,
    pub acq_ord: u32,
    pub site: CodeRegion,
    /// Half-open event range `[begin, end)` in the transformed thread.
    pub begin: u32,
    pub end: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lockset: Vec<LockId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_lock: Option<LockId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<CsId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformInfo {
    pub sections: Vec<SectionMeta>,
    /// Per original lock: causal-edge sections in the order they must complete.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub partial_orders: BTreeMap<LockId, Vec<CsId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub version: u32,
    pub threads: BTreeMap<ThreadId, Vec<TraceEvent>>,
    /// Per lock, acquisitions in recorded order. Derived from `acq_ord`.
    pub lock_orders: BTreeMap<LockId, Vec<EventRef>>,
    pub aux_locks: BTreeSet<LockId>,
    pub initial_memory: BTreeMap<Addr, i64>,
    pub capabilities: BTreeSet<String>,
    pub transform: Option<TransformInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    v: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    mem: BTreeMap<Addr, i64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    caps: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transform: Option<TransformInfo>,
}

impl Trace {
    /// Builds a trace from per-thread event lists, renumbering `seq`
    /// contiguously, canonicalizing costs, and deriving `lock_orders`.
    /// `acq_ord` values on the events are kept and then validated.
    pub fn from_threads(
        threads: BTreeMap<ThreadId, Vec<TraceEvent>>,
        initial_memory: BTreeMap<Addr, i64>,
    ) -> Result<Trace> {
        let mut trace = Trace {
            version: FORMAT_VERSION,
            threads,
            lock_orders: BTreeMap::new(),
            aux_locks: BTreeSet::new(),
            initial_memory,
            capabilities: BTreeSet::new(),
            transform: None,
        };
        for (tid, events) in trace.threads.iter_mut() {
            for (i, ev) in events.iter_mut().enumerate() {
                ev.tid = *tid;
                ev.seq = i as u32;
                ev.canonicalize();
            }
        }
        trace.finish()?;
        Ok(trace)
    }

    /// Recomputes derived fields and validates every invariant.
    pub(crate) fn finish(&mut self) -> Result<()> {
        self.aux_locks = match &self.transform {
            Some(info) => info
                .sections
                .iter()
                .flat_map(|s| s.lockset.iter().cloned())
                .collect(),
            None => BTreeSet::new(),
        };
        self.lock_orders = derive_lock_orders(self)?;
        validate(self)
    }

    pub fn empty() -> Trace {
        Trace {
            version: FORMAT_VERSION,
            threads: BTreeMap::new(),
            lock_orders: BTreeMap::new(),
            aux_locks: BTreeSet::new(),
            initial_memory: BTreeMap::new(),
            capabilities: BTreeSet::new(),
            transform: None,
        }
    }

    pub fn event(&self, at: EventRef) -> Option<&TraceEvent> {
        self.threads.get(&at.tid)?.get(at.seq as usize)
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn event_count(&self) -> usize {
        self.threads.values().map(Vec::len).sum()
    }

    pub fn lock_acq_count(&self) -> usize {
        self.events()
            .filter(|e| e.kind == EventKind::LockAcq)
            .count()
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.threads.values().flatten()
    }

    /// Locks that appear in the trace and are not auxiliary.
    pub fn original_locks(&self) -> BTreeSet<LockId> {
        let mut locks: BTreeSet<LockId> = self
            .events()
            .filter_map(|e| e.lock.clone())
            .filter(|l| !self.aux_locks.contains(l))
            .collect();
        if let Some(info) = &self.transform {
            locks.extend(info.sections.iter().map(|s| s.lock.clone()));
        }
        locks
    }

    pub fn has_memory_events(&self) -> bool {
        !self.capabilities.contains(CAP_NO_MEMORY_EVENTS)
    }
}

fn derive_lock_orders(trace: &Trace) -> Result<BTreeMap<LockId, Vec<EventRef>>> {
    let mut by_lock: BTreeMap<LockId, Vec<(u32, EventRef)>> = BTreeMap::new();
    for ev in trace.events() {
        if ev.kind == EventKind::LockAcq {
            let (Some(lock), Some(ord)) = (&ev.lock, ev.acq_ord) else {
                return Err(Error::invariant(
                    "LOCK_ACQ carries lock and acq_ord",
                    Some(ev.at()),
                ));
            };
            by_lock
                .entry(lock.clone())
                .or_default()
                .push((ord, ev.at()));
        }
    }
    let mut orders = BTreeMap::new();
    for (lock, mut acqs) in by_lock {
        acqs.sort();
        for (i, (ord, at)) in acqs.iter().enumerate() {
            if *ord != i as u32 {
                return Err(Error::invariant(
                    format!("acq_ord of lock {lock} is exactly 0..n-1"),
                    Some(*at),
                ));
            }
        }
        orders.insert(lock, acqs.into_iter().map(|(_, at)| at).collect());
    }
    Ok(orders)
}

fn validate(trace: &Trace) -> Result<()> {
    if trace.version != FORMAT_VERSION {
        return Err(Error::invariant(
            format!("format version is {FORMAT_VERSION}"),
            None,
        ));
    }
    if trace.transform.is_none() {
        if let Some(ev) = trace
            .events()
            .find(|e| e.lock.as_ref().is_some_and(LockId::is_aux))
        {
            return Err(Error::invariant(
                "auxiliary locks only appear in transformed traces",
                Some(ev.at()),
            ));
        }
    }
    for (tid, events) in &trace.threads {
        let mut held: Vec<&LockId> = Vec::new();
        let mut last_ord: HashMap<&LockId, u32> = HashMap::new();
        for (i, ev) in events.iter().enumerate() {
            let at = EventRef {
                tid: *tid,
                seq: i as u32,
            };
            if ev.tid != *tid || ev.seq != i as u32 {
                return Err(Error::invariant(
                    "seq contiguous from 0 per thread",
                    Some(at),
                ));
            }
            check_fields(ev)?;
            match ev.kind {
                EventKind::LockAcq => {
                    let lock = ev.lock.as_ref().expect("checked");
                    if held.contains(&lock) {
                        return Err(Error::invariant(
                            format!("lock {lock} is not re-acquired while held"),
                            Some(at),
                        ));
                    }
                    let ord = ev.acq_ord.expect("checked");
                    if let Some(prev) = last_ord.insert(lock, ord) {
                        if prev >= ord {
                            return Err(Error::invariant(
                                format!("acq_ord of {lock} increases along each thread"),
                                Some(at),
                            ));
                        }
                    }
                    held.push(lock);
                }
                EventKind::LockRel => {
                    let lock = ev.lock.as_ref().expect("checked");
                    if held.last() != Some(&lock) {
                        return Err(Error::invariant(
                            format!("LOCK_REL {lock} matches the innermost held lock"),
                            Some(at),
                        ));
                    }
                    held.pop();
                }
                _ => {}
            }
        }
        if let Some(lock) = held.last() {
            return Err(Error::invariant(
                format!("lock {lock} is released before thread end"),
                Some(EventRef {
                    tid: *tid,
                    seq: events.len() as u32,
                }),
            ));
        }
    }
    let originals = trace.original_locks();
    if let Some(l) = trace
        .aux_locks
        .iter()
        .find(|l| originals.contains(*l) || !l.is_aux())
    {
        return Err(Error::invariant(
            format!("auxiliary lock {l} is prefixed and disjoint from original locks"),
            None,
        ));
    }
    if let Some(info) = &trace.transform {
        for s in &info.sections {
            let len = trace.threads.get(&s.id.tid).map_or(0, Vec::len) as u32;
            if s.begin > s.end || s.end > len {
                return Err(Error::invariant(
                    format!("section {} range lies inside its thread", s.id),
                    None,
                ));
            }
        }
    }
    Ok(())
}

fn check_fields(ev: &TraceEvent) -> Result<()> {
    let at = Some(ev.at());
    let is_lock = matches!(ev.kind, EventKind::LockAcq | EventKind::LockRel);
    let rules: [(&str, bool, bool); 7] = [
        (
            "lock present iff LOCK_ACQ/LOCK_REL",
            ev.lock.is_some(),
            is_lock,
        ),
        (
            "acq_ord present iff LOCK_ACQ",
            ev.acq_ord.is_some(),
            ev.kind == EventKind::LockAcq,
        ),
        (
            "site present iff LOCK_ACQ",
            ev.site.is_some(),
            ev.kind == EventKind::LockAcq,
        ),
        (
            "addr present iff READ/WRITE",
            ev.addr.is_some(),
            ev.kind.is_memory(),
        ),
        (
            "reg present iff READ",
            ev.reg.is_some(),
            ev.kind == EventKind::Read,
        ),
        (
            "marker present iff MARKER",
            ev.marker.is_some(),
            ev.kind == EventKind::Marker,
        ),
        (
            "cost present for COMPUTE",
            ev.cost.is_some() || ev.kind != EventKind::Compute,
            true,
        ),
    ];
    for (rule, present, expected) in rules {
        if present != expected {
            return Err(Error::invariant(rule, at));
        }
    }
    if ev.valexpr.is_some() && ev.kind != EventKind::Write {
        return Err(Error::invariant("valexpr only on WRITE", at));
    }
    Ok(())
}

/// Parses the line-delimited trace format and validates the result.
pub fn parse_trace(input: &[u8]) -> Result<Trace> {
    let text = std::str::from_utf8(input).map_err(|e| Error::MalformedRecord {
        line: 1,
        reason: format!("not utf-8: {e}"),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, htext)) = lines.next() else {
        return Err(Error::MalformedRecord {
            line: 1,
            reason: "missing header record".into(),
        });
    };
    let header: Header = serde_json::from_str(htext).map_err(|e| Error::MalformedRecord {
        line: hline,
        reason: format!("header: {e}"),
    })?;
    if header.v != FORMAT_VERSION {
        return Err(Error::MalformedRecord {
            line: hline,
            reason: format!("unsupported version {}", header.v),
        });
    }
    let mut threads: BTreeMap<ThreadId, Vec<TraceEvent>> = BTreeMap::new();
    for (line, text) in lines {
        let ev: TraceEvent = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
            line,
            reason: e.to_string(),
        })?;
        let list = threads.entry(ev.tid).or_default();
        if ev.seq as usize != list.len() {
            return Err(Error::MalformedRecord {
                line,
                reason: format!(
                    "thread {} expects seq {} but found {}",
                    ev.tid,
                    list.len(),
                    ev.seq
                ),
            });
        }
        list.push(ev);
    }
    for ev in threads.values_mut().flatten() {
        ev.canonicalize();
    }
    let mut trace = Trace {
        version: header.v,
        threads,
        lock_orders: BTreeMap::new(),
        aux_locks: BTreeSet::new(),
        initial_memory: header.mem,
        capabilities: header.caps,
        transform: header.transform,
    };
    trace.finish()?;
    Ok(trace)
}

/// Canonical serialization: header, then each thread's events in tid order.
pub fn serialize_trace(trace: &Trace) -> String {
    let header = Header {
        v: trace.version,
        mem: trace.initial_memory.clone(),
        caps: trace.capabilities.clone(),
        transform: trace.transform.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for ev in trace.events() {
        let mut ev = ev.clone();
        ev.canonicalize();
        out.push_str(&serde_json::to_string(&ev).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// A lock/unlock span with its shadow read and write sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CriticalSection {
    pub id: CsId,
    pub tid: ThreadId,
    /// Guarding lock. For transformed traces, the original lock.
    pub lock: LockId,
    /// Auxiliary lockset in transformed traces; `[lock]` otherwise.
    pub lockset: Vec<LockId>,
    /// Half-open event range: LOCK_ACQ seq up to one past LOCK_REL seq.
    pub span: (u32, u32),
    pub s_rd: BTreeSet<Addr>,
    pub s_wr: BTreeSet<Addr>,
    pub site: CodeRegion,
    pub acq_ord: u32,
}

impl CriticalSection {
    pub fn acq_seq(&self) -> u32 {
        self.span.0
    }

    pub fn rel_seq(&self) -> u32 {
        self.span.1.saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.s_rd.is_empty() && self.s_wr.is_empty()
    }

    /// Events enclosed by the span (including the lock events themselves).
    pub fn events<'t>(&self, trace: &'t Trace) -> &'t [TraceEvent] {
        let events = &trace.threads[&self.tid];
        &events[self.span.0 as usize..self.span.1 as usize]
    }
}

/// One section per LOCK_ACQ/LOCK_REL pair, ordered by `(lock, acq_ord)`.
/// Accesses inside nested sections count toward every enclosing section.
pub fn extract_critical_sections(trace: &Trace) -> Vec<CriticalSection> {
    let mut out = Vec::new();
    if let Some(info) = &trace.transform {
        for meta in &info.sections {
            let events = &trace.threads[&meta.id.tid][meta.begin as usize..meta.end as usize];
            let (s_rd, s_wr) = shadow_sets(events);
            out.push(CriticalSection {
                id: meta.id,
                tid: meta.id.tid,
                lock: meta.lock.clone(),
                lockset: meta.lockset.clone(),
                span: (meta.begin, meta.end),
                s_rd,
                s_wr,
                site: meta.site,
                acq_ord: meta.acq_ord,
            });
        }
    } else {
        struct Open<'a> {
            lock: &'a LockId,
            acq: u32,
            ord: u32,
            acq_ord: u32,
            site: CodeRegion,
            s_rd: BTreeSet<Addr>,
            s_wr: BTreeSet<Addr>,
        }
        for (tid, events) in &trace.threads {
            let mut stack: Vec<Open> = Vec::new();
            let mut next_ord = 0;
            for ev in events {
                match ev.kind {
                    EventKind::LockAcq => {
                        stack.push(Open {
                            lock: ev.lock.as_ref().expect("validated"),
                            acq: ev.seq,
                            ord: next_ord,
                            acq_ord: ev.acq_ord.expect("validated"),
                            site: ev.site.expect("validated"),
                            s_rd: BTreeSet::new(),
                            s_wr: BTreeSet::new(),
                        });
                        next_ord += 1;
                    }
                    EventKind::LockRel => {
                        let open = stack.pop().expect("validated nesting");
                        out.push(CriticalSection {
                            id: CsId::new(*tid, open.ord),
                            tid: *tid,
                            lock: open.lock.clone(),
                            lockset: vec![open.lock.clone()],
                            span: (open.acq, ev.seq + 1),
                            s_rd: open.s_rd,
                            s_wr: open.s_wr,
                            site: open.site,
                            acq_ord: open.acq_ord,
                        });
                    }
                    EventKind::Read | EventKind::Write => {
                        let addr = ev.addr.as_ref().expect("validated");
                        for open in &mut stack {
                            if ev.kind == EventKind::Read {
                                open.s_rd.insert(addr.clone());
                            } else {
                                open.s_wr.insert(addr.clone());
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    out.sort_by(|a, b| (&a.lock, a.acq_ord, a.id).cmp(&(&b.lock, b.acq_ord, b.id)));
    out
}

fn shadow_sets(events: &[TraceEvent]) -> (BTreeSet<Addr>, BTreeSet<Addr>) {
    let mut rd = BTreeSet::new();
    let mut wr = BTreeSet::new();
    for ev in events {
        match ev.kind {
            EventKind::Read => {
                rd.insert(ev.addr.clone().expect("validated"));
            }
            EventKind::Write => {
                wr.insert(ev.addr.clone().expect("validated"));
            }
            _ => {}
        }
    }
    (rd, wr)
}

/// Sub-trace between two markers (inclusive), with `seq` and `acq_ord`
/// renumbered. Threads containing neither marker are dropped.
pub fn slice_trace(trace: &Trace, from_marker: &str, to_marker: &str) -> Result<Trace> {
    if trace.transform.is_some() {
        return Err(Error::InvalidArgument(
            "slicing applies to recorded traces only".into(),
        ));
    }
    let find = |events: &[TraceEvent], name: &str, start: usize| {
        events[start..]
            .iter()
            .position(|e| e.kind == EventKind::Marker && e.marker.as_deref() == Some(name))
            .map(|i| i + start)
    };
    let mut threads = BTreeMap::new();
    for (tid, events) in &trace.threads {
        let from = find(events, from_marker, 0);
        let Some(from) = from else {
            if find(events, to_marker, 0).is_some() {
                return Err(Error::MarkerNotFound(format!(
                    "{from_marker} in thread {tid}"
                )));
            }
            continue;
        };
        let to = find(events, to_marker, from + 1)
            .ok_or_else(|| Error::MarkerNotFound(format!("{to_marker} in thread {tid}")))?;
        let mut held: Vec<&LockId> = Vec::new();
        for ev in &events[..from] {
            match ev.kind {
                EventKind::LockAcq => held.push(ev.lock.as_ref().expect("validated")),
                EventKind::LockRel => {
                    held.pop();
                }
                _ => {}
            }
        }
        if let Some(lock) = held.last() {
            return Err(Error::UnbalancedSlice {
                tid: *tid,
                lock: lock.to_string(),
            });
        }
        let kept: Vec<TraceEvent> = events[from..=to].to_vec();
        for ev in &kept {
            match ev.kind {
                EventKind::LockAcq => held.push(ev.lock.as_ref().expect("validated")),
                EventKind::LockRel => {
                    held.pop();
                }
                _ => {}
            }
        }
        if let Some(lock) = held.last() {
            return Err(Error::UnbalancedSlice {
                tid: *tid,
                lock: lock.to_string(),
            });
        }
        threads.insert(*tid, kept);
    }
    if threads.is_empty() {
        return Err(Error::MarkerNotFound(from_marker.to_string()));
    }
    // Renumber acquisition ordinals by their relative recorded order.
    let mut by_lock: BTreeMap<LockId, Vec<(u32, ThreadId, usize)>> = BTreeMap::new();
    for (tid, events) in &threads {
        for (i, ev) in events.iter().enumerate() {
            if ev.kind == EventKind::LockAcq {
                by_lock
                    .entry(ev.lock.clone().expect("validated"))
                    .or_default()
                    .push((ev.acq_ord.expect("validated"), *tid, i));
            }
        }
    }
    for acqs in by_lock.values_mut() {
        acqs.sort();
        for (new_ord, (_, tid, i)) in acqs.iter().enumerate() {
            threads.get_mut(tid).expect("present")[*i].acq_ord = Some(new_ord as u32);
        }
    }
    let mut out = Trace::from_threads(threads, trace.initial_memory.clone())?;
    out.capabilities = trace.capabilities.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(line: u32) -> CodeRegion {
        CodeRegion::new(1, line, line)
    }

    fn two_thread_trace() -> Trace {
        let mut t0 = vec![
            TraceEvent::lock_acq(0, "L".into(), site(1)),
            TraceEvent::lock_rel(0, "L".into()),
        ];
        let mut t1 = t0.clone();
        t0[0].acq_ord = Some(0);
        t1[0].acq_ord = Some(1);
        Trace::from_threads(BTreeMap::from([(0, t0), (1, t1)]), BTreeMap::new()).unwrap()
    }

    #[test]
    fn empty_trace_parses() {
        let t = parse_trace(b"{\"v\":1}\n").unwrap();
        assert_eq!(t.thread_count(), 0);
        assert!(t.lock_orders.is_empty());
    }

    #[test]
    fn null_lock_skeleton_has_empty_sets() {
        let text = "{\"v\":1}\n{\"tid\":0,\"seq\":0,\"kind\":\"LOCK_ACQ\",\"lock\":\"L\",\"acq_ord\":0,\"site\":{\"id\":1,\"span\":[1,2]}}\n{\"tid\":0,\"seq\":1,\"kind\":\"LOCK_REL\",\"lock\":\"L\"}\n";
        let t = parse_trace(text.as_bytes()).unwrap();
        let cs = extract_critical_sections(&t);
        assert_eq!(cs.len(), 1);
        assert!(cs[0].is_empty());
        assert_eq!(serialize_trace(&t), text);
    }

    #[test]
    fn lock_orders_follow_acq_ord() {
        let text = serialize_trace(&two_thread_trace());
        let t = parse_trace(text.as_bytes()).unwrap();
        let order = &t.lock_orders[&LockId::from("L")];
        assert_eq!(
            order,
            &vec![EventRef { tid: 0, seq: 0 }, EventRef { tid: 1, seq: 0 }]
        );
    }

    #[test]
    fn unknown_field_rejected() {
        let text = "{\"v\":1}\n{\"tid\":0,\"seq\":0,\"kind\":\"COMPUTE\",\"cost\":3,\"bogus\":1}\n";
        match parse_trace(text.as_bytes()) {
            Err(Error::MalformedRecord { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_acq_ord_is_invariant_violation() {
        let mut t = two_thread_trace();
        t.threads.get_mut(&1).unwrap()[0].acq_ord = Some(0);
        let text = serialize_trace(&t);
        assert_eq!(
            parse_trace(text.as_bytes()).unwrap_err().code(),
            "INVARIANT_VIOLATION"
        );
    }

    #[test]
    fn unbalanced_release_rejected() {
        let text = "{\"v\":1}\n{\"tid\":0,\"seq\":0,\"kind\":\"LOCK_REL\",\"lock\":\"L\"}\n";
        assert_eq!(
            parse_trace(text.as_bytes()).unwrap_err().code(),
            "INVARIANT_VIOLATION"
        );
    }

    #[test]
    fn valexpr_formats() {
        let v: ValExpr = serde_json::from_str(r#"{"op":"add","a":"r1","b":3}"#).unwrap();
        assert_eq!(
            v,
            ValExpr::Op {
                op: BinOp::Add,
                a: Operand::Reg("r1".into()),
                b: Operand::Const(3)
            }
        );
        assert_eq!(
            serde_json::to_string(&ValExpr::Const(5)).unwrap(),
            r#"{"const":5}"#
        );
        assert!(serde_json::from_str::<ValExpr>(r#"{"const":1,"op":"add"}"#).is_err());
    }

    #[test]
    fn shadow_sets_read_and_write() {
        let t0 = vec![
            TraceEvent::lock_acq(0, "L".into(), site(1)),
            TraceEvent::write(0, "x", ValExpr::Const(1)),
            TraceEvent::read(0, "x", "r"),
            TraceEvent::read(0, "y", "q"),
            TraceEvent::lock_rel(0, "L".into()),
        ];
        let t = Trace::from_threads(BTreeMap::from([(0, t0)]), BTreeMap::new()).unwrap();
        let cs = &extract_critical_sections(&t)[0];
        assert_eq!(cs.s_rd, BTreeSet::from(["x".to_string(), "y".to_string()]));
        assert_eq!(cs.s_wr, BTreeSet::from(["x".to_string()]));
    }

    #[test]
    fn nested_sections_share_inner_accesses() {
        // lock(mu); load(fifo_empty); lock(muDone); load(producerDone); unlock(muDone); unlock(mu)
        let t0 = vec![
            TraceEvent::lock_acq(0, "mu".into(), site(1)),
            TraceEvent::read(0, "fifo_empty", "r1"),
            TraceEvent::lock_acq(0, "muDone".into(), site(2)),
            TraceEvent::read(0, "producerDone", "r2"),
            TraceEvent::lock_rel(0, "muDone".into()),
            TraceEvent::lock_rel(0, "mu".into()),
        ];
        let t = Trace::from_threads(BTreeMap::from([(0, t0)]), BTreeMap::new()).unwrap();
        let cs = extract_critical_sections(&t);
        let outer = cs.iter().find(|c| c.lock.as_str() == "mu").unwrap();
        let inner = cs.iter().find(|c| c.lock.as_str() == "muDone").unwrap();
        assert_eq!(
            outer.s_rd,
            BTreeSet::from(["fifo_empty".to_string(), "producerDone".to_string()])
        );
        assert_eq!(inner.s_rd, BTreeSet::from(["producerDone".to_string()]));
    }

    fn marked(events: Vec<TraceEvent>) -> Vec<TraceEvent> {
        let mut v = vec![TraceEvent::marker(0, "begin")];
        v.extend(events);
        v.push(TraceEvent::marker(0, "end"));
        v
    }

    #[test]
    fn slice_at_trace_bounds_is_identity() {
        let t0 = marked(vec![
            TraceEvent::lock_acq(0, "L".into(), site(1)),
            TraceEvent::compute(0, 2),
            TraceEvent::lock_rel(0, "L".into()),
        ]);
        let t = Trace::from_threads(BTreeMap::from([(0, t0)]), BTreeMap::new()).unwrap();
        assert_eq!(slice_trace(&t, "begin", "end").unwrap(), t);
    }

    #[test]
    fn slice_drops_threads_without_markers() {
        let t0 = marked(vec![TraceEvent::compute(0, 2)]);
        let t1 = vec![TraceEvent::compute(1, 5)];
        let t = Trace::from_threads(BTreeMap::from([(0, t0), (1, t1)]), BTreeMap::new()).unwrap();
        let s = slice_trace(&t, "begin", "end").unwrap();
        assert_eq!(s.threads.keys().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn slice_renumbers_acq_ord() {
        let cs = |_: u32| {
            vec![
                TraceEvent::lock_acq(0, "L".into(), site(1)),
                TraceEvent::read(0, "x", "r"),
                TraceEvent::lock_rel(0, "L".into()),
            ]
        };
        let mut t0 = cs(0);
        t0.push(TraceEvent::marker(0, "a"));
        t0.extend(cs(1));
        t0.extend(cs(2));
        t0.push(TraceEvent::marker(0, "b"));
        for (ord, ev) in t0
            .iter_mut()
            .filter(|e| e.kind == EventKind::LockAcq)
            .enumerate()
        {
            ev.acq_ord = Some(ord as u32);
        }
        let t = Trace::from_threads(BTreeMap::from([(0, t0)]), BTreeMap::new()).unwrap();
        let s = slice_trace(&t, "a", "b").unwrap();
        let ords: Vec<u32> = s.events().filter_map(|e| e.acq_ord).collect();
        assert_eq!(ords, vec![0, 1]);
        assert_eq!(s.threads[&0][0].seq, 0);
    }

    #[test]
    fn slice_inside_held_lock_is_unbalanced() {
        let t0 = vec![
            TraceEvent::lock_acq(0, "L".into(), site(1)),
            TraceEvent::marker(0, "a"),
            TraceEvent::lock_rel(0, "L".into()),
            TraceEvent::marker(0, "b"),
        ];
        let t = Trace::from_threads(BTreeMap::from([(0, t0)]), BTreeMap::new()).unwrap();
        assert_eq!(
            slice_trace(&t, "a", "b").unwrap_err().code(),
            "UNBALANCED_SLICE"
        );
        assert_eq!(
            slice_trace(&t, "zz", "b").unwrap_err().code(),
            "MARKER_NOT_FOUND"
        );
    }
}
