//! End-to-end analysis: detect, transform, paired replays, fuse, rank.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detect::{category_counts, detect_with, Category, PairClassifier, UlcpPair};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::perf::{aggregate_metrics, delta_t, fuse, rank, Metrics, RankStatus, UlcpGroup};
use crate::replay::{record, replay_with, ReplayOptions, ReplayResult};
use crate::trace::Trace;
use crate::transform::{
    assign_locksets, build_with, check_transform_races, emit_ulcp_free_trace, pin_partial_order,
    LocksetAssignment, RaceReport, Topology,
};
use crate::workload::parse_workload_with;

/// Everything produced by one analysis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub threads: usize,
    pub pairs: Vec<UlcpPair>,
    pub categories: BTreeMap<Category, usize>,
    pub ulcp_count: usize,
    pub groups: Vec<UlcpGroup>,
    pub rank_status: RankStatus,
    pub metrics: Metrics,
    pub original: ReplayResult,
    pub optimized: ReplayResult,
    pub races: RaceReport,
}

/// Intermediate artifacts, for callers that need the transformed trace.
pub struct Analysis {
    pub report: Report,
    pub free: Trace,
    pub topology: Topology,
    pub assignment: LocksetAssignment,
}

pub fn analyze(trace: &Trace, opts: &ReplayOptions) -> Result<Analysis> {
    let mut classifier = PairClassifier::new(trace)?;
    let pairs = detect_with(&mut classifier)?;
    let topology = pin_partial_order(build_with(&mut classifier, &pairs)?, trace);
    let assignment = assign_locksets(&topology);
    let free = emit_ulcp_free_trace(trace, &topology, &assignment)?;
    let original = replay_with(trace, opts)?;
    let optimized = replay_with(&free, opts)?;
    let mut singles = Vec::new();
    for pair in pairs.iter().filter(|p| p.category.is_ulcp()) {
        singles.push(UlcpGroup::single(
            pair,
            delta_t(pair, &original, &optimized)?,
        ));
    }
    let (groups, rank_status) = rank(fuse(singles));
    let metrics = aggregate_metrics(&original, &optimized, &groups);
    let races = if trace.has_memory_events() {
        check_transform_races(trace, &free)?
    } else {
        RaceReport {
            memory_matches: true,
            ..Default::default()
        }
    };
    let report = Report {
        threads: trace.thread_count(),
        categories: category_counts(&pairs),
        ulcp_count: pairs.iter().filter(|p| p.category.is_ulcp()).count(),
        pairs,
        groups,
        rank_status,
        metrics,
        original,
        optimized,
        races,
    };
    Ok(Analysis {
        report,
        free,
        topology,
        assignment,
    })
}

pub fn report(trace: &Trace, opts: &ReplayOptions) -> Result<Report> {
    Ok(analyze(trace, opts)?.report)
}

impl Report {
    /// Category of the top-ranked group, if any.
    pub fn top_category(&self) -> Option<Category> {
        self.groups.first().map(UlcpGroup::dominant_category)
    }

    /// Category with the most pairs, ties to the earlier category.
    pub fn dominant_category(&self) -> Option<Category> {
        self.categories
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| *c)
    }

    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "threads: {}", self.threads);
        let _ = writeln!(s, "pairs: {} (ulcp {})", self.pairs.len(), self.ulcp_count);
        let _ = writeln!(s, "categories:");
        for (c, n) in &self.categories {
            let _ = writeln!(s, "  {c}: {n}");
        }
        let _ = writeln!(
            s,
            "makespan: original {} optimized {}",
            self.original.makespan, self.optimized.makespan
        );
        let _ = writeln!(s, "t_pd: {}", m.t_pd);
        let _ = writeln!(s, "t_rw: {}", m.t_rw);
        let _ = writeln!(s, "sum_delta_t: {}", m.sum_delta_t);
        let _ = writeln!(s, "t_pd_norm: {:.6}", m.t_pd_norm);
        let _ = writeln!(s, "t_rw_per_thread: {:.6}", m.t_rw_per_thread);
        let _ = writeln!(s, "ranking: {:?}", self.rank_status);
        for (i, g) in self.groups.iter().enumerate() {
            let p = g.p.map_or("-".to_string(), |p| format!("{p:.6}"));
            let _ = writeln!(
                s,
                "  #{} {} {} p={} delta_t={} members={} category={}",
                i + 1,
                g.cr1,
                g.cr2,
                p,
                g.delta_t,
                g.members.len(),
                g.dominant_category()
            );
        }
        let _ = writeln!(
            s,
            "races: {} (memory {})",
            self.races.races.len(),
            if self.races.memory_matches {
                "matches"
            } else {
                "diverges"
            }
        );
        for r in &self.races.races {
            let _ = writeln!(
                s,
                "  {} {}@{} vs {}@{}",
                r.addr, r.first.at, r.first.region, r.second.at, r.second.region
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: i64,
    pub ulcp_count: usize,
    pub t_pd: i64,
    pub t_rw: i64,
    pub t_pd_norm: f64,
    pub t_rw_per_thread: f64,
}

pub const SWEEP_CSV_HEADER: &str = "param,value,ulcp_count,t_pd,t_rw,t_pd_norm,t_rw_per_thread";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.param,
            self.value,
            self.ulcp_count,
            self.t_pd,
            self.t_rw,
            self.t_pd_norm,
            self.t_rw_per_thread
        )
    }
}

/// Records and analyzes the workload once per `(param, value)` point.
pub fn sweep(
    source: &str,
    points: &[(String, i64)],
    seed: u64,
    opts: &ReplayOptions,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one point".into(),
        ));
    }
    exec.map(points, |(param, value)| {
        let overrides = BTreeMap::from([(param.clone(), *value)]);
        let program = parse_workload_with(source, &overrides)?;
        let (trace, _) = record(&program, seed)?;
        let r = report(&trace, opts)?;
        Ok(SweepRow {
            param: param.clone(),
            value: *value,
            ulcp_count: r.ulcp_count,
            t_pd: r.metrics.t_pd,
            t_rw: r.metrics.t_rw,
            t_pd_norm: r.metrics.t_pd_norm,
            t_rw_per_thread: r.metrics.t_rw_per_thread,
        })
    })
    .into_iter()
    .collect()
}
