//! Per-pair impact, fusion by code region, ranking and aggregate metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::{Category, UlcpPair};
use crate::error::Result;
use crate::replay::{post_label, pre_label, ReplayResult};
use crate::trace::CodeRegion;

/// The three boundaries bracketing a pair in one replay: the start of the
/// first section's precursor segment and the ends of both successor segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UlcpTiming {
    pub time1: u64,
    pub time2: u64,
    pub time3: u64,
}

impl UlcpTiming {
    pub fn of(pair: &UlcpPair, r: &ReplayResult) -> Result<Self> {
        Ok(UlcpTiming {
            time1: r.label(&pre_label(pair.c1))?,
            time2: r.label(&post_label(pair.c1))?,
            time3: r.label(&post_label(pair.c2))?,
        })
    }
}

/// `(max(T2,T3) before − after) − (T1 before − after)`; positive means the
/// optimized run finished the pair sooner.
pub fn delta_t_from(orig: UlcpTiming, opt: UlcpTiming) -> i64 {
    let end = |t: UlcpTiming| t.time2.max(t.time3) as i64;
    (end(orig) - end(opt)) - (orig.time1 as i64 - opt.time1 as i64)
}

pub fn delta_t(pair: &UlcpPair, original: &ReplayResult, optimized: &ReplayResult) -> Result<i64> {
    Ok(delta_t_from(
        UlcpTiming::of(pair, original)?,
        UlcpTiming::of(pair, optimized)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Member {
    pub pair: String,
    pub category: Category,
    pub delta_t: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UlcpGroup {
    pub cr1: CodeRegion,
    pub cr2: CodeRegion,
    pub members: Vec<Member>,
    pub delta_t: i64,
    /// Share of the total positive ΔT; `None` when no group has any.
    pub p: Option<f64>,
}

impl UlcpGroup {
    pub fn single(pair: &UlcpPair, delta_t: i64) -> Self {
        UlcpGroup {
            cr1: pair.sites.0,
            cr2: pair.sites.1,
            members: vec![Member {
                pair: pair.key(),
                category: pair.category,
                delta_t,
            }],
            delta_t,
            p: None,
        }
    }

    /// Most frequent member category, ties going to the larger summed ΔT.
    pub fn dominant_category(&self) -> Category {
        let mut tally: BTreeMap<Category, (usize, i64)> = BTreeMap::new();
        for m in &self.members {
            let e = tally.entry(m.category).or_default();
            e.0 += 1;
            e.1 += m.delta_t;
        }
        tally
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .expect("groups have members")
    }

    fn key(&self) -> (CodeRegion, CodeRegion) {
        (self.cr1, self.cr2)
    }

    fn oriented(mut self) -> Self {
        if self.cr2 < self.cr1 {
            std::mem::swap(&mut self.cr1, &mut self.cr2);
        }
        self
    }
}

fn straight(a: &UlcpGroup, b: &UlcpGroup) -> bool {
    a.cr1.overlaps(&b.cr1) && a.cr2.overlaps(&b.cr2)
}

fn crossed(a: &UlcpGroup, b: &UlcpGroup) -> bool {
    a.cr1.overlaps(&b.cr2) && a.cr2.overlaps(&b.cr1)
}

fn merge(mut a: UlcpGroup, b: UlcpGroup) -> UlcpGroup {
    if straight(&a, &b) {
        a.cr1 = a.cr1.hull(&b.cr1);
        a.cr2 = a.cr2.hull(&b.cr2);
    } else {
        a.cr1 = a.cr1.hull(&b.cr2);
        a.cr2 = a.cr2.hull(&b.cr1);
    }
    a.delta_t += b.delta_t;
    a.members.extend(b.members);
    a.members.sort();
    a.oriented()
}

/// Merges groups whose code regions overlap (directly or crossed) until
/// no two remaining groups can merge. Inputs are put in a canonical order
/// first, so the result does not depend on input order.
pub fn fuse(groups: Vec<UlcpGroup>) -> Vec<UlcpGroup> {
    let mut input: Vec<UlcpGroup> = groups.into_iter().map(UlcpGroup::oriented).collect();
    for g in &mut input {
        g.members.sort();
        g.p = None;
    }
    input.sort_by(|a, b| {
        a.key()
            .cmp(&b.key())
            .then_with(|| a.members.cmp(&b.members))
    });
    let mut out: Vec<UlcpGroup> = Vec::new();
    for mut g in input {
        while let Some(k) = out.iter().position(|h| straight(h, &g) || crossed(h, &g)) {
            let h = out.remove(k);
            g = merge(h, g);
        }
        out.push(g);
    }
    out.sort_by_key(UlcpGroup::key);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RankStatus {
    Ranked,
    /// No group has a positive ΔT; ordered by member count instead.
    AllZero,
}

/// Assigns `p` and sorts descending. `p` is the group's share of the
/// summed positive ΔT.
pub fn rank(mut groups: Vec<UlcpGroup>) -> (Vec<UlcpGroup>, RankStatus) {
    let total: i64 = groups.iter().map(|g| g.delta_t.max(0)).sum();
    let starts = |g: &UlcpGroup| (g.cr1.lo(), g.cr2.lo(), g.cr1, g.cr2);
    if total <= 0 {
        for g in &mut groups {
            g.p = None;
        }
        groups.sort_by(|a, b| {
            b.members
                .len()
                .cmp(&a.members.len())
                .then_with(|| starts(a).cmp(&starts(b)))
        });
        return (groups, RankStatus::AllZero);
    }
    for g in &mut groups {
        g.p = Some(g.delta_t.max(0) as f64 / total as f64);
    }
    groups.sort_by(|a, b| {
        b.p.partial_cmp(&a.p)
            .unwrap_or(Ordering::Equal)
            .then_with(|| starts(a).cmp(&starts(b)))
    });
    (groups, RankStatus::Ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Makespan reduction of the ULCP-free replay.
    pub t_pd: i64,
    /// ΣΔT − T_pd: pair-level savings that do not shorten the makespan.
    pub t_rw: i64,
    pub sum_delta_t: i64,
    pub t_real: u64,
    pub n_thread: usize,
    pub t_pd_norm: f64,
    pub t_rw_per_thread: f64,
}

pub fn aggregate_metrics(
    original: &ReplayResult,
    optimized: &ReplayResult,
    groups: &[UlcpGroup],
) -> Metrics {
    let t_pd = original.makespan as i64 - optimized.makespan as i64;
    let sum: i64 = groups.iter().map(|g| g.delta_t).sum();
    let t_rw = sum - t_pd;
    let n = original.per_thread.len();
    Metrics {
        t_pd,
        t_rw,
        sum_delta_t: sum,
        t_real: original.makespan,
        n_thread: n,
        t_pd_norm: if original.makespan == 0 {
            0.0
        } else {
            t_pd as f64 / original.makespan as f64
        },
        t_rw_per_thread: if n == 0 { 0.0 } else { t_rw as f64 / n as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(a: u64, b: u64, c: u64) -> UlcpTiming {
        UlcpTiming {
            time1: a,
            time2: b,
            time3: c,
        }
    }

    fn g(cr1: (u32, u32), cr2: (u32, u32), dt: i64, name: &str) -> UlcpGroup {
        UlcpGroup {
            cr1: CodeRegion::new(1, cr1.0, cr1.1),
            cr2: CodeRegion::new(1, cr2.0, cr2.1),
            members: vec![Member {
                pair: name.into(),
                category: Category::ReadRead,
                delta_t: dt,
            }],
            delta_t: dt,
            p: None,
        }
    }

    #[test]
    fn delta_t_examples() {
        assert_eq!(delta_t_from(t(0, 10, 14), t(0, 10, 9)), 4);
        assert_eq!(delta_t_from(t(3, 10, 14), t(3, 10, 14)), 0);
        assert_eq!(delta_t_from(t(5, 15, 19), t(0, 10, 14)), 0);
    }

    #[test]
    fn identical_regions_fuse() {
        let out = fuse(vec![g((1, 2), (5, 6), 3, "a"), g((1, 2), (5, 6), 4, "b")]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].delta_t, 7);
    }

    #[test]
    fn disjoint_regions_stay_apart() {
        let out = fuse(vec![
            g((1, 2), (5, 6), 3, "a"),
            g((10, 11), (20, 21), 4, "b"),
        ]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn crossed_regions_fuse() {
        let out = fuse(vec![g((1, 2), (5, 6), 3, "a"), g((5, 6), (1, 2), 4, "b")]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].delta_t, 7);
    }

    #[test]
    fn ranking_shares() {
        let (ranked, status) = rank(vec![
            g((1, 1), (2, 2), 3, "b"),
            g((5, 5), (6, 6), 6, "a"),
            g((9, 9), (9, 9), 1, "c"),
        ]);
        assert_eq!(status, RankStatus::Ranked);
        let ps: Vec<f64> = ranked.iter().map(|g| g.p.unwrap()).collect();
        assert_eq!(ps, vec![0.6, 0.3, 0.1]);
    }

    #[test]
    fn ties_break_by_region_start() {
        let (ranked, _) = rank(vec![
            g((7, 7), (8, 8), 2, "late"),
            g((3, 3), (4, 4), 2, "early"),
        ]);
        assert_eq!(ranked[0].members[0].pair, "early");
    }

    #[test]
    fn all_zero_falls_back_to_member_count() {
        let mut big = g((7, 7), (8, 8), 0, "x");
        big.members.push(big.members[0].clone());
        let (ranked, status) = rank(vec![g((1, 1), (2, 2), 0, "y"), big]);
        assert_eq!(status, RankStatus::AllZero);
        assert_eq!(ranked[0].members.len(), 2);
        assert!(ranked.iter().all(|g| g.p.is_none()));
    }

    #[test]
    fn single_group_gets_everything() {
        let (ranked, _) = rank(vec![g((1, 1), (2, 2), 5, "a")]);
        assert_eq!(ranked[0].p, Some(1.0));
    }

    #[test]
    fn no_groups_no_metrics() {
        let r = ReplayResult {
            policy: crate::replay::ReplayPolicy::ElscS,
            seed: None,
            makespan: 10,
            per_thread: BTreeMap::new(),
            timestamps: BTreeMap::new(),
            final_memory: BTreeMap::new(),
            realized_lock_order: BTreeMap::new(),
            section_order: BTreeMap::new(),
            aux_acquisitions: 0,
        };
        let m = aggregate_metrics(&r, &r, &[]);
        assert_eq!((m.t_pd, m.t_rw), (0, 0));
    }
}
