use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use ulcp_core::detect::{classify_pair, detect_all, Category, PairClassifier};
use ulcp_core::perf::{delta_t_from, fuse, rank, Member, RankStatus, UlcpGroup, UlcpTiming};
use ulcp_core::pipeline::report;
use ulcp_core::replay::{record, replay, replay_with, ReplayOptions, ReplayPolicy};
use ulcp_core::trace::{
    extract_critical_sections, parse_trace, serialize_trace, CodeRegion, CriticalSection, CsId,
    LockId, Trace,
};
use ulcp_core::transform::transform;
use ulcp_core::workload::parse_workload;

#[derive(Debug, Clone)]
struct Block {
    gap: u64,
    lock: usize,
    site: u32,
    ops: Vec<(bool, usize, i64)>,
}

fn block() -> impl Strategy<Value = Block> {
    (
        0u64..4,
        0usize..2,
        1u32..5,
        prop::collection::vec((any::<bool>(), 0usize..3, 0i64..3), 0..3),
    )
        .prop_map(|(gap, lock, site, ops)| Block {
            gap,
            lock,
            site,
            ops,
        })
}

fn render(threads: &[Vec<Block>]) -> String {
    let mut src = String::from("memory x0 = 0; memory x1 = 1; memory x2 = 2;\n");
    for blocks in threads {
        src += "thread {\n";
        for b in blocks {
            if b.gap > 0 {
                src += &format!("  compute {};\n", b.gap);
            }
            src += &format!("  lock L{} @{};\n", b.lock, b.site);
            for &(write, addr, v) in &b.ops {
                if write {
                    src += &format!("  write x{addr} = {v};\n");
                } else {
                    src += &format!("  read x{addr} -> r;\n");
                }
            }
            src += &format!("  unlock L{};\n", b.lock);
        }
        src += "}\n";
    }
    src
}

fn workload() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::collection::vec(block(), 1..4), 1..4).prop_map(|t| render(&t))
}

fn recorded(src: &str, seed: u64) -> Trace {
    record(&parse_workload(src).unwrap(), seed).unwrap().0
}

fn shadow(rd: u8, wr: u8) -> CriticalSection {
    let set = |m: u8| -> BTreeSet<String> {
        (0..3)
            .filter(|b| m & (1 << b) != 0)
            .map(|b| format!("a{b}"))
            .collect()
    };
    CriticalSection {
        id: CsId::new(0, 0),
        tid: 0,
        lock: LockId::new("L"),
        lockset: vec![LockId::new("L")],
        span: (0, 2),
        s_rd: set(rd),
        s_wr: set(wr),
        site: CodeRegion::new(1, 1, 1),
        acq_ord: 0,
    }
}

fn group() -> impl Strategy<Value = UlcpGroup> {
    (0u32..20, 0u32..4, 0u32..20, 0u32..4, -5i64..20, 0u32..1000).prop_map(
        |(a, la, b, lb, dt, tag)| UlcpGroup {
            cr1: CodeRegion::new(1, a, a + la),
            cr2: CodeRegion::new(1, b, b + lb),
            members: vec![Member {
                pair: format!("p{tag}"),
                category: Category::ReadRead,
                delta_t: dt,
            }],
            delta_t: dt,
            p: None,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn classification_is_symmetric(r1 in 0u8..8, w1 in 0u8..8, r2 in 0u8..8, w2 in 0u8..8) {
        prop_assert_eq!(
            classify_pair(&shadow(r1, w1), &shadow(r2, w2)),
            classify_pair(&shadow(r2, w2), &shadow(r1, w1))
        );
    }

    #[test]
    fn recording_is_deterministic_per_seed(src in workload(), seed in 0u64..50) {
        let p = parse_workload(&src).unwrap();
        prop_assert_eq!(record(&p, seed).unwrap(), record(&p, seed).unwrap());
    }

    #[test]
    fn time_is_conserved_and_bounded(src in workload(), seed in 0u64..50) {
        let (trace, stats) = record(&parse_workload(&src).unwrap(), seed).unwrap();
        let r = replay(&trace, ReplayPolicy::ElscS, 0).unwrap();
        prop_assert_eq!(r.makespan, stats.makespan);
        let mut total = 0;
        for t in r.per_thread.values() {
            prop_assert_eq!(t.busy + t.wait, t.completion);
            prop_assert!(t.busy <= r.makespan);
            total += t.busy;
        }
        prop_assert!(r.makespan <= total);
    }

    #[test]
    fn traces_round_trip(src in workload(), seed in 0u64..50) {
        let trace = recorded(&src, seed);
        let text = serialize_trace(&trace);
        prop_assert_eq!(parse_trace(text.as_bytes()).unwrap(), trace);
    }

    #[test]
    fn edges_are_first_non_ulcp_matches(src in workload(), seed in 0u64..50) {
        let trace = recorded(&src, seed);
        let (_, topo, _) = transform(&trace, &detect_all(&trace).unwrap()).unwrap();
        let mut classifier = PairClassifier::new(&trace).unwrap();
        let sections = extract_critical_sections(&trace);
        let mut want = BTreeSet::new();
        for a in &sections {
            let threads: BTreeSet<u32> = sections.iter().map(|s| s.tid).filter(|t| *t != a.tid).collect();
            for u in threads {
                let mut later: Vec<&CriticalSection> = sections
                    .iter()
                    .filter(|b| b.tid == u && b.lock == a.lock && b.acq_ord > a.acq_ord)
                    .collect();
                later.sort_by_key(|b| b.acq_ord);
                for b in later {
                    if !classifier.classify(a.id, b.id).unwrap().0.is_ulcp() {
                        want.insert((a.id, b.id));
                        break;
                    }
                }
            }
        }
        prop_assert_eq!(topo.edges, want);
    }

    #[test]
    fn transformed_replays_keep_partial_orders(src in workload(), seed in 0u64..50, dynamic in any::<bool>()) {
        let trace = recorded(&src, seed);
        let (free, topo, _) = transform(&trace, &detect_all(&trace).unwrap()).unwrap();
        let opts = ReplayOptions::new(ReplayPolicy::ElscS).dynamic_locking(dynamic);
        let r = replay_with(&free, &opts).unwrap();
        for (lock, chain) in &topo.partial_orders {
            let realized: Vec<CsId> = r.section_order[lock].iter().filter(|id| chain.contains(id)).copied().collect();
            prop_assert_eq!(&realized, chain);
        }
    }

    #[test]
    fn accounting_identity_holds(src in workload(), seed in 0u64..50) {
        let trace = recorded(&src, seed);
        let r = report(&trace, &ReplayOptions::default()).unwrap();
        let members: i64 = r.groups.iter().flat_map(|g| &g.members).map(|m| m.delta_t).sum();
        prop_assert_eq!(r.metrics.t_pd + r.metrics.t_rw, members);
        if r.rank_status == RankStatus::Ranked {
            let p: f64 = r.groups.iter().filter_map(|g| g.p).sum();
            prop_assert!((p - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn fusion_is_idempotent_and_order_free(groups in prop::collection::vec(group(), 0..12), rot in 0usize..12) {
        let once = fuse(groups.clone());
        prop_assert_eq!(fuse(once.clone()), once.clone());
        let mut rotated = groups.clone();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
        }
        prop_assert_eq!(fuse(rotated), once.clone());
        let total: i64 = groups.iter().map(|g| g.delta_t).sum();
        prop_assert_eq!(once.iter().map(|g| g.delta_t).sum::<i64>(), total);
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                let straight = a.cr1.overlaps(&b.cr1) && a.cr2.overlaps(&b.cr2);
                let crossed = a.cr1.overlaps(&b.cr2) && a.cr2.overlaps(&b.cr1);
                prop_assert!(!straight && !crossed);
            }
        }
    }

    #[test]
    fn shares_sum_to_one(groups in prop::collection::vec(group(), 1..12)) {
        let (ranked, status) = rank(fuse(groups));
        if ranked.iter().any(|g| g.delta_t > 0) {
            prop_assert_eq!(status, RankStatus::Ranked);
            let p: f64 = ranked.iter().filter_map(|g| g.p).sum();
            prop_assert!((p - 1.0).abs() < 1e-9);
            for w in ranked.windows(2) {
                prop_assert!(w[0].p >= w[1].p);
            }
        } else {
            prop_assert_eq!(status, RankStatus::AllZero);
        }
    }

    #[test]
    fn delta_t_ignores_uniform_shifts(
        o in (0u64..50, 0u64..50, 0u64..50),
        p in (0u64..50, 0u64..50, 0u64..50),
        k in 0u64..100,
        j in 0u64..100,
    ) {
        let t = |(a, b, c): (u64, u64, u64), s: u64| UlcpTiming { time1: a + s, time2: b + s, time3: c + s };
        prop_assert_eq!(delta_t_from(t(o, k), t(p, j)), delta_t_from(t(o, 0), t(p, 0)));
    }

    #[test]
    fn overrides_replace_declared_params(n in 1i64..6) {
        let src = "param n = 2; param m = n * 2 + 1; thread * n { loop m { compute 1 } }";
        let p = ulcp_core::workload::parse_workload_with(src, &BTreeMap::from([("n".to_string(), n)])).unwrap();
        prop_assert_eq!(p.threads.len() as i64, n);
        prop_assert_eq!(p.params["m"], n * 2 + 1);
    }
}
