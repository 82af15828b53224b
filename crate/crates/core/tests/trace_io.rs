use ulcp_core::detect::{detect_all, Category};
use ulcp_core::pipeline::report;
use ulcp_core::replay::{record, replay, ReplayOptions, ReplayPolicy};
use ulcp_core::trace::{parse_trace, serialize_trace, slice_trace};
use ulcp_core::workload::parse_workload;

/// Lock events only, as written by the pthread interposition tracer.
const LOCK_ONLY: &str = r#"{"v":1,"caps":["no_memory_events"]}
{"tid":0,"seq":0,"kind":"THREAD_START"}
{"tid":0,"seq":1,"kind":"LOCK_ACQ","lock":"m","acq_ord":0,"site":{"id":7,"span":[0,0]}}
{"tid":0,"seq":2,"kind":"COMPUTE","cost":3}
{"tid":0,"seq":3,"kind":"LOCK_REL","lock":"m"}
{"tid":0,"seq":4,"kind":"THREAD_END"}
{"tid":1,"seq":0,"kind":"THREAD_START"}
{"tid":1,"seq":1,"kind":"COMPUTE","cost":1}
{"tid":1,"seq":2,"kind":"LOCK_ACQ","lock":"m","acq_ord":1,"site":{"id":9,"span":[0,0]}}
{"tid":1,"seq":3,"kind":"COMPUTE","cost":2}
{"tid":1,"seq":4,"kind":"LOCK_REL","lock":"m"}
{"tid":1,"seq":5,"kind":"THREAD_END"}
"#;

#[test]
fn lock_only_traces_report_unknown_pairs() {
    let trace = parse_trace(LOCK_ONLY.as_bytes()).unwrap();
    assert!(!trace.has_memory_events());
    let pairs = detect_all(&trace).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].category, Category::Unknown);
    let r = report(&trace, &ReplayOptions::default()).unwrap();
    assert_eq!(r.ulcp_count, 0);
    assert_eq!(r.original.makespan, r.optimized.makespan);
}

#[test]
fn lock_only_traces_refuse_memory_ordering() {
    let trace = parse_trace(LOCK_ONLY.as_bytes()).unwrap();
    let err = replay(&trace, ReplayPolicy::MemS, 0).unwrap_err();
    assert_eq!(err.code(), "POLICY_PREREQUISITE");
    assert_eq!(replay(&trace, ReplayPolicy::ElscS, 0).unwrap().makespan, 5);
}

#[test]
fn recorded_traces_round_trip() {
    let program = parse_workload(
        "memory x = 3;
         thread { lock L @1; read x -> r; write y = r add 1; unlock L; marker done }
         thread { compute 2; lock L @2; write x = 5; unlock L }",
    )
    .unwrap();
    let (trace, _) = record(&program, 9).unwrap();
    let text = serialize_trace(&trace);
    let back = parse_trace(text.as_bytes()).unwrap();
    assert_eq!(back, trace);
    assert_eq!(serialize_trace(&back), text);
}

#[test]
fn malformed_records_name_their_line() {
    let broken = LOCK_ONLY.replacen(
        r#""kind":"COMPUTE","cost":3"#,
        r#""kind":"COMPUTE","cost":"x""#,
        1,
    );
    let err = parse_trace(broken.as_bytes()).unwrap_err();
    assert_eq!(err.code(), "MALFORMED_RECORD");
    assert!(err.to_string().contains("line 4"), "{err}");
}

#[test]
fn unbalanced_locks_are_rejected() {
    let broken: String = LOCK_ONLY
        .lines()
        .filter(|l| !l.contains(r#""tid":1,"seq":4"#))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(parse_trace(broken.as_bytes()).is_err());
}

#[test]
fn slices_keep_whole_sections() {
    let program = parse_workload(
        "thread { compute 1; marker a; lock L @1; read x -> r; unlock L; marker b; lock L @2; write x = 1; unlock L }
         thread { lock L @3; read x -> r; unlock L }",
    )
    .unwrap();
    let (trace, _) = record(&program, 0).unwrap();
    let sliced = slice_trace(&trace, "a", "b").unwrap();
    assert!(sliced.lock_acq_count() < trace.lock_acq_count());
    assert!(slice_trace(&trace, "a", "missing").is_err());
}
