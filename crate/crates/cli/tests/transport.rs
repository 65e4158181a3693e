mod common;

use proptest::prelude::*;
use wbcast::frame::{decode, encode, read_frame};
use wbcast_core::checker::{check_genuineness, check_safety};
use wbcast_core::message::Message;
use wbcast_core::trace::EventKind;

#[test]
fn every_member_delivers_local_group_messages() {
    let run = common::run_cluster(10, None, 1);
    assert!(run.confirmed);
    let topo = &run.trace.meta.topology;
    for (m, dest) in &run.casts {
        for g in dest {
            for p in topo.members(*g) {
                let got = run
                    .trace
                    .events
                    .iter()
                    .any(|e| e.process == *p && matches!(e.kind, EventKind::Deliver { msg, .. } if msg == *m));
                assert!(got, "{p} did not deliver {m}");
            }
        }
    }
    assert!(check_safety(&run.trace).ok());
}

#[test]
fn leader_kill_keeps_traces_safe() {
    let run = common::run_cluster(40, Some(20), 2);
    assert!(run.confirmed, "client gave up");
    let leader = run.killed.unwrap();
    assert!(run.trace.events.iter().any(|e| e.process == leader && e.kind == EventKind::Crash));
    let nominated = run.trace.events.iter().any(|e| matches!(e.kind, EventKind::Nominate { .. }));
    assert!(nominated);
    let recovered = run
        .trace
        .events
        .iter()
        .any(|e| e.process != leader && matches!(e.kind, EventKind::Send { msg: Message::NewState { .. }, .. }));
    assert!(recovered, "no new leader took over");
    let safety = check_safety(&run.trace);
    assert!(safety.ok(), "{}", safety.table());
    assert!(check_genuineness(&run.trace).is_pass());
    assert_eq!(common::short_of_quorum(&run), vec![]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frames_round_trip(env in common::envelope()) {
        let bytes = encode(&env).unwrap();
        prop_assert_eq!(encode(&env).unwrap(), bytes.clone());
        prop_assert_eq!(decode(&bytes).unwrap(), (env.clone(), bytes.len()));
        prop_assert_eq!(read_frame(&mut bytes.as_slice()).unwrap(), env);
    }
}
