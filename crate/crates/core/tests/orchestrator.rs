mod common;

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Barrier};
use std::thread;

use chrono::Duration;
use common::*;
use maci_core::model::{ExperimentStatus, LogLevel, StudyStatus};
use maci_core::orchestrator::*;

fn policy() -> RetryPolicy {
    RetryPolicy::default()
}

#[test]
fn create_study_is_draft_and_unmaterialized() {
    let (o, _) = orchestrator(policy());
    let study = study_of(&o, dash_template(), 1);
    assert_eq!(study.status, StudyStatus::Draft);
    assert!(o.experiments(&study.id).unwrap().is_empty());
    assert_eq!(o.progress(&study.id).unwrap().total, 0);
}

#[test]
fn create_study_rejects_bad_bindings() {
    let (o, _) = orchestrator(policy());
    let t = o.create_template(small_template(2)).unwrap();
    let bad = NewStudy {
        template_id: t.id.clone(),
        bound_values: BTreeMap::from([("x".into(), vec![num(9.0)])]),
        repetitions: 1,
        base_seed: 0,
        provenance: Default::default(),
    };
    match o.create_study(bad) {
        Err(OrchestratorError::Validation(e)) => assert_eq!(e.0[0].field, "bound_values.x"),
        other => panic!("{other:?}"),
    }
    let zero = NewStudy {
        template_id: t.id.clone(),
        bound_values: BTreeMap::new(),
        repetitions: 0,
        base_seed: 0,
        provenance: Default::default(),
    };
    match o.create_study(zero) {
        Err(OrchestratorError::Validation(e)) => assert_eq!(e.0[0].field, "repetitions"),
        other => panic!("{other:?}"),
    }
    let unknown = NewStudy {
        template_id: "nope".into(),
        bound_values: BTreeMap::new(),
        repetitions: 1,
        base_seed: 0,
        provenance: Default::default(),
    };
    assert!(matches!(o.create_study(unknown), Err(OrchestratorError::UnknownTemplate(_))));
}

#[test]
fn template_names_may_not_shadow_frame_columns() {
    let (o, _) = orchestrator(policy());
    let mut t = small_template(2);
    t.parameters[0].name = "status".into();
    assert!(matches!(o.create_template(t), Err(OrchestratorError::Validation(_))));
}

#[test]
fn start_study_materializes_once() {
    let (o, _) = orchestrator(policy());
    let study = study_of(&o, small_template(2), 3);
    let p = o.start_study(&study.id).unwrap();
    assert_eq!(p.counts.pending, 6);
    assert_eq!(p.total, 6);
    assert_eq!(p.status, StudyStatus::Running);
    assert!(matches!(o.start_study(&study.id), Err(OrchestratorError::WrongState(_))));

    let empty = study_of(
        &o,
        NewTemplate { name: "e".into(), script: String::new(), parameters: vec![], declared_metrics: vec![] },
        4,
    );
    assert_eq!(o.start_study(&empty.id).unwrap().counts.pending, 4);
}

#[test]
fn worker_liveness() {
    let (o, clock) = orchestrator(policy());
    let w = o.register_worker(labels()).unwrap();
    assert_eq!(w.state, WorkerState::Idle);
    assert!(w.current_experiment.is_none());

    let at = clock.advance(Duration::seconds(31));
    let actions = o.reap(at).unwrap();
    assert_eq!(actions, vec![ReapAction::WorkerOffline { worker_id: w.id.clone() }]);
    assert_eq!(o.workers().unwrap()[0].state, WorkerState::Offline);

    assert_eq!(o.heartbeat(&w.id).unwrap().state, WorkerState::Idle);
    assert!(matches!(o.heartbeat(&"ghost".into()), Err(OrchestratorError::UnknownWorker(_))));
}

#[test]
fn acquire_edge_cases() {
    let (o, _) = orchestrator(policy());
    let w = o.register_worker(labels()).unwrap();
    assert!(o.acquire_next(&w.id).unwrap().is_none());

    let study = study_of(&o, small_template(2), 1);
    o.start_study(&study.id).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();
    assert_eq!(a.instance.status, ExperimentStatus::Leased);
    assert_eq!(a.instance.attempt, 1);
    assert_eq!(a.lease.attempt, 1);
    assert_eq!(a.lease.expires_at - a.lease.granted_at, Duration::seconds(600));
    assert_eq!(a.parameters.params["x"], num(0.0));
    assert_eq!(a.script, "#!/bin/sh\nexit 0\n");
    assert!(matches!(o.acquire_next(&w.id), Err(OrchestratorError::WorkerBusy(_))));
    assert!(matches!(o.acquire_next(&"ghost".into()), Err(OrchestratorError::UnknownWorker(_))));
}

#[test]
fn fifo_across_studies() {
    let (o, clock) = orchestrator(policy());
    let first = study_of(&o, small_template(2), 1);
    clock.advance(Duration::seconds(1));
    let second = study_of(&o, small_template(2), 1);
    // Start order differs from creation order.
    o.start_study(&second.id).unwrap();
    o.start_study(&first.id).unwrap();
    let mut order = Vec::new();
    for _ in 0..4 {
        let w = o.register_worker(labels()).unwrap();
        let a = o.acquire_next(&w.id).unwrap().unwrap();
        order.push((a.instance.study_id, a.instance.combo_index));
    }
    assert_eq!(
        order,
        vec![(first.id.clone(), 0), (first.id.clone(), 1), (second.id.clone(), 0), (second.id.clone(), 1)]
    );
}

#[test]
fn concurrent_acquire_never_duplicates() {
    for _ in 0..100 {
        let (o, _) = orchestrator(policy());
        let o = Arc::new(o);
        let study = study_of(&o, small_template(2), 1);
        o.start_study(&study.id).unwrap();
        let workers: Vec<_> = (0..3).map(|_| o.register_worker(labels()).unwrap().id).collect();
        let barrier = Arc::new(Barrier::new(3));
        let handles: Vec<_> = workers
            .into_iter()
            .map(|w| {
                let o = o.clone();
                let b = barrier.clone();
                thread::spawn(move || {
                    b.wait();
                    o.acquire_next(&w).unwrap().map(|a| a.instance.id)
                })
            })
            .collect();
        let got: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let some: Vec<_> = got.iter().flatten().collect();
        assert_eq!(some.len(), 2);
        assert_eq!(some.iter().collect::<HashSet<_>>().len(), 2);
        assert_eq!(got.iter().filter(|g| g.is_none()).count(), 1);
    }
}

#[test]
fn report_started_checks_the_lease() {
    let (o, clock) = orchestrator(policy());
    let study = study_of(&o, small_template(1), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();
    let other = o.register_worker(labels()).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();

    assert!(matches!(
        o.report_started(&a.instance.id, &other.id),
        Err(OrchestratorError::LeaseMismatch { .. })
    ));
    o.report_started(&a.instance.id, &w.id).unwrap();
    assert_eq!(o.experiments(&study.id).unwrap()[0].status, ExperimentStatus::Running);

    // A second experiment, whose lease runs out before the start report.
    let study2 = study_of(&o, small_template(1), 1);
    o.start_study(&study2.id).unwrap();
    let b = o.acquire_next(&other.id).unwrap().unwrap();
    o.heartbeat(&w.id).unwrap();
    clock.advance(Duration::seconds(601));
    assert!(matches!(
        o.report_started(&b.instance.id, &other.id),
        Err(OrchestratorError::LeaseExpired(_))
    ));
}

#[test]
fn results_and_retries() {
    let (o, _) = orchestrator(policy());
    let study = study_of(&o, small_template(2), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();

    let a = o.acquire_next(&w.id).unwrap().unwrap();
    o.report_started(&a.instance.id, &w.id).unwrap();
    assert_eq!(o.report_result(&a.instance.id, &w.id, Outcome::Success).unwrap(), ExperimentStatus::Finished);
    assert_eq!(o.workers().unwrap()[0].state, WorkerState::Idle);
    assert!(matches!(
        o.report_result(&a.instance.id, &w.id, Outcome::Success),
        Err(OrchestratorError::AlreadyTerminal(_))
    ));

    let fail = || Outcome::Failure { detail: "exit_code=3".into() };
    let b = o.acquire_next(&w.id).unwrap().unwrap();
    o.report_started(&b.instance.id, &w.id).unwrap();
    assert_eq!(o.report_result(&b.instance.id, &w.id, fail()).unwrap(), ExperimentStatus::Pending);
    let b2 = o.acquire_next(&w.id).unwrap().unwrap();
    assert_eq!(b2.instance.id, b.instance.id);
    assert_eq!(b2.lease.attempt, 2);
    o.report_started(&b2.instance.id, &w.id).unwrap();
    assert_eq!(o.report_result(&b2.instance.id, &w.id, fail()).unwrap(), ExperimentStatus::Failed);

    let bundle = o.drill_down(&b.instance.id).unwrap();
    assert_eq!(bundle.instance.exit_detail.as_deref(), Some("exit_code=3"));
    assert_eq!(bundle.attempts.len(), 2);
    assert_eq!(o.study(&study.id).unwrap().status, StudyStatus::Finished);
}

#[test]
fn result_without_start_report_is_accepted() {
    let (o, _) = orchestrator(policy());
    let study = study_of(&o, small_template(1), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();
    assert_eq!(o.report_result(&a.instance.id, &w.id, Outcome::Success).unwrap(), ExperimentStatus::Finished);
}

#[test]
fn metric_and_log_ingestion() {
    let (o, clock) = orchestrator(policy());
    let study = study_of(&o, small_template(1), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();
    let id = a.instance.id.clone();
    o.report_started(&id, &w.id).unwrap();
    clock.advance(Duration::milliseconds(1500));

    let m = |v: f64| MetricInput { metric: "stallings".into(), value: v, wall_offset_ms: None };
    let first = o.ingest_metrics(&id, vec![m(2.0)]).unwrap();
    assert_eq!(first[0].seq, 0);
    assert_eq!(first[0].wall_offset_ms, 1500);
    let second = o.ingest_metrics(&id, vec![m(3.0)]).unwrap();
    assert_eq!(second[0].seq, 1);
    let other = o
        .ingest_metrics(&id, vec![MetricInput { metric: "q".into(), value: 1.0, wall_offset_ms: Some(7) }])
        .unwrap();
    assert_eq!((other[0].seq, other[0].wall_offset_ms), (0, 7));

    assert!(matches!(
        o.ingest_metrics(&id, vec![MetricInput { metric: "1bad".into(), value: 1.0, wall_offset_ms: None }]),
        Err(OrchestratorError::Validation(_))
    ));
    assert!(matches!(o.ingest_metrics(&id, vec![m(f64::NAN)]), Err(OrchestratorError::Validation(_))));
    assert!(matches!(
        o.ingest_metrics(&id, vec![MetricInput { metric: "x".into(), value: 1.0, wall_offset_ms: None }]),
        Err(OrchestratorError::Validation(_))
    ));
    o.ingest_logs(&id, vec![LogInput { level: LogLevel::Warn, message: "slow start".into(), wall_offset_ms: None }])
        .unwrap();

    o.report_result(&id, &w.id, Outcome::Success).unwrap();
    assert!(matches!(o.ingest_metrics(&id, vec![m(1.0)]), Err(OrchestratorError::TerminalState(_))));
    assert!(matches!(o.ingest_metrics(&"nope".into(), vec![m(1.0)]), Err(OrchestratorError::UnknownExperiment(_))));

    let bundle = o.drill_down(&id).unwrap();
    let seqs: Vec<_> = bundle.metrics.iter().map(|r| (r.metric.as_str(), r.seq)).collect();
    assert_eq!(seqs, [("stallings", 0), ("stallings", 1), ("q", 0)]);
    assert_eq!(bundle.logs.len(), 1);
    assert!(matches!(o.drill_down(&"nope".into()), Err(OrchestratorError::UnknownExperiment(_))));
}

#[test]
fn reap_expires_leases() {
    let p = RetryPolicy { lease_duration_s: 60, ..policy() };
    let (o, clock) = orchestrator(p);
    let study = study_of(&o, small_template(1), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();

    assert!(o.reap(clock.now()).unwrap().is_empty());

    let a = o.acquire_next(&w.id).unwrap().unwrap();
    clock.advance(Duration::seconds(25));
    o.heartbeat(&w.id).unwrap();
    clock.advance(Duration::seconds(25));
    o.heartbeat(&w.id).unwrap();
    let at = clock.advance(Duration::seconds(11));
    let actions = o.reap(at).unwrap();
    assert_eq!(
        actions,
        vec![ReapAction::LeaseExpired {
            experiment_id: a.instance.id.clone(),
            worker_id: w.id.clone(),
            attempt: 1,
            new_status: ExperimentStatus::Pending,
        }]
    );
    let info = &o.workers().unwrap()[0];
    assert!(info.current_experiment.is_none());
    assert_eq!(info.state, WorkerState::Idle);
    // The late result is discarded.
    assert!(matches!(
        o.report_result(&a.instance.id, &w.id, Outcome::Success),
        Err(OrchestratorError::LeaseExpired(_))
    ));

    let b = o.acquire_next(&w.id).unwrap().unwrap();
    assert_eq!(b.lease.attempt, 2);
    for _ in 0..3 {
        clock.advance(Duration::seconds(25));
        o.heartbeat(&w.id).unwrap();
    }
    let actions = o.reap(clock.now()).unwrap();
    assert!(matches!(
        actions[..],
        [ReapAction::LeaseExpired { new_status: ExperimentStatus::Failed, attempt: 2, .. }]
    ));
    assert_eq!(o.study(&study.id).unwrap().status, StudyStatus::Finished);
}

#[test]
fn silent_worker_loses_its_lease() {
    let (o, clock) = orchestrator(policy());
    let study = study_of(&o, small_template(1), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();
    let at = clock.advance(Duration::seconds(31));
    let actions = o.reap(at).unwrap();
    assert_eq!(actions.len(), 2);
    assert_eq!(actions[0], ReapAction::WorkerOffline { worker_id: w.id.clone() });
    assert!(matches!(&actions[1], ReapAction::LeaseExpired { experiment_id, .. } if *experiment_id == a.instance.id));
    assert!(o.live_leases().unwrap().is_empty());
    assert!(matches!(o.acquire_next(&w.id), Err(OrchestratorError::WorkerOffline(_))));
    o.heartbeat(&w.id).unwrap();
    assert!(o.acquire_next(&w.id).unwrap().is_some());
}

#[test]
fn cancel_study() {
    let (o, _) = orchestrator(policy());
    let study = study_of(&o, small_template(4), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();
    o.report_result(&a.instance.id, &w.id, Outcome::Success).unwrap();
    let b = o.acquire_next(&w.id).unwrap().unwrap();

    let p = o.cancel_study(&study.id).unwrap();
    assert_eq!(p.counts.canceled, 3);
    assert_eq!(p.counts.finished, 1);
    assert_eq!(p.status, StudyStatus::Canceled);
    assert!(o.live_leases().unwrap().is_empty());
    // The worker learns on its next report.
    assert!(matches!(
        o.report_result(&b.instance.id, &w.id, Outcome::Success),
        Err(OrchestratorError::AlreadyTerminal(_))
    ));
    assert!(o.acquire_next(&w.id).unwrap().is_none());
    assert!(matches!(o.cancel_study(&study.id), Err(OrchestratorError::WrongState(_))));

    let done = study_of(&o, small_template(1), 1);
    o.start_study(&done.id).unwrap();
    let c = o.acquire_next(&w.id).unwrap().unwrap();
    o.report_result(&c.instance.id, &w.id, Outcome::Success).unwrap();
    assert!(matches!(o.cancel_study(&done.id), Err(OrchestratorError::WrongState(_))));
}

#[test]
fn progress_reports_eta_after_first_finish() {
    let (o, clock) = orchestrator(policy());
    let study = study_of(&o, small_template(2), 3);
    let p = o.start_study(&study.id).unwrap();
    assert_eq!(p.counts.pending, 6);
    assert!(p.eta_s.is_none());
    assert!(matches!(o.progress(&"nope".into()), Err(OrchestratorError::UnknownStudy(_))));

    let w = o.register_worker(labels()).unwrap();
    for _ in 0..3 {
        let a = o.acquire_next(&w.id).unwrap().unwrap();
        o.report_started(&a.instance.id, &w.id).unwrap();
        clock.advance(Duration::seconds(10));
        o.heartbeat(&w.id).unwrap();
        o.report_result(&a.instance.id, &w.id, Outcome::Success).unwrap();
    }
    let p = o.progress(&study.id).unwrap();
    assert_eq!(p.counts.total(), 6);
    assert_eq!(p.counts.finished, 3);
    assert!(p.throughput_per_min >= 0.0);
    assert_eq!(p.throughput_per_min, 6.0);
    assert_eq!(p.eta_s, Some(30.0));
}

#[test]
fn file_store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let clock = clock();
    let (study_id, before) = {
        let o = Orchestrator::open(dir.path(), policy(), clock.clone()).unwrap();
        let study = study_of(&o, small_template(3), 2);
        o.start_study(&study.id).unwrap();
        let w = o.register_worker(labels()).unwrap();
        for _ in 0..2 {
            let a = o.acquire_next(&w.id).unwrap().unwrap();
            o.report_started(&a.instance.id, &w.id).unwrap();
            o.ingest_metrics(&a.instance.id, vec![MetricInput { metric: "m".into(), value: 1.0, wall_offset_ms: None }])
                .unwrap();
            o.report_result(&a.instance.id, &w.id, Outcome::Success).unwrap();
        }
        o.acquire_next(&w.id).unwrap().unwrap();
        (study.id.clone(), o.progress(&study.id).unwrap())
    };
    let o = Orchestrator::open(dir.path(), policy(), clock.clone()).unwrap();
    let after = o.progress(&study_id).unwrap();
    assert_eq!(after.counts, before.counts);
    assert_eq!(after.counts.leased, 1);
    assert_eq!(o.status_counts(&study_id).unwrap(), after.counts);
    assert_eq!(o.live_leases().unwrap().len(), 1);

    // The leased instance is reclaimed by the first reap after expiry.
    let at = clock.advance(Duration::seconds(601));
    let actions = o.reap(at).unwrap();
    assert!(actions.iter().any(|a| matches!(a, ReapAction::LeaseExpired { new_status: ExperimentStatus::Pending, .. })));
}

#[test]
fn torn_final_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let clock = clock();
    {
        let o = Orchestrator::open(dir.path(), policy(), clock.clone()).unwrap();
        study_of(&o, small_template(2), 1);
    }
    let log = dir.path().join("events.jsonl");
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.extend_from_slice(b"{\"event\":\"heartb");
    std::fs::write(&log, &bytes).unwrap();

    let o = Orchestrator::open(dir.path(), policy(), clock.clone()).unwrap();
    assert_eq!(o.studies().unwrap().len(), 1);
    o.register_worker(labels()).unwrap();
    drop(o);
    let o = Orchestrator::open(dir.path(), policy(), clock).unwrap();
    assert_eq!(o.workers().unwrap().len(), 1);
}

#[test]
fn schema_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("meta.json"), r#"{"schema_version":99}"#).unwrap();
    assert!(matches!(
        Orchestrator::open(dir.path(), policy(), clock()),
        Err(OrchestratorError::SchemaMismatch { found: 99, expected: SCHEMA_VERSION })
    ));
}

#[test]
fn events_round_trip_through_json() {
    let store = MemoryStore::new();
    let c = clock();
    let o = Orchestrator::from_parts(Box::new(store.clone()), vec![], policy(), c.clone()).unwrap();
    let study = study_of(&o, small_template(2), 1);
    o.start_study(&study.id).unwrap();
    let w = o.register_worker(labels()).unwrap();
    let a = o.acquire_next(&w.id).unwrap().unwrap();
    o.report_result(&a.instance.id, &w.id, Outcome::Failure { detail: "boom".into() }).unwrap();

    let events = store.events();
    for ev in &events {
        let text = serde_json::to_string(ev).unwrap();
        let back: Event = serde_json::from_str(&text).unwrap();
        assert_eq!(&back, ev, "{text}");
    }
    let replayed = Orchestrator::from_parts(Box::new(MemoryStore::new()), events, policy(), c).unwrap();
    assert_eq!(replayed.progress(&study.id).unwrap(), o.progress(&study.id).unwrap());
    assert_eq!(replayed.drill_down(&a.instance.id).unwrap(), o.drill_down(&a.instance.id).unwrap());
}
