mod common;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use narrative_core::data::{split_dataset, Split, SplitRatios};
use narrative_core::gateway::{FnProvider, GatewayError};
use narrative_core::store::{load, Ledger, RunFilter};
use narrative_core::trainer::{evaluate_on_test, FixedClock, NullSink, StopReason, Trainer, TrainerError, ROUND_ZERO_PROMPT};

#[test]
fn perfect_rule_stops_at_round_one() {
    let ds = common::threshold_dataset(40);
    let split = split_dataset(&ds, SplitRatios::default(), 3).unwrap();
    let log = Arc::new(Mutex::new(vec![]));
    let t = Trainer::new(common::mock_config(1), common::gateway(common::overseer(&["label 1 if x >= 20"], log.clone())), common::gateway(common::underling()));
    let run = t.run(&ds, &split, &mut NullSink).unwrap();
    assert_eq!(run.rounds.len(), 2);
    assert_eq!(run.stop_reason, Some(StopReason::PerfectValidation));
    assert_eq!(run.best_round_index, Some(1));
    assert_eq!(run.rounds[1].validation_metrics.accuracy, 1.0);
    assert_eq!(run.rounds[1].train_metrics.accuracy, 1.0);
    assert_eq!(log.lock().unwrap().len(), 1);
    // Training touches train and validation rows only.
    assert!(run.rounds.iter().all(|r| r.predictions.keys().all(|id| split.split_of(id) != Some(Split::Test))));

    let test = evaluate_on_test(&run, &ds, &t.underling, 4, &FixedClock(common::at(2025, 1, 1))).unwrap();
    assert_eq!(test.metrics.accuracy, 1.0);
    assert_eq!(test.predictions.len(), split.ids(Split::Test).len());
}

#[test]
fn interrupt_then_resume_from_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = common::threshold_dataset(100);
    let split = split_dataset(&ds, SplitRatios::default(), 3).unwrap();
    let prompts = ["label 1 if x >= 80", "label 1 if x >= 70", "label 1 if x >= 60", "label 1 if x >= 50"];
    let flag = Arc::new(AtomicBool::new(false));
    let rounds_seen = Arc::new(AtomicUsize::new(0));
    let (f, seen) = (flag.clone(), rounds_seen.clone());
    let inner = common::overseer(&prompts, Arc::new(Mutex::new(vec![])));
    let overseer = FnProvider::new("mock-overseer", move |req| {
        // Ask to stop while round 2 is being prepared.
        if seen.fetch_add(1, Ordering::SeqCst) == 1 {
            f.store(true, Ordering::SeqCst);
        }
        narrative_core::gateway::ChatProvider::complete(&inner, req)
    });
    let clock = Arc::new(FixedClock(common::at(2025, 2, 2)));
    let partial = {
        let mut ledger = Ledger::open_with_clock(tmp.path(), clock.clone()).unwrap();
        let t = Trainer::new(common::mock_config(2), common::gateway(overseer), common::gateway(common::underling())).with_interrupt(flag);
        t.run(&ds, &split, &mut ledger).unwrap()
    };
    assert_eq!(partial.rounds.len(), 3);
    assert!(!partial.is_complete());

    let loaded = load(tmp.path(), &RunFilter::dataset("threshold")).unwrap();
    assert!(loaded.problems.is_empty(), "{:?}", loaded.problems);
    assert_eq!(loaded.runs, vec![partial.clone()]);

    let mut ledger = Ledger::open_with_clock(tmp.path(), clock).unwrap();
    let t = Trainer::new(common::mock_config(2), common::gateway(common::overseer(&prompts, Arc::new(Mutex::new(vec![])))), common::gateway(common::underling()));
    let done = t.resume(&ds, loaded.runs[0].clone(), &mut ledger).unwrap();
    assert_eq!(done.stop_reason, Some(StopReason::PerfectValidation));
    assert_eq!(done.rounds.len(), 5);
    assert_eq!(done.rounds[..3], partial.rounds[..]);
    assert_eq!(done.rounds[0].prompt, ROUND_ZERO_PROMPT);
    drop(ledger);
    assert_eq!(load(tmp.path(), &RunFilter::default()).unwrap().runs, vec![done]);
}

#[test]
fn fatal_overseer_error_propagates() {
    let ds = common::threshold_dataset(20);
    let split = split_dataset(&ds, SplitRatios::default(), 3).unwrap();
    let overseer = FnProvider::new("mock-overseer", |_| Err(GatewayError::Auth { status: 401 }));
    let t = Trainer::new(common::mock_config(1), common::gateway(overseer), common::gateway(common::underling()));
    let err = t.run(&ds, &split, &mut NullSink).unwrap_err();
    assert!(matches!(err, TrainerError::Overseer(GatewayError::Auth { .. })), "{err}");
}
