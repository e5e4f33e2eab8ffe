use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use narrative_core::data::{split_dataset, SplitRatios};
use narrative_core::gateway::{ChatProvider, ChatRequest, FnProvider, Gateway, GatewayError, ResponseCache};
use narrative_core::store::{load_runs, Ledger, RunFilter, ENTRIES_FILE};
use narrative_core::trainer::{FixedClock, Trainer, TrainerError};

const PROMPTS: &[&str] = &["label 1 if x >= 35", "label 1 if x >= 30", "label 1 if x >= 30"];

/// Fails every call after the first `budget`, like a process dying mid-round.
struct Killer {
    inner: FnProvider,
    budget: usize,
    calls: AtomicUsize,
}

impl ChatProvider for Killer {
    fn model(&self) -> &str {
        self.inner.model()
    }
    fn temperature(&self) -> Option<f64> {
        None
    }
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(GatewayError::Config("killed".into()));
        }
        self.inner.complete(req)
    }
}

pub struct ResumeOutcome {
    pub kill_after: usize,
    pub killed_round: usize,
    pub killed_mid_round: bool,
    pub finished: bool,
    pub resumed_bytes: usize,
    pub reference_bytes: usize,
    pub identical: bool,
}

fn trainer(cache: &Path, underling: Arc<dyn ChatProvider>) -> Trainer {
    let cache = Arc::new(ResponseCache::open(cache).unwrap());
    let log = Arc::new(Mutex::new(vec![]));
    Trainer::new(
        super::mock_config(3),
        super::gateway(super::overseer(PROMPTS, log)).with_cache(cache.clone()),
        Gateway::new(underling).with_cache(cache),
    )
    .with_clock(Arc::new(FixedClock(super::at(2025, 6, 1))))
}

/// Trains on a threshold dataset of `n` rows twice: once straight through,
/// once killed partway into round `kill_round` and then resumed from the
/// ledger. Compares the two ledgers byte for byte.
pub fn kill_and_resume(kill_round: usize, n: usize) -> ResumeOutcome {
    let tmp = tempfile::tempdir().unwrap();
    let ds = super::threshold_dataset(n);
    let split = split_dataset(&ds, SplitRatios::default(), 8).unwrap();
    let per_round = split.len() - split.ids(narrative_core::data::Split::Test).len();
    let kill_after = kill_round * per_round + per_round / 3;
    let clock = || Arc::new(FixedClock(super::at(2025, 6, 1)));

    let reference_dir = tmp.path().join("reference");
    {
        let mut ledger = Ledger::open_with_clock(&reference_dir, clock()).unwrap();
        trainer(&tmp.path().join("cache-a"), Arc::new(super::underling())).run(&ds, &split, &mut ledger).unwrap();
    }

    let dir = tmp.path().join("resumed");
    let cache = tmp.path().join("cache-b");
    let killed = {
        let mut ledger = Ledger::open_with_clock(&dir, clock()).unwrap();
        let killer = Killer { inner: super::underling(), budget: kill_after, calls: AtomicUsize::new(0) };
        trainer(&cache, Arc::new(killer)).run(&ds, &split, &mut ledger)
    };
    let (runs, _) = load_runs(&dir, &RunFilter::default()).unwrap();
    let killed_round = runs.first().map_or(0, |r| r.rounds.len());
    let killed_mid_round = matches!(killed, Err(TrainerError::Fatal(_))) && killed_round == kill_round;
    let finished = {
        let mut ledger = Ledger::open_with_clock(&dir, clock()).unwrap();
        let partial = runs.into_iter().next().unwrap();
        trainer(&cache, Arc::new(super::underling())).resume(&ds, partial, &mut ledger).is_ok_and(|r| r.is_complete())
    };
    let a = std::fs::read(dir.join(ENTRIES_FILE)).unwrap();
    let b = std::fs::read(reference_dir.join(ENTRIES_FILE)).unwrap();
    ResumeOutcome {
        kill_after,
        killed_round,
        killed_mid_round,
        finished,
        resumed_bytes: a.len(),
        reference_bytes: b.len(),
        identical: a == b,
    }
}
