//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line
//! (run with `--nocapture` to see them) before asserting.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use narrative_core::baselines::{dummy_fit_predict, logreg_fit, logreg_gradient, logreg_loss, logreg_predict, run_baseline, tree_fit, tree_predict, BaselineKind, Encoder, LogRegHyper, TreeHyper};
use narrative_core::data::{load_dataset, split_dataset, Cell, ColumnSchema, DataFormat, Dataset, LoadOptions, Row, SchemaSidecar, RowId, Split, SplitRatios};
use narrative_core::ensemble::{majority_vote, select_best_triple};
use narrative_core::lexicon::{herdan_text, tokenize};
use narrative_core::metrics::{kt_score, kt_to_accuracy, neg_log10_accuracy};
use narrative_core::obfuscate::{apply_transforms, invert_narrative, parse_transform_spec};
use narrative_core::report::{Published, PUBLISHED_ENSEMBLE_ROW};
use narrative_core::stats::{ols_trend, t_sf, wilcoxon_signed_rank, wilcoxon_with, WilcoxonMethod};
use narrative_core::synth::{generate, verify_stats, SynthConfig};
use narrative_core::trainer::{message_row_ids, StopReason, Trainer, NullSink, OVERSEER_PROMPT, ROUND_ZERO_PROMPT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, title: &str, ok: bool, detail: impl AsRef<str>) {
    println!("{} criterion {n:>2} ({title}): {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} ({title}) failed: {}", detail.as_ref());
}

#[test]
fn criterion_01_kt_accuracy_cross_consistency() {
    let t = Instant::now();
    let p = Published::bundled();
    let mut worst: (f64, String) = (0.0, String::new());
    for ds in &p.datasets {
        let row = p.rows_for(ds).into_iter().find(|r| r.model == PUBLISHED_ENSEMBLE_ROW).unwrap();
        let gap = (neg_log10_accuracy(row.accuracy) - row.s).abs();
        if gap > worst.0 || worst.1.is_empty() {
            worst = (gap, ds.clone());
        }
    }
    let ok = worst.0 <= 0.005 && p.datasets.len() == 6 && t.elapsed().as_secs_f64() < 1.0;
    verdict(1, "KT/accuracy consistency", ok, format!("largest |-log10(acc) - S| = {:.4} ({})", worst.0, worst.1));
}

#[test]
fn criterion_02_kt_roundtrip() {
    let t = Instant::now();
    let mut bad = vec![];
    for n in 1..=500u64 {
        for c in 0..=n {
            let back = kt_to_accuracy(kt_score(c, n).unwrap(), n);
            if back != c as f64 / n as f64 {
                bad.push((c, n));
            }
        }
    }
    // n = 0 has no KT score; the inverse maps it to accuracy 0.
    let ok = bad.is_empty() && kt_score(0, 0).is_err() && t.elapsed().as_secs_f64() < 1.0;
    verdict(2, "KT roundtrip", ok, format!("{} mismatches over 0 <= c <= n <= 500; first {:?}", bad.len(), bad.first()));
}

#[test]
fn criterion_03_dummy_baseline_s() {
    let t = Instant::now();
    let data = generate(&SynthConfig::espionage(7)).unwrap();
    let ds = &data.dataset;
    let pos = ds.rows.iter().filter(|r| r.label == ds.positive_label).count();
    let split = split_dataset(ds, SplitRatios::default(), 7).unwrap();
    let r = dummy_fit_predict(ds, &split).unwrap();
    let s = r.test_metrics.kt.s;
    let ok = (s - 0.5).abs() <= 0.01 && t.elapsed().as_secs_f64() < 1.0;
    verdict(
        3,
        "dummy baseline S",
        ok,
        format!("{pos}/{} positive, test accuracy {:.3}, S = {s:.3} (target 0.500 +/- 0.01)", ds.rows.len(), r.test_metrics.accuracy),
    );
}

#[test]
fn criterion_04_trainer_protocol() {
    let t = Instant::now();
    let ds = common::threshold_dataset(40);
    let split = split_dataset(&ds, SplitRatios::default(), 11).unwrap();
    let log = Arc::new(Mutex::new(vec![]));
    let cfg = common::mock_config(5);
    let trainer = Trainer::new(
        cfg.clone(),
        common::gateway(common::overseer(&["label 1 if x >= 30, otherwise 0"], log.clone())),
        common::gateway(common::underling()),
    );
    let run = trainer.run(&ds, &split, &mut NullSink).unwrap();

    let a = run.rounds[0].prompt == ROUND_ZERO_PROMPT;
    let best = run.best_round_index.unwrap();
    let b = run.stop_reason == Some(StopReason::Patience) && run.rounds.len() == best + cfg.patience + 1;
    let messages = log.lock().unwrap().clone();
    let train = split.ids(Split::Train);
    let shown: BTreeSet<RowId> = messages.iter().flat_map(|m| message_row_ids(m)).collect();
    let c = !shown.is_empty() && shown.iter().all(|id| train.contains(id));
    let d = !messages.is_empty() && messages.iter().all(|m| m.starts_with(OVERSEER_PROMPT));
    let ok = a && b && c && d && t.elapsed().as_secs_f64() < 5.0;
    verdict(
        4,
        "trainer protocol",
        ok,
        format!(
            "(a) round-0 prompt {a}; (b) best {best}, {} rounds, stop {:?}: {b}; (c) {} shown ids all train: {c}; (d) {} messages start verbatim: {d}",
            run.rounds.len(),
            run.stop_reason,
            shown.len(),
            messages.len()
        ),
    );
}

#[test]
fn criterion_05_ensemble_correctness() {
    let t = Instant::now();
    let mut truth_table = true;
    for bits in 0..8u8 {
        let l = |i: u8| if bits >> i & 1 == 1 { "1" } else { "0" };
        let (a, b, c) = (l(0), l(1), l(2));
        let ones = [a, b, c].iter().filter(|x| **x == "1").count();
        let mode = if ones >= 2 { "1" } else { "0" };
        truth_table &= majority_vote(a, b, c) == mode;
    }

    let ds = common::threshold_dataset(60);
    let split = split_dataset(&ds, SplitRatios::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let runs: Vec<_> = (0..5)
        .map(|k| {
            // each run flips a random ~30% of rows
            let preds: BTreeMap<RowId, String> = ds
                .rows
                .iter()
                .map(|r| {
                    let flip = rng.random_bool(0.3);
                    (r.id.clone(), if flip { ds.other_label(&r.label).to_string() } else { r.label.clone() })
                })
                .collect();
            common::fake_run(&format!("run-{k}"), &ds, &split, &preds, common::at(2025, 1, 1 + k as u32))
        })
        .collect();
    let sel = select_best_triple(&runs, &ds, &split, None, 1).unwrap();

    // Independent re-enumeration: count agreeing votes by hand.
    let val = split.ids(Split::Validation);
    let truth = ds.truth();
    let mut best: Option<(usize, [usize; 3])> = None;
    let mut scored = 0;
    for i in 0..5 {
        for j in i + 1..5 {
            for k in j + 1..5 {
                scored += 1;
                let correct = val
                    .iter()
                    .filter(|id| {
                        let votes = [i, j, k].iter().filter(|&&m| runs[m].rounds[0].predictions[*id].label == "1").count();
                        (if votes >= 2 { "1" } else { "0" }) == truth[*id]
                    })
                    .count();
                if best.is_none_or(|(c, _)| correct > c) {
                    best = Some((correct, [i, j, k]));
                }
            }
        }
    }
    let (correct, idx) = best.unwrap();
    let expect = idx.map(|m| runs[m].run_id.clone());
    let ok = truth_table
        && sel.triples_scored == 10
        && scored == 10
        && sel.member_run_ids == expect
        && sel.validation_metrics.counts.correct() as usize == correct
        && t.elapsed().as_secs_f64() < 5.0;
    verdict(
        5,
        "ensemble correctness",
        ok,
        format!("truth table {truth_table}; {} triples scored; selected {:?}, oracle {:?} ({correct}/{} correct)", sel.triples_scored, sel.member_run_ids, expect, val.len()),
    );
}

#[test]
fn criterion_06_wilcoxon() {
    let t = Instant::now();
    let small = wilcoxon_signed_rank(&[(1.0, 0.0), (0.0, 2.0), (3.0, 0.0)]).unwrap();
    let exact_ok = (small.p_value - 0.75).abs() < 1e-12 && small.method == WilcoxonMethod::Exact;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shift = rng.random_range(-0.5..0.5);
        let pairs: Vec<(f64, f64)> = (0..15).map(|_| (rng.random_range(-1.0..1.0) + shift, 0.0)).collect();
        let e = wilcoxon_with(&pairs, Some(WilcoxonMethod::Exact)).unwrap();
        let a = wilcoxon_with(&pairs, Some(WilcoxonMethod::NormalApprox)).unwrap();
        assert_eq!(e.n_effective, 15);
        worst = worst.max((e.p_value - a.p_value).abs());
    }
    let ok = exact_ok && worst <= 0.02 && t.elapsed().as_secs_f64() < 10.0;
    verdict(6, "Wilcoxon", ok, format!("exact p(1,-2,3) = {}; max |exact - normal| over 100 instances = {worst:.4}", small.p_value));
}

#[test]
fn criterion_07_trend_statistics() {
    let t = Instant::now();
    let p = 2.0 * t_sf(2.776, 4.0);
    let dates: Vec<_> = (0..6).map(|i| common::at(2023 + i, 3, 1)).collect();
    let line: Vec<_> = dates.iter().map(|d| (*d, 0.5 - 0.1 * narrative_core::stats::years_since_epoch(*d))).collect();
    let fit = ols_trend(&line).unwrap();
    let two = ols_trend(&line[..2]).unwrap();
    let ok = (p - 0.05).abs() <= 0.001
        && (fit.slope_per_year + 0.1).abs() < 1e-9
        && fit.p_value == Some(0.0)
        && two.p_value.is_none()
        && t.elapsed().as_secs_f64() < 1.0;
    verdict(7, "trend statistics", ok, format!("two-sided p(2.776, 4) = {p:.4}; perfect slope {} p {:?}; 2-point p {:?}", fit.slope_per_year, fit.p_value, two.p_value));
}

/// Least squares of ln V(i) on ln i over every prefix, written out longhand.
fn herdan_oracle(text: &str) -> f64 {
    let toks = tokenize(text);
    let mut seen = BTreeSet::new();
    let pts: Vec<(f64, f64)> = toks
        .iter()
        .enumerate()
        .map(|(i, w)| {
            seen.insert(w.clone());
            (((i + 1) as f64).ln(), (seen.len() as f64).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn criterion_08_herdan() {
    let t = Instant::now();
    let distinct = herdan_text("a b c d").unwrap().beta;
    let same = herdan_text("a a a a").unwrap().beta;
    let alt = herdan_text("a b a b a b").unwrap().beta;
    let oracle = herdan_oracle("a b a b a b");
    let ok = (distinct - 1.0).abs() < 1e-12
        && same.abs() < 1e-12
        && (alt - oracle).abs() <= 0.001
        && (alt - 0.346).abs() <= 0.001
        && t.elapsed().as_secs_f64() < 1.0;
    verdict(8, "Herdan", ok, format!("beta distinct {distinct}, constant {same}, alternating {alt:.6} (oracle {oracle:.6})"));
}

#[test]
fn criterion_09_synthetic_generator() {
    let t = Instant::now();
    let cfg = SynthConfig::espionage(42);
    let data = generate(&cfg).unwrap();
    let ds = &data.dataset;
    let n = ds.rows.len() as f64;
    let col = |i: usize| ds.rows.iter().map(|r| r.get(&cfg.feature_names[i]).as_number().unwrap()).collect::<Vec<f64>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m1, m2) = (mean(&col(0)), mean(&col(1)));
    let means_ok = (m1 - cfg.mean1).abs() <= 3.0 * cfg.std1 / n.sqrt() && (m2 - cfg.mean2).abs() <= 3.0 * cfg.std2 / n.sqrt();
    let separable = ds.rows.iter().all(|r| {
        let x = [r.get(&cfg.feature_names[0]).as_number().unwrap(), r.get(&cfg.feature_names[1]).as_number().unwrap()];
        data.boundary.is_positive(x) == (r.label == ds.positive_label)
    });
    let noisy_cfg = SynthConfig::potions(42);
    let noisy = generate(&noisy_cfg).unwrap();
    let flips_ok = data.flipped.is_empty()
        && noisy.flipped.len() == noisy_cfg.expected_flips()
        && verify_stats(&noisy.dataset, &noisy_cfg).flips_ok
        && verify_stats(ds, &cfg).passed;
    let ok = ds.rows.len() == 200 && means_ok && separable && flips_ok && t.elapsed().as_secs_f64() < 1.0;
    verdict(
        9,
        "synthetic generator",
        ok,
        format!("means ({m1:.2}, {m2:.2}); separable {separable}; flips {} / expected {}", noisy.flipped.len(), noisy_cfg.expected_flips()),
    );
}

#[test]
fn criterion_10_obfuscator() {
    let t = Instant::now();
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let opts = LoadOptions {
        target: Some("Survived".into()),
        id_column: Some("PassengerId".into()),
        positive_label: Some("1".into()),
        schema: Some(SchemaSidecar { columns: vec![ColumnSchema::text("Ticket")], ..Default::default() }),
        ..Default::default()
    };
    let raw = load_dataset(format!("{dir}/titanic_sample.csv").as_ref(), DataFormat::Csv, &opts).unwrap();
    let spec = parse_transform_spec(&std::fs::read_to_string(format!("{dir}/titanic_transform.json")).unwrap()).unwrap();
    let masked = apply_transforms(&raw, &spec).unwrap();
    let cell = |id: &str, col: &str| masked.row(&RowId::from(id)).unwrap().get(col).as_number();
    let age_ok = cell("1", "Treatment_Months") == Some(66.0);
    let fare = cell("11", "TcQ_mass").unwrap();
    let fare_ok = (fare - 7700.0).abs() < 1e-9;
    let text = invert_narrative("TcQ_mass < 7700", &spec);
    let text_ok = text == "Fare < 7.7";

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.random_range(0.001..1000.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let b = rng.random_range(-1000.0..1000.0);
        let x = rng.random_range(-1e4..1e4);
        let s = parse_transform_spec(&format!(r#"{{"dataset":"d","steps":[{{"op":"affine","column":"x","a":{a},"b":{b},"rename":"y"}}]}}"#)).unwrap();
        let (orig, back) = s.invert_value("y", a * x + b).unwrap();
        assert_eq!(orig, "x");
        worst = worst.max((back - x).abs() / x.abs().max(1.0));
    }
    let ok = age_ok && fare_ok && text_ok && worst <= 1e-9 && t.elapsed().as_secs_f64() < 1.0;
    verdict(10, "obfuscator", ok, format!("Age 22 -> {:?}; Fare 7.7 -> {fare}; inverted `{text}`; affine roundtrip error {worst:.2e}", cell("1", "Treatment_Months")));
}

fn separable_fixture() -> Dataset {
    // Class given by x alone with a clear gap; z is noise.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = (0..120)
        .map(|i| {
            let pos = i % 2 == 0;
            let x = if pos { rng.random_range(60.0..100.0) } else { rng.random_range(0.0..40.0) };
            Row {
                id: RowId::from(i),
                values: [("x".to_string(), Cell::Number(x)), ("z".to_string(), Cell::Number(rng.random_range(-5.0..5.0)))].into(),
                label: if pos { "yes" } else { "no" }.into(),
            }
        })
        .collect();
    Dataset::new("separable", vec![ColumnSchema::numeric("x"), ColumnSchema::numeric("z")], "y", rows, "yes", "no").unwrap()
}

#[test]
fn criterion_11_baselines() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = 3;
        let xs: Vec<Vec<f64>> = (0..12).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<bool> = (0..12).map(|_| rng.random_bool(0.5)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let (gw, gb) = logreg_gradient(&w, b, &xs, &ys, 1e-3);
        let h = 1e-6;
        for k in 0..=d {
            let (mut up, mut dn) = ((w.clone(), b), (w.clone(), b));
            if k < d {
                up.0[k] += h;
                dn.0[k] -= h;
            } else {
                up.1 += h;
                dn.1 -= h;
            }
            let num = (logreg_loss(&up.0, up.1, &xs, &ys, 1e-3) - logreg_loss(&dn.0, dn.1, &xs, &ys, 1e-3)) / (2.0 * h);
            let ana = if k < d { gw[k] } else { gb };
            worst = worst.max((num - ana).abs() / ana.abs().max(1e-3));
        }
    }

    let ds = separable_fixture();
    let all: BTreeSet<RowId> = ds.rows.iter().map(|r| r.id.clone()).collect();
    let enc = Encoder::fit(&ds, &all).unwrap();
    let fm = enc.transform(&ds, &all);
    let y: Vec<bool> = fm.row_ids.iter().map(|id| ds.row(id).unwrap().label == "yes").collect();
    let lr = logreg_fit(&fm.values, &y, LogRegHyper::default()).unwrap();
    let lr_acc = logreg_predict(&lr, &fm.values).iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    let tree = tree_fit(&fm, &y, TreeHyper::default()).unwrap();
    let tree_acc = fm.values.iter().zip(&y).filter(|(x, b)| tree_predict(&tree, x) == **b).count() as f64 / y.len() as f64;

    // No leakage: scrambling every held-out row must not change what is fitted.
    let split = split_dataset(&ds, SplitRatios::default(), 4).unwrap();
    let mut scrambled = ds.clone();
    for r in &mut scrambled.rows {
        if split.split_of(&r.id) != Some(Split::Train) {
            r.values.insert("x".into(), Cell::Number(1e6));
            r.values.insert("z".into(), Cell::Missing);
            r.label = if r.label == "yes" { "no".into() } else { "yes".into() };
        }
    }
    let fitted = |d: &Dataset| {
        let e = Encoder::fit(d, split.ids(Split::Train)).unwrap();
        let m = e.transform(d, split.ids(Split::Train));
        let y: Vec<bool> = m.row_ids.iter().map(|id| d.row(id).unwrap().label == "yes").collect();
        (e.clone(), logreg_fit(&m.values, &y, LogRegHyper::default()).unwrap(), tree_fit(&m, &y, TreeHyper::default()).unwrap())
    };
    let mut no_leak = fitted(&ds) == fitted(&scrambled);
    for kind in [BaselineKind::Dummy, BaselineKind::Logreg, BaselineKind::Tree] {
        let a = run_baseline(&ds, &split, kind).unwrap();
        let b = run_baseline(&scrambled, &split, kind).unwrap();
        no_leak &= a.train_metrics == b.train_metrics;
    }
    let ok = worst <= 1e-5 && lr_acc == 1.0 && tree_acc == 1.0 && no_leak && t.elapsed().as_secs_f64() < 10.0;
    verdict(11, "baselines", ok, format!("worst gradient rel. error {worst:.2e}; train accuracy logreg {lr_acc}, tree {tree_acc}; no leakage {no_leak}"));
}

#[test]
fn criterion_12_end_to_end_resumability() {
    let t = Instant::now();
    let outcome = common::resume::kill_and_resume(2, 45);
    let ok = outcome.identical && outcome.killed_mid_round && outcome.finished && t.elapsed().as_secs_f64() < 10.0;
    verdict(
        12,
        "end-to-end resumability",
        ok,
        format!(
            "killed after {} underling calls in round {}; resumed ledger {} bytes vs uninterrupted {} bytes; identical {}",
            outcome.kill_after, outcome.killed_round, outcome.resumed_bytes, outcome.reference_bytes, outcome.identical
        ),
    );
}
