//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `EXPECTED_FAILURES` still print FAIL with their
//! numbers but do not fail the process; any other failure does, and so does
//! an expected failure that starts passing.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssoc_core::attention::Model;
use ssoc_core::audit::{pseudo_label_snapshot, threshold_profile};
use ssoc_core::classifier::infer;
use ssoc_core::config::TrainConfig;
use ssoc_core::dataio::{generate_mixture, split_open_world, MixtureSpec, OpenWorldSplit, SplitSpec};
use ssoc_core::eval::{evaluate, hungarian, nmi, EvalReport};
use ssoc_core::gradcheck;
use ssoc_core::parallel::with_threads;
use ssoc_core::trainer::{encode_checkpoint, metrics_csv, train, EpochReport, NoObserver, TrainObserver, TrainOutcome, TrainState};
use ssoc_core::Matrix;

const EXPECTED_FAILURES: &[&str] = &["ablation direction", "threshold sweep shape"];

const TAUS: [f64; 6] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn mixture_split(seed: u64, novel_ratio: f64) -> (OpenWorldSplit, ssoc_core::dataio::Mixture) {
    let mixture = generate_mixture(&MixtureSpec {
        class_count: 10,
        dim: 32,
        samples_per_class: 200,
        center_separation: 8.0,
        within_class_std: 1.0,
        seed,
    })
    .expect("mixture");
    let split = split_open_world(&mixture.points, &mixture.labels, &SplitSpec::new(0.5, novel_ratio, seed)).expect("split");
    (split, mixture)
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 100, seed, ..Default::default() }
}

fn score(model: &Model, split: &OpenWorldSplit) -> EvalReport {
    let pred = infer(&split.dataset.unlabeled, &model.centers.centers).expect("infer");
    evaluate(&pred, &split.ground_truth.0, split.dataset.known_classes).expect("evaluate")
}

fn nmi_of(r: &EvalReport) -> f64 {
    r.novel_nmi.unwrap_or(0.0)
}

/// Keeps clones of the state after selected epochs.
struct Snapshots {
    at: Vec<usize>,
    states: BTreeMap<usize, TrainState>,
}

impl TrainObserver for Snapshots {
    fn on_epoch(&mut self, report: &EpochReport, state: &TrainState) -> ssoc_core::Result<()> {
        if self.at.contains(&report.epoch) {
            self.states.insert(report.epoch, state.clone());
        }
        Ok(())
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(20, 0).expect("gradient check");
    let elapsed = start.elapsed();
    let worst = report.max_error();
    Outcome {
        name: "gradient integrity",
        pass: report.instances.len() >= 20 && worst < 1e-5 && elapsed < Duration::from_secs(30),
        detail: format!("{} instances, max relative error {worst:.2e}, {elapsed:.2?}", report.instances.len()),
    }
}

struct Reference {
    split: OpenWorldSplit,
    cfg: TrainConfig,
    outcome: TrainOutcome,
    snapshots: Snapshots,
}

fn end_to_end() -> (Outcome, Reference) {
    let (split, mixture) = mixture_split(7, 0.5);
    let oracle_hits = mixture
        .points
        .iter_rows()
        .zip(&mixture.labels)
        .filter(|(p, &y)| {
            let nearest = (0..mixture.centers.rows())
                .min_by(|&a, &b| {
                    let da: f64 = p.iter().zip(mixture.centers.row(a)).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = p.iter().zip(mixture.centers.row(b)).map(|(x, c)| (x - c).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            nearest == y
        })
        .count();
    let oracle = oracle_hits as f64 / mixture.labels.len() as f64;

    let cfg = config(7);
    let mut snapshots = Snapshots { at: vec![0, 10], states: BTreeMap::new() };
    let start = Instant::now();
    let outcome = with_threads(1, || train(&split.dataset, &cfg, &mut snapshots)).expect("training");
    let elapsed = start.elapsed();
    let best = score(&outcome.state.best, &split);
    let last = score(outcome.model(), &split);
    let pass = oracle >= 0.999
        && outcome.reports.len() <= 100
        && best.all_acc >= 0.95
        && nmi_of(&best) >= 0.90
        && elapsed < Duration::from_secs(300);
    let outcome_line = Outcome {
        name: "end-to-end discovery",
        pass,
        detail: format!(
            "oracle {oracle:.4}; best checkpoint (epoch {:?}) all_acc {:.4} nmi {:.4}; final epoch all_acc {:.4} nmi {:.4}; {} epochs, {elapsed:.2?}",
            outcome.state.best_epoch,
            best.all_acc,
            nmi_of(&best),
            last.all_acc,
            nmi_of(&last),
            outcome.reports.len()
        ),
    };
    if let Some(last_epoch) = outcome.state.epoch.checked_sub(1) {
        snapshots.states.insert(last_epoch, outcome.state.clone());
    }
    (outcome_line, Reference { split, cfg, outcome, snapshots })
}

fn ablation(reference: &Reference) -> Outcome {
    let run = |edit: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = reference.cfg.clone();
        edit(&mut cfg);
        let out = with_threads(1, || train(&reference.split.dataset, &cfg, &mut NoObserver)).expect("training");
        (score(&out.state.best, &reference.split), score(out.model(), &reference.split))
    };
    let full = (score(&reference.outcome.state.best, &reference.split), score(reference.outcome.model(), &reference.split));
    let no_re = run(&|c| c.weights.beta = 0.0);
    let no_ce = run(&|c| {
        c.weights.gamma = 0.0;
        c.weights.delta = 0.0;
    });
    let chance = 1.0 / reference.split.dataset.class_count() as f64;
    let re_ok = nmi_of(&no_re.0) < nmi_of(&full.0);
    let ce_ok = no_ce.0.all_acc < 2.0 * chance;
    Outcome {
        name: "ablation direction",
        pass: re_ok && ce_ok,
        detail: format!(
            "nmi full {:.4} vs beta=0 {:.4} ({}); all_acc without ce {:.4} vs bound {:.2} ({}); final epoch: nmi full {:.4} beta=0 {:.4}, all_acc without ce {:.4}",
            nmi_of(&full.0),
            nmi_of(&no_re.0),
            if re_ok { "lower" } else { "not lower" },
            no_ce.0.all_acc,
            2.0 * chance,
            if ce_ok { "collapsed" } else { "no collapse" },
            nmi_of(&full.1),
            nmi_of(&no_re.1),
            no_ce.1.all_acc
        ),
    }
}

fn threshold_sweep(reference: &Reference) -> Outcome {
    let known = reference.split.dataset.known_classes;
    let mut monotone = true;
    let mut counts = Vec::new();
    let mut final_profile = Vec::new();
    for (&epoch, state) in &reference.snapshots.states {
        let labels = pseudo_label_snapshot(state, &reference.split.dataset, &reference.cfg, epoch).expect("snapshot");
        let profile = threshold_profile(&labels, &TAUS, &reference.split.ground_truth, known).expect("profile");
        let c: Vec<usize> = profile.iter().map(|p| p.selected).collect();
        monotone &= c.windows(2).all(|w| w[1] <= w[0]);
        counts.push(format!("epoch {epoch} {c:?}"));
        final_profile = profile;
    }
    let acc = |tau: f64| {
        final_profile
            .iter()
            .find(|p| p.tau == tau)
            .and_then(|p| p.novel_accuracy)
            .unwrap_or(0.0)
    };
    let (lo, hi) = (acc(0.4), acc(0.9));
    Outcome {
        name: "threshold sweep shape",
        pass: monotone && reference.snapshots.states.len() >= 2 && hi >= lo,
        detail: format!("counts {}; final accuracy tau 0.4 {lo:.4}, tau 0.9 {hi:.4}", counts.join(", ")),
    }
}

/// Best total weight over every injective row-to-column map.
fn brute_force(w: &Matrix) -> f64 {
    fn go(w: &Matrix, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == w.rows() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for c in 0..w.cols() {
            if !used[c] {
                used[c] = true;
                best = best.max(w.row(row)[c] + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let t = if w.rows() <= w.cols() { w.clone() } else { w.transpose() };
    go(&t, 0, &mut vec![false; t.cols()])
}

fn hungarian_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let start = Instant::now();
    let mut mismatches = 0;
    for i in 0..1000 {
        // integer weights make the comparison exact; every fourth matrix is
        // square with signed fractional weights instead
        let (rows, cols, data): (usize, usize, Vec<f64>) = if i % 4 == 3 {
            let n = rng.random_range(1..=6);
            (n, n, (0..n * n).map(|_| rng.random_range(-8..=8) as f64 * 0.25).collect())
        } else {
            let r = rng.random_range(1..=6);
            let c = rng.random_range(1..=6);
            (r, c, (0..r * c).map(|_| rng.random_range(0..=100) as f64).collect())
        };
        let w = Matrix::new(rows, cols, data).unwrap();
        if hungarian(&w).unwrap().total_weight != brute_force(&w) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        name: "hungarian oracle",
        pass: mismatches == 0 && elapsed < Duration::from_secs(10),
        detail: format!("1000 matrices up to 6x6, {mismatches} mismatches, {elapsed:.2?}"),
    }
}

fn labels_case() -> impl Strategy<Value = (usize, usize, Vec<usize>, Vec<usize>, u64)> {
    (1usize..4, 1usize..4, 1usize..80, any::<u64>()).prop_flat_map(|(known, novel, n, seed)| {
        let k = known + novel;
        (
            Just(known),
            Just(novel),
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(0..k, n),
            Just(seed),
        )
    })
}

/// Map that shuffles ids `known..known + novel` and fixes the rest.
fn novel_shuffle(known: usize, novel: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (known..known + novel).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..known).chain(ids).collect()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-12,
        (None, None) => true,
        _ => false,
    }
}

fn evaluation_invariances() -> Outcome {
    let mut runner = TestRunner::new(PropConfig { cases: 512, failure_persistence: None, ..PropConfig::default() });
    let mut failures = Vec::new();

    let r = runner.run(&labels_case(), |(known, novel, truth, pred, seed)| {
        let map = novel_shuffle(known, novel, seed);
        let permuted: Vec<usize> = truth.iter().map(|&t| map[t]).collect();
        let a = evaluate(&pred, &truth, known).unwrap();
        let b = evaluate(&pred, &permuted, known).unwrap();
        prop_assert!(close(a.seen_acc, b.seen_acc) && close(a.novel_acc, b.novel_acc));
        prop_assert!(close(Some(a.all_acc), Some(b.all_acc)) && close(a.novel_nmi, b.novel_nmi));
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("novel permutation: {e}"));
    }

    let r = runner.run(&labels_case(), |(known, novel, truth, pred, seed)| {
        let map = novel_shuffle(known, novel, seed);
        let relabeled: Vec<usize> = pred.iter().map(|&p| map[p]).collect();
        let a = evaluate(&pred, &truth, known).unwrap();
        let b = evaluate(&relabeled, &truth, known).unwrap();
        prop_assert!(close(a.seen_acc, b.seen_acc));
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("seen accuracy: {e}"));
    }

    let r = runner.run(&(labels_case(), any::<u64>()), |((known, novel, a, b, s1), s2)| {
        let k = known + novel;
        let shuffle = |s: u64| {
            let mut m: Vec<usize> = (0..k).collect();
            m.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            m
        };
        let (ma, mb) = (shuffle(s1), shuffle(s2));
        let ra: Vec<usize> = a.iter().map(|&x| ma[x]).collect();
        let rb: Vec<usize> = b.iter().map(|&x| mb[x]).collect();
        let base = nmi(&a, &b).unwrap();
        prop_assert!((base - nmi(&ra, &rb).unwrap()).abs() < 1e-12);
        prop_assert!((base - nmi(&b, &a).unwrap()).abs() < 1e-12);
        Ok(())
    });
    if let Err(e) = r {
        failures.push(format!("nmi relabeling: {e}"));
    }

    Outcome {
        name: "evaluation invariances",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "3 properties x 512 cases".into()
        } else {
            failures.join("; ")
        },
    }
}

fn determinism(reference: &Reference) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.ckpt");
    let run = |threads: usize| {
        let out = with_threads(threads, || train(&reference.split.dataset, &reference.cfg, &mut NoObserver)).expect("training");
        (metrics_csv(&out.reports), encode_checkpoint(&out.state, &path).expect("encode"))
    };
    let base = (metrics_csv(&reference.outcome.reports), encode_checkpoint(&reference.outcome.state, &path).expect("encode"));
    let same_threads = run(1) == base;
    let four_threads = run(4) == base;
    Outcome {
        name: "determinism",
        pass: same_threads && four_threads,
        detail: format!("rerun identical {same_threads}, 4 threads identical {four_threads}"),
    }
}

fn robustness() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let acc = |novel_ratio: f64| {
            let (split, _) = mixture_split(seed, novel_ratio);
            let out = with_threads(1, || train(&split.dataset, &config(seed), &mut NoObserver)).expect("training");
            score(&out.state.best, &split).all_acc
        };
        let (half, most) = (acc(0.5), acc(0.9));
        ok &= most >= 0.5 * half;
        parts.push(format!("seed {seed}: {half:.4} at 0.5, {most:.4} at 0.9"));
    }
    Outcome { name: "robustness trend", pass: ok, detail: parts.join("; ") }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut outcomes = vec![gradient_integrity()];
    let (e2e, reference) = end_to_end();
    outcomes.push(e2e);
    outcomes.push(ablation(&reference));
    outcomes.push(threshold_sweep(&reference));
    outcomes.push(hungarian_oracle());
    outcomes.push(evaluation_invariances());
    outcomes.push(determinism(&reference));
    outcomes.push(robustness());

    let mut unexpected = 0;
    for o in &outcomes {
        let expected_fail = EXPECTED_FAILURES.contains(&o.name);
        let tag = match (o.pass, expected_fail) {
            (true, false) => "PASS",
            (false, true) => "FAIL (expected)",
            (true, true) => "PASS (unexpected)",
            (false, false) => "FAIL",
        };
        if o.pass == expected_fail {
            unexpected += 1;
        }
        println!("{tag:<18} {:<24} {}", o.name, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed} of {} criteria passed, {unexpected} unexpected, {:.2?}",
        outcomes.len(),
        started.elapsed()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
