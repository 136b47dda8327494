//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chatwatch::config::EngineConfig;
use chatwatch::context::{build_contexts, ModeState};
use chatwatch::online::{
    inject_probe_users, lines_source, probe_checks, run_online_with, EngineEvent, LabelHandle,
    ScoreboardEvent,
};
use chatwatch::parser::{Button, ChatEvent, MessageClass};
use chatwatch::pca::gram_svd;
use chatwatch::pipeline::run_batch;
use chatwatch::profile::{FeatureMatrix, FeatureRow, ProfileStore, N_FEATURES};
use chatwatch::scoring::{
    dknn_distances, kmeans_distances, label_for, normalize_scores, score_matrix,
    single_feature_rate, sknn_distances, Label, ScorerConfig, ScoringMethod,
};
use chatwatch::synth::{
    default_probes, generate_probe_events, generate_stream, serialize_stream, Scenario,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

fn oracle_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Sorted distances from row `i` to every other row.
fn oracle_neighbors(rows: &[FeatureRow], i: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..rows.len())
        .filter(|&j| j != i)
        .map(|j| oracle_dist(&rows[i], &rows[j]))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d
}

fn oracle_dknn(rows: &[FeatureRow], k: usize) -> Vec<f64> {
    (0..rows.len())
        .map(|i| oracle_neighbors(rows, i)[k - 1])
        .collect()
}

fn oracle_sknn(rows: &[FeatureRow], k: usize) -> Vec<f64> {
    (0..rows.len())
        .map(|i| {
            let mut s = 0.0;
            for d in &oracle_neighbors(rows, i)[..k] {
                s += d;
            }
            s
        })
        .collect()
}

fn oracle_kmeans(rows: &[FeatureRow]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    for r in rows {
        for j in 0..N_FEATURES {
            mean[j] += r[j];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    rows.iter().map(|r| oracle_dist(r, &mean)).collect()
}

/// Random rows; some matrices are coarsely quantized so ties and duplicate
/// rows occur.
fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureRow> {
    let levels = match rng.gen_range(0..3) {
        0 => Some(3.0),
        1 => Some(10.0),
        _ => None,
    };
    (0..n)
        .map(|_| {
            std::array::from_fn(|_| {
                let x: f64 = rng.gen();
                levels.map_or(x, |l| (x * l).floor() / l)
            })
        })
        .collect()
}

fn check_monotone(m: &FeatureMatrix) -> Result<(), String> {
    for (u, r) in m.usernames.iter().zip(&m.rows) {
        ensure!(
            r[0] <= r[1] && r[1] <= r[2],
            "{u}: f1..f3 not monotone: {:?}",
            &r[..3]
        );
        ensure!(
            r[7] <= r[8] && r[8] <= r[9],
            "{u}: f8..f10 not monotone: {:?}",
            &r[7..]
        );
    }
    Ok(())
}

// ------------------------------------------------------------- criteria

fn c1_scorer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for m in 0..20 {
        let n = rng.gen_range(51..=200);
        let rows = random_rows(&mut rng, n);
        for k in [1, 5, 50] {
            let d = dknn_distances(&rows, k).map_err(|e| e.to_string())?;
            ensure!(
                d == oracle_dknn(&rows, k),
                "matrix {m} (n={n}): DKNN k={k} differs from oracle"
            );
            let s = sknn_distances(&rows, k).map_err(|e| e.to_string())?;
            ensure!(
                s == oracle_sknn(&rows, k),
                "matrix {m} (n={n}): SKNN k={k} differs from oracle"
            );
            checked += 2;
        }
        let (_, km) = kmeans_distances(&rows).map_err(|e| e.to_string())?;
        let worst = km
            .iter()
            .zip(oracle_kmeans(&rows))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(worst <= 1e-12, "matrix {m}: kmeans off by {worst:e}");
        checked += 1;
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(10), "took {t:?}");
    Ok(format!("{checked} comparisons on 20 matrices, {t:.2?}"))
}

fn c2_sknn1_is_dknn1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in 0..100 {
        let n = rng.gen_range(2..=200);
        let rows = random_rows(&mut rng, n);
        let d = dknn_distances(&rows, 1).map_err(|e| e.to_string())?;
        let s = sknn_distances(&rows, 1).map_err(|e| e.to_string())?;
        let same = d.iter().zip(&s).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "matrix {m} (n={n}) differs");
    }
    Ok("100 matrices bitwise equal".into())
}

fn c3_normalization() -> Outcome {
    let s = normalize_scores(&[2.0, 4.0, 6.0]);
    ensure!(s == vec![0.0, 50.0, 100.0], "[2,4,6] -> {s:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let n = rng.gen_range(2..100);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let a = rng.gen_range(0.01..100.0);
        let b = rng.gen_range(-50.0..50.0);
        let scaled: Vec<f64> = raw.iter().map(|x| a * x + b).collect();
        let l1: Vec<Label> = normalize_scores(&raw)
            .iter()
            .map(|s| label_for(*s, 40.0))
            .collect();
        let l2: Vec<Label> = normalize_scores(&scaled)
            .iter()
            .map(|s| label_for(*s, 40.0))
            .collect();
        // Rounding can move a score sitting exactly on the threshold; such
        // draws have probability zero with continuous raw values.
        ensure!(
            l1 == l2,
            "trial {trial}: labels changed under x -> {a}x + {b}"
        );
    }

    let flat = normalize_scores(&[3.5; 7]);
    ensure!(
        flat.iter().all(|s| *s == 0.0),
        "equal distances -> {flat:?}"
    );
    let mut same = FeatureMatrix::default();
    for i in 0..20 {
        same.push(chatwatch::profile::FeatureRecord {
            username: format!("u{i}"),
            features: [0.25; N_FEATURES],
            message_total: 10,
            first_seen_ms: 0,
            last_seen_ms: 0,
        });
    }
    for method in [
        ScoringMethod::Dknn,
        ScoringMethod::Sknn,
        ScoringMethod::Kmeans,
    ] {
        let cfg = ScorerConfig {
            method,
            k: 5,
            threshold: 40.0,
        };
        let board = score_matrix(&same, &cfg).map_err(|e| e.to_string())?;
        ensure!(board.trolls() == 0, "{method}: identical rows gave trolls");
    }
    Ok("exact scale, 200 affine trials, degenerate input all normal".into())
}

fn c4_gram_svd() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_sv, mut worst_rec) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let a = DMatrix::from_fn(500, 10, |_, _| rng.gen_range(-1.0..1.0));
        let ours = gram_svd(&a, false);
        let mut direct: Vec<f64> = a
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        direct.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (s, t) in ours.singular_values.iter().zip(&direct) {
            worst_sv = worst_sv.max((s - t).abs() / t);
        }
        worst_rec = worst_rec.max((ours.reconstruct() - &a).norm() / a.norm());
    }
    let t = start.elapsed();
    ensure!(
        worst_sv < 1e-8,
        "singular values off by {worst_sv:e} relative"
    );
    ensure!(worst_rec < 1e-8, "reconstruction error {worst_rec:e}");
    ensure!(t < Duration::from_secs(5), "took {t:?}");
    Ok(format!(
        "10 matrices 500x10: sv rel err {worst_sv:.1e}, reconstruction {worst_rec:.1e}, {t:.2?}"
    ))
}

const MESSAGES: [&str; 14] = [
    "a",
    "b",
    "down",
    "left",
    "right",
    "select",
    "start",
    "up",
    "anarchy",
    "democracy",
    "Kappa",
    "up up",
    "START",
    " a ",
];

fn c5_context_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for fixture in 0..20 {
        let span_ms = rng.gen_range(10_000..600_000);
        let t0: i64 = rng.gen_range(-1_000_000..1_000_000_000);
        let mut events: Vec<ChatEvent> = (0..1000)
            .map(|_| {
                ChatEvent::new(
                    t0 + rng.gen_range(0..span_ms),
                    format!("u{}", rng.gen_range(0..40)),
                    MESSAGES[rng.gen_range(0..MESSAGES.len())],
                )
            })
            .collect();
        events.sort_by_key(|e| e.timestamp_ms);

        let mut global = [0u64; 8];
        let mut votes = [0u64; 2];
        let mut spam = 0;
        for e in &events {
            match e.class {
                MessageClass::Button(b) => global[b.index()] += 1,
                MessageClass::ModeVote(m) => votes[m.index()] += 1,
                MessageClass::Spam => spam += 1,
            }
        }
        let duration_s = [1, 5, 20, 60][fixture % 4];
        let windows = build_contexts(events.clone(), duration_s, ModeState::default());
        let dur = i64::from(duration_s) * 1000;

        let mut summed = [0u64; 8];
        let mut summed_votes = [0u64; 2];
        let (mut total, mut summed_spam, mut placed) = (0, 0, 0);
        for (i, w) in windows.iter().enumerate() {
            let c = &w.context;
            ensure!(
                c.window_start_ms.rem_euclid(dur) == 0,
                "fixture {fixture}: unaligned window"
            );
            if i > 0 {
                ensure!(
                    windows[i - 1].context.window_end_ms() == c.window_start_ms,
                    "fixture {fixture}: gap or overlap at window {i}"
                );
            }
            for b in Button::ALL {
                summed[b.index()] += c.button_counts[b.index()];
            }
            summed_votes[0] += c.mode_vote_counts[0];
            summed_votes[1] += c.mode_vote_counts[1];
            total += c.total_messages;
            summed_spam += c.spam_count;
            ensure!(
                c.total_messages as usize == w.events.len(),
                "fixture {fixture}: window count mismatch"
            );
            for e in &w.events {
                ensure!(
                    c.contains(e.timestamp_ms),
                    "fixture {fixture}: event outside its window"
                );
                placed += 1;
            }
        }
        ensure!(
            summed == global,
            "fixture {fixture}: button counts {summed:?} != {global:?}"
        );
        ensure!(
            summed_votes == votes,
            "fixture {fixture}: vote counts differ"
        );
        ensure!(summed_spam == spam, "fixture {fixture}: spam counts differ");
        ensure!(
            total == 1000 && placed == 1000,
            "fixture {fixture}: {total} counted, {placed} placed"
        );
    }
    Ok("20 fixtures of 1000 events".into())
}

fn c6_monotone_and_merge(checked_runs: &mut usize) -> Outcome {
    let sc = Scenario {
        n_users: 300,
        seed: 6,
        ..Scenario::default()
    };
    let mut events = generate_stream(&sc).events;
    ensure!(
        events.len() >= 100_000,
        "stream too short: {}",
        events.len()
    );
    events.truncate(100_000);

    let windows = build_contexts(events, 20, ModeState::default());
    let mut whole = ProfileStore::new();
    for w in &windows {
        whole.ingest_window(w);
    }

    // Contiguous time shards.
    let cut1 = windows.len() / 3;
    let cut2 = 2 * windows.len() / 3;
    let mut shards = [
        ProfileStore::new(),
        ProfileStore::new(),
        ProfileStore::new(),
    ];
    for (i, w) in windows.iter().enumerate() {
        let s = if i < cut1 {
            0
        } else if i < cut2 {
            1
        } else {
            2
        };
        shards[s].ingest_window(w);
    }
    let mut left = shards[0].clone();
    left.merge(&shards[1]);
    left.merge(&shards[2]);
    let mut bc = shards[1].clone();
    bc.merge(&shards[2]);
    let mut right = shards[0].clone();
    right.merge(&bc);
    let mut rev = shards[2].clone();
    rev.merge(&shards[0]);
    rev.merge(&shards[1]);
    ensure!(left == whole, "(A+B)+C differs from the unsplit build");
    ensure!(right == whole, "A+(B+C) differs from the unsplit build");
    ensure!(rev == whole, "C+A+B differs from the unsplit build");

    // Shards by user over the same contexts.
    let mut by_user = [
        ProfileStore::new(),
        ProfileStore::new(),
        ProfileStore::new(),
    ];
    for w in &windows {
        for (s, store) in by_user.iter_mut().enumerate() {
            let mine: Vec<ChatEvent> = w
                .events
                .iter()
                .filter(|e| e.username.bytes().map(usize::from).sum::<usize>() % 3 == s)
                .cloned()
                .collect();
            store.ingest_context(&w.context, &mine);
        }
    }
    let mut merged = by_user[0].clone();
    merged.merge(&by_user[1]);
    merged.merge(&by_user[2]);
    ensure!(
        merged == whole,
        "user shards merge differs from the unsplit build"
    );

    for p in whole.iter() {
        p.check_invariants()
            .map_err(|e| format!("{}: {e}", p.username))?;
    }
    let features = whole.snapshot(1);
    check_monotone(&features)?;
    ensure!(
        features == left.snapshot(1),
        "merged features differ from unsplit features"
    );
    *checked_runs += 1;
    Ok(format!(
        "{} users, 100000 events, {} windows; monotone in {} runs",
        whole.len(),
        windows.len(),
        checked_runs
    ))
}

fn boards(events: &[EngineEvent]) -> Vec<&ScoreboardEvent> {
    events
        .iter()
        .filter_map(|e| match e {
            EngineEvent::Scoreboard(b) => Some(b),
            _ => None,
        })
        .collect()
}

fn c7_online_equals_batch(checked_runs: &mut usize) -> Outcome {
    let sc = Scenario {
        n_users: 400,
        seed: 7,
        ..Scenario::default()
    };
    let events = generate_stream(&sc).events;
    let lines = serialize_stream(&events);
    let mut compared = 0;
    for interval in [600, 3600] {
        let cfg = EngineConfig {
            recluster_interval_s: interval,
            ..EngineConfig::default()
        };
        let out = run_online_with(
            lines_source(lines.clone()),
            &cfg,
            Vec::new(),
            LabelHandle::new(),
        )
        .map_err(|e| e.to_string())?;
        let online = boards(&out.sink);
        let expected_boards = (3600 / interval) as usize;
        ensure!(
            online.len() == expected_boards,
            "interval {interval}: {} boundaries, expected {expected_boards}",
            online.len()
        );
        for b in online {
            let prefix: Vec<ChatEvent> = events
                .iter()
                .filter(|e| e.timestamp_ms < b.boundary_ms)
                .cloned()
                .collect();
            let batch = run_batch(prefix, &cfg);
            check_monotone(&batch.features)?;
            *checked_runs += 1;
            let want: BTreeMap<&str, (Label, u64)> = batch
                .scoreboard
                .users
                .iter()
                .map(|u| (u.username.as_str(), (u.label, u.anomaly_score.to_bits())))
                .collect();
            let got: BTreeMap<&str, (Label, u64)> = b
                .users
                .iter()
                .map(|u| (u.username.as_str(), (u.label, u.anomaly_score.to_bits())))
                .collect();
            ensure!(
                want == got,
                "interval {interval}, epoch {}: online and batch labels differ",
                b.recluster_epoch
            );
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} boundaries identical (intervals 600 s and 3600 s)"
    ))
}

fn c8_end_to_end(checked_runs: &mut usize) -> Outcome {
    let start = Instant::now();
    let sc = Scenario {
        seed: 8,
        ..Scenario::default()
    };
    let stream = generate_stream(&sc);
    let cfg = EngineConfig::default();
    ensure!(
        cfg.scorer.method == ScoringMethod::Kmeans && cfg.scorer.threshold == 40.0,
        "defaults changed"
    );
    let batch = run_batch(stream.events.clone(), &cfg);
    check_monotone(&batch.features)?;
    *checked_runs += 1;

    let labels: BTreeMap<&str, Label> = batch
        .scoreboard
        .users
        .iter()
        .map(|u| (u.username.as_str(), u.label))
        .collect();
    let trolls: Vec<&str> = stream
        .truth
        .iter()
        .filter(|t| t.label.is_troll())
        .map(|t| t.username.as_str())
        .collect();
    let found = trolls
        .iter()
        .filter(|u| labels.get(*u) == Some(&Label::Troll))
        .count();
    let recall = found as f64 / trolls.len() as f64;
    let pct = batch.scoreboard.troll_percent();
    ensure!((0.5..=2.0).contains(&pct), "labeled {pct:.2}% trolls");
    ensure!(
        recall >= 0.9,
        "recall {recall:.2} ({found}/{})",
        trolls.len()
    );

    // Probe accounts injected into the live feed.
    let probes = default_probes();
    let probe_events = generate_probe_events(&sc, &probes);
    let source = inject_probe_users(probe_events, lines_source(serialize_stream(&stream.events)));
    let handle = LabelHandle::new();
    run_online_with(source, &cfg, Vec::new(), handle.clone()).map_err(|e| e.to_string())?;
    let expected: Vec<(String, Label)> = probes
        .iter()
        .map(|p| (p.username.clone(), p.label))
        .collect();
    for check in probe_checks(&handle.current(), &expected) {
        if let EngineEvent::ProbeCheck {
            username,
            expected,
            observed,
            ok: false,
        } = check
        {
            return Err(format!(
                "probe {username}: expected {expected}, got {observed:?}"
            ));
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!(
        "{pct:.2}% labeled, recall {recall:.2} ({found}/{}), {} probes correct, {t:.2?}",
        trolls.len(),
        probes.len()
    ))
}

fn sample_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("CHATWATCH_SAMPLE") {
        return Some(PathBuf::from(p));
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/sample_10000.csv");
    p.exists().then_some(p)
}

/// `Ok(None)` means skipped.
fn c9_reference_sample() -> Result<Option<String>, String> {
    let Some(path) = sample_path() else {
        return Ok(None);
    };
    let f = std::fs::File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let m = FeatureMatrix::read_csv(f).map_err(|e| e.to_string())?;
    let board = score_matrix(&m, &ScorerConfig::default()).map_err(|e| e.to_string())?;
    let pct = (board.troll_percent() * 100.0).round() / 100.0;
    ensure!(
        board.trolls() == 107 && pct == 1.19,
        "kmeans labeled {} ({pct}%), expected 107 (1.19%)",
        board.trolls()
    );
    Ok(Some(
        "107 anomalies = 1.19%; per-k counts are not available, so only the kmeans count is checked".into(),
    ))
}

fn c10_single_feature(checked_runs: &mut usize) -> Outcome {
    let sc = Scenario {
        seed: 10,
        // No scheduled swings: every normal vote follows the 0.5 bias.
        mode_schedule: Vec::new(),
        ..Scenario::default()
    };
    ensure!(
        sc.normal.anarchy_vote_bias == 0.5,
        "normal bias is {}",
        sc.normal.anarchy_vote_bias
    );
    let batch = run_batch(generate_stream(&sc).events, &EngineConfig::default());
    check_monotone(&batch.features)?;
    *checked_runs += 1;
    let n = batch.features.len() as f64;
    let f7 = (single_feature_rate(&batch.features.rows, 6, 0.5, true) * n / 100.0).round();
    let full = batch.scoreboard.trolls() as f64;
    ensure!(
        f7 > 10.0 * full,
        "f7 rule labels {f7}, kmeans labels {full}"
    );
    Ok(format!(
        "f7 > 0.5 labels {f7} users, kmeans labels {full} ({:.0}x)",
        f7 / full.max(1.0)
    ))
}

fn main() {
    let mut runs = 0usize;
    let mut failed = 0;
    let mut report = |n: u32, name: &str, r: Result<Option<String>, String>| {
        let line = match r {
            Ok(Some(detail)) => format!("criterion {n:>2} PASS {name}: {detail}"),
            Ok(None) => format!(
                "criterion {n:>2} SKIP {name}: reference sample not found (set CHATWATCH_SAMPLE)"
            ),
            Err(why) => {
                failed += 1;
                format!("criterion {n:>2} FAIL {name}: {why}")
            }
        };
        println!("{line}");
    };
    let some = |r: Outcome| r.map(Some);

    report(1, "scorer oracle equivalence", some(c1_scorer_oracle()));
    report(2, "SKNN(k=1) equals DKNN(k=1)", some(c2_sknn1_is_dknn1()));
    report(3, "score normalization", some(c3_normalization()));
    report(4, "Gram-matrix SVD", some(c4_gram_svd()));
    report(
        5,
        "context conservation and tiling",
        some(c5_context_invariants()),
    );
    let c7 = c7_online_equals_batch(&mut runs);
    let c8 = c8_end_to_end(&mut runs);
    let c10 = c10_single_feature(&mut runs);
    report(
        6,
        "feature monotonicity and shard merge",
        some(c6_monotone_and_merge(&mut runs)),
    );
    report(7, "online equals batch", some(c7));
    report(8, "synthetic end-to-end detection", some(c8));
    report(9, "reference sample replication", c9_reference_sample());
    report(10, "single-feature over-labeling", some(c10));

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
