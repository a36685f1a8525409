//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails.
//!
//! Pass a substring (criterion number or name) to run a subset.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gpn::data::{generate_sbm, SbmSpec};
use gpn::episodic::{self, run_episode, sample_task, MetaTestConfig, TrainConfig};
use gpn::gradcheck::{self, GradcheckConfig};
use gpn::graph::{normalized_adjacency, DEFAULT_CENTRALITY_EPS};
use gpn::model::{embed, GraphContext};
use gpn::protonet::{self, PrototypeStrategy};
use gpn::valuator::{self, ValuatorParams};
use gpn::{compute::AdamState, AttributedGraph, EdgeDirection, ModelParams};

type Check = fn() -> Result<(bool, String), String>;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u8, &str, Check); 9] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "pn equivalence", pn_equivalence),
        (3, "normalization suite", normalization_suite),
        (4, "synthetic end-to-end learning", end_to_end),
        (5, "mislabeled-support robustness", robustness),
        (6, "linear edge scaling", edge_scaling),
        (7, "protocol fidelity", protocol_fidelity),
        (8, "determinism", determinism),
        (9, "reference-dataset documentation", reference_docs),
    ];

    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {id} {name}: {detail} ({secs:.1}s)",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn default_fixture() -> AttributedGraph {
    generate_sbm(&SbmSpec::default())
        .and_then(|b| b.to_graph(EdgeDirection::Undirected))
        .expect("default fixture builds")
}

fn gradient_oracle() -> Result<(bool, String), String> {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let reports = gradcheck::run(&cfg, 0..10).map_err(|e| e.to_string())?;
    let dropout_cfg = GradcheckConfig {
        dropout: 0.5,
        ..cfg.clone()
    };
    let dropout_reports = gradcheck::run(&dropout_cfg, 100..103).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    let worst_dropout = dropout_reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    // a tensor whose gradient is identically zero would make the check vacuous
    let silent: Vec<&str> = gpn::model::PARAM_NAMES
        .iter()
        .enumerate()
        .filter(|&(i, _)| reports.iter().all(|r| r.params[i].max_abs_grad == 0.0))
        .map(|(_, n)| *n)
        .collect();
    let pass = worst < 1e-4 && worst_dropout < 1e-4 && silent.is_empty() && elapsed < Duration::from_secs(30);
    Ok((
        pass,
        format!(
            "10 seeds, {} nodes / {} edges, max rel error {worst:.2e} (with dropout {worst_dropout:.2e}), \
             zero-gradient tensors {silent:?}, {:.1}s < 30s",
            cfg.nodes,
            cfg.edges,
            elapsed.as_secs_f64()
        ),
    ))
}

fn pn_equivalence() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_diff: f64 = 0.0;
    let mut mismatched = 0;
    for episode in 0..100 {
        let g = gradcheck::random_graph(40, 100, 6, 4, &mut rng).map_err(|e| e.to_string())?;
        let ctx = GraphContext::<f64>::new(&g, DEFAULT_CENTRALITY_EPS);
        let mut params = gradcheck::random_params(6, &mut rng);
        params.valuator = ValuatorParams::constant(6);
        let task = sample_task(&g, &[0, 1, 2, 3], 3 + episode % 2, 1 + episode % 4, 3, &mut rng)
            .map_err(|e| e.to_string())?;
        let (z, s) = embed(&ctx, &params).map_err(|e| e.to_string())?;
        let (wp, wprobs) = episodic::classify_task(&z, &s, &task, PrototypeStrategy::Weighted)
            .map_err(|e| e.to_string())?;
        let (mp, mprobs) =
            episodic::classify_task(&z, &s, &task, PrototypeStrategy::Mean).map_err(|e| e.to_string())?;
        max_diff = max_diff.max(wp.prototypes.max_abs_diff(&mp.prototypes));
        if protonet::predict(&wprobs) != protonet::predict(&mprobs) {
            mismatched += 1;
        }
    }
    Ok((
        max_diff <= 1e-10 && mismatched == 0,
        format!("100 episodes, max prototype difference {max_diff:.1e} (<= 1e-10), {mismatched} prediction mismatches"),
    ))
}

fn normalization_suite() -> Result<(bool, String), String> {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    // (seed, nodes per class, edges, classes, shots)
    let strategy = (any::<u64>(), 2usize..10, 0usize..120, 2usize..5, 1usize..4);
    let worst = std::cell::Cell::new(0.0f64);
    let result = runner.run(&strategy, |(seed, per_class, edges, classes, k)| {
        let nodes = per_class * classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gradcheck::random_graph(nodes, edges, 5, classes, &mut rng)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let ctx = GraphContext::<f64>::new(&g, DEFAULT_CENTRALITY_EPS);
        let params = gradcheck::random_params(5, &mut rng);
        let k = k.min(per_class - 1);
        let all: Vec<usize> = (0..classes).collect();
        let task = sample_task(&g, &all, classes, k, per_class - k, &mut rng)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (z, s) = embed(&ctx, &params).map_err(|e| TestCaseError::fail(e.to_string()))?;

        let mut dev: f64 = 0.0;
        let (protos, probs) = episodic::classify_task(&z, &s, &task, PrototypeStrategy::Weighted)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        for w in &protos.weights {
            dev = dev.max((w.iter().sum::<f64>() - 1.0).abs());
        }
        for r in 0..probs.rows() {
            dev = dev.max((probs.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        let a_hat = normalized_adjacency::<f64>(&g);
        let s0 = valuator::initial_scores(&ctx.features, &params.valuator.w_s, &params.valuator.b_s)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let alpha = valuator::attention_weights(&a_hat, &s0, &params.valuator.a1)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        for win in a_hat.offsets().windows(2) {
            dev = dev.max((alpha[win[0]..win[1]].iter().sum::<f64>() - 1.0).abs());
        }
        worst.set(worst.get().max(dev));
        prop_assert!(dev <= 1e-9, "row sum deviates by {dev}");
        Ok(())
    });
    Ok(match result {
        Ok(()) => (
            true,
            format!("256 random cases, beta / class-probability / attention rows sum to 1 within {:.1e}", worst.get()),
        ),
        Err(e) => (false, format!("{e}")),
    })
}

fn end_to_end() -> Result<(bool, String), String> {
    let start = Instant::now();
    let g = default_fixture();
    let config = TrainConfig::default();
    let outcome = episodic::train::<f64>(&g, &config).map_err(|e| e.to_string())?;
    let cfg = MetaTestConfig {
        k_shot: 3,
        m_query: 3,
        ..MetaTestConfig::default()
    };
    let report = episodic::meta_test(&g, &outcome.params, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let initial = outcome.history[0].train_loss;
    let ln5 = 5f64.ln();
    let acc = report.accuracy.mean;

    // context only: the same protocol with other training seeds
    let sweep: Vec<f64> = (1..5)
        .map(|seed| {
            let o = episodic::train::<f64>(&g, &TrainConfig { seed, ..config.clone() }).expect("trains");
            episodic::meta_test(&g, &o.params, &cfg).expect("evaluates").accuracy.mean
        })
        .collect();

    let pass = acc >= 0.85 && (initial - ln5).abs() <= 0.5 && elapsed < Duration::from_secs(120);
    Ok((
        pass,
        format!(
            "default fixture, 5-way 3-shot training ({} episodes run), {}-way test tasks (test split has {} classes): \
             accuracy {acc:.4} (target >= 0.85), initial loss {initial:.3} (ln 5 = {ln5:.3} +- 0.5), \
             {:.1}s < 120s; training seeds 1-4 give {:?}",
            outcome.history.len(),
            report.n_way,
            g.splits().test.len(),
            elapsed.as_secs_f64(),
            sweep.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn robustness() -> Result<(bool, String), String> {
    let g = default_fixture();
    let runs = 20;
    let mut totals = [0.0f64; 2];
    let mut wins = 0;
    for seed in 0..runs {
        let mut accs = [0.0; 2];
        for (slot, strategy) in [PrototypeStrategy::Weighted, PrototypeStrategy::Mean].into_iter().enumerate() {
            let config = TrainConfig {
                k_shot: 5,
                m_query: 5,
                seed,
                strategy,
                ..TrainConfig::default()
            };
            let o = episodic::train::<f64>(&g, &config).map_err(|e| e.to_string())?;
            let cfg = MetaTestConfig {
                seed,
                strategy,
                mislabeled_per_class: 1,
                ..MetaTestConfig::default()
            };
            accs[slot] = episodic::meta_test(&g, &o.params, &cfg).map_err(|e| e.to_string())?.accuracy.mean;
            totals[slot] += accs[slot];
        }
        if accs[0] > accs[1] {
            wins += 1;
        }
    }
    let (gpn, naive) = (totals[0] / runs as f64, totals[1] / runs as f64);
    Ok((
        gpn >= naive,
        format!(
            "{runs} runs, 5-shot, one mislabeled support node per class: gpn {gpn:.4} vs gpn-naive {naive:.4}, \
             gap {:+.4}, gpn ahead in {wins}/{runs}",
            gpn - naive
        ),
    ))
}

/// Fastest training-episode time on an SBM graph with about `edges_target`
/// edges. Nodes grow with edges at a fixed expected degree of 10 (6 within
/// the class, 4 across).
fn episode_time(edges_target: f64) -> Result<(usize, f64), String> {
    let classes = 10;
    let n = (edges_target / 5.0).round() as usize;
    let per_class = n / classes;
    let spec = SbmSpec {
        num_classes: classes,
        nodes_per_class: per_class,
        p_in: 6.0 / (per_class - 1) as f64,
        p_out: 4.0 / (n - per_class) as f64,
        seed: 11,
        ..SbmSpec::default()
    };
    let g = generate_sbm(&spec)
        .and_then(|b| b.to_graph(EdgeDirection::Undirected))
        .map_err(|e| e.to_string())?;
    let ctx = GraphContext::<f64>::new(&g, DEFAULT_CENTRALITY_EPS);
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::<f64>::init(g.feature_dim(), &mut rng);
    let mut adam = AdamState::new(&params.tensors());
    let train = g.splits().train.clone();

    let mut samples = Vec::new();
    for i in 0..25 {
        let task = sample_task(&g, &train, 5, 3, 3, &mut rng).map_err(|e| e.to_string())?;
        let t = Instant::now();
        run_episode(&ctx, &mut params, &task, &config, Some(&mut adam), &mut rng).map_err(|e| e.to_string())?;
        if i >= 5 {
            samples.push(t.elapsed().as_secs_f64());
        }
    }
    let fastest = samples.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((g.num_edges(), fastest))
}

fn edge_scaling() -> Result<(bool, String), String> {
    let targets = [10_000.0, 20_000.0, 40_000.0];
    // interleaved rounds so a burst of background load hits every size
    let mut best = [(0usize, f64::INFINITY); 3];
    for _ in 0..5 {
        for (slot, &e) in best.iter_mut().zip(&targets) {
            let (edges, t) = episode_time(e)?;
            *slot = (edges, slot.1.min(t));
        }
    }
    let xs: Vec<f64> = best.iter().map(|&(e, _)| e as f64).collect();
    let ys: Vec<f64> = best.iter().map(|&(_, t)| t).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let ratios = [ys[1] / ys[0], ys[2] / ys[1]];
    let pass = r2 >= 0.95 && ratios.iter().all(|&r| r <= 2.5);
    Ok((
        pass,
        format!(
            "|V| = |E| / 5, |E| = {:?}, per-episode ms {:?}, fit t = {:.3}ms + {:.3}us*|E|, R^2 {r2:.4} (>= 0.95), \
             doubling ratios {:.2} / {:.2} (<= 2.5)",
            best.iter().map(|b| b.0).collect::<Vec<_>>(),
            ys.iter().map(|y| format!("{:.2}", y * 1e3)).collect::<Vec<_>>(),
            a * 1e3,
            b * 1e6,
            ratios[0],
            ratios[1]
        ),
    ))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let argv: Vec<&str> = std::iter::once("gpn").chain(args.iter().copied()).collect();
    match gpn_cli::run(argv, &mut out) {
        0 => Ok(String::from_utf8(out).expect("utf-8 output")),
        code => Err(format!("`gpn {}` exited with {code}", args.join(" "))),
    }
}

fn protocol_fidelity() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    cli(&["generate-synth", "--out", &p("data"), "--seed", "3"])?;
    cli(&["train", "--data", &p("data"), "--episodes", "40", "--out", &p("run")])?;
    let stdout = cli(&[
        "evaluate", "--data", &p("data"), "--params", &p("run/params.gpn"), "--n", "5", "--k", "5", "--tasks", "50",
        "--repeats", "10", "--out", &p("report"),
    ])?;
    let json: serde_json::Value = serde_json::from_str(&stdout).map_err(|e| e.to_string())?;
    let rows = json["per_repeat"].as_array().map(Vec::len).unwrap_or(0);
    let mut identity = json["per_repeat"]
        .as_array()
        .into_iter()
        .flatten()
        .all(|r| r["accuracy"] == r["micro_f1"]);
    identity &= json["accuracy"] == json["micro_f1"];

    let csv = fs::read_to_string(dir.path().join("report/report.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    let labels: Vec<&str> = lines.iter().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    let expected: Vec<String> = (0..10).map(|i| i.to_string()).chain(["mean".into(), "std".into()]).collect();
    let csv_ok = labels == expected;
    let meta_ok = json["num_tasks"] == 50 && json["repeats"] == 10;
    Ok((
        rows == 10 && csv_ok && meta_ok && identity,
        format!(
            "{rows} per-repeat rows, csv rows {labels:?}, 50 tasks x 10 repeats recorded: {meta_ok}, \
             micro-F1 == accuracy on every row: {identity}"
        ),
    ))
}

fn determinism() -> Result<(bool, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    cli(&["generate-synth", "--out", &p("data"), "--seed", "5"])?;
    let mut artefacts = Vec::new();
    for run in ["a", "b"] {
        let out = p(run);
        cli(&[
            "train", "--data", &p("data"), "--episodes", "120", "--seed", "9", "--precision", "f64", "--out", &out,
        ])?;
        let report = cli(&[
            "evaluate", "--data", &p("data"), "--params", &format!("{out}/params.gpn"), "--seed", "4",
            "--precision", "f64",
        ])?;
        let history = fs::read(format!("{out}/history.jsonl")).map_err(|e| e.to_string())?;
        let params = fs::read(format!("{out}/params.gpn")).map_err(|e| e.to_string())?;
        artefacts.push((history, params, report));
    }
    let same_history = artefacts[0].0 == artefacts[1].0;
    let same_params = artefacts[0].1 == artefacts[1].1;
    let same_report = artefacts[0].2 == artefacts[1].2;

    // thread count must not change the report either
    let g = gpn::data::load_dataset(dir.path().join("data").as_path(), EdgeDirection::Undirected)
        .map_err(|e| e.to_string())?
        .0;
    let params = gpn::params_io::load(&dir.path().join("a/params.gpn")).map_err(|e| e.to_string())?;
    let by_threads: Vec<String> = [Some(1), Some(4)]
        .into_iter()
        .map(|threads| {
            let cfg = MetaTestConfig {
                threads,
                ..MetaTestConfig::default()
            };
            episodic::meta_test(&g, &params, &cfg).map(|r| r.to_json())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let thread_invariant = by_threads[0] == by_threads[1];
    Ok((
        same_history && same_params && same_report && thread_invariant,
        format!(
            "two f64 runs: identical history {same_history}, parameters {same_params}, report {same_report}; \
             1 vs 4 threads identical {thread_invariant}"
        ),
    ))
}

fn reference_docs() -> Result<(bool, String), String> {
    let readme = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).map_err(|e| e.to_string())?;
    let needles = ["40,672", "288,270", "80.1", "79.8"];
    let missing: Vec<&str> = needles.iter().copied().filter(|n| !readme.contains(n)).collect();
    Ok((
        missing.is_empty(),
        format!("informational: README records the DBLP-scale reference numbers (missing: {missing:?})"),
    ))
}
