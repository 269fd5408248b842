//! Acceptance checks. Each test writes one `ACCEPTANCE <n> [PASS|FAIL]` line
//! to stderr before asserting.

mod common;

use std::collections::BTreeSet;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use aqgroup::autodiff::Tape;
use aqgroup::dataset::{chronological_split, make_windows, window_count, Split, WindDirection};
use aqgroup::gradcheck::{check, relative_error, spread_indices};
use aqgroup::graph::{build_city_graph, build_group_graph, DistanceMetric};
use aqgroup::hier_mp::{CityMessagePassing, GroupMessagePassing};
use aqgroup::model::ForwardOptions;
use aqgroup::nn::ParamStore;
use aqgroup::synth::{generate, SynthConfig};
use aqgroup::train::{
    adjusted_rand_index, evaluate, evaluate_split, hard_groups, median, random_assignment_baseline, run_once, train,
    write_metrics_csv, AblationReport, RunSummary, SplitKind, TrainObserver,
};
use aqgroup::{Model, PreparedData, Tensor, TrainConfig, Variant};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serializes the checks so wall-clock budgets are measured on an idle core.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_1_forward_matches_scalar_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let model = tiny_model();
    let batch = tiny_batch(&model.config, 2, 3);
    let mut tape = Tape::with_params(&model.store);
    let out = model.forward(&mut tape, &batch).unwrap();
    let oracle = Oracle {
        store: &model.store,
        cfg: model.config.clone(),
        cities: tiny_cities().iter().map(|c| c.location()).collect(),
    }
    .forward(&batch);
    let elapsed = t0.elapsed().as_secs_f64();

    let r_lib = tape.value(out.encoder.correlations.unwrap()).data().to_vec();
    let graph = &model.group_graph;
    let r_ref: Vec<f64> = oracle
        .r
        .iter()
        .flat_map(|r| graph.edges.iter().flat_map(move |&(i, j)| r[i][j].clone().unwrap()))
        .collect();
    let s_ref: Vec<f64> = oracle.s.iter().flatten().copied().collect();
    let diffs = [
        ("S", max_rel_diff(tape.value(out.encoder.assignment.unwrap()).data(), &s_ref, 1e-8)),
        ("X", max_rel_diff(tape.value(out.encoder.x).data(), &flatten(&oracle.x), 1e-8)),
        ("R", max_rel_diff(&r_lib, &r_ref, 1e-8)),
        ("X3", max_rel_diff(tape.value(out.encoder.x3).data(), &flatten(&oracle.x3), 1e-8)),
        ("decoder", max_rel_diff(tape.value(out.x_output).data(), &flatten(&oracle.x_output), 1e-8)),
        ("head", max_rel_diff(tape.value(out.predictions).data(), &flatten(&oracle.predictions), 1e-8)),
    ];
    let worst = diffs.iter().map(|d| d.1).fold(0.0, f64::max);
    let pass = worst < 1e-5 && elapsed < 1.0;
    report(1, "encoder forward vs scalar oracle", pass, &format!("max rel diff {worst:.2e} {diffs:?}, {elapsed:.3}s"));
    assert!(pass);
}

#[test]
fn criterion_2_finite_difference_gradients() {
    let _g = serial();
    let t0 = Instant::now();
    let mut model = tiny_model();
    let batch = tiny_batch(&model.config, 2, 8);
    let opts = ForwardOptions {
        decoder_assignment: Some(model.assignment_matrix()),
        ..Default::default()
    };
    let grads = {
        let mut tape = Tape::with_params(&model.store);
        let (loss, _) = model.loss(&mut tape, &batch, &opts).unwrap();
        tape.backward(loss).into_param_grads()
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut missing = Vec::new();
    let mut kinks = Vec::new();
    const EPS: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    for id in ids {
        let name = model.store.entry(id).name.clone();
        let x = model.store.value(id).clone();
        let analytic = match &grads[id.index()] {
            Some(g) => g.clone(),
            None => {
                missing.push(name.clone());
                Tensor::zeros(x.rows(), x.cols())
            }
        };
        let idx = spread_indices(x.len(), 8);
        checked += idx.len();
        let mut loss_at = |probe: &Tensor<f64>| {
            *model.store.value_mut(id) = probe.clone();
            let mut tape = Tape::with_params(&model.store);
            let (loss, _) = model.loss(&mut tape, &batch, &opts).unwrap();
            tape.value(loss)[(0, 0)]
        };
        let bad = check(&x, &analytic, &idx, EPS, TOL, 1e-7, &mut loss_at);
        // An entry whose ±ε interval straddles a ReLU or |·| kink has
        // different one-sided slopes; there the analytic gradient must match
        // the slope on one side.
        let mut real = Vec::new();
        for m in bad {
            let f0 = loss_at(&x);
            let mut probe = x.clone();
            probe.data_mut()[m.index] += EPS;
            let right = (loss_at(&probe) - f0) / EPS;
            probe.data_mut()[m.index] -= 2.0 * EPS;
            let left = (f0 - loss_at(&probe)) / EPS;
            let matches = |slope: f64| relative_error(m.analytic, slope, 1e-7) <= TOL;
            if relative_error(left, right, 1e-7) > TOL && (matches(left) || matches(right)) {
                kinks.push((name.clone(), m.index, left, right, m.analytic));
            } else {
                real.push(m);
            }
        }
        *model.store.value_mut(id) = x;
        if !real.is_empty() {
            failures.push((name, real));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && missing.is_empty() && elapsed < 30.0;
    report(
        2,
        "finite-difference gradient suite",
        pass,
        &format!(
            "{} tensors, {checked} entries, {} failing tensors, {} without gradient, \
             {} entries straddling a kink matched one-sided {kinks:?}, {elapsed:.2}s",
            model.store.len(),
            failures.len(),
            missing.len(),
            kinks.len()
        ),
    );
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(missing.is_empty(), "{missing:?}");
    assert!(elapsed < 30.0);
}

struct RowSumWatch {
    worst: f64,
    steps: usize,
}

impl TrainObserver<f64> for RowSumWatch {
    fn after_step(&mut self, _epoch: usize, _step: usize, model: &Model<f64>) {
        let s = model.assignment_matrix();
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            self.worst = self.worst.max((sum - 1.0).abs());
        }
        self.steps += 1;
    }
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Max deviation of `f(P·x) - P·f(x)` for both message-passing passes.
fn equivariance_errors() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d, d_edge, g) = (6, 3, 5);
    let mut store = ParamStore::<f64>::new();
    let gmp = GroupMessagePassing::new(&mut store, &mut rng, "g", d, d_edge, 2);
    let cmp = CityMessagePassing::new(&mut store, &mut rng, "c", d, 2);
    randomize(&mut store, 4, 0.6);

    // Group graph.
    let graph = build_group_graph(g, d_edge);
    let z = Tensor::from_fn(g, d, |_, _| rng.random_range(-1.0..1.0));
    let r = Tensor::from_fn(graph.edges.len(), d_edge, |_, _| rng.random_range(0.0..1.0));
    let p = permutation(g, &mut rng);
    let zp = Tensor::from_fn(g, d, |i, c| z[(p.iter().position(|&x| x == i).unwrap(), c)]);
    let edge_of = |a: usize, b: usize| graph.edges.iter().position(|&e| e == (a, b)).unwrap();
    let rp = Tensor::from_fn(graph.edges.len(), d_edge, |e, c| {
        let (a, b) = graph.edges[e];
        let ia = p.iter().position(|&x| x == a).unwrap();
        let ib = p.iter().position(|&x| x == b).unwrap();
        r[(edge_of(ia, ib), c)]
    });
    let run_group = |z: &Tensor<f64>, r: &Tensor<f64>| {
        let mut tape = Tape::with_params(&store);
        let zv = tape.input(z.clone());
        let rv = tape.input(r.clone());
        let out = gmp.forward(&mut tape, zv, rv, &graph);
        tape.value(out).clone()
    };
    let base = run_group(&z, &r);
    let perm = run_group(&zp, &rp);
    let mut group_err: f64 = 0.0;
    for i in 0..g {
        for c in 0..d {
            group_err = group_err.max((perm[(p[i], c)] - base[(i, c)]).abs());
        }
    }

    // City graph: two clusters of nearby cities plus an isolated one.
    let locs: Vec<[f64; 2]> = vec![
        [116.0, 39.9],
        [116.8, 39.4],
        [117.2, 40.1],
        [121.4, 31.2],
        [120.2, 30.3],
        [121.0, 31.9],
        [104.1, 30.7],
    ];
    let n = locs.len();
    let x = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let p = permutation(n, &mut rng);
    let mut locs_p = vec![[0.0; 2]; n];
    let mut xp = Tensor::zeros(n, d);
    for i in 0..n {
        locs_p[p[i]] = locs[i];
        xp.row_mut(p[i]).copy_from_slice(x.row(i));
    }
    let run_city = |x: &Tensor<f64>, locs: &[[f64; 2]]| {
        let graph = build_city_graph(locs, 250.0, DistanceMetric::Haversine).unwrap();
        let mut tape = Tape::with_params(&store);
        let xv = tape.input(x.clone());
        let out = cmp.forward(&mut tape, xv, &graph);
        tape.value(out).clone()
    };
    let base = run_city(&x, &locs);
    let perm = run_city(&xp, &locs_p);
    let mut city_err: f64 = 0.0;
    for i in 0..n {
        for c in 0..d {
            city_err = city_err.max((perm[(p[i], c)] - base[(i, c)]).abs());
        }
    }
    (group_err, city_err)
}

#[test]
fn criterion_3_structural_invariants() {
    let _g = serial();
    // Row sums of S after every optimizer step.
    let synth = generate(&SynthConfig::new(10, 2, 160, 2)).unwrap();
    let data = PreparedData::new(synth.cities, synth.panel, 24, 6, 2).unwrap();
    let mut cfg = data.model_config();
    cfg.n_groups = 2;
    let mut model = Model::<f64>::new(cfg, &data.cities).unwrap();
    let mut watch = RowSumWatch { worst: 0.0, steps: 0 };
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &tc, &mut watch).unwrap();
    let rows_ok = watch.worst <= 1e-6 && watch.steps > 0;

    // RMSE >= MAE on every horizon of every split.
    let mut metric_ok = true;
    for split in [SplitKind::Train, SplitKind::Validation, SplitKind::Test] {
        let m = evaluate_split(&model, &data, split).unwrap();
        metric_ok &= m.horizons.iter().all(|h| h.rmse >= h.mae) && m.overall_rmse >= m.overall_mae;
    }

    // R >= 0 and attention rows summing to one on a randomized model.
    let tiny = tiny_model();
    let batch = tiny_batch(&tiny.config, 3, 17);
    let mut tape = Tape::with_params(&tiny.store);
    let out = tiny.forward(&mut tape, &batch).unwrap();
    let r = tape.value(out.encoder.correlations.unwrap());
    let r_ok = r.data().iter().all(|&v| v >= 0.0) && r.data().iter().any(|&v| v > 0.0);
    let tau = tiny.config.tau_in;
    let mut att_worst: f64 = 0.0;
    let att_vars = tape.attention_vars();
    for v in &att_vars {
        for row in tape.attention_probs(*v).unwrap().chunks(tau) {
            att_worst = att_worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let att_ok = !att_vars.is_empty() && att_worst < 1e-12;

    let (group_err, city_err) = equivariance_errors();
    let eq_ok = group_err < 1e-6 && city_err < 1e-6;

    let pass = rows_ok && metric_ok && r_ok && att_ok && eq_ok;
    report(
        3,
        "structural invariants",
        pass,
        &format!(
            "S rows |sum-1| max {:.1e} over {} steps, R>=0 {r_ok}, attention |sum-1| max {att_worst:.1e}, \
             RMSE>=MAE {metric_ok}, equivariance group {group_err:.1e} city {city_err:.1e}",
            watch.worst, watch.steps
        ),
    );
    assert!(rows_ok, "S row sums drift {}", watch.worst);
    assert!(metric_ok && r_ok && att_ok && eq_ok);
}

#[test]
fn criterion_4_decoder_path_gives_no_logit_gradient() {
    let _g = serial();
    let model = tiny_model();
    let batch = tiny_batch(&model.config, 2, 5);
    let logits = model.store.find("assignment.logits").unwrap();
    let grad_with = |detach: bool| {
        let opts = ForwardOptions {
            detach_encoder_assignment: detach,
            ..Default::default()
        };
        let mut tape = Tape::with_params(&model.store);
        let (loss, _) = model.loss(&mut tape, &batch, &opts).unwrap();
        tape.backward(loss).into_param_grads()[logits.index()].clone()
    };
    let decoder_only = grad_with(true);
    let zero = decoder_only.as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0));
    let full_norm = grad_with(false).map_or(0.0, |g| g.norm());
    let pass = zero && full_norm > 0.0;
    report(
        4,
        "logit gradient through decoder path is exactly zero",
        pass,
        &format!("decoder-only gradient zero {zero}, encoder-path gradient norm {full_norm:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_overfit_small_instance() {
    let _g = serial();
    let t0 = Instant::now();
    // 50 windows with stride 1: hours = 50 + 24 + 6 - 1.
    let synth = generate(&SynthConfig::new(10, 2, 79, 3)).unwrap();
    let windows = make_windows(&synth.panel, 24, 6, 1).unwrap();
    assert_eq!(windows.len(), 50);
    let split = Split {
        train: windows,
        validation: Vec::new(),
        test: Vec::new(),
    };
    let data = PreparedData::with_split(synth.cities, synth.panel, split, 24, 6).unwrap();
    let mut cfg = data.model_config();
    cfg.n_groups = 2;
    cfg.d_hidden = 64;
    cfg.d_ffn = 128;
    let mut model = Model::<f64>::new(cfg, &data.cities).unwrap();
    model.normalization = data.stats.clone();
    let before = evaluate(&model, &data, &data.split.train).unwrap().overall_mae;
    let tc = TrainConfig {
        epochs: 300,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let report_ = train(&mut model, &data, &tc, &mut ()).unwrap();
    let after = evaluate(&model, &data, &data.split.train).unwrap().overall_mae;
    let elapsed = t0.elapsed().as_secs_f64();
    let ratio = after / before;
    let pass = ratio < 0.1 && elapsed < 300.0;
    report(
        5,
        "overfit 10 cities / 2 groups / 50 samples / 300 epochs",
        pass,
        &format!(
            "d_hidden 64, batch 5: train MAE {before:.3} -> {after:.3} (ratio {ratio:.4}), last running MAE {:.3}, {elapsed:.1}s",
            report_.history.last().unwrap().train_mae
        ),
    );
    assert!(ratio < 0.1, "ratio {ratio}");
    assert!(elapsed < 300.0, "{elapsed}s");
}

struct AblationRuns {
    labels: Vec<usize>,
    full_groups: Vec<Vec<usize>>,
    summaries: Vec<RunSummary>,
    seeds: Vec<u64>,
    seconds: f64,
}

/// Full and FGA models on 30 cities / 5 planted groups, 50 epochs, 3 seeds.
fn ablation_runs() -> &'static AblationRuns {
    static RUNS: OnceLock<AblationRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let synth = generate(&SynthConfig::new(30, 5, 600, 7)).unwrap();
        let labels = synth.labels.clone();
        let data = PreparedData::new(synth.cities, synth.panel, 24, 6, 4).unwrap();
        let seeds = vec![0, 1, 2];
        let mut full_groups = Vec::new();
        let mut summaries = Vec::new();
        for variant in [Variant::Full, Variant::Fga] {
            for &seed in &seeds {
                let mut cfg = data.model_config();
                cfg.n_groups = 5;
                cfg.variant = variant;
                cfg.seed = seed;
                let tc = TrainConfig {
                    epochs: 50,
                    batch_size: 8,
                    seed,
                    ..TrainConfig::default()
                };
                let (model, summary) = run_once::<f32>(&data, cfg, &tc).unwrap();
                if variant == Variant::Full {
                    full_groups.push(hard_groups(&model));
                }
                summaries.push(summary);
            }
        }
        AblationRuns {
            labels,
            full_groups,
            summaries,
            seeds,
            seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_6_grouping_recovers_planted_groups() {
    let _g = serial();
    let runs = ablation_runs();
    let aris: Vec<f64> = runs.full_groups.iter().map(|g| adjusted_rand_index(g, &runs.labels)).collect();
    let learned = median(&aris);
    let baseline = random_assignment_baseline(&runs.labels, 5, 2000, 99);
    let pass = learned > baseline;
    report(
        6,
        "grouping recovery vs random assignment",
        pass,
        &format!("median ARI {learned:.4} (per seed {aris:.4?}) vs random baseline {baseline:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_ablation_full_beats_fga() {
    let _g = serial();
    let runs = ablation_runs();
    let report_ = AblationReport::from_summaries(&[Variant::Full, Variant::Fga], &runs.seeds, &runs.summaries);
    let text = report_.to_text();
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation_report.txt");
    std::fs::write(&path, &text).unwrap();
    let flagged = text.contains("FLAGGED");
    let pass = report_.full_is_best && !flagged;
    let full = report_.rows[0].median_val_mae;
    let fga = report_.rows[1].median_val_mae;
    report(
        7,
        "ablation: full val MAE <= FGA val MAE (3-seed median)",
        pass,
        &format!(
            "full {full:.4} vs fga {fga:.4}, per run {:?}, report at {} (flag line present: {}), runs took {:.0}s",
            runs.summaries
                .iter()
                .map(|r| format!("{}/seed{}: val {:.3} best epoch {}", r.variant, r.seed, r.val_mae, r.best_epoch))
                .collect::<Vec<_>>(),
            path.display(),
            text.lines().any(|l| l.starts_with("ordering:")),
            runs.seconds
        ),
    );
    assert!(text.lines().any(|l| l.starts_with("ordering:")));
    assert!(pass, "{text}");
}

#[test]
fn criterion_8_identical_seeds_identical_metrics() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let synth = generate(&SynthConfig::new(8, 2, 220, 5)).unwrap();
    let data = PreparedData::new(synth.cities, synth.panel, 24, 6, 3).unwrap();
    let run = |seed: u64, name: &str| {
        let mut cfg = data.model_config();
        cfg.n_groups = 2;
        cfg.seed = seed;
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let (model, summary) = run_once::<f64>(&data, cfg, &tc).unwrap();
        let val = evaluate_split(&model, &data, SplitKind::Validation).unwrap();
        let path = dir.path().join(name);
        write_metrics_csv(&path, &[val, summary.test]).unwrap();
        std::fs::read(path).unwrap()
    };
    let a = run(4, "a.csv");
    let b = run(4, "b.csv");
    let c = run(5, "c.csv");
    let pass = a == b && !a.is_empty();
    report(
        8,
        "identical seeds give byte-identical metrics.csv",
        pass,
        &format!("{} bytes, identical {}, different seed differs {}", a.len(), a == b, a != c),
    );
    assert!(pass);
}

fn haversine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let rad = std::f64::consts::PI / 180.0;
    let h = ((b[1] - a[1]) * rad / 2.0).sin().powi(2)
        + (a[1] * rad).cos() * (b[1] * rad).cos() * ((b[0] - a[0]) * rad / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().asin()
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig::with_cases(256));
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

#[test]
fn criterion_9_property_tests() {
    let _g = serial();
    let mut outcomes = Vec::new();

    outcomes.push(run_property(
        "window count",
        (1usize..260, 1usize..30, 1usize..10, 1usize..7),
        |(hours, tau_in, tau_out, step)| {
            let panel = random_panel(1, hours.max(2), hours as u64);
            let hours = panel.hours;
            let expected = (0..hours).filter(|s| s % step == 0 && s + tau_in + tau_out <= hours).count();
            prop_assert_eq!(window_count(hours, tau_in, tau_out, step), expected);
            match make_windows(&panel, tau_in, tau_out, step) {
                Ok(w) => {
                    prop_assert_eq!(w.len(), expected);
                    for (k, win) in w.iter().enumerate() {
                        prop_assert_eq!(win.start, k * step);
                        prop_assert_eq!(win.anchor_time, panel.timestamp(win.start + tau_in - 1));
                    }
                }
                Err(_) => prop_assert_eq!(expected, 0),
            }
            Ok(())
        },
    ));

    outcomes.push(run_property("split sizes", 0usize..5000, |n| {
        let items: Vec<usize> = (0..n).collect();
        match chronological_split(&items) {
            Ok(s) => {
                prop_assert!(n >= 10);
                let (a, b, c) = s.sizes();
                prop_assert_eq!(a + b + c, n);
                // Train is the largest prefix with 10·a <= 7·n; train+val likewise with 8·n.
                prop_assert!(10 * a <= 7 * n && 10 * (a + 1) > 7 * n);
                prop_assert!(10 * (a + b) <= 8 * n && 10 * (a + b + 1) > 8 * n);
                prop_assert_eq!(s.train.last().copied(), a.checked_sub(1));
                prop_assert_eq!(s.test.first().copied(), (c > 0).then_some(a + b));
            }
            Err(_) => prop_assert!(n < 10),
        }
        Ok(())
    }));

    outcomes.push(run_property("wind encoding", (0usize..9, -1i8..=1, -1i8..=1), |(k, x, y)| {
        let dir = WindDirection::ALL[k];
        let v = dir.encode();
        prop_assert!(v.iter().all(|c| (-1..=1).contains(c)));
        prop_assert_eq!(WindDirection::decode(v), Some(dir));
        prop_assert_eq!(dir.token().parse::<WindDirection>(), Ok(dir));
        let decoded = WindDirection::decode([x, y]).unwrap();
        prop_assert_eq!(decoded.encode(), [x, y]);
        // Opposite directions negate each other.
        if dir != WindDirection::None {
            let opp = WindDirection::decode([-v[0], -v[1]]).unwrap();
            prop_assert_eq!(WindDirection::ALL[(k + 4) % 8], opp);
        }
        Ok(())
    }));

    outcomes.push(run_property(
        "city-graph edge set",
        (prop::collection::vec((110.0f64..120.0, 30.0f64..38.0), 2..14), 30.0f64..900.0),
        |(locs, radius)| {
            let locs: Vec<[f64; 2]> = locs.into_iter().map(|(a, b)| [a, b]).collect();
            let graph = build_city_graph(&locs, radius, DistanceMetric::Haversine).unwrap();
            let mut expected = BTreeSet::new();
            for i in 0..locs.len() {
                for j in 0..locs.len() {
                    if i != j && haversine(locs[i], locs[j]) < radius {
                        expected.insert((i, j));
                    }
                }
            }
            let got: BTreeSet<(usize, usize)> = graph.edges.iter().copied().collect();
            prop_assert_eq!(got.len(), graph.edges.len());
            prop_assert_eq!(&got, &expected);
            for (&(i, j), &w) in graph.edges.iter().zip(&graph.weights) {
                prop_assert!(got.contains(&(j, i)));
                prop_assert!((w - 1.0 / haversine(locs[i], locs[j])).abs() <= 1e-12 * w);
            }
            Ok(())
        },
    ));

    let failures: Vec<&String> = outcomes.iter().filter_map(|o| o.as_ref().err()).collect();
    let pass = failures.is_empty();
    report(
        9,
        "property tests (window count, split sizes, wind encoding, city-graph edges; 256 cases each)",
        pass,
        &if pass { "all 4 properties held".to_string() } else { format!("{failures:?}") },
    );
    assert!(pass);
}
