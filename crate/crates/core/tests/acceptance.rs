//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p mal-core --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mal_core::autodiff::{Graph, Shape, Tensor};
use mal_core::baselines::{mtl_step, train_mtl, BaselineConfig, Mode};
use mal_core::experiment::{ambiguity_gap, median, run, ExperimentConfig, Method, RunOutcome};
use mal_core::gradcheck::{gradcheck, GradcheckConfig};
use mal_core::losses::class_balance_weights;
use mal_core::meta_engine::{base_learning_step, meta_test_step, meta_train_step, parse_runlog, train_with, RUNLOG_HEADER};
use mal_core::models::MetaParams;
use mal_core::synthdata::{generate, reserve_validation};
use mal_core::{f1_report, BaseParams, ModelConfig, TaskSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AMBIGUOUS: &str = include_str!("../../../configs/ambiguous.toml");
const CLEAN: &str = include_str!("../../../configs/clean.toml");
const QUICK: &str = include_str!("../../../configs/quick.toml");

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).expect("bundled config parses")
}

fn max_abs_diff(a: &BaseParams, b: &BaseParams) -> f64 {
    a.tensors()
        .into_iter()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

fn meta_gradient_oracle() -> Verdict {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let r = gradcheck(&cfg).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let passed = r.passed() && r.per_seed.len() >= 20 && cfg.embed_dim <= 8 && cfg.batch <= 4 && elapsed < Duration::from_secs(30);
    Verdict::new(
        passed,
        format!(
            "max relative error {:.2e} over {} seeds (worst seed {}), {:.1} s",
            r.max_rel_error,
            r.per_seed.len(),
            r.worst_seed,
            elapsed.as_secs_f64()
        ),
    )
}

fn first_order_oracle() -> Verdict {
    let start = Instant::now();
    let results = common::primitive_sweep(6, 2024);
    let elapsed = start.elapsed();
    let trials: usize = results.iter().map(|r| r.trials).sum();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("primitives");
    let passed = trials >= 100 && worst.max_rel_error < 1e-6 && elapsed < Duration::from_secs(10);
    Verdict::new(
        passed,
        format!(
            "{} primitives, {trials} trials, worst {} at {:.2e}, {:.2} s",
            results.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

/// A primary batch, an auxiliary batch and a validation batch from the
/// default synthetic task.
struct Fixture {
    theta: BaseParams,
    train: mal_core::Dataset,
    val: mal_core::Dataset,
    aux: mal_core::Dataset,
}

fn fixture(seed: u64) -> Fixture {
    let spec = TaskSpec { n_primary: 400, n_aux: 400, ambiguous_fraction: 0.3, seed, ..TaskSpec::default() };
    let (primary, aux) = generate(&spec).unwrap();
    let (train, val) = reserve_validation(&primary, 0.25, true, seed).unwrap();
    let model = ModelConfig::default();
    let theta = BaseParams::init(&model, spec.num_labels, spec.num_classes, &mut ChaCha8Rng::seed_from_u64(seed));
    Fixture { theta, train, val, aux }
}

fn window(n: usize, batch: usize, step: usize) -> Vec<usize> {
    (0..batch).map(|k| (step * batch + k) % n).collect()
}

fn zero_init() -> Verdict {
    let fx = fixture(3);
    let cfg = TrainConfig { alpha: 0.5, ..TrainConfig::default() };
    let psi = MetaParams::new(ModelConfig::default().embed_dim);
    let au = fx.train.primary_batch(&window(fx.train.len(), 64, 0)).unwrap();
    let fe = fx.aux.aux_batch(&window(fx.aux.len(), 64, 0)).unwrap();

    // every sample of both tasks, not just one batch
    let mut all_half = true;
    for d in [&fx.train, &fx.val, &fx.aux] {
        let w = psi.weights(&fx.theta.backbone.embed(&d.feature_matrix()).unwrap()).unwrap();
        all_half &= w.data().iter().all(|&v| v == 0.5);
    }
    let mut g = Graph::new();
    let tn = fx.theta.bind(&mut g, true);
    let pn = psi.bind(&mut g, true);
    let probe = meta_train_step(&mut g, &tn, &pn, &au, &fe, &cfg).unwrap();
    let batch_half = [probe.objective.raw_au, probe.objective.raw_fe.expect("aux weights")]
        .iter()
        .all(|&n| g.value(n).data().iter().all(|&v| v == 0.5));
    let star = probe.theta_star.values(&g, &fx.theta);
    let fixed = mtl_step(&fx.theta, &au, &fe, 0.5, 0.5, &cfg).unwrap();
    let diff = max_abs_diff(&star, &fixed.theta_hat);
    Verdict::new(
        all_half && batch_half && diff <= 1e-12,
        format!("all initial weights 0.5: {}; probe vs half-weight step max |diff| {diff:.1e}", all_half && batch_half),
    )
}

fn normalization_conservation() -> Verdict {
    let mut cfg = config(QUICK).for_seed(1);
    cfg.train.log_every = 5;
    cfg.train.iters_per_epoch = Some(20);
    let (primary, aux) = generate(&cfg.task).unwrap();
    let (train, val) = reserve_validation(&primary, cfg.val_fraction, cfg.val_per_group, 1).unwrap();
    let model = ModelConfig { input_dim: cfg.task.input_dim, ..cfg.model.clone() };
    let (_, _, log) = train_with(&cfg.train, &model, &train, &val, &aux, true).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for t in log.logged() {
        rows += 1;
        worst = worst.max((t.applied_weight_sum - 1.0).abs());
        // the recorded raw weights must agree with the logged batch means
        let raw: f64 = t.weights.as_ref().expect("recorded").iter().map(|w| w.2).sum();
        let b = cfg.train.batch_train as f64;
        worst = worst.max((raw - (t.mean_w_au + t.mean_w_fe) * b).abs() / raw);
    }
    Verdict::new(rows > 0 && worst <= 1e-9, format!("{rows} logged iterations, max |sum - 1| {worst:.1e}"))
}

fn mtl_reduction() -> Verdict {
    let fx = fixture(4);
    let cfg = TrainConfig { alpha: 0.3, beta: 0.0, batch_train: 32, batch_val: 32, ..TrainConfig::default() };
    let psi = MetaParams::new(ModelConfig::default().embed_dim);
    let cw = class_balance_weights(&fx.val.label_matrix()).unwrap();
    let mut mal = fx.theta.clone();
    let mut mtl = fx.theta.clone();
    let mut worst: f64 = 0.0;
    for step in 0..100 {
        let au = fx.train.primary_batch(&window(fx.train.len(), 32, step)).unwrap();
        let fe = fx.aux.aux_batch(&window(fx.aux.len(), 32, step)).unwrap();
        let val = fx.val.primary_batch(&window(fx.val.len(), 32, step)).unwrap();
        let mut g = Graph::new();
        let tn = mal.bind(&mut g, true);
        let pn = psi.bind(&mut g, true);
        let probe = meta_train_step(&mut g, &tn, &pn, &au, &fe, &cfg).unwrap();
        let meta = meta_test_step(&mut g, &probe.theta_star, &pn, &val, &cw, &cfg).unwrap();
        mal = base_learning_step(&mal, &meta.psi_hat, &au, &fe, &cfg).unwrap().theta_hat;
        mtl = mtl_step(&mtl, &au, &fe, 0.5, 0.5, &cfg).unwrap().theta_hat;
        worst = worst.max(max_abs_diff(&mal, &mtl));
    }

    // the full trainers agree too: same batches, same start, 100 iterations
    let mut tc = TrainConfig { epochs: 1, iters_per_epoch: Some(100), log_every: 1, ..cfg.clone() };
    tc.seed = 9;
    let model = ModelConfig::default();
    let (theta_mal, _, log_mal) = train_with(&tc, &model, &fx.train, &fx.val, &fx.aux, false).unwrap();
    let bc = BaselineConfig { mode: Mode::Mtl, rho: 1.0, train: tc.clone() };
    let (theta_mtl, log_mtl) = train_mtl(&bc, &model, &fx.train, &fx.aux).unwrap();
    let end = max_abs_diff(&theta_mal, &theta_mtl);
    let losses = log_mal
        .traces
        .iter()
        .zip(&log_mtl.traces)
        .map(|(a, b)| (a.au_loss - b.au_loss).abs().max((a.fe_loss - b.fe_loss).abs()))
        .fold(0.0, f64::max);
    let passed = worst <= 1e-12 && end <= 1e-12 && losses <= 1e-12 && log_mal.traces.len() == 100;
    Verdict::new(
        passed,
        format!("stepwise max |diff| {worst:.1e} over 100 steps; trainers {end:.1e}, per-step losses {losses:.1e}"),
    )
}

/// Counting oracle written independently of the metric: F1 = 2tp / (2tp + fp + fn).
fn brute_force_f1(scores: &Tensor, labels: &Tensor, threshold: f64) -> Vec<(f64, f64, f64)> {
    (0..scores.cols())
        .map(|j| {
            let predicted: Vec<usize> = (0..scores.rows()).filter(|&i| scores.get(i, j) >= threshold).collect();
            let actual: Vec<usize> = (0..scores.rows()).filter(|&i| labels.get(i, j) > 0.5).collect();
            let tp = predicted.iter().filter(|i| actual.contains(i)).count() as f64;
            let p = if predicted.is_empty() { 0.0 } else { tp / predicted.len() as f64 };
            let r = if actual.is_empty() { 0.0 } else { tp / actual.len() as f64 };
            let denom = predicted.len() as f64 + actual.len() as f64;
            let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / denom };
            (p, r, f1)
        })
        .collect()
}

fn f1_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut degenerate = 0;
    for k in 0..1000 {
        let n = rng.random_range(1..=100);
        let j = rng.random_range(1..=12);
        let shape = Shape::new(n, j);
        let pos = rng.random_range(0.0..1.0);
        let mut labels = Tensor::new(shape, (0..n * j).map(|_| if rng.random_bool(pos) { 1.0 } else { 0.0 }).collect());
        let mut scores = Tensor::new(shape, (0..n * j).map(|_| rng.random_range(0.0..1.0)).collect());
        // force zero-denominator labels: nothing predicted, nothing present
        if k % 4 == 0 {
            let c = rng.random_range(0..j);
            for i in 0..n {
                labels.set(i, c, 0.0);
                scores.set(i, c, 0.1);
            }
        }
        if k % 5 == 0 {
            let c = rng.random_range(0..j);
            for i in 0..n {
                scores.set(i, c, 0.0);
            }
        }
        let threshold = if k % 3 == 0 { 0.5 } else { rng.random_range(0.01..0.99) };
        let report = f1_report(&scores, &labels, threshold).unwrap();
        let oracle = brute_force_f1(&scores, &labels, threshold);
        for (l, (p, r, f)) in report.labels.iter().zip(&oracle) {
            if l.support == 0 || l.precision + l.recall == 0.0 {
                degenerate += 1;
            }
            worst = worst.max((l.precision - p).abs()).max((l.recall - r).abs()).max((l.f1 - f).abs());
        }
        let avg = oracle.iter().map(|o| o.2).sum::<f64>() / j as f64;
        worst = worst.max((report.average_f1 - avg).abs());
    }
    Verdict::new(worst <= 1e-12 && degenerate > 0, format!("1000 instances, {degenerate} degenerate labels, max |diff| {worst:.1e}"))
}

struct TimedRun {
    outcome: RunOutcome,
    seconds: f64,
}

fn timed(cfg: &ExperimentConfig, method: Method, seed: u64) -> TimedRun {
    let start = Instant::now();
    let (outcome, _) = run(cfg, method, seed).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", method.name()));
    TimedRun { outcome, seconds: start.elapsed().as_secs_f64() }
}

struct Experiments {
    mal: Vec<TimedRun>,
    mtl: Vec<TimedRun>,
    clean_mtl: Vec<TimedRun>,
    clean_stl: Vec<TimedRun>,
    seeds: usize,
    epochs: usize,
    ambiguous_fraction: f64,
}

fn experiments() -> Experiments {
    let amb = config(AMBIGUOUS);
    let clean = config(CLEAN);
    let seeds = amb.run_seeds();
    let runs = |cfg: &ExperimentConfig, m: Method| seeds.iter().map(|&s| timed(cfg, m, s)).collect::<Vec<_>>();
    Experiments {
        mal: runs(&amb, Method::Mal),
        mtl: runs(&amb, Method::Mtl),
        clean_mtl: runs(&clean, Method::Mtl),
        clean_stl: runs(&clean, Method::Stl),
        seeds: seeds.len(),
        epochs: amb.train.epochs,
        ambiguous_fraction: amb.task.ambiguous_fraction,
    }
}

fn slowest(runs: &[&[TimedRun]]) -> f64 {
    runs.iter().flat_map(|r| r.iter().map(|t| t.seconds)).fold(0.0, f64::max)
}

fn ambiguity_suppression(e: &Experiments) -> Verdict {
    let gaps: Vec<f64> = e.mal.iter().map(|r| ambiguity_gap(&r.outcome).expect("both kinds of aux samples")).collect();
    let m = median(&gaps);
    let slow = slowest(&[&e.mal]);
    let passed = e.seeds >= 5 && e.epochs <= 30 && e.ambiguous_fraction == 0.4 && slow <= 120.0 && m >= 0.05;
    let listed: Vec<String> = gaps.iter().map(|g| format!("{g:.3}")).collect();
    Verdict::new(passed, format!("median clean - ambiguous weight {m:.3} (per seed {}), slowest run {slow:.1} s", listed.join(", ")))
}

fn negative_transfer(e: &Experiments) -> Verdict {
    let f1 = |runs: &[TimedRun]| median(&runs.iter().map(|r| r.outcome.report.average_f1).collect::<Vec<_>>());
    let (mal, mtl) = (f1(&e.mal), f1(&e.mtl));
    let (cmtl, cstl) = (f1(&e.clean_mtl), f1(&e.clean_stl));
    let slow = slowest(&[&e.mal, &e.mtl, &e.clean_mtl, &e.clean_stl]);
    let passed = mal >= mtl && mal - mtl >= 0.01 && cmtl >= cstl && slow <= 120.0 && e.seeds >= 5;
    Verdict::new(
        passed,
        format!("ambiguous: MAL {mal:.4} vs MTL {mtl:.4} (+{:.4}); clean: MTL {cmtl:.4} vs STL {cstl:.4}", mal - mtl),
    )
}

fn determinism() -> Verdict {
    let cfg = config(QUICK);
    let mut identical = true;
    for m in Method::ALL {
        let a = run(&cfg, m, 5).unwrap().0;
        let b = run(&cfg, m, 5).unwrap().0;
        identical &= a.log.to_csv().as_bytes() == b.log.to_csv().as_bytes();
        identical &= a.report == b.report;
    }
    Verdict::new(identical, "two invocations per method produce byte-identical run logs")
}

fn curve_emission() -> Verdict {
    let cfg = config(QUICK);
    let mut problems = Vec::new();
    for m in Method::ALL {
        let (out, _) = run(&cfg, m, 2).unwrap();
        let csv = out.log.to_csv();
        if csv.lines().next() != Some(RUNLOG_HEADER) {
            problems.push(format!("{}: header", m.name()));
        }
        let rows = match parse_runlog(&csv) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{}: {e}", m.name()));
                continue;
            }
        };
        let every = cfg.train.log_every;
        let total = out.log.traces.len();
        let expected: Vec<usize> = (0..total).filter(|i| i % every == 0).collect();
        if rows.iter().map(|r| r.iter).collect::<Vec<_>>() != expected {
            problems.push(format!("{}: cadence", m.name()));
        }
        if !rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_w_au) && (0.0..=1.0).contains(&r.mean_w_fe)) {
            problems.push(format!("{}: mean weight outside [0, 1]", m.name()));
        }
        if !(csv.ends_with('\n') && !csv.contains('\r')) {
            problems.push(format!("{}: line endings", m.name()));
        }
    }
    let detail = if problems.is_empty() { "header, cadence and weight ranges hold for mal, mtl and stl".to_string() } else { problems.join("; ") };
    Verdict::new(problems.is_empty(), detail)
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, name: &str, v: Verdict| {
        all &= v.passed;
        println!("[{}] {n:>2} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    };
    report(1, "meta-gradient oracle", meta_gradient_oracle());
    report(2, "first-order oracle", first_order_oracle());
    report(3, "zero-init property", zero_init());
    report(4, "normalization conservation", normalization_conservation());
    report(5, "MTL-reduction oracle", mtl_reduction());
    report(6, "F1 oracle", f1_oracle());
    let e = experiments();
    report(7, "ambiguity suppression", ambiguity_suppression(&e));
    report(8, "negative-transfer ordering", negative_transfer(&e));
    report(9, "determinism", determinism());
    report(10, "curve emission", curve_emission());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
