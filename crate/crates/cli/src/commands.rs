use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use mal_core::checkpoint::Checkpoint;
use mal_core::experiment::{ambiguity_gap, run, summary_csv, CompareEntry, ExperimentConfig, Method};
use mal_core::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use mal_core::synthdata::{read_csv, Split, Task};
use mal_core::{f1_report, Error};
use rayon::prelude::*;

use crate::artifacts::{check_manifest, write_run, Manifest};
use crate::{CompareArgs, EvalArgs, GradcheckArgs, Overrides, TrainArgs};

/// A problem with the invocation or the configuration (exit code 2), as
/// opposed to a failure while running (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn apply(cfg: &mut ExperimentConfig, o: &Overrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.alpha {
        t.alpha = v;
    }
    if let Some(v) = o.beta {
        t.beta = v;
    }
    if let Some(v) = o.batch_train {
        t.batch_train = v;
    }
    if let Some(v) = o.batch_val {
        t.batch_val = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.iters_per_epoch {
        t.iters_per_epoch = Some(v);
    }
    if let Some(v) = o.log_every {
        t.log_every = v;
    }
    if o.no_normalize {
        t.normalize_weights = false;
    }
    if o.detach_normalizer {
        t.normalize_in_meta_graph = false;
    }
    if let Some(v) = o.rho {
        cfg.rho = v;
    }
}

fn parse_method(name: &str) -> Result<Method> {
    Method::from_name(name).ok_or_else(|| usage(format!("unknown method {name:?}; expected mal, mtl or stl")))
}

fn resolved_config(path: &Path, o: &Overrides, method: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    apply(&mut cfg, o);
    if let Some(m) = method {
        cfg.method = parse_method(m)?;
    }
    cfg.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os("MAL_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from).join(name)
}

fn run_name(method: Method, seed: u64) -> String {
    format!("{}-seed{seed}", method.name())
}

fn report_check(dir: &Path, problems: &[String]) -> ExitCode {
    if problems.is_empty() {
        println!("{}: manifest ok", dir.display());
        ExitCode::SUCCESS
    } else {
        for p in problems {
            println!("{}: {p}", dir.display());
        }
        ExitCode::FAILURE
    }
}

/// Runs one method and seed into `dir`. On divergence the partial run log is
/// flushed before the error is returned.
fn train_into(cfg: &ExperimentConfig, method: Method, seed: u64, dir: &Path) -> Result<mal_core::F1Report> {
    let hash = cfg.hash();
    match run(cfg, method, seed) {
        Ok((outcome, data)) => {
            write_run(dir, &cfg.to_toml(), &hash, &outcome, &data)?;
            if let Some(gap) = (method == Method::Mal).then(|| ambiguity_gap(&outcome)).flatten() {
                log::info!("{}: clean minus ambiguous auxiliary weight {gap}", dir.display());
            }
            Ok(outcome.report)
        }
        Err(Error::Diverged { iteration, log }) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut m = Manifest::new(dir, hash, seed.to_string());
            m.write("runlog.csv", &log.to_csv())?;
            m.finish()?;
            Err(anyhow!("training diverged at iteration {iteration}; partial run log in {}", dir.display()))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = resolved_config(&a.config, &a.overrides, a.method.as_deref())?;
    let seed = a.seed.unwrap_or_else(|| cfg.run_seeds()[0]);
    let method = cfg.method;
    let dir = a.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| default_out(&run_name(method, seed)));
    if a.check {
        let problems = check_manifest(&dir, &cfg.hash(), &seed.to_string())?;
        return Ok(report_check(&dir, &problems));
    }
    let report = train_into(&cfg, method, seed, &dir)?;
    println!("{} seed {seed} -> {}", method.name(), dir.display());
    print!("{}", report.display_percent());
    Ok(ExitCode::SUCCESS)
}

pub fn compare(a: CompareArgs) -> Result<ExitCode> {
    let cfg = resolved_config(&a.config, &a.overrides, None)?;
    let mut methods = Vec::new();
    for m in &a.methods {
        let m = parse_method(m.trim())?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.len() < 2 {
        return Err(usage("compare needs at least two distinct methods"));
    }
    let seeds = if a.seeds.is_empty() { cfg.run_seeds() } else { a.seeds.clone() };
    let root = a.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| default_out("compare"));
    let hash = cfg.hash();
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let jobs: Vec<(Method, u64)> = methods.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();

    if a.check {
        let mut problems = Vec::new();
        for &(m, s) in &jobs {
            let dir = root.join(run_name(m, s));
            match check_manifest(&dir, &hash, &s.to_string()) {
                Ok(p) => problems.extend(p.into_iter().map(|p| format!("{}: {p}", run_name(m, s)))),
                Err(e) => problems.push(format!("{e:#}")),
            }
        }
        problems.extend(check_manifest(&root, &hash, &seed_list)?);
        return Ok(report_check(&root, &problems));
    }

    let threads = a.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("building worker pool")?;
    let entries: Vec<CompareEntry> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let result = train_into(&cfg, method, seed, &root.join(run_name(method, seed)));
                if let Err(e) = &result {
                    eprintln!("{} seed {seed} failed: {e:#}", method.name());
                }
                CompareEntry { method, seed, result: result.map_err(|e| format!("{e:#}")) }
            })
            .collect()
    });

    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let summary = summary_csv(&entries, cfg.task.num_labels);
    let mut m = Manifest::new(&root, hash, seed_list);
    m.write("summary.csv", &summary)?;
    m.finish()?;

    println!("{:<6} {:>8}  average F1 x 100", "method", "seed");
    for e in &entries {
        match &e.result {
            Ok(r) => println!("{:<6} {:>8}  {:5.1}", e.method.name(), e.seed, 100.0 * r.average_f1),
            Err(_) => println!("{:<6} {:>8}  failed", e.method.name(), e.seed),
        }
    }
    println!("summary: {}", root.join("summary.csv").display());
    let failed = entries.iter().filter(|e| e.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", entries.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// Largest sizes accepted by `gradcheck`; finite differences over bigger
/// nets are slow and ill-conditioned.
const MAX_EMBED: usize = 8;
const MAX_BATCH: usize = 4;

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<GradcheckConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => GradcheckConfig::default(),
    };
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.input_dim, a.input_dim);
    set(&mut cfg.hidden_dim, a.hidden_dim);
    set(&mut cfg.embed_dim, a.embed_dim);
    set(&mut cfg.num_labels, a.labels);
    set(&mut cfg.num_classes, a.classes);
    set(&mut cfg.batch, a.batch);
    set(&mut cfg.val_batch, a.val_batch);
    set(&mut cfg.seeds, a.seeds);
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.first_seed = v;
    }
    if let Some(v) = a.tolerance {
        cfg.tolerance = v;
    }
    if a.no_normalize {
        cfg.normalize_weights = false;
    }
    if a.corrupt.is_some() {
        cfg.corrupt = a.corrupt.clone();
    }
    if cfg.embed_dim > MAX_EMBED || cfg.batch > MAX_BATCH || cfg.val_batch > MAX_BATCH {
        return Err(usage(format!("gradcheck is limited to embed_dim <= {MAX_EMBED} and batches <= {MAX_BATCH}")));
    }
    let report = run_gradcheck(&cfg).map_err(|e| match e {
        Error::Config(m) => usage(m),
        e => e.into(),
    })?;
    println!("seeds: {}  max relative error: {:e}  tolerance: {:e}", report.per_seed.len(), report.max_rel_error, report.tolerance);
    if report.passed() {
        println!("ok");
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAILED: worst coordinate seed {} meta {}[{}]: analytic {:e}, numeric {:e}",
            report.worst_seed, report.worst_param, report.worst_index, report.worst_analytic, report.worst_numeric
        );
        Ok(ExitCode::FAILURE)
    }
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let split = Split::from_name(&a.split).ok_or_else(|| usage(format!("unknown split {:?}; expected train, val or test", a.split)))?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let data = read_csv(&a.data)?;
    let set = data
        .get(&(Task::Primary, split))
        .ok_or_else(|| anyhow!("{} has no primary {} rows", a.data.display(), split.name()))?;
    let detector = &checkpoint.detector;
    let view = detector.view();
    if detector.backbone.input_dim() != set.input_dim() || view.num_labels() != set.num_labels() {
        return Err(anyhow!(
            "checkpoint expects {} features and {} labels, dataset has {} and {}",
            detector.backbone.input_dim(),
            view.num_labels(),
            set.input_dim(),
            set.num_labels()
        ));
    }
    let scores = view.predict(&set.feature_matrix())?;
    let report = f1_report(&scores, &set.label_matrix(), a.threshold).map_err(|e| match e {
        Error::Config(m) => usage(m),
        e => e.into(),
    })?;
    print!("{}", report.display_percent());
    if let Some(out) = &a.out {
        report.write_csv(out)?;
    }
    Ok(ExitCode::SUCCESS)
}
