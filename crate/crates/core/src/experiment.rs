//! End-to-end experiment runs: generate data, train one method, evaluate on
//! held-out groups.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{train_mtl, train_stl, BaselineConfig, Mode};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::meta_engine::{train, weight_dump, RunLog, TrainConfig, WeightRecord};
use crate::metrics::{f1_report, F1Report, DEFAULT_THRESHOLD};
use crate::models::{AuDetector, ModelConfig};
use crate::synthdata::{generate, generate_test, reserve_validation, Dataset, Task, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mal,
    Mtl,
    Stl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Stl, Method::Mtl, Method::Mal];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mal => "mal",
            Method::Mtl => "mtl",
            Method::Stl => "stl",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Run seeds. When empty, `0..repeats` is used.
    pub seeds: Vec<u64>,
    pub repeats: usize,
    pub out_dir: Option<PathBuf>,
    /// Share of the primary training data held out for meta updates. Every
    /// method trains on the remainder.
    pub val_fraction: f64,
    pub val_per_group: bool,
    /// Auxiliary loss weight of the multi-task baseline.
    pub rho: f64,
    /// Give every method the same number of SGD steps per epoch: one pass
    /// over the larger of the primary and auxiliary training sets. Ignored
    /// when `train.iters_per_epoch` is set.
    pub equal_steps: bool,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Mal,
            seeds: Vec::new(),
            repeats: 1,
            out_dir: None,
            val_fraction: 0.02,
            val_per_group: true,
            rho: 1.0,
            equal_steps: true,
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_dim != self.task.input_dim {
            return Err(Error::Config(format!(
                "model input_dim {} does not match task input_dim {}",
                self.model.input_dim, self.task.input_dim
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be finite and non-negative, got {}", self.rho)));
        }
        if self.seeds.is_empty() && self.repeats == 0 {
            return Err(Error::Config("no seeds: give a seed list or a positive repeat count".into()));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repeats as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// The configuration of one run: `seed` drives initialization, batch
    /// order and the validation split, and offsets the data seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c.task.seed = self.task.seed.wrapping_add(seed);
        c
    }

    /// Hex SHA-256 of the TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Data of one run.
#[derive(Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub aux: Dataset,
    pub test: Dataset,
}

/// Generates and splits the data for an already seed-specialized config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (primary, aux) = generate(&cfg.task)?;
    let (train, val) = reserve_validation(&primary, cfg.val_fraction, cfg.val_per_group, cfg.train.seed)?;
    if val.is_empty() {
        return Err(Error::Config(format!("val_fraction {} leaves the validation set empty", cfg.val_fraction)));
    }
    let test = generate_test(&cfg.task)?;
    Ok(ExperimentData { train, val, aux, test })
}

pub fn evaluate(detector: &AuDetector, test: &Dataset) -> Result<F1Report> {
    let scores = detector.view().predict(&test.feature_matrix())?;
    f1_report(&scores, &test.label_matrix(), DEFAULT_THRESHOLD)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub report: F1Report,
    pub log: RunLog,
    /// Final per-sample weights over the training data.
    pub weights: Vec<WeightRecord>,
    pub checkpoint: Checkpoint,
}

fn constant_weights(data: &Dataset, w: f64) -> Vec<WeightRecord> {
    data.samples()
        .iter()
        .map(|s| WeightRecord { sample_id: s.id, task: data.task(), weight: w, ambiguous: s.ambiguous })
        .collect()
}

/// Trains `method` on data prepared from `cfg.for_seed(seed)` and scores it
/// on the held-out test groups.
pub fn run(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<(RunOutcome, ExperimentData)> {
    let cfg = cfg.for_seed(seed);
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let mut cfg = cfg;
    if cfg.equal_steps && cfg.train.iters_per_epoch.is_none() {
        let n = data.train.len().max(data.aux.len());
        cfg.train.iters_per_epoch = Some((n / cfg.train.batch_train).max(1));
    }
    let baseline = |mode| BaselineConfig { mode, rho: cfg.rho, train: cfg.train.clone() };
    let (checkpoint, log, weights) = match method {
        Method::Mal => {
            let (theta, psi, log) = train(&cfg.train, &cfg.model, &data.train, &data.val, &data.aux)?;
            let weights = weight_dump(&theta, &psi, &[&data.train, &data.aux])?;
            (Checkpoint::from_base(&theta, Some(&psi)), log, weights)
        }
        Method::Mtl => {
            let (theta, log) = train_mtl(&baseline(Mode::Mtl), &cfg.model, &data.train, &data.aux)?;
            let mut weights = constant_weights(&data.train, 1.0);
            weights.extend(constant_weights(&data.aux, cfg.rho));
            (Checkpoint::from_base(&theta, None), log, weights)
        }
        Method::Stl => {
            let (det, log) = train_stl(&baseline(Mode::Stl), &cfg.model, &data.train)?;
            let weights = constant_weights(&data.train, 1.0);
            (Checkpoint { detector: det, fe_head: None, meta: None }, log, weights)
        }
    };
    let report = evaluate(&checkpoint.detector, &data.test)?;
    Ok((RunOutcome { method, seed, report, log, weights, checkpoint }, data))
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Result of one run in a comparison.
#[derive(Clone, Debug)]
pub struct CompareEntry {
    pub method: Method,
    pub seed: u64,
    pub result: std::result::Result<F1Report, String>,
}

/// Summary CSV: one row per run with per-label and average `F1 x 100`, then
/// one `median` row per method over its completed runs.
pub fn summary_csv(entries: &[CompareEntry], num_labels: usize) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "seed".into(), "status".into()];
    header.extend((0..num_labels).map(|j| format!("f1x100_label_{j}")));
    header.push("f1x100_average".into());
    w.write_record(&header).expect("in-memory write");
    let row_of = |r: &F1Report| -> Vec<f64> {
        r.labels.iter().map(|l| 100.0 * l.f1).chain([100.0 * r.average_f1]).collect()
    };
    let mut methods: Vec<Method> = Vec::new();
    for e in entries {
        if !methods.contains(&e.method) {
            methods.push(e.method);
        }
        let mut rec = vec![e.method.name().to_string(), e.seed.to_string()];
        match &e.result {
            Ok(r) => {
                rec.push("ok".into());
                rec.extend(row_of(r).iter().map(f64::to_string));
            }
            Err(msg) => {
                rec.push(format!("failed: {msg}"));
                rec.extend(std::iter::repeat_n(String::new(), num_labels + 1));
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    for m in methods {
        let rows: Vec<Vec<f64>> =
            entries.iter().filter(|e| e.method == m).filter_map(|e| e.result.as_ref().ok()).map(row_of).collect();
        let mut rec = vec![m.name().to_string(), "median".into(), format!("{} runs", rows.len())];
        for c in 0..=num_labels {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            rec.push(if col.is_empty() { String::new() } else { median(&col).to_string() });
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Mean raw weight of clean and of ambiguous auxiliary training samples.
pub fn ambiguity_gap(outcome: &RunOutcome) -> Option<f64> {
    crate::meta_engine::aux_weight_gap(&outcome.weights).map(|(clean, amb)| clean - amb)
}

/// Number of auxiliary rows in a weight dump.
pub fn aux_rows(weights: &[WeightRecord]) -> usize {
    weights.iter().filter(|w| w.task == Task::Aux).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            val_fraction: 0.1,
            task: TaskSpec {
                n_primary: 200,
                n_aux: 200,
                n_test: 100,
                n_groups: 4,
                n_aux_groups: 4,
                n_test_groups: 2,
                ambiguous_fraction: 0.3,
                ..TaskSpec::default()
            },
            model: ModelConfig { hidden_dim: 8, embed_dim: 6, ..ModelConfig::default() },
            train: TrainConfig { alpha: 0.5, beta: 0.5, batch_train: 16, batch_val: 16, epochs: 1, log_every: 2, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = small();
        c.seeds = vec![3, 5];
        c.out_dir = Some(PathBuf::from("runs/x"));
        let text = c.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nalpah = 0.1").is_err());
        let partial = ExperimentConfig::from_toml("method = \"stl\"\n[train]\nalpha = 0.25").unwrap();
        assert_eq!(partial.method, Method::Stl);
        assert_eq!(partial.train.alpha, 0.25);
        assert_eq!(partial.train.beta, TrainConfig::default().beta);
    }

    #[test]
    fn hash_tracks_content() {
        let c = small();
        assert_eq!(c.hash(), small().hash());
        assert_eq!(c.hash().len(), 64);
        assert_ne!(c.hash(), c.for_seed(1).hash());
    }

    #[test]
    fn seeds_fall_back_to_repeats() {
        let c = ExperimentConfig { repeats: 3, ..small() };
        assert_eq!(c.run_seeds(), vec![0, 1, 2]);
        let c = ExperimentConfig { seeds: vec![9], ..c };
        assert_eq!(c.run_seeds(), vec![9]);
        assert!(ExperimentConfig { repeats: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn mismatched_input_dims_are_rejected() {
        let mut c = small();
        c.model.input_dim = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_method_runs() {
        let c = small();
        for m in Method::ALL {
            let (out, data) = run(&c, m, 1).unwrap();
            assert_eq!(out.report.labels.len(), 12);
            assert!(!out.log.traces.is_empty());
            let expect_aux = if m == Method::Stl { 0 } else { data.aux.len() };
            assert_eq!(aux_rows(&out.weights), expect_aux);
            assert_eq!(out.checkpoint.meta.is_some(), m == Method::Mal);
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn summary_has_run_and_median_rows() {
        let r = |f: f64| F1Report {
            labels: vec![crate::metrics::LabelScore { precision: f, recall: f, f1: f, support: 1 }],
            average_f1: f,
        };
        let entries = vec![
            CompareEntry { method: Method::Stl, seed: 0, result: Ok(r(0.5)) },
            CompareEntry { method: Method::Stl, seed: 1, result: Ok(r(0.7)) },
            CompareEntry { method: Method::Mal, seed: 0, result: Err("diverged, at 3".into()) },
        ];
        let csv = summary_csv(&entries, 1);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,seed,status,f1x100_label_0,f1x100_average");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[4], "stl,median,2 runs,60,60");
        assert!(lines[3].starts_with("mal,0,\"failed: diverged, at 3\""));
        assert_eq!(lines[5], "mal,median,0 runs,,");
    }
}
