//! Fixed-weight trainers: single-task (primary only) and multi-task with a
//! constant auxiliary loss weight `rho`.
//!
//! Both reuse the bi-level trainer's objective, batch streams and
//! initialization, so a comparison isolates the weighting mechanism.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::batch::{AuxBatch, PrimaryBatch};
use crate::error::{Error, Result};
use crate::meta_engine::{
    check_compatible, diverged, fixed_weight_step, init_params, trace_from, BaseStep, RunLog, Streams, TrainConfig,
    Weigher,
};
use crate::models::{AuDetector, BaseParams, ModelConfig};
use crate::synthdata::{Dataset, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Stl,
    Mtl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub mode: Mode,
    /// Auxiliary loss weight; ignored in single-task mode.
    pub rho: f64,
    pub train: TrainConfig,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.mode == Mode::Mtl && !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be finite and non-negative, got {}", self.rho)));
        }
        Ok(())
    }
}

/// One multi-task SGD step with raw weights `w_au` / `w_fe` on every sample.
pub fn mtl_step(
    theta: &BaseParams,
    au: &PrimaryBatch,
    fe: &AuxBatch,
    w_au: f64,
    w_fe: f64,
    cfg: &TrainConfig,
) -> Result<BaseStep> {
    let mut g = Graph::new();
    let nodes = theta.bind(&mut g, true);
    fixed_weight_step(&mut g, theta, &nodes, Weigher::Constant { au: w_au, fe: w_fe }, au, Some(fe), cfg)
}

/// One single-task SGD step on the primary loss. Only the backbone and the
/// primary head move.
pub fn stl_step(theta: &BaseParams, au: &PrimaryBatch, cfg: &TrainConfig) -> Result<BaseStep> {
    let mut g = Graph::new();
    let nodes = theta.bind(&mut g, true);
    fixed_weight_step(&mut g, theta, &nodes, Weigher::Constant { au: 1.0, fe: 0.0 }, au, None, cfg)
}

/// Multi-task training on `L_au + rho * L_fe`.
pub fn train_mtl(
    cfg: &BaselineConfig,
    model: &ModelConfig,
    primary: &Dataset,
    aux: &Dataset,
) -> Result<(BaseParams, RunLog)> {
    cfg.validate()?;
    check_compatible(model, primary, &[aux])?;
    if aux.task() != Task::Aux || aux.is_empty() {
        return Err(Error::Config("auxiliary training set must be a non-empty auxiliary dataset".into()));
    }
    let t = &cfg.train;
    let mut theta = init_params(model, primary.num_labels(), aux.num_classes(), t.seed);
    let mut log = RunLog::new(t.log_every);
    let mut streams = Streams::new(t, primary.len(), Some(aux.len()));
    let mut iter = 0;
    for _ in 0..t.epochs {
        for _ in 0..streams.iters_per_epoch {
            let au = primary.primary_batch(streams.primary.next())?;
            let fe = aux.aux_batch(streams.aux.as_mut().expect("auxiliary stream").next())?;
            let step = mtl_step(&theta, &au, &fe, 1.0, cfg.rho, t).map_err(|e| diverged(e, iter, &log))?;
            log.traces.push(trace_from(iter, &step, f64::NAN, &au, Some(&fe), false));
            theta = step.theta_hat;
            iter += 1;
        }
    }
    Ok((theta, log))
}

/// Primary-task-only training of the backbone and primary head.
pub fn train_stl(cfg: &BaselineConfig, model: &ModelConfig, primary: &Dataset) -> Result<(AuDetector, RunLog)> {
    cfg.train.validate()?;
    check_compatible(model, primary, &[])?;
    let t = &cfg.train;
    // same draw order as the multi-task init; the auxiliary head comes last
    // and is dropped
    let mut theta = init_params(model, primary.num_labels(), 1, t.seed);
    let mut log = RunLog::new(t.log_every);
    let mut streams = Streams::new(t, primary.len(), None);
    let mut iter = 0;
    for _ in 0..t.epochs {
        for _ in 0..streams.iters_per_epoch {
            let au = primary.primary_batch(streams.primary.next())?;
            let step = stl_step(&theta, &au, t).map_err(|e| diverged(e, iter, &log))?;
            log.traces.push(trace_from(iter, &step, f64::NAN, &au, None, false));
            theta = step.theta_hat;
            iter += 1;
        }
    }
    Ok((theta.au_detector(), log))
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineModel {
    Stl(AuDetector),
    Mtl(BaseParams),
}

impl BaselineModel {
    pub fn au_detector(&self) -> AuDetector {
        match self {
            BaselineModel::Stl(d) => d.clone(),
            BaselineModel::Mtl(p) => p.au_detector(),
        }
    }
}

/// Runs the trainer selected by `cfg.mode`. Single-task mode never reads
/// `aux`.
pub fn train_baseline(
    cfg: &BaselineConfig,
    model: &ModelConfig,
    primary: &Dataset,
    aux: &Dataset,
) -> Result<(BaselineModel, RunLog)> {
    match cfg.mode {
        Mode::Stl => train_stl(cfg, model, primary).map(|(m, l)| (BaselineModel::Stl(m), l)),
        Mode::Mtl => train_mtl(cfg, model, primary, aux).map(|(m, l)| (BaselineModel::Mtl(m), l)),
    }
}
