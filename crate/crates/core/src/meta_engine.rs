//! Bi-level training loop.
//!
//! Each iteration runs three stages on one primary batch and one auxiliary
//! batch:
//!
//! 1. **probe**: weight every sample with the meta net, take one SGD step
//!    on the weighted loss, keeping the step's dependence on the meta
//!    parameters in the graph ([`meta_train_step`]);
//! 2. **meta update**: differentiate the primary validation loss at the
//!    probed parameters with respect to the meta parameters, through the
//!    probe step, and take one SGD step on them ([`meta_test_step`]);
//! 3. **commit**: re-weight the same batches with the updated meta net and
//!    step the *original* base parameters ([`base_learning_step`]). The probe
//!    is discarded.
//!
//! Weights enter the base step as loss coefficients only: the meta net reads
//! a detached copy of the embedding, so no gradient flows from a weight back
//! into the backbone.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Shape, Tensor};
use crate::batch::{AuxBatch, PrimaryBatch};
use crate::error::{Error, Result};
use crate::losses::{au_loss, class_balance_weights, fe_loss, validation_loss, PerSampleLosses};
use crate::models::{au_forward, fe_forward, meta_forward, BaseNodes, BaseParams, MetaNodes, MetaParams, ModelConfig};
use crate::synthdata::{Dataset, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Base-net step size.
    pub alpha: f64,
    /// Meta-net step size.
    pub beta: f64,
    /// Samples per task per iteration.
    pub batch_train: usize,
    /// Validation samples per meta update, capped at the validation set size.
    pub batch_val: usize,
    pub epochs: usize,
    /// Iterations per epoch. Defaults to one pass over the primary training
    /// set, `floor(n_primary / batch_train)`.
    pub iters_per_epoch: Option<usize>,
    pub seed: u64,
    /// Rescale each iteration's weights so both tasks together sum to one.
    pub normalize_weights: bool,
    /// Whether the meta-gradient flows through the normalizer. When false
    /// the normalizer is treated as a constant in the graph.
    pub normalize_in_meta_graph: bool,
    /// Run-log CSV cadence, in iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.001,
            batch_train: 64,
            batch_val: 256,
            epochs: 10,
            iters_per_epoch: None,
            seed: 0,
            normalize_weights: true,
            normalize_in_meta_graph: true,
            log_every: 20,
        }
    }
}

impl TrainConfig {
    /// Step sizes may be zero (that freezes the respective parameters) but
    /// must be finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if self.batch_train == 0 || self.batch_val == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::Config("iters_per_epoch must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// What one training iteration measured.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    /// Zero-based iteration index.
    pub iter: usize,
    /// Batch mean of the per-sample primary loss at the iteration's start.
    pub au_loss: f64,
    /// Batch mean of the per-sample auxiliary loss at the iteration's start.
    pub fe_loss: f64,
    /// Validation loss at the probed parameters; NaN for trainers without a
    /// validation step.
    pub val_loss: f64,
    /// Mean committed weight of the primary batch, before normalization.
    pub mean_w_au: f64,
    /// Mean committed weight of the auxiliary batch, before normalization.
    pub mean_w_fe: f64,
    /// Committed weighted objective at the iteration's start parameters.
    pub total_loss: f64,
    /// Sum of the weights actually applied, over both batches.
    pub applied_weight_sum: f64,
    /// `(sample_id, task, raw weight)` for every sample of the iteration,
    /// when [`RunLog::record_weights`] is set.
    pub weights: Option<Vec<(u64, Task, f64)>>,
}

pub const RUNLOG_HEADER: &str = "iter,au_loss,fe_loss,val_loss,mean_w_au,mean_w_fe";

/// Every iteration's trace plus the CSV cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub log_every: usize,
    pub record_weights: bool,
    pub traces: Vec<IterationTrace>,
}

impl RunLog {
    pub fn new(log_every: usize) -> Self {
        Self { log_every: log_every.max(1), record_weights: false, traces: Vec::new() }
    }

    /// Traces that appear in the CSV: iterations divisible by `log_every`.
    pub fn logged(&self) -> impl Iterator<Item = &IterationTrace> {
        self.traces.iter().filter(move |t| t.iter % self.log_every == 0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for t in self.logged() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.iter, t.au_loss, t.fe_loss, t.val_loss, t.mean_w_au, t.mean_w_fe
            ));
        }
        out
    }

    /// Writes [`to_csv`](Self::to_csv) and returns the number of data rows.
    pub fn write_csv(&self, path: &Path) -> Result<usize> {
        write_file(path, &self.to_csv())?;
        Ok(self.logged().count())
    }
}

/// One parsed run-log CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub au_loss: f64,
    pub fe_loss: f64,
    pub val_loss: f64,
    pub mean_w_au: f64,
    pub mean_w_fe: f64,
}

/// Parses run-log CSV text, checking the header and column count.
pub fn parse_runlog(text: &str) -> std::result::Result<Vec<LogRow>, String> {
    let mut lines = text.split('\n');
    match lines.next() {
        Some(h) if h == RUNLOG_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(format!("row {}: {} columns", n + 1, f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("row {}: bad number {:?}", n + 1, f[i]));
        rows.push(LogRow {
            iter: f[0].parse().map_err(|_| format!("row {}: bad iteration {:?}", n + 1, f[0]))?,
            au_loss: num(1)?,
            fe_loss: num(2)?,
            val_loss: num(3)?,
            mean_w_au: num(4)?,
            mean_w_fe: num(5)?,
        });
    }
    Ok(rows)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Divides every weight by the combined sum of both tasks' weights.
///
/// With `in_graph = false` the divisor enters the graph as a constant, so
/// derivatives see a fixed rescaling. All weights must be non-negative.
pub fn normalize_weights(g: &mut Graph, w_au: Node, w_fe: Option<Node>, in_graph: bool) -> Result<(Node, Option<Node>)> {
    let nodes: Vec<Node> = std::iter::once(w_au).chain(w_fe).collect();
    if nodes.iter().any(|&n| g.value(n).data().iter().any(|&v| !(v >= 0.0))) {
        return Err(Error::Data("sample weights must be non-negative".into()));
    }
    let mut total = g.sum(w_au)?;
    if let Some(f) = w_fe {
        let s = g.sum(f)?;
        total = g.add(total, s)?;
    }
    if g.value(total).item() == 0.0 {
        return Err(Error::Data("cannot normalize weights: both weight sums are zero".into()));
    }
    let total = if in_graph { total } else { g.detach(total) };
    let scale = |g: &mut Graph, w: Node| -> Result<Node> {
        let d = g.broadcast(total, g.shape(w))?;
        g.div(w, d)
    };
    let a = scale(g, w_au)?;
    let f = match w_fe {
        Some(f) => Some(scale(g, f)?),
        None => None,
    };
    Ok((a, f))
}

/// How an objective weights its samples.
#[derive(Clone, Copy, Debug)]
pub enum Weigher<'a> {
    /// Meta-net weights on detached embeddings.
    Meta(&'a MetaNodes),
    /// The same raw weight for every sample of a task.
    Constant { au: f64, fe: f64 },
}

/// The weighted objective shared by every trainer.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub losses: PerSampleLosses,
    /// Raw weights, `B x 1`.
    pub raw_au: Node,
    pub raw_fe: Option<Node>,
    /// Weights as applied (after optional normalization).
    pub w_au: Node,
    pub w_fe: Option<Node>,
    pub total: Node,
}

/// Builds `sum w_au L_au + sum w_fe L_fe` on `g`. Without an auxiliary batch
/// only the primary term is formed.
pub fn weighted_objective(
    g: &mut Graph,
    theta: &BaseNodes,
    weigher: Weigher<'_>,
    au: &PrimaryBatch,
    fe: Option<&AuxBatch>,
    cfg: &TrainConfig,
) -> Result<Objective> {
    let xa = g.constant(au.features.clone());
    let (ea, sa) = au_forward(g, &theta.backbone, &theta.au_head, xa)?;
    let la = au_loss(g, sa, &au.labels)?;
    let fe_part = match fe {
        Some(fe) => {
            let xf = g.constant(fe.features.clone());
            let (ef, pf) = fe_forward(g, &theta.backbone, &theta.fe_head, xf)?;
            Some((ef, fe_loss(g, pf, &fe.labels)?))
        }
        None => None,
    };

    let weights_for = |g: &mut Graph, e: Node, constant: f64| -> Result<Node> {
        match weigher {
            Weigher::Meta(psi) => {
                let e = g.detach(e);
                meta_forward(g, psi, e)
            }
            Weigher::Constant { .. } => Ok(g.constant(Tensor::filled(Shape::new(g.shape(e).rows, 1), constant))),
        }
    };
    let (ca, cf) = match weigher {
        Weigher::Constant { au, fe } => (au, fe),
        Weigher::Meta(_) => (0.0, 0.0),
    };
    let raw_au = weights_for(g, ea, ca)?;
    let raw_fe = match fe_part {
        Some((ef, _)) => Some(weights_for(g, ef, cf)?),
        None => None,
    };
    let (w_au, w_fe) = if cfg.normalize_weights {
        normalize_weights(g, raw_au, raw_fe, cfg.normalize_in_meta_graph)?
    } else {
        (raw_au, raw_fe)
    };

    let a = g.mul(w_au, la)?;
    let mut total = g.sum(a)?;
    let lf = match (fe_part, w_fe) {
        (Some((_, lf)), Some(wf)) => {
            let f = g.mul(wf, lf)?;
            let f = g.sum(f)?;
            total = g.add(total, f)?;
            lf
        }
        // keep a well-formed zero-length column so callers can treat both
        // tasks uniformly
        _ => g.constant(Tensor::zeros(Shape::new(0, 1))),
    };
    Ok(Objective { losses: PerSampleLosses { au: la, fe: lf }, raw_au, raw_fe, w_au, w_fe, total })
}

/// Result of the probe stage.
#[derive(Clone, Debug)]
pub struct ProbeStep {
    pub objective: Objective,
    /// `theta - alpha * grad`, still a function of the meta parameters.
    pub theta_star: BaseNodes,
}

/// Weighted loss at `theta` and one differentiable SGD step on it.
pub fn meta_train_step(
    g: &mut Graph,
    theta: &BaseNodes,
    psi: &MetaNodes,
    au: &PrimaryBatch,
    fe: &AuxBatch,
    cfg: &TrainConfig,
) -> Result<ProbeStep> {
    let objective = weighted_objective(g, theta, Weigher::Meta(psi), au, Some(fe), cfg)?;
    let params = theta.nodes();
    let grads = g.grad(objective.total, &params, true)?;
    let mut stepped = Vec::with_capacity(params.len());
    for (p, d) in params.iter().zip(grads) {
        let step = g.scale(d, cfg.alpha)?;
        stepped.push(g.sub(*p, step)?);
    }
    Ok(ProbeStep { objective, theta_star: theta.with_nodes(&stepped) })
}

/// Result of the meta-update stage.
#[derive(Clone, Debug)]
pub struct MetaStep {
    pub psi_hat: MetaParams,
    pub val_loss: f64,
    /// Gradient of the validation loss with respect to `(weight, bias)`.
    pub meta_grad: [Tensor; 2],
}

/// Validation loss at the probed primary-task parameters and one SGD step
/// on the meta parameters through the probe.
pub fn meta_test_step(
    g: &mut Graph,
    theta_star: &BaseNodes,
    psi: &MetaNodes,
    val: &PrimaryBatch,
    class_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<MetaStep> {
    let lv = validation_loss(g, &theta_star.backbone, &theta_star.au_head, val, class_weights)?;
    let val_loss = g.value(lv).item();
    let mut grads = g.grad_values(lv, &psi.nodes())?;
    let db = grads.pop().expect("bias gradient");
    let dw = grads.pop().expect("weight gradient");
    let psi_now = psi.values(g);
    let psi_hat = MetaParams { weight: psi_now.weight.sgd_step(&dw, cfg.beta), bias: psi_now.bias.sgd_step(&db, cfg.beta) };
    Ok(MetaStep { psi_hat, val_loss, meta_grad: [dw, db] })
}

/// Result of the commit stage.
#[derive(Clone, Debug)]
pub struct BaseStep {
    pub theta_hat: BaseParams,
    pub raw_au: Tensor,
    pub raw_fe: Tensor,
    pub applied_au: Tensor,
    pub applied_fe: Tensor,
    pub au_losses: Tensor,
    pub fe_losses: Tensor,
    pub total: f64,
}

/// Re-weights the batches with `psi_hat` and steps the original `theta`.
pub fn base_learning_step(
    theta: &BaseParams,
    psi_hat: &MetaParams,
    au: &PrimaryBatch,
    fe: &AuxBatch,
    cfg: &TrainConfig,
) -> Result<BaseStep> {
    let mut g = Graph::new();
    let nodes = theta.bind(&mut g, true);
    let psi = psi_hat.bind(&mut g, false);
    fixed_weight_step(&mut g, theta, &nodes, Weigher::Meta(&psi), au, Some(fe), cfg)
}

/// One committed SGD step for any weigher. Shared by the baselines so every
/// trainer runs the same arithmetic.
pub(crate) fn fixed_weight_step(
    g: &mut Graph,
    theta: &BaseParams,
    nodes: &BaseNodes,
    weigher: Weigher<'_>,
    au: &PrimaryBatch,
    fe: Option<&AuxBatch>,
    cfg: &TrainConfig,
) -> Result<BaseStep> {
    let obj = weighted_objective(g, nodes, weigher, au, fe, cfg)?;
    let params = if fe.is_some() { nodes.nodes() } else { nodes.au_nodes() };
    let grads = g.grad_values(obj.total, &params)?;
    let mut new = theta.tensors().into_iter().cloned().collect::<Vec<_>>();
    for (slot, d) in new.iter_mut().zip(&grads) {
        *slot = slot.sgd_step(d, cfg.alpha);
    }
    let theta_hat = theta.with_tensors(new);
    if !theta_hat.is_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    let empty = Tensor::zeros(Shape::new(0, 1));
    let opt = |n: Option<Node>| n.map_or_else(|| empty.clone(), |n| g.value(n).clone());
    Ok(BaseStep {
        theta_hat,
        raw_au: g.value(obj.raw_au).clone(),
        raw_fe: opt(obj.raw_fe),
        applied_au: g.value(obj.w_au).clone(),
        applied_fe: opt(obj.w_fe),
        au_losses: g.value(obj.losses.au).clone(),
        fe_losses: g.value(obj.losses.fe).clone(),
        total: g.value(obj.total).item(),
    })
}

const INIT_STREAM: u64 = 0;
const PRIMARY_STREAM: u64 = 1;
const AUX_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn init_params(model: &ModelConfig, num_labels: usize, num_classes: usize, seed: u64) -> BaseParams {
    BaseParams::init(model, num_labels, num_classes, &mut stream_rng(seed, INIT_STREAM))
}

/// Shuffled fixed-size batches over `0..n`, reshuffled whenever fewer than
/// `batch` unseen indices remain.
pub(crate) struct BatchCycle {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchCycle {
    pub(crate) fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        let batch = batch.min(n);
        Self { order: (0..n).collect(), pos: n, batch, rng }
    }

    pub(crate) fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }

    /// Forces a reshuffle before the next batch.
    pub(crate) fn restart(&mut self) {
        self.pos = self.order.len();
    }
}

/// Batch sources of one run; every trainer draws them the same way so
/// equal seeds see equal batches.
pub(crate) struct Streams {
    pub primary: BatchCycle,
    pub aux: Option<BatchCycle>,
    pub iters_per_epoch: usize,
}

impl Streams {
    pub(crate) fn new(cfg: &TrainConfig, n_primary: usize, n_aux: Option<usize>) -> Self {
        let primary = BatchCycle::new(n_primary, cfg.batch_train, stream_rng(cfg.seed, PRIMARY_STREAM));
        let aux = n_aux.map(|n| BatchCycle::new(n, cfg.batch_train, stream_rng(cfg.seed, AUX_STREAM)));
        let iters_per_epoch =
            cfg.iters_per_epoch.unwrap_or_else(|| (n_primary / cfg.batch_train.min(n_primary).max(1)).max(1));
        Self { primary, aux, iters_per_epoch }
    }
}

pub(crate) fn check_compatible(model: &ModelConfig, primary: &Dataset, others: &[&Dataset]) -> Result<()> {
    model.validate()?;
    if primary.task() != Task::Primary {
        return Err(Error::Config("primary training data must hold primary samples".into()));
    }
    if primary.is_empty() {
        return Err(Error::Config("primary training set is empty".into()));
    }
    for d in std::iter::once(primary).chain(others.iter().copied()) {
        if d.input_dim() != model.input_dim {
            return Err(Error::Config(format!(
                "{} data has {} features but the model expects {}",
                d.task().name(),
                d.input_dim(),
                model.input_dim
            )));
        }
    }
    Ok(())
}

/// Marks numeric failures as a divergence carrying the log so far.
pub(crate) fn diverged(err: Error, iteration: usize, log: &RunLog) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::Diverged { iteration, log: Box::new(log.clone()) },
        other => other,
    }
}

fn mean(t: &Tensor) -> f64 {
    if t.is_empty() {
        0.0
    } else {
        t.sum() / t.len() as f64
    }
}

pub(crate) fn trace_from(
    iter: usize,
    step: &BaseStep,
    val_loss: f64,
    au: &PrimaryBatch,
    fe: Option<&AuxBatch>,
    record_weights: bool,
) -> IterationTrace {
    let weights = record_weights.then(|| {
        let mut w: Vec<(u64, Task, f64)> =
            au.ids.iter().zip(step.raw_au.data()).map(|(&id, &v)| (id, Task::Primary, v)).collect();
        if let Some(fe) = fe {
            w.extend(fe.ids.iter().zip(step.raw_fe.data()).map(|(&id, &v)| (id, Task::Aux, v)));
        }
        w
    });
    IterationTrace {
        iter,
        au_loss: mean(&step.au_losses),
        fe_loss: mean(&step.fe_losses),
        val_loss,
        mean_w_au: mean(&step.raw_au),
        mean_w_fe: mean(&step.raw_fe),
        total_loss: step.total,
        applied_weight_sum: step.applied_au.sum() + step.applied_fe.sum(),
        weights,
    }
}

/// Full bi-level training.
///
/// `primary_val` must be disjoint from `primary_train` (checked by sample
/// id). Its per-label class-balance weights are computed once up front.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    primary_train: &Dataset,
    primary_val: &Dataset,
    aux_train: &Dataset,
) -> Result<(BaseParams, MetaParams, RunLog)> {
    train_with(cfg, model, primary_train, primary_val, aux_train, false)
}

/// [`train`], optionally recording every sample's weight in each trace.
pub fn train_with(
    cfg: &TrainConfig,
    model: &ModelConfig,
    primary_train: &Dataset,
    primary_val: &Dataset,
    aux_train: &Dataset,
    record_weights: bool,
) -> Result<(BaseParams, MetaParams, RunLog)> {
    cfg.validate()?;
    check_compatible(model, primary_train, &[primary_val, aux_train])?;
    if aux_train.task() != Task::Aux || aux_train.is_empty() {
        return Err(Error::Config("auxiliary training set must be a non-empty auxiliary dataset".into()));
    }
    if primary_val.task() != Task::Primary || primary_val.is_empty() {
        return Err(Error::Config("validation set must be a non-empty primary dataset".into()));
    }
    if primary_val.num_labels() != primary_train.num_labels() {
        return Err(Error::Config(format!(
            "validation set has {} labels, training set {}",
            primary_val.num_labels(),
            primary_train.num_labels()
        )));
    }
    if !primary_train.ids().is_disjoint(&primary_val.ids()) {
        return Err(Error::Config("validation set overlaps the primary training set".into()));
    }

    let mut theta = init_params(model, primary_train.num_labels(), aux_train.num_classes(), cfg.seed);
    let mut psi = MetaParams::new(model.embed_dim);
    let mut log = RunLog::new(cfg.log_every);
    log.record_weights = record_weights;
    let class_weights = class_balance_weights(&primary_val.label_matrix())?;

    let mut streams = Streams::new(cfg, primary_train.len(), Some(aux_train.len()));
    let mut val_cycle = BatchCycle::new(primary_val.len(), cfg.batch_val, stream_rng(cfg.seed, VAL_STREAM));

    let mut iter = 0;
    for _ in 0..cfg.epochs {
        val_cycle.restart();
        for _ in 0..streams.iters_per_epoch {
            let au = primary_train.primary_batch(streams.primary.next())?;
            let fe = aux_train.aux_batch(streams.aux.as_mut().expect("auxiliary stream").next())?;
            let val = primary_val.primary_batch(val_cycle.next())?;

            let stage = (|| -> Result<(MetaStep, BaseStep)> {
                let mut g = Graph::new();
                let theta_nodes = theta.bind(&mut g, true);
                let psi_nodes = psi.bind(&mut g, true);
                let probe = meta_train_step(&mut g, &theta_nodes, &psi_nodes, &au, &fe, cfg)?;
                let meta = meta_test_step(&mut g, &probe.theta_star, &psi_nodes, &val, &class_weights, cfg)?;
                if !meta.psi_hat.weight.is_finite() || !meta.psi_hat.bias.is_finite() {
                    return Err(Error::NonFinite { op: "sgd_step" });
                }
                let base = base_learning_step(&theta, &meta.psi_hat, &au, &fe, cfg)?;
                Ok((meta, base))
            })();
            let (meta, base) = stage.map_err(|e| diverged(e, iter, &log))?;

            log.traces.push(trace_from(iter, &base, meta.val_loss, &au, Some(&fe), record_weights));
            if !meta.val_loss.is_finite() || !base.total.is_finite() {
                return Err(Error::Diverged { iteration: iter, log: Box::new(log) });
            }
            theta = base.theta_hat;
            psi = meta.psi_hat;
            iter += 1;
        }
    }
    Ok((theta, psi, log))
}

/// One row of the per-sample weight dump.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub sample_id: u64,
    pub task: Task,
    pub weight: f64,
    pub ambiguous: bool,
}

/// Raw meta-net weight of every sample under the final parameters.
pub fn weight_dump(theta: &BaseParams, psi: &MetaParams, datasets: &[&Dataset]) -> Result<Vec<WeightRecord>> {
    let mut out = Vec::new();
    for d in datasets {
        if d.is_empty() {
            continue;
        }
        let emb = theta.backbone.embed(&d.feature_matrix())?;
        let w = psi.weights(&emb)?;
        for (s, &v) in d.samples().iter().zip(w.data()) {
            out.push(WeightRecord { sample_id: s.id, task: d.task(), weight: v, ambiguous: s.ambiguous });
        }
    }
    Ok(out)
}

pub const WEIGHTS_HEADER: &str = "sample_id,task,weight,ambiguous_flag";

pub fn weights_to_csv(records: &[WeightRecord]) -> String {
    let mut out = String::from(WEIGHTS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.sample_id, r.task.name(), r.weight, u8::from(r.ambiguous)));
    }
    out
}

/// Mean weight of clean and of ambiguous auxiliary samples.
pub fn aux_weight_gap(records: &[WeightRecord]) -> Option<(f64, f64)> {
    let avg = |amb: bool| {
        let v: Vec<f64> =
            records.iter().filter(|r| r.task == Task::Aux && r.ambiguous == amb).map(|r| r.weight).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some((avg(false)?, avg(true)?))
}
