//! Finite-difference check of the meta-gradient.
//!
//! On a tiny random instance, the analytic gradient of the validation loss
//! with respect to the meta parameters (taken through the probe step) is
//! compared against central differences of the map
//! `psi -> L_val(theta*(psi))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference, max_relative_error, Graph, Shape, Tensor};
use crate::batch::{AuxBatch, PrimaryBatch};
use crate::error::{Error, Result};
use crate::losses::{class_balance_weights, validation_loss};
use crate::meta_engine::{meta_test_step, meta_train_step, TrainConfig};
use crate::models::{Activation, BaseParams, MetaParams, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_labels: usize,
    pub num_classes: usize,
    /// Training batch size for each task.
    pub batch: usize,
    pub val_batch: usize,
    /// Probe step size. A large value makes the meta-gradient sizable.
    pub alpha: f64,
    pub eps: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    pub seeds: usize,
    pub first_seed: u64,
    pub normalize_weights: bool,
    pub tolerance: f64,
    /// Debug mutation: scale the backward rule of this primitive.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            hidden_dim: 6,
            embed_dim: 4,
            num_labels: 3,
            num_classes: 3,
            batch: 4,
            val_batch: 4,
            alpha: 0.5,
            eps: 1e-5,
            floor: 1e-8,
            seeds: 20,
            first_seed: 0,
            normalize_weights: true,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_seed: u64,
    /// `"weight"` or `"bias"`.
    pub worst_param: &'static str,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

struct Instance {
    theta: BaseParams,
    psi: MetaParams,
    au: PrimaryBatch,
    fe: AuxBatch,
    val: PrimaryBatch,
    class_weights: Vec<f64>,
}

fn bits(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
}

fn instance(cfg: &GradcheckConfig, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelConfig {
        input_dim: cfg.input_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        activation: Activation::Tanh,
    };
    let theta = BaseParams::init(&model, cfg.num_labels, cfg.num_classes, &mut rng);
    let psi = MetaParams {
        weight: Tensor::uniform(Shape::new(cfg.embed_dim, 1), 1.0, &mut rng),
        bias: Tensor::uniform(Shape::SCALAR, 0.5, &mut rng),
    };
    let xa = Tensor::uniform(Shape::new(cfg.batch, cfg.input_dim), 1.0, &mut rng);
    let au = PrimaryBatch::new(xa, bits(&mut rng, Shape::new(cfg.batch, cfg.num_labels)), (0..cfg.batch as u64).collect())?;
    let xf = Tensor::uniform(Shape::new(cfg.batch, cfg.input_dim), 1.0, &mut rng);
    let classes: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let fe = AuxBatch::from_class_ids(xf, &classes, cfg.num_classes, (0..cfg.batch as u64).collect())?;
    let xv = Tensor::uniform(Shape::new(cfg.val_batch, cfg.input_dim), 1.0, &mut rng);
    let val = PrimaryBatch::new(xv, bits(&mut rng, Shape::new(cfg.val_batch, cfg.num_labels)), (0..cfg.val_batch as u64).collect())?;
    let class_weights = class_balance_weights(&val.labels)?;
    Ok(Instance { theta, psi, au, fe, val, class_weights })
}

fn train_cfg(cfg: &GradcheckConfig) -> TrainConfig {
    TrainConfig {
        alpha: cfg.alpha,
        beta: 1.0,
        batch_train: cfg.batch,
        batch_val: cfg.val_batch,
        normalize_weights: cfg.normalize_weights,
        ..TrainConfig::default()
    }
}

/// Analytic and numeric meta-gradients for one seed.
pub fn meta_gradients(cfg: &GradcheckConfig, seed: u64) -> Result<([Tensor; 2], Vec<Tensor>)> {
    let inst = instance(cfg, seed)?;
    let tc = train_cfg(cfg);
    let mut g = Graph::new();
    if let Some(name) = &cfg.corrupt {
        let name = crate::autodiff::Primitive::static_name(name)
            .ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?;
        g.corrupt_adjoint(name, 1.5);
    }
    let tn = inst.theta.bind(&mut g, true);
    let pn = inst.psi.bind(&mut g, true);
    let probe = meta_train_step(&mut g, &tn, &pn, &inst.au, &inst.fe, &tc)?;
    let meta = meta_test_step(&mut g, &probe.theta_star, &pn, &inst.val, &inst.class_weights, &tc)?;

    let objective = |psi: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let tn = inst.theta.bind(&mut g, true);
        let pn = MetaParams::from_tensors(psi.to_vec()).bind(&mut g, false);
        let probe = meta_train_step(&mut g, &tn, &pn, &inst.au, &inst.fe, &tc)?;
        let star = probe.theta_star.values(&g, &inst.theta);
        let mut h = Graph::new();
        let sn = star.bind(&mut h, false);
        let l = validation_loss(&mut h, &sn.backbone, &sn.au_head, &inst.val, &inst.class_weights)?;
        Ok(h.value(l).item())
    };
    let numeric = finite_difference(objective, &[inst.psi.weight.clone(), inst.psi.bias.clone()], cfg.eps)?;
    Ok((meta.meta_grad, numeric))
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.embed_dim == 0 || cfg.batch == 0 || cfg.val_batch == 0 || cfg.num_labels == 0 || cfg.num_classes < 2 {
        return Err(Error::Config("gradcheck needs positive sizes and at least two classes".into()));
    }
    if cfg.seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut report = GradcheckReport {
        max_rel_error: -1.0,
        worst_seed: cfg.first_seed,
        worst_param: "weight",
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        per_seed: Vec::new(),
        tolerance: cfg.tolerance,
    };
    for seed in cfg.first_seed..cfg.first_seed + cfg.seeds as u64 {
        let (analytic, numeric) = meta_gradients(cfg, seed)?;
        let (err, (param, index)) = max_relative_error(&analytic, &numeric, cfg.floor);
        report.per_seed.push((seed, err));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_seed = seed;
            report.worst_param = if param == 0 { "weight" } else { "bias" };
            report.worst_index = index;
            report.worst_analytic = analytic[param].data()[index];
            report.worst_numeric = numeric[param].data()[index];
        }
    }
    Ok(report)
}
