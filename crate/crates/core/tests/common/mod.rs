//! Finite-difference sweep over the autodiff primitives, shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use mal_core::autodiff::{finite_difference, max_relative_error, Graph, Primitive, Shape, Tensor};
use mal_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Coordinates whose gradient magnitude is below this are compared
/// absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// One random instance: a primitive, its inputs, and the coefficients of the
/// scalar read-out `sum(coeffs * primitive(inputs))`.
#[derive(Clone, Debug)]
pub struct Trial {
    pub primitive: Primitive,
    pub inputs: Vec<Tensor>,
    pub coeffs: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values in `lo..hi` at least `margin` away from every point of `avoid`,
/// so kinks stay outside the finite-difference stencil.
fn away_from(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64, avoid: &[f64], margin: f64) -> Tensor {
    let data = (0..shape.len())
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if avoid.iter().all(|a| (v - a).abs() >= margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data)
}

fn signed(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A random trial of the primitive called `name`.
pub fn trial(name: &str, rng: &mut ChaCha8Rng) -> Trial {
    let r = rng.random_range(1..=4);
    let c = rng.random_range(1..=4);
    let s = Shape::new(r, c);
    let reduced = [Shape::new(1, c), Shape::new(r, 1), Shape::SCALAR][rng.random_range(0..3)];
    let (primitive, inputs) = match name {
        "add" => (Primitive::Add, vec![uniform(rng, s, -2.0, 2.0), uniform(rng, s, -2.0, 2.0)]),
        "sub" => (Primitive::Sub, vec![uniform(rng, s, -2.0, 2.0), uniform(rng, s, -2.0, 2.0)]),
        "mul" => (Primitive::Mul, vec![uniform(rng, s, -2.0, 2.0), uniform(rng, s, -2.0, 2.0)]),
        "div" => (Primitive::Div, vec![uniform(rng, s, -2.0, 2.0), signed(rng, s, 0.5, 2.0)]),
        "matmul" => {
            let k = rng.random_range(1..=4);
            (Primitive::MatMul, vec![uniform(rng, Shape::new(r, k), -2.0, 2.0), uniform(rng, Shape::new(k, c), -2.0, 2.0)])
        }
        "transpose" => (Primitive::Transpose, vec![uniform(rng, s, -2.0, 2.0)]),
        "sigmoid" => (Primitive::Sigmoid, vec![uniform(rng, s, -3.0, 3.0)]),
        "tanh" => (Primitive::Tanh, vec![uniform(rng, s, -2.0, 2.0)]),
        "relu" => (Primitive::Relu, vec![away_from(rng, s, -2.0, 2.0, &[0.0], 0.1)]),
        "log" => (Primitive::Log, vec![uniform(rng, s, 0.3, 3.0)]),
        "exp" => (Primitive::Exp, vec![uniform(rng, s, -2.0, 2.0)]),
        "softmax" => (Primitive::Softmax, vec![uniform(rng, s, -3.0, 3.0)]),
        "sum" => (Primitive::Sum, vec![uniform(rng, s, -2.0, 2.0)]),
        "mean" => (Primitive::Mean, vec![uniform(rng, s, -2.0, 2.0)]),
        "sum_to" => (Primitive::SumTo(reduced), vec![uniform(rng, s, -2.0, 2.0)]),
        "broadcast" => (Primitive::Broadcast(s), vec![uniform(rng, reduced, -2.0, 2.0)]),
        "scale" => (Primitive::Scale(rng.random_range(-3.0..3.0)), vec![uniform(rng, s, -2.0, 2.0)]),
        "offset" => (Primitive::Offset(rng.random_range(-3.0..3.0)), vec![uniform(rng, s, -2.0, 2.0)]),
        "clamp" => (Primitive::Clamp { lo: -0.5, hi: 0.7 }, vec![away_from(rng, s, -2.0, 2.0, &[-0.5, 0.7], 0.1)]),
        other => panic!("no trial generator for primitive {other:?}"),
    };
    let mut probe = Graph::new();
    let nodes: Vec<_> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = probe.apply(primitive, &nodes).expect("valid trial");
    let out_shape = probe.shape(out);
    let coeffs = signed(rng, out_shape, 0.5, 1.5);
    Trial { primitive, inputs, coeffs }
}

/// `sum(coeffs * primitive(inputs))` evaluated without gradients.
pub fn readout(trial: &Trial, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let nodes: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.apply(trial.primitive, &nodes)?;
    Ok(g.value(out).data().iter().zip(trial.coeffs.data()).map(|(a, b)| a * b).sum())
}

/// Analytic gradient of the read-out with respect to every input.
pub fn analytic(trial: &Trial) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let params: Vec<_> = trial.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = g.apply(trial.primitive, &params)?;
    let c = g.constant(trial.coeffs.clone());
    let weighted = g.mul(out, c)?;
    let total = g.sum(weighted)?;
    g.grad_values(total, &params)
}

/// Relative error between the analytic and central-difference gradients.
pub fn trial_error(trial: &Trial) -> Result<f64> {
    let a = analytic(trial)?;
    let n = finite_difference(|p| readout(trial, p), &trial.inputs, FD_STEP)?;
    Ok(max_relative_error(&a, &n, FD_FLOOR).0)
}

#[derive(Clone, Debug)]
pub struct PrimitiveResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Runs `trials_per_primitive` random trials of every primitive.
pub fn primitive_sweep(trials_per_primitive: usize, seed: u64) -> Vec<PrimitiveResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Primitive::NAMES
        .iter()
        .map(|&name| {
            let max_rel_error = (0..trials_per_primitive)
                .map(|_| trial_error(&trial(name, &mut rng)).expect("trial evaluates"))
                .fold(0.0, f64::max);
            PrimitiveResult { name, trials: trials_per_primitive, max_rel_error }
        })
        .collect()
}
