mod common;

use common::{primitive_sweep, trial, FD_FLOOR, FD_STEP};
use mal_core::autodiff::{finite_difference, max_relative_error, Graph, Primitive, Tensor};
use mal_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_finite_differences() {
    let results = primitive_sweep(10, 11);
    assert_eq!(results.len(), Primitive::NAMES.len());
    for r in &results {
        assert!(r.max_rel_error < 1e-6, "{}: relative error {:e}", r.name, r.max_rel_error);
    }
}

/// `v . grad(readout)` as a function of the inputs, evaluated on a fresh
/// graph so the finite differences never see recorded state.
fn directional(t: &common::Trial, v: &[Tensor], inputs: &[Tensor], build: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let params: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = g.apply(t.primitive, &params)?;
    let c = g.constant(t.coeffs.clone());
    let weighted = g.mul(out, c)?;
    let total = g.sum(weighted)?;
    let grads = g.grad(total, &params, true)?;
    let mut acc = None;
    for (d, dir) in grads.iter().zip(v) {
        let dn = g.constant(dir.clone());
        let prod = g.mul(*d, dn)?;
        let s = g.sum(prod)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let h = acc.expect("at least one input");
    let value = g.value(h).item();
    let second = if build && g.requires_grad(h) { Some(g.grad_values(h, &params)?) } else { None };
    Ok((value, second))
}

#[test]
fn second_order_matches_finite_differences_of_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // relu and clamp are piecewise linear, so their second derivative is zero
    // almost everywhere; they are covered by the same check regardless
    for &name in Primitive::NAMES.iter() {
        for _ in 0..5 {
            let t = trial(name, &mut rng);
            let v: Vec<Tensor> = t.inputs.iter().map(|x| Tensor::uniform(x.shape(), 1.0, &mut rng)).collect();
            let (_, analytic) = directional(&t, &v, &t.inputs, true).unwrap();
            let numeric = finite_difference(|p| directional(&t, &v, p, false).map(|r| r.0), &t.inputs, FD_STEP).unwrap();
            let analytic = analytic.unwrap_or_else(|| numeric.iter().map(|n| Tensor::zeros(n.shape())).collect());
            let (err, _) = max_relative_error(&analytic, &numeric, FD_FLOOR);
            assert!(err < 1e-5, "{name}: second-order relative error {err:e}");
        }
    }
}

#[test]
fn gradient_of_a_composite_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::uniform(mal_core::Shape::new(5, 3), 1.0, &mut rng);
    let w1 = Tensor::uniform(mal_core::Shape::new(3, 4), 1.0, &mut rng);
    let w2 = Tensor::uniform(mal_core::Shape::new(4, 2), 1.0, &mut rng);
    let f = |p: &[Tensor], g: &mut Graph, trainable: bool| -> Result<(mal_core::Node, Vec<mal_core::Node>)> {
        let nodes: Vec<_> = p.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
        let xn = g.constant(x.clone());
        let h = g.matmul(xn, nodes[0])?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, nodes[1])?;
        let s = g.softmax(o)?;
        let l = g.log(s)?;
        Ok((g.mean(l)?, nodes))
    };
    let point = [w1, w2];
    let mut g = Graph::new();
    let (loss, nodes) = f(&point, &mut g, true).unwrap();
    let a = g.grad_values(loss, &nodes).unwrap();
    let n = finite_difference(
        |p| {
            let mut g = Graph::new();
            let (l, _) = f(p, &mut g, false)?;
            Ok(g.value(l).item())
        },
        &point,
        FD_STEP,
    )
    .unwrap();
    assert!(max_relative_error(&a, &n, FD_FLOOR).0 < 1e-6);
}
