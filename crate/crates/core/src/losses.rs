//! Per-sample task losses and the weighted objectives built from them.

use crate::autodiff::{Graph, Node, Shape, Tensor};
use crate::batch::{class_ids, PrimaryBatch};
use crate::error::{Error, Result};
use crate::models::{au_forward, AffineNodes, BackboneNodes};

/// Probabilities entering a logarithm are clamped to `[EPS, 1 - EPS]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-sample losses of one training iteration, each a `B x 1` column.
#[derive(Clone, Copy, Debug)]
pub struct PerSampleLosses {
    pub au: Node,
    pub fe: Node,
}

/// Per-entry log-likelihood `z log s + (1 - z) log(1 - s)`, `B x J`.
fn label_log_likelihood(g: &mut Graph, scores: Node, labels: &Tensor) -> Result<Node> {
    let shape = g.shape(scores);
    if shape != labels.shape() {
        return Err(Error::Shape { op: "au_loss", lhs: shape, rhs: labels.shape() });
    }
    if let Some(v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("primary label {v} is not 0 or 1")));
    }
    let s = g.clamp(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_s = g.log(s)?;
    let not_s = g.one_minus(s)?;
    let log_not_s = g.log(not_s)?;
    let z = g.constant(labels.clone());
    let not_z = g.constant(labels.map(|v| 1.0 - v));
    let pos = g.mul(z, log_s)?;
    let neg = g.mul(not_z, log_not_s)?;
    g.add(pos, neg)
}

/// Multi-label sigmoid cross-entropy, summed over labels: `B x 1`.
pub fn au_loss(g: &mut Graph, scores: Node, labels: &Tensor) -> Result<Node> {
    let ll = label_log_likelihood(g, scores, labels)?;
    let per_sample = g.sum_rows(ll)?;
    g.scale(per_sample, -1.0)
}

/// Cross-entropy against one-hot labels, `-log p_true`: `B x 1`.
pub fn fe_loss(g: &mut Graph, probs: Node, labels: &Tensor) -> Result<Node> {
    let shape = g.shape(probs);
    if shape != labels.shape() {
        return Err(Error::Shape { op: "fe_loss", lhs: shape, rhs: labels.shape() });
    }
    class_ids(labels)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(probs, y)?;
    let p_true = g.sum_rows(picked)?;
    let p_true = g.clamp(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = g.log(p_true)?;
    g.scale(lp, -1.0)
}

/// `sum_i w_au_i L_au_i + sum_i w_fe_i L_fe_i` as a scalar node.
pub fn weighted_total(g: &mut Graph, losses: &PerSampleLosses, w_au: Node, w_fe: Node) -> Result<Node> {
    if g.shape(w_au) != g.shape(losses.au) || g.shape(w_fe) != g.shape(losses.fe) {
        return Err(Error::Data(format!(
            "weight/loss length mismatch: {} weights for {} primary losses, {} weights for {} auxiliary losses",
            g.shape(w_au).rows,
            g.shape(losses.au).rows,
            g.shape(w_fe).rows,
            g.shape(losses.fe).rows
        )));
    }
    let a = g.mul(w_au, losses.au)?;
    let a = g.sum(a)?;
    let f = g.mul(w_fe, losses.fe)?;
    let f = g.sum(f)?;
    g.add(a, f)
}

/// Class-rebalanced primary loss on a validation batch:
/// `-(1/K) sum_i sum_j c_j [z log s + (1 - z) log(1 - s)]`.
pub fn validation_loss(
    g: &mut Graph,
    backbone: &BackboneNodes,
    au_head: &AffineNodes,
    batch: &PrimaryBatch,
    class_weights: &[f64],
) -> Result<Node> {
    if batch.is_empty() {
        return Err(Error::Data("validation batch is empty".into()));
    }
    if class_weights.len() != batch.num_labels() {
        return Err(Error::Data(format!(
            "{} class weights for {} labels",
            class_weights.len(),
            batch.num_labels()
        )));
    }
    let x = g.constant(batch.features.clone());
    let (_, scores) = au_forward(g, backbone, au_head, x)?;
    let ll = label_log_likelihood(g, scores, &batch.labels)?;
    let c = g.constant(Tensor::new(Shape::new(1, class_weights.len()), class_weights.to_vec()));
    let weighted = g.mul_broadcast(ll, c)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / batch.len() as f64)
}

/// Per-label weights inversely proportional to positive-label frequency,
/// `1 / (freq_j + 1/(2K))`, rescaled to mean one.
pub fn class_balance_weights(labels: &Tensor) -> Result<Vec<f64>> {
    let k = labels.rows();
    if k == 0 {
        return Err(Error::Data("cannot compute class weights from an empty set".into()));
    }
    let floor = 1.0 / (2.0 * k as f64);
    let raw: Vec<f64> = (0..labels.cols())
        .map(|j| {
            let positives = (0..k).filter(|&i| labels.get(i, j) == 1.0).count();
            1.0 / (positives as f64 / k as f64 + floor)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|r| r / mean).collect())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::batch::one_hot;
    use crate::models::{Activation, BaseParams, ModelConfig};

    fn oracle_au(scores: &Tensor, labels: &Tensor) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..scores.rows() {
            let mut s = 0.0;
            for j in 0..scores.cols() {
                let p = scores.get(i, j).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let z = labels.get(i, j);
                s -= z * p.ln() + (1.0 - z) * (1.0 - p).ln();
            }
            out.push(s);
        }
        out
    }

    fn random_labels(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        Tensor::new(shape, (0..shape.len()).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect())
    }

    #[test]
    fn single_label_at_half_is_ln2() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::scalar(0.5));
        let l = au_loss(&mut g, s, &Tensor::scalar(1.0)).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::row(vec![1.0, 0.0, 1.0]));
        let l = au_loss(&mut g, s, &Tensor::row(vec![1.0, 0.0, 1.0])).unwrap();
        let bound = 3.0 * -(1.0 - PROB_CLAMP).ln();
        assert!(g.value(l).item() <= bound + 1e-15);
        assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn au_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let shape = Shape::new(rng.random_range(1..8), 3);
            let scores = Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect());
            let labels = random_labels(&mut rng, shape);
            let mut g = Graph::new();
            let s = g.constant(scores.clone());
            let l = au_loss(&mut g, s, &labels).unwrap();
            for (a, b) in g.value(l).data().iter().zip(oracle_au(&scores, &labels)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_binary_primary_label_is_data_error() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::row(vec![0.5, 0.5]));
        assert!(matches!(au_loss(&mut g, s, &Tensor::row(vec![1.0, 0.5])), Err(Error::Data(_))));
    }

    #[test]
    fn uniform_probs_cost_ln_q() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::filled(Shape::new(2, 7), 1.0 / 7.0));
        let l = fe_loss(&mut g, p, &one_hot(&[0, 6], 7).unwrap()).unwrap();
        for v in g.value(l).data() {
            assert!((v - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_class_costs_nothing() {
        let eps = 1e-9;
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(vec![eps, 1.0 - eps]));
        let l = fe_loss(&mut g, p, &one_hot(&[1], 2).unwrap()).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn fe_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (b, q) = (rng.random_range(1..6), rng.random_range(2..8));
            let mut rows = Vec::new();
            for _ in 0..b {
                let raw: Vec<f64> = (0..q).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                rows.push(raw.into_iter().map(|v| v / s).collect::<Vec<_>>());
            }
            let classes: Vec<usize> = (0..b).map(|_| rng.random_range(0..q)).collect();
            let mut g = Graph::new();
            let p = g.constant(Tensor::from_rows(&rows));
            let l = fe_loss(&mut g, p, &one_hot(&classes, q).unwrap()).unwrap();
            for i in 0..b {
                let mut expect = 0.0;
                for (c, &pq) in rows[i].iter().enumerate() {
                    if c == classes[i] {
                        expect -= pq.ln();
                    }
                }
                assert!((g.value(l).data()[i] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_one_hot_aux_label_is_data_error() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row(vec![0.5, 0.5]));
        assert!(matches!(fe_loss(&mut g, p, &Tensor::row(vec![1.0, 1.0])), Err(Error::Data(_))));
    }

    fn losses(g: &mut Graph, au: Vec<f64>, fe: Vec<f64>) -> PerSampleLosses {
        PerSampleLosses { au: g.constant(Tensor::column(au)), fe: g.constant(Tensor::column(fe)) }
    }

    #[test]
    fn weighted_total_special_cases() {
        let mut g = Graph::new();
        let l = losses(&mut g, vec![0.3, 1.2], vec![2.0, 0.5]);
        let zeros = g.constant(Tensor::column(vec![0.0, 0.0]));
        let ones = g.constant(Tensor::column(vec![1.0, 1.0]));
        let halves = g.constant(Tensor::column(vec![0.5, 0.5]));
        let t = weighted_total(&mut g, &l, zeros, zeros).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let t = weighted_total(&mut g, &l, ones, zeros).unwrap();
        assert_eq!(g.value(t).item(), 1.5);
        let t = weighted_total(&mut g, &l, halves, halves).unwrap();
        assert!((g.value(t).item() - 0.5 * (1.5 + 2.5)).abs() < 1e-15);
    }

    #[test]
    fn weighted_total_rejects_length_mismatch() {
        let mut g = Graph::new();
        let l = losses(&mut g, vec![0.3, 1.2], vec![2.0, 0.5]);
        let short = g.constant(Tensor::column(vec![1.0]));
        let ok = g.constant(Tensor::column(vec![1.0, 1.0]));
        assert!(matches!(weighted_total(&mut g, &l, short, ok), Err(Error::Data(_))));
    }

    fn tiny_setup(seed: u64) -> (BaseParams, PrimaryBatch, crate::batch::AuxBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { input_dim: 3, hidden_dim: 4, embed_dim: 3, activation: Activation::Tanh };
        let theta = BaseParams::init(&cfg, 2, 3, &mut rng);
        let x = Tensor::uniform(Shape::new(5, 3), 1.0, &mut rng);
        let labels = random_labels(&mut rng, Shape::new(5, 2));
        let au = PrimaryBatch::new(x, labels, (0..5).collect()).unwrap();
        let xf = Tensor::uniform(Shape::new(4, 3), 1.0, &mut rng);
        let fe = crate::batch::AuxBatch::from_class_ids(xf, &[0, 2, 1, 2], 3, (5..9).collect()).unwrap();
        (theta, au, fe)
    }

    #[test]
    fn weighted_total_is_homogeneous_in_the_weights() {
        let (theta, au, fe) = tiny_setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wa: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let wf: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let eval = |c: f64| {
            let mut g = Graph::new();
            let n = theta.bind(&mut g, true);
            let xa = g.constant(au.features.clone());
            let xf = g.constant(fe.features.clone());
            let (_, sa) = au_forward(&mut g, &n.backbone, &n.au_head, xa).unwrap();
            let (_, pf) = crate::models::fe_forward(&mut g, &n.backbone, &n.fe_head, xf).unwrap();
            let l = PerSampleLosses {
                au: au_loss(&mut g, sa, &au.labels).unwrap(),
                fe: fe_loss(&mut g, pf, &fe.labels).unwrap(),
            };
            let wan = g.constant(Tensor::column(wa.iter().map(|v| c * v).collect()));
            let wfn = g.constant(Tensor::column(wf.iter().map(|v| c * v).collect()));
            let t = weighted_total(&mut g, &l, wan, wfn).unwrap();
            let grads = g.grad_values(t, &n.nodes()).unwrap();
            (g.value(t).item(), grads)
        };
        let (t1, g1) = eval(1.0);
        let c = 2.5;
        let (tc, gc) = eval(c);
        assert!((tc - c * t1).abs() <= 1e-12 * tc.abs().max(1.0));
        for (a, b) in g1.iter().zip(&gc) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - c * x).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn au_loss_gradient_wrt_logits_is_score_minus_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = Shape::new(4, 3);
        let logits = Tensor::uniform(shape, 3.0, &mut rng);
        let labels = random_labels(&mut rng, shape);
        let mut g = Graph::new();
        let z = g.param(logits);
        let s = g.sigmoid(z).unwrap();
        let l = au_loss(&mut g, s, &labels).unwrap();
        let total = g.sum(l).unwrap();
        let d = g.grad_values(total, &[z]).unwrap().remove(0);
        let scores = g.value(s).clone();
        for i in 0..d.len() {
            assert!((d.data()[i] - (scores.data()[i] - labels.data()[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn balanced_labels_give_unit_class_weights() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        // each label positive in exactly one of two rows
        let w = class_balance_weights(&labels).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn absent_label_gets_floored_weight() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let w = class_balance_weights(&labels).unwrap();
        // freq 1 -> 1/(1 + 1/4); freq 0 -> 1/(1/4)
        let raw = [1.0 / 1.25, 4.0];
        let mean = (raw[0] + raw[1]) / 2.0;
        assert!((w[0] - raw[0] / mean).abs() < 1e-15 && (w[1] - raw[1] / mean).abs() < 1e-15);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn validation_loss_matches_reweighted_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let (theta, _, _) = tiny_setup(100 + trial);
            let k = rng.random_range(1..9);
            let x = Tensor::uniform(Shape::new(k, 3), 1.0, &mut rng);
            let labels = random_labels(&mut rng, Shape::new(k, 2));
            let batch = PrimaryBatch::new(x.clone(), labels.clone(), (0..k as u64).collect()).unwrap();
            let cw = class_balance_weights(&labels).unwrap();
            let mut g = Graph::new();
            let n = theta.bind(&mut g, false);
            let l = validation_loss(&mut g, &n.backbone, &n.au_head, &batch, &cw).unwrap();
            let scores = theta.theta_au().predict(&x).unwrap();
            let mut expect = 0.0;
            for i in 0..k {
                for j in 0..2 {
                    let p = scores.get(i, j).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let z = labels.get(i, j);
                    expect -= cw[j] * (z * p.ln() + (1.0 - z) * (1.0 - p).ln());
                }
            }
            expect /= k as f64;
            assert!((g.value(l).item() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn validation_loss_with_unit_weights_is_plain_mean() {
        let (theta, au, _) = tiny_setup(5);
        let mut g = Graph::new();
        let n = theta.bind(&mut g, false);
        let l = validation_loss(&mut g, &n.backbone, &n.au_head, &au, &[1.0, 1.0]).unwrap();
        let x = g.constant(au.features.clone());
        let (_, s) = au_forward(&mut g, &n.backbone, &n.au_head, x).unwrap();
        let per = au_loss(&mut g, s, &au.labels).unwrap();
        let mean = g.mean(per).unwrap();
        assert!((g.value(l).item() - g.value(mean).item()).abs() < 1e-15);
    }

    #[test]
    fn empty_validation_batch_is_error() {
        let (theta, _, _) = tiny_setup(5);
        let empty = PrimaryBatch::new(Tensor::zeros(Shape::new(0, 3)), Tensor::zeros(Shape::new(0, 2)), vec![]).unwrap();
        let mut g = Graph::new();
        let n = theta.bind(&mut g, false);
        assert!(validation_loss(&mut g, &n.backbone, &n.au_head, &empty, &[1.0, 1.0]).is_err());
    }
}
