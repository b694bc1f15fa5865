use std::collections::HashMap;
use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn params(list: Vec<(&str, Tensor)>) -> ParameterSet {
    let mut ps = ParameterSet::new();
    for (n, t) in list {
        ps.insert(n, t).unwrap();
    }
    ps
}

#[test]
fn softmax_examples() {
    let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
    for v in p {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    for a in [-7.0, 0.0, 3.5, 900.0] {
        let p = softmax(&[a, a + 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] - 2.0 / 3.0).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let shifted: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
    let (a, b) = (softmax(&x).unwrap(), softmax(&shifted).unwrap());
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
    assert!(matches!(softmax(&[]), Err(Error::Usage(_))));
}

#[test]
fn layer_norm_examples() {
    let ones = [1.0; 4];
    let zeros = [0.0; 4];
    let out = layer_norm(&[2.5; 4], &ones, &zeros).unwrap();
    assert!(out.iter().all(|v| *v == 0.0));

    let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap();
    assert!((out[0] - 1.0).abs() < 1e-3 && (out[1] + 1.0).abs() < 1e-3);

    let out = layer_norm(&[3.0, -2.0, 8.0], &[0.0; 3], &[0.5, -1.0, 2.0]).unwrap();
    assert_eq!(out, vec![0.5, -1.0, 2.0]);

    let x = [0.3, 4.0, -2.2, 1.1, 7.5];
    let out = layer_norm(&x, &[1.0; 5], &[0.0; 5]).unwrap();
    let mean = out.iter().sum::<f64>() / 5.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    assert!(mean.abs() < 1e-10);
    // the 1e-6 epsilon shrinks variance by var/(var+eps)
    assert!((var - 1.0).abs() < 1e-6);

    assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0]).is_err());
    assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::scalar(0.0));
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);

    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_tensor(&mut rng, &[4, 3]);
    let x = random_tensor(&mut rng, &[5, 4]);
    let build = |g: &mut Graph| {
        let xw = g.param("x", &x);
        let ww = g.param("w", &w);
        let h = g.matmul(xw, ww).unwrap();
        let s = g.softmax(h).unwrap();
        g.sum(s).unwrap()
    };
    let mut g1 = Graph::new();
    let l1 = build(&mut g1);
    let mut g2 = Graph::new();
    let l2 = build(&mut g2);
    assert_eq!(g1.value(l1).data()[0].to_bits(), g2.value(l2).data()[0].to_bits());
    let b: HashMap<String, Tensor> = [("w".to_string(), w.clone())].into();
    let again = g1.forward(&b).unwrap().data()[0];
    assert_eq!(again.to_bits(), g2.value(l2).data()[0].to_bits());
}

#[test]
fn forward_shape_error_names_node() {
    let mut g = Graph::new();
    let a = g.param("a", &Tensor::zeros(&[2, 3]));
    let b = g.param("b", &Tensor::zeros(&[3, 1]));
    g.matmul(a, b).unwrap();
    let bad: HashMap<String, Tensor> = [("b".to_string(), Tensor::zeros(&[2, 1]))].into();
    let err = g.forward(&bad).unwrap_err().to_string();
    assert!(err.contains("node #2") && err.contains("matmul"), "{err}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param("x", &Tensor::scalar(0.0));
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get("x").unwrap().data(), &[0.25]);

    let mut g = Graph::new();
    let x = g.param("x", &Tensor::vector(vec![0.2, -1.0, 3.0]));
    let unused = g.param("unused", &Tensor::zeros(&[2, 2]));
    let _ = unused;
    let s = g.softmax(x).unwrap();
    let total = g.sum(s).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(grads.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-15));
    assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 4]);

    let mut g = Graph::new();
    let x = g.param("x", &Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn gradcheck_quadratic_is_exact() {
    let ps = params(vec![("x", Tensor::vector(vec![0.7, -1.3, 2.0]))]);
    let report = gradient_check(
        |g, ps| {
            let x = g.param("x", ps.get("x")?);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        &ps,
        1e-6,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
    assert_eq!(report.coordinates, 3);
}

#[test]
fn gradcheck_rejects_bad_epsilon() {
    let ps = params(vec![("x", Tensor::scalar(1.0))]);
    let r = gradient_check(|g, ps| Ok(g.param("x", ps.get("x")?)), &ps, 1e-2, 0);
    assert!(matches!(r, Err(Error::Usage(_))));
}

/// Builds a loss exercising one op on random inputs; the random projection
/// `w` turns any output into a scalar with generic gradients.
fn op_loss(op: &str, g: &mut Graph, ps: &ParameterSet) -> crate::Result<NodeId> {
    let a = g.param("a", ps.get("a")?);
    let b = g.param("b", ps.get("b")?);
    let out = match op {
        "matmul" => {
            let bt = g.param("bm", ps.get("bm")?);
            g.matmul(a, bt)?
        }
        "add_bias" => {
            let bias = g.param("bias", ps.get("bias")?);
            g.add_bias(a, bias)?
        }
        "add" => g.add(a, b)?,
        "mul" => g.mul(a, b)?,
        "scale" => g.scale(a, -0.7)?,
        "relu" => g.relu(a)?,
        "sigmoid" => g.sigmoid(a)?,
        "concat" => {
            let c = g.concat(&[a, b])?;
            g.slice_cols(c, 1, 4)?
        }
        "gather" => g.gather(a, vec![2, 0, 2, 1])?,
        "softmax" => g.softmax(a)?,
        "segment" => {
            let col = g.slice_cols(a, 0, 1)?;
            let offsets = Rc::new(vec![0, 1, 1, 4]);
            let w = g.segment_softmax(col, offsets.clone())?;
            g.segment_weighted_sum(w, b, offsets)?
        }
        "block" => {
            let s = g.block_scores(a, b, 2, 0.5)?;
            let p = g.softmax(s)?;
            g.block_apply(p, b, 2)?
        }
        "layer_norm" => {
            let gain = g.param("gain", ps.get("gain")?);
            let bias = g.param("bias", ps.get("bias")?);
            g.layer_norm(a, gain, bias)?
        }
        "bce" => {
            let col = g.slice_cols(a, 0, 1)?;
            let p = g.sigmoid(col)?;
            return g.bce(p, vec![1.0, 0.0, 1.0, 0.0]);
        }
        "mean" => {
            let m = g.mean(a)?;
            return g.mul(m, m);
        }
        other => panic!("unknown op {other}"),
    };
    let cols = g.value(out).cols();
    let proj = g.constant(Tensor::new(vec![cols, 1], (0..cols).map(|i| 0.3 + 0.17 * i as f64).collect())?);
    let y = g.matmul(out, proj)?;
    let y2 = g.mul(y, y)?;
    g.sum(y2)
}

const OPS: &[&str] = &[
    "matmul", "add_bias", "add", "mul", "scale", "relu", "sigmoid", "concat", "gather", "softmax", "segment",
    "block", "layer_norm", "bce", "mean",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = params(vec![
            ("a", random_tensor(&mut rng, &[4, 3])),
            ("b", random_tensor(&mut rng, &[4, 3])),
            ("bm", random_tensor(&mut rng, &[3, 2])),
            ("bias", random_tensor(&mut rng, &[3])),
            ("gain", random_tensor(&mut rng, &[3])),
        ]);
        for op in OPS {
            let report = gradient_check(|g, ps| op_loss(op, g, ps), &ps, 1e-6, seed).unwrap();
            prop_assert!(report.max_rel_error < 1e-5, "{op}: {:?}", report);
        }
    }

    #[test]
    fn softmax_sums_to_one(x in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let p = softmax(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn rowwise_ops_commute_with_row_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[5, 4]);
        let gain = random_tensor(&mut rng, &[4]);
        let bias = random_tensor(&mut rng, &[4]);
        let perm = vec![3, 0, 4, 1, 2];
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(input.clone());
            let r = g.relu(xi).unwrap();
            let s = g.sigmoid(xi).unwrap();
            let gn = g.constant(gain.clone());
            let bn = g.constant(bias.clone());
            let l = g.layer_norm(xi, gn, bn).unwrap();
            [g.value(r).clone(), g.value(s).clone(), g.value(l).clone()]
        };
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let px = g.gather(xi, perm.clone()).unwrap();
        let permuted = g.value(px).clone();
        let base = run(&x);
        let moved = run(&permuted);
        for (b, m) in base.iter().zip(&moved) {
            for (new_row, &old_row) in perm.iter().enumerate() {
                prop_assert_eq!(m.row(new_row), b.row(old_row));
            }
        }
    }
}
