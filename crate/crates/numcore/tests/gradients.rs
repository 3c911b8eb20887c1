use std::rc::Rc;

use numcore::{
    finite_diff_check, finite_diff_report, multihead_attention, Graph, NumError, ParamStore, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so ReLU and max kinks are never probed.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { m } else { -m }
            })
            .collect(),
    )
}

#[test]
fn square_has_gradient_six_at_three() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let x = g.param(&store, "x").unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let _x = g.param(&store, "x").unwrap();
    let c = g.constant(Tensor::scalar(7.0)).unwrap();
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::zeros(2, 2)).unwrap();
    assert!(matches!(g.backward(c), Err(NumError::NotScalar { .. })));
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("a", random(&mut rng, 3, 4));
    store.insert("b", random(&mut rng, 4, 4));
    store.insert("c", random(&mut rng, 4, 2));
    let err = finite_diff_check(
        |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let c = g.param(p, "c")?;
            let ab = g.matmul(a, b)?;
            let abc = g.matmul(ab, c)?;
            let sq = g.mul(abc, abc)?;
            g.sum(sq)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    store.insert("w", random(&mut rng, 3, 3));
    let coef = random(&mut rng, 3, 3);
    let err = finite_diff_check(
        |g, p| {
            let w = g.param(p, "w")?;
            let c = g.constant(coef.clone())?;
            let m = g.mul(w, c)?;
            g.sum(m)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "rel err {err}");
}

#[test]
fn relu_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("x", away_from_zero(&mut rng, 4, 5));
    let err = finite_diff_check(
        |g, p| {
            let x = g.param(p, "x")?;
            let r = g.relu(x)?;
            let sq = g.mul(r, r)?;
            g.sum(sq)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn segment_mean_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])).unwrap();
    let m = g.segment_mean(x, Rc::from(vec![0, 0, 1]), 2).unwrap();
    assert_eq!(g.value(m).data(), &[2.0, 3.0, 5.0, 6.0]);

    let y = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
    let m = g.segment_mean(y, Rc::from(vec![1, 1]), 2).unwrap();
    assert_eq!(g.value(m).row(0), &[0.0, 0.0]);
    assert_eq!(g.value(m).row(1), &[2.0, 3.0]);

    assert!(matches!(
        g.segment_mean(y, Rc::from(vec![0, 2]), 2),
        Err(NumError::IndexOutOfRange { .. })
    ));
}

#[test]
fn segment_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    store.insert("x", random(&mut rng, 6, 3));
    let weights = random(&mut rng, 4, 3);
    let err = finite_diff_check(
        |g, p| {
            let x = g.param(p, "x")?;
            let m = g.segment_mean(x, Rc::from(vec![0, 2, 2, 1, 0, 2]), 4)?;
            let w = g.constant(weights.clone())?;
            let prod = g.mul(m, w)?;
            g.sum(prod)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(50.0)).unwrap();
    let l = g.bce_with_logits(z, &Tensor::scalar(1.0)).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-20);

    for t in [0.0, 1.0] {
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let l = g.bce_with_logits(z, &Tensor::scalar(t)).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    let z = g.constant(Tensor::row_vector(vec![1e4, -1e4, 1e4])).unwrap();
    let l = g.bce_with_logits(z, &Tensor::row_vector(vec![0.0, 1.0, 1.0])).unwrap();
    let v = g.value(l).item().unwrap();
    assert!(v.is_finite());
    assert!((v - 2e4 / 3.0).abs() < 1e-9);

    let z = g.constant(Tensor::scalar(0.0)).unwrap();
    assert!(matches!(
        g.bce_with_logits(z, &Tensor::scalar(0.5)),
        Err(NumError::InvalidTarget { .. })
    ));
}

#[test]
fn bce_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, 5, 7).map(|v| 4.0 * v);
    let targets = Tensor::from_matrix(5, 7, (0..35).map(|_| rng.random_range(0..2) as f64).collect());
    let mut g = Graph::new();
    let z = g.constant(logits.clone()).unwrap();
    let l = g.bce_with_logits(z, &targets).unwrap();

    let mut brute = 0.0;
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        let s = 1.0 / (1.0 + (-z).exp());
        brute += -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
    }
    brute /= 35.0;
    assert!((g.value(l).item().unwrap() - brute).abs() < 1e-12);
}

#[test]
fn smooth_ops_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    store.insert("x", random(&mut rng, 4, 6));
    store.insert("gain", random(&mut rng, 1, 6));
    store.insert("bias", random(&mut rng, 1, 6));
    store.insert("s", random(&mut rng, 4, 1));
    let targets = Tensor::from_matrix(4, 6, (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect());
    let report = finite_diff_report(
        |g, p| {
            let x = g.param(p, "x")?;
            let gain = g.param(p, "gain")?;
            let bias = g.param(p, "bias")?;
            let s = g.param(p, "s")?;
            let ln = g.layer_norm(x, gain, bias, 1e-5)?;
            let sm = g.softmax_rows(ln)?;
            let th = g.tanh(sm)?;
            let sg = g.sigmoid(x)?;
            let lg = g.log(sg)?;
            let sp = g.softplus(lg)?;
            let sum = g.add(th, sp)?;
            let scaled = g.scale_rows(sum, s)?;
            let t = g.transpose(scaled)?;
            let back = g.transpose(t)?;
            let left = g.slice_cols(back, 0, 3)?;
            let right = g.slice_cols(back, 3, 6)?;
            let prod = g.mul(left, right)?;
            let cat = g.concat_cols(&[prod, left])?;
            let top = g.slice_rows(cat, 0, 2)?;
            let bot = g.slice_rows(cat, 2, 4)?;
            let stacked = g.concat_rows(&[bot, top])?;
            let gathered = g.gather_rows(stacked, Rc::from(vec![3, 0, 0, 2]))?;
            let a = g.affine(gathered, 1.5, -0.2)?;
            let diff = g.sub(a, stacked)?;
            let mr = g.mean_rows(diff)?;
            let sr = g.sum_rows(diff)?;
            let both = g.concat_rows(&[mr, sr])?;
            let b = g.bce_with_logits(both, &Tensor::from_matrix(2, 6, targets.data()[..12].to_vec()))?;
            let ce = g.softmax_cross_entropy(diff, &[0, 5, 2, 2])?;
            let m = g.mean(diff)?;
            let total = g.add(b, ce)?;
            g.add(total, m)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn maximum_routes_to_first_on_ties() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::row_vector(vec![1.0, 2.0, 3.0]));
    store.insert("b", Tensor::row_vector(vec![1.0, 5.0, 0.0]));
    let mut g = Graph::new();
    let a = g.param(&store, "a").unwrap();
    let b = g.param(&store, "b").unwrap();
    let m = g.maximum(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 5.0, 3.0]);
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("a").unwrap().data(), &[1.0, 0.0, 1.0]);
    assert_eq!(grads.get("b").unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn attention_gradient_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    store.insert("q", random(&mut rng, 2, 4));
    store.insert("k", random(&mut rng, 5, 4));
    store.insert("v", random(&mut rng, 5, 4));
    let err = finite_diff_check(
        |g, p| {
            let q = g.param(p, "q")?;
            let k = g.param(p, "k")?;
            let v = g.param(p, "v")?;
            let a = multihead_attention(g, q, k, v, 2)?;
            let sq = g.mul(a.output, a.output)?;
            g.sum(sq)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, 6, 4);
    let run = || {
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let a = multihead_attention(&mut g, v, v, v, 2).unwrap();
        g.value(a.output).clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0)).unwrap();
    assert!(matches!(g.log(z), Err(NumError::NonFinite { op: "log" })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_matrix(3, 4, values)).unwrap();
        let s = g.softmax_rows(x).unwrap();
        for r in 0..3 {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic(values in proptest::collection::vec(-3.0f64..3.0, 24), heads in 1usize..=2) {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_matrix(2, 4, values[..8].to_vec())).unwrap();
        let k = g.constant(Tensor::from_matrix(4, 4, values[8..].to_vec())).unwrap();
        let a = multihead_attention(&mut g, q, k, k, heads).unwrap();
        prop_assert_eq!(a.weights.len(), heads);
        for w in &a.weights {
            for r in 0..w.rows() {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_is_finite_for_large_logits(z in -1e4f64..1e4, t in 0u8..2) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(z)).unwrap();
        let l = g.bce_with_logits(v, &Tensor::scalar(t as f64)).unwrap();
        prop_assert!(g.value(l).item().unwrap().is_finite());
    }
}
