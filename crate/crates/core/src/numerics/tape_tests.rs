use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_diff_coords, relative_error, softmax_cross_entropy};

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;

/// Checks d/dx sum(build(x) ⊙ R) against central differences on every coordinate.
/// Returns the number of coordinates compared.
fn check<F>(x: Tensor<f32>, seed: u64, build: F) -> usize
where
    F: Fn(&mut Tape<'_, f32>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = build(&mut tape, xv).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = Tensor::<f32>::randn(&out_shape, 1.0, &mut rng);
    let objective = |t: &Tensor<f32>| -> Result<(f32, Option<Tensor<f32>>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone(), true);
        let out = build(&mut tape, xv)?;
        let w = tape.leaf(weights.clone(), false);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.take(xv)))
    };
    let (_, analytic) = objective(&x).unwrap();
    let analytic = analytic.expect("input gradient");
    let coords: Vec<usize> = (0..x.numel()).collect();
    let numeric = finite_diff_coords(|t| objective(t).map(|r| r.0), &x, EPS, &coords).unwrap();
    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let err = relative_error(a as f64, n as f64);
        assert!(err < TOL, "coord {i}: analytic {a} numeric {n} err {err}");
    }
    coords.len()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
    let b = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
    let c = tape.matmul(eye, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let row = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), false);
    let col = tape.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]), false);
    let dot = tape.matmul(row, col).unwrap();
    assert_eq!(tape.value(dot).data(), &[11.0]);

    let err = tape.matmul(row, row).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("[1, 2]"));
}

#[test]
fn matmul_gradients() {
    let b = random(&[4, 2], 11);
    let n = check(random(&[3, 4], 10), 12, |t, x| {
        let bv = t.leaf(b.clone(), false);
        t.matmul(x, bv)
    });
    let a = random(&[3, 4], 13);
    let n2 = check(random(&[4, 2], 14), 15, |t, x| {
        let av = t.leaf(a.clone(), false);
        t.matmul(av, x)
    });
    assert_eq!(n + n2, 20);
}

#[test]
fn embedding_gathers_rows() {
    let table = Tensor::<f32>::from_rows(&[vec![0.0, 0.5], vec![1.0, 1.5], vec![2.0, 2.5]]);
    let mut tape = Tape::new();
    let t = tape.leaf(table, true);
    let e = tape.embedding(t, &[2, 0]).unwrap();
    assert_eq!(tape.value(e).data(), &[2.0, 2.5, 0.0, 0.5]);
    assert!(matches!(
        tape.embedding(t, &[3]),
        Err(Error::Index { index: 3, .. })
    ));
}

#[test]
fn embedding_duplicates_accumulate() {
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::<f32>::zeros(&[3, 4]), true);
    let e = tape.embedding(t, &[1, 1]).unwrap();
    let s = tape.sum(e).unwrap();
    let grads = tape.backward(s).unwrap();
    let g = grads.get(t).unwrap();
    assert_eq!(g.row(1), &[2.0; 4]);
    assert_eq!(g.row(0), &[0.0; 4]);
}

#[test]
fn embedding_gradients() {
    check(random(&[5, 3], 20), 21, |t, x| t.embedding(x, &[4, 0, 4, 2]));
}

#[test]
fn cross_entropy_values() {
    let uniform = Tensor::<f32>::full(&[10], 0.3);
    for target in 0..10 {
        let l = softmax_cross_entropy(&uniform, target).unwrap();
        assert!((l - 10f32.ln()).abs() < 1e-5);
    }
    let dominated = Tensor::<f32>::new(vec![2], vec![1000.0, 0.0]).unwrap();
    let l = softmax_cross_entropy(&dominated, 0).unwrap();
    assert!(l.abs() < 1e-6);
    assert!(matches!(
        softmax_cross_entropy(&dominated, 2),
        Err(Error::Index { index: 2, .. })
    ));
}

#[test]
fn cross_entropy_gradients() {
    check(random(&[1, 7], 30), 31, |t, x| t.cross_entropy(x, &[Some(3)]));
    check(random(&[3, 5], 32), 33, |t, x| t.cross_entropy(x, &[Some(1), None, Some(4)]));
}

#[test]
fn cross_entropy_backward_is_softmax_minus_onehot() {
    let logits = random(&[1, 6], 34);
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let loss = tape.cross_entropy(x, &[Some(2)]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let max = logits.data().iter().copied().fold(f32::MIN, f32::max);
    let z: f32 = logits.data().iter().map(|v| (v - max).exp()).sum();
    for (i, &g) in grads.get(x).unwrap().data().iter().enumerate() {
        let p = (logits.data()[i] - max).exp() / z;
        let expected = p - if i == 2 { 1.0 } else { 0.0 };
        assert!((g - expected).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_gradients() {
    let gamma = random(&[6], 41);
    let beta = random(&[6], 42);
    check(random(&[3, 6], 40), 43, |t, x| {
        let g = t.leaf(gamma.clone(), false);
        let b = t.leaf(beta.clone(), false);
        t.layer_norm(x, g, b)
    });
    let x = random(&[3, 6], 44);
    check(random(&[6], 45), 46, |t, g| {
        let xv = t.leaf(x.clone(), false);
        let b = t.leaf(beta.clone(), false);
        t.layer_norm(xv, g, b)
    });
}

#[test]
fn gelu_bias_mean_scale_gradients() {
    check(random(&[4, 5], 50), 51, |t, x| t.gelu(x));
    let bias = random(&[5], 52);
    check(random(&[4, 5], 53), 54, |t, x| {
        let b = t.leaf(bias.clone(), false);
        t.add_bias(x, b)
    });
    check(random(&[5], 55), 56, |t, b| {
        let x = t.leaf(Tensor::zeros(&[4, 5]), false);
        t.add_bias(x, b)
    });
    check(random(&[4, 5], 57), 58, |t, x| t.mean_rows(x));
    check(random(&[4, 5], 59), 60, |t, x| t.scale(x, 0.25));
    check(random(&[4, 5], 61), 62, |t, x| t.transpose(x));
}

#[test]
fn concat_and_slice_gradients() {
    let other = random(&[2, 3], 70);
    check(random(&[3, 3], 71), 72, |t, x| {
        let o = t.leaf(other.clone(), false);
        t.concat_rows(&[o, x, o])
    });
    check(random(&[5, 3], 73), 74, |t, x| t.slice_rows(x, 1, 4));
}

#[test]
fn attention_gradients() {
    let wk = random(&[8, 8], 81).map(|v| v * 0.3);
    let wv = random(&[8, 8], 82).map(|v| v * 0.3);
    for causal in [true, false] {
        check(random(&[5, 8], 80), 83, |t, x| {
            let a = t.leaf(wk.clone(), false);
            let b = t.leaf(wv.clone(), false);
            let k = t.matmul(x, a)?;
            let v = t.matmul(x, b)?;
            t.attention(x, k, v, 2, causal)
        });
    }
}

#[test]
fn causal_attention_ignores_future_rows() {
    let q = random(&[4, 4], 90);
    let mut k = random(&[4, 4], 91);
    let mut v = random(&[4, 4], 92);
    let run = |k: &Tensor<f32>, v: &Tensor<f32>| {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(q.clone(), false), tape.leaf(k.clone(), false), tape.leaf(v.clone(), false));
        let out = tape.attention(a, b, c, 2, true).unwrap();
        tape.value(out).clone()
    };
    let before = run(&k, &v);
    k.row_mut(3).iter_mut().for_each(|x| *x += 5.0);
    v.row_mut(3).iter_mut().for_each(|x| *x -= 5.0);
    let after = run(&k, &v);
    assert_eq!(&before.data()[..12], &after.data()[..12]);
    assert_ne!(before.row(3), after.row(3));
}

#[test]
fn backward_is_deterministic() {
    let x = random(&[6, 8], 100);
    let w = random(&[8, 8], 101);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let wv = tape.leaf(w, true);
    let h = tape.matmul(xv, wv).unwrap();
    let a = tape.attention(h, h, h, 4, true).unwrap();
    let g = tape.gelu(a).unwrap();
    let s = tape.sum(g).unwrap();
    let first = tape.backward(s).unwrap();
    let second = tape.backward(s).unwrap();
    for v in [xv, wv] {
        let a: Vec<u32> = first.get(v).unwrap().data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = second.get(v).unwrap().data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut tape = Tape::new();
    let frozen = tape.leaf(random(&[3, 3], 110), false);
    let live = tape.leaf(random(&[3, 3], 111), true);
    let p = tape.matmul(live, frozen).unwrap();
    let q = tape.matmul(p, frozen).unwrap();
    let s = tape.sum(q).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(frozen).is_none());
    assert!(grads.get(live).is_some());
}

#[test]
fn random_coordinate_sweep_over_composite() {
    // A small transformer-like block; 120 random coordinates of the input.
    let mut rng = ChaCha8Rng::seed_from_u64(120);
    let x = Tensor::<f32>::randn(&[6, 8], 1.0, &mut rng);
    let wq = Tensor::<f32>::randn(&[8, 8], 0.3, &mut rng);
    let wo = Tensor::<f32>::randn(&[8, 5], 0.3, &mut rng);
    let gamma = Tensor::<f32>::full(&[8], 1.0);
    let beta = Tensor::<f32>::zeros(&[8]);
    let targets: Vec<Option<usize>> = (0..6).map(|i| if i % 2 == 0 { Some(i % 5) } else { None }).collect();
    let f = |t: &Tensor<f32>| -> Result<(f32, Tensor<f32>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone(), true);
        let (g, b) = (tape.leaf(gamma.clone(), false), tape.leaf(beta.clone(), false));
        let (q, o) = (tape.leaf(wq.clone(), false), tape.leaf(wo.clone(), false));
        let h = tape.layer_norm(xv, g, b)?;
        let hq = tape.matmul(h, q)?;
        let att = tape.attention(hq, h, h, 2, true)?;
        let act = tape.gelu(att)?;
        let res = tape.add(act, xv)?;
        let logits = tape.matmul(res, o)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.take(xv).unwrap()))
    };
    let (_, analytic) = f(&x).unwrap();
    let coords: Vec<usize> = (0..120).map(|_| rng.random_range(0..x.numel())).collect();
    let numeric = finite_diff_coords(|t| f(t).map(|r| r.0), &x, EPS, &coords).unwrap();
    for (&c, &n) in coords.iter().zip(&numeric) {
        let err = relative_error(analytic.data()[c] as f64, n as f64);
        assert!(err < TOL, "coord {c}: {} vs {n}", analytic.data()[c]);
    }
}

proptest! {
    #[test]
    fn cross_entropy_shift_invariant(
        logits in prop::collection::vec(-20.0f32..20.0, 1..12),
        shift in -50.0f32..50.0,
        pick in 0usize..1000,
    ) {
        let target = pick % logits.len();
        let base = Tensor::new(vec![logits.len()], logits.clone()).unwrap();
        let moved = base.map(|v| v + shift);
        let a = softmax_cross_entropy(&base, target).unwrap();
        let b = softmax_cross_entropy(&moved, target).unwrap();
        prop_assert!((a - b).abs() < 1e-5 * a.abs().max(1.0) * 4.0);
    }
}

#[test]
fn attention_gradients_f64_tight() {
    let wk: Tensor<f64> = random(&[8, 8], 81).cast();
    let wv: Tensor<f64> = random(&[8, 8], 82).cast();
    let x: Tensor<f64> = random(&[5, 8], 80).cast();
    let weights: Tensor<f64> = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(83));
    let obj = |t: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone(), true);
        let a = tape.leaf(wk.clone(), false);
        let b = tape.leaf(wv.clone(), false);
        let k = tape.matmul(xv, a)?;
        let v = tape.matmul(xv, b)?;
        let o = tape.attention(xv, k, v, 2, true)?;
        let w = tape.leaf(weights.clone(), false);
        let p = tape.mul(o, w)?;
        let l = tape.sum(p)?;
        let mut g = tape.backward(l)?;
        Ok((tape.value(l).item(), g.take(xv).unwrap()))
    };
    let (_, an) = obj(&x).unwrap();
    let coords: Vec<usize> = (0..40).collect();
    let nu = finite_diff_coords(|t| obj(t).map(|r| r.0), &x, 1e-6, &coords).unwrap();
    for &c in &coords {
        assert!(relative_error(an.data()[c], nu[c]) < 1e-6);
    }
}
