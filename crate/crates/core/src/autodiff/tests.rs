use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::GradCheck;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(vec![r, c], (0..r * c).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Reduces any output to a scalar through fixed random weights so every
/// output entry contributes a distinct amount.
fn project(tape: &mut Tape<'_>, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = random(&mut rng, shape[0], shape[1]);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn assert_passes(report: crate::gradcheck::GradReport, what: &str) {
    assert!(report.passed(1e-4), "{what}: {report:?}");
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![0.0; 3]));
    let y = tape.softmax(x, 1).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_axis_zero_normalizes_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, -1.0], vec![0.5, 0.0]]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let t = tape.value(y);
    for c in 0..2 {
        let s: f64 = (0..3).map(|r| t.get(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_of_constant_row_is_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![4.0; 5]));
    let g = tape.constant(Tensor::row(vec![1.0; 5]));
    let b = tape.constant(Tensor::row(vec![0.0; 5]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn matmul_shape_and_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let a = tape.constant(random(&mut rng, 2, 3));
    let b = tape.constant(random(&mut rng, 3, 1));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    let expect: f64 = (0..3).map(|k| tape.value(a).get(1, k) * tape.value(b).get(k, 0)).sum();
    assert!((tape.value(c).get(1, 0) - expect).abs() < 1e-14);

    match tape.matmul(a, a) {
        Err(Error::Shape { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(tape.add(a, b).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let w = tape.leaf(random(&mut rng, 3, 4), true);
    let l = tape.sum(w);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0; 12]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = random(&mut rng, 2, 5);
    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone(), true);
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let l = tape.scale(s, 0.5);
    tape.backward(l).unwrap();
    for (g, v) in tape.grad(w).unwrap().iter().zip(w0.data()) {
        assert!((g - v).abs() < 1e-15);
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
    let t = tape.tanh(w);
    let l = tape.sum(t);
    tape.backward(l).unwrap();
    let once = tape.grad(w).unwrap().to_vec();
    tape.backward(l).unwrap();
    for (a, b) in tape.grad(w).unwrap().iter().zip(&once) {
        assert!((a - 2.0 * b).abs() < 1e-15);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
    assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
}

#[test]
fn dropout_is_identity_when_off_and_seeded_when_on() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = random(&mut rng, 4, 4);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let same = tape.dropout(x, 0.5, false, 9).unwrap();
    assert_eq!(same, x);
    let a = tape.dropout(x, 0.5, true, 9).unwrap();
    let b = tape.dropout(x, 0.5, true, 9).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert!(tape.value(a).data().iter().any(|v| *v == 0.0));
}

#[test]
fn param_grads_sum_over_repeated_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![1.0, -1.0])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    let s = tape.add(a, b).unwrap();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.param_grads().get(id).unwrap(), &[2.0, 2.0]);
}

/// Every primitive against central differences on random shapes up to 8x8.
#[test]
fn primitives_match_finite_differences() {
    let check = GradCheck::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20u64 {
        let m = rng.random_range(1..=8);
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=8);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let c = random(&mut rng, m, k);
        let row = random(&mut rng, 1, k);
        let pos = positive(&mut rng, m, k);
        let seed = 100 + trial;

        let r = check
            .inputs(&[a.clone(), b.clone()], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, seed)
            })
            .unwrap();
        assert_passes(r, "matmul");

        let unary: [(&str, fn(&mut Tape<'_>, Var) -> Var); 6] = [
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("relu", |t, x| t.relu(x)),
            ("exp", |t, x| t.exp(x)),
            ("transpose", |t, x| t.transpose(x)),
            ("scale", |t, x| {
                let y = t.scale(x, -1.7);
                t.add_scalar(y, 0.3)
            }),
        ];
        for (name, op) in unary {
            let r = check
                .inputs(&[a.clone()], |t, v| {
                    let y = op(t, v[0]);
                    project(t, y, seed)
                })
                .unwrap();
            assert_passes(r, name);
        }

        let r = check
            .inputs(&[pos.clone()], |t, v| {
                let c = t.clamp_min(v[0], 1e-12);
                let y = t.log(c);
                project(t, y, seed)
            })
            .unwrap();
        assert_passes(r, "log");

        for (name, op) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
        ] {
            let r = check
                .inputs(&[a.clone(), c.clone()], |t, v| {
                    let y = match op {
                        0 => t.add(v[0], v[1])?,
                        1 => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, seed)
                })
                .unwrap();
            assert_passes(r, name);
        }

        let r = check
            .inputs(&[a.clone(), row.clone()], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, seed)
            })
            .unwrap();
        assert_passes(r, "add_row");

        let r = check
            .inputs(&[a.clone(), c.clone()], |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                let z = t.concat_rows(&[y, y])?;
                project(t, z, seed)
            })
            .unwrap();
        assert_passes(r, "concat");

        let (cs, cw) = (k / 2, k - k / 2);
        let (rs, rc) = (m / 2, m - m / 2);
        let r = check
            .inputs(&[a.clone()], |t, v| {
                let y = t.slice_cols(v[0], cs, cw)?;
                let z = t.slice_rows(y, rs, rc)?;
                project(t, z, seed)
            })
            .unwrap();
        assert_passes(r, "slice");

        for axis in [0, 1] {
            let r = check
                .inputs(&[a.clone()], |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    project(t, y, seed)
                })
                .unwrap();
            assert_passes(r, "softmax");
        }

        if k > 1 {
            let gain = random(&mut rng, 1, k);
            let bias = random(&mut rng, 1, k);
            let r = check
                .inputs(&[a.clone(), gain, bias], |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    project(t, y, seed)
                })
                .unwrap();
            assert_passes(r, "layer_norm");
        }

        let r = check
            .inputs(&[a.clone()], |t, v| {
                let y = t.dropout(v[0], 0.3, true, seed)?;
                project(t, y, seed)
            })
            .unwrap();
        assert_passes(r, "dropout");

        let r = check
            .inputs(&[a.clone()], |t, v| {
                let s = t.sum(v[0]);
                let mn = t.mean(v[0]);
                let p = t.mul(s, mn)?;
                Ok(p)
            })
            .unwrap();
        assert_passes(r, "sum/mean");
    }
}

#[test]
fn random_three_layer_composition_matches_finite_differences() {
    let check = GradCheck::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..5 {
        let x = random(&mut rng, 4, 3);
        let w1 = random(&mut rng, 3, 5);
        let w2 = random(&mut rng, 5, 4);
        let w3 = random(&mut rng, 4, 2);
        let r = check
            .inputs(&[x, w1, w2, w3], |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.tanh(h);
                let h = t.matmul(h, v[2])?;
                let h = t.sigmoid(h);
                let h = t.matmul(h, v[3])?;
                let p = t.softmax(h, 1)?;
                project(t, p, trial)
            })
            .unwrap();
        assert_passes(r, "composition");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let x0 = random(&mut rng, 6, 7);
        let shift: f64 = rng.random_range(-50.0..50.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let xs = tape.add_scalar(x, shift);
        let p = tape.softmax(x, 1).unwrap();
        let q = tape.softmax(xs, 1).unwrap();
        let (p, q) = (tape.value(p), tape.value(q));
        for r in 0..6 {
            let s: f64 = p.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn nan_propagates_through_relu_and_clamp() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(vec![f64::NAN, -1.0, 2.0]));
    let r = tape.relu(x);
    let c = tape.clamp_min(x, 0.5);
    assert!(tape.value(r).data()[0].is_nan());
    assert!(tape.value(c).data()[0].is_nan());
    assert_eq!(&tape.value(r).data()[1..], &[0.0, 2.0]);
    assert_eq!(&tape.value(c).data()[1..], &[0.5, 2.0]);
}
