use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn smooth_l1_linear_branch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::row(vec![0.0]));
    let b = tape.constant(Tensor::row(vec![2.0]));
    let l = tape.smooth_l1(a, b, 1.0).unwrap();
    assert_eq!(tape.value(l).item(), 1.5);
}

#[test]
fn smooth_l1_of_identical_inputs_is_flat() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(vec![0.3, -2.0, 5.0]));
    let l = tape.smooth_l1(x, x, 0.5).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn square_derivative() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn reuse_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.25));
    let y = tape.add(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 2.0);
}

#[test]
fn softmax_slices_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let x = tape.constant(random(&mut rng, 5, 7));
    for axis in [0, 1] {
        let y = tape.softmax(x, axis).unwrap();
        let y = tape.value(y);
        let (count, len) = if axis == 1 { (5, 7) } else { (7, 5) };
        for s in 0..count {
            let total: f64 = (0..len)
                .map(|i| if axis == 1 { y.at(s, i) } else { y.at(i, s) })
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-5;
    let x = random(&mut rng, 4, 16);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[1, 16], 1.0));
    let b = tape.constant(Tensor::zeros(&[1, 16]));
    let y = tape.layer_norm(xv, g, b, 1, eps).unwrap();
    let y = tape.value(y);
    for r in 0..4 {
        let row = x.row_slice(r);
        let m = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 16.0;
        let out = y.row_slice(r);
        let om = out.iter().sum::<f64>() / 16.0;
        let ov = out.iter().map(|v| (v - om) * (v - om)).sum::<f64>() / 16.0;
        assert!(om.abs() < 1e-6);
        assert!((ov - var / (var + eps)).abs() < 1e-6);
    }
}

#[test]
fn max_pool_routes_to_first_argmax() {
    let tape = Tape::new();
    let x = tape.param(Tensor::matrix(2, 3, vec![1.0, 4.0, 4.0, 2.0, 2.0, -1.0]));
    let m = tape.max_pool(x, 1).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0, 2.0]);
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn segment_max_routes_per_column() {
    let tape = Tape::new();
    let x = tape.param(Tensor::matrix(3, 2, vec![1.0, 5.0, 3.0, 5.0, 7.0, 0.0]));
    let m = tape.segment_max(x, &[0, 2, 3]).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 5.0, 7.0, 0.0]);
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    match tape.add_row(a, b) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add_row"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn overflow_is_signalled() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::row(vec![1e300]));
    match tape.scale(a, 1e300) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "scale"),
        other => panic!("expected non-finite, got {other:?}"),
    }
}

#[test]
fn grad_check_linear_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&mut rng, 4, 3), random(&mut rng, 3, 2), random(&mut rng, 4, 2)];
    let r = grad_check(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.mse(p, v[2])
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn grad_check_smooth_l1_away_from_kink() {
    // residuals in (-0.5, 0.5) or beyond +-2 with beta = 1
    let a = Tensor::row(vec![0.1, -0.3, 2.5, -3.0, 0.45]);
    let b = Tensor::row(vec![0.0, 0.1, 0.0, 0.5, 0.2]);
    let r = grad_check(|t, v| t.smooth_l1(v[0], v[1], 1.0), &[a, b], 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn constant_function_has_zero_gradient() {
    let x = Tensor::row(vec![1.0, 2.0]);
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let c = tape.constant(Tensor::scalar(4.0));
    let zero = tape.scale(v, 0.0).unwrap();
    let s = tape.sum(zero).unwrap();
    let out = tape.add(s, c).unwrap();
    let g = tape.backward(out).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&x| x == 0.0));
    assert!(g.get(c).is_none());

    let r = grad_check(
        |t, v| {
            let z = t.scale(v[0], 0.0)?;
            t.sum(z)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert_eq!(r.max_rel_err, 0.0);
}

#[test]
fn grad_check_rejects_bad_step() {
    let x = Tensor::row(vec![1.0]);
    assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-2).is_err());
}

#[test]
fn grad_check_composite_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 4, 6);
    let w = random(&mut rng, 6, 6);
    let gamma = random(&mut rng, 1, 6);
    let beta = random(&mut rng, 1, 6);
    let target = random(&mut rng, 3, 6);
    let r = grad_check(
        |t, v| {
            let ln = t.layer_norm(v[0], v[2], v[3], 1, 1e-5)?;
            let h = t.matmul(ln, v[1])?;
            let h = t.gelu(h)?;
            let ht = t.transpose(h)?;
            let att = t.matmul(h, ht)?;
            let att = t.scale(att, 0.4)?;
            let att = t.softmax(att, 1)?;
            let mixed = t.matmul(att, h)?;
            let left = t.slice_cols(mixed, 0, 2)?;
            let right = t.slice_cols(mixed, 2, 6)?;
            let joined = t.concat_cols(&[right, left])?;
            let picked = t.gather_rows(joined, &[3, 0, 0])?;
            let loss = t.mse(picked, v[4])?;
            let pooled = t.mean_pool(mixed, 0)?;
            let col = t.layer_norm(h, v[5], v[6], 0, 1e-5)?;
            let cpool = t.mean_pool(col, 1)?;
            let cos = t.cosine_sim(pooled, v[2])?;
            let s = t.sum(cpool)?;
            let s = t.scale(s, 0.1)?;
            let total = t.add(loss, cos)?;
            t.add(total, s)
        },
        &[
            x,
            w,
            gamma,
            beta,
            target,
            random(&mut rng, 4, 1).transpose(),
            random(&mut rng, 1, 4),
        ],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn layer_norm_axis0_shape() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let g = tape.constant(Tensor::full(&[1, 4], 1.0));
    let b = tape.constant(Tensor::zeros(&[1, 4]));
    let y = tape.layer_norm(x, g, b, 0, 1e-5).unwrap();
    assert_eq!(tape.shape(y), vec![4, 2]);
}

#[test]
fn segment_rows_and_weighted_sum_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, 5, 3);
    let b = random(&mut rng, 5, 3);
    let w = random(&mut rng, 3, 3);
    let r = grad_check(
        |t, v| {
            let h = t.matmul(v[0], v[2])?;
            let m = t.segment_max(h, &[0, 2, 5])?;
            let both = t.concat_rows(&[m, h])?;
            let top = t.gather_rows(both, &[0, 1, 2, 3, 4])?;
            let rows = t.smooth_l1_rows(top, v[1], 10.0)?;
            t.weighted_sum(rows, &[0.5, 1.0, 2.0, 0.1, 3.0])
        },
        &[a, b, w],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}
