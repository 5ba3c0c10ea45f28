use super::*;
use crate::error::Error;
use crate::testutil::{rng, uniform};

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2();
    let n = b.cols();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.get2(i, p) * b.get2(p, j);
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

fn naive_conv(x: &Tensor, k: &Tensor) -> Tensor {
    let (n, d_in) = x.dims2();
    let (w, d_out) = (k.shape()[0], k.shape()[2]);
    let pad = (w - 1) / 2;
    let mut out = Tensor::zeros(&[n, d_out]);
    for t in 0..n {
        for o in 0..d_out {
            let mut acc = 0.0;
            for j in 0..w {
                let s = t as isize + j as isize - pad as isize;
                if s < 0 || s >= n as isize {
                    continue;
                }
                for i in 0..d_in {
                    acc += x.get2(s as usize, i) * k.data()[(j * d_in + i) * d_out + o];
                }
            }
            out.data_mut()[t * d_out + o] = acc;
        }
    }
    out
}

#[test]
fn matmul_identity_and_scalar() {
    let mut r = rng(1);
    let b = uniform(&mut r, &[3, 4], 1.0);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3));
    let bid = tape.constant(b.clone());
    let c = tape.matmul(i, bid).unwrap();
    assert_eq!(tape.value(c), &b);

    let two = tape.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let three = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let six = tape.matmul(two, three).unwrap();
    assert_eq!(tape.value(six).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = uniform(&mut r, &[4, 5], 1.0);
    let b = uniform(&mut r, &[5, 2], 1.0);
    let mut tape = Tape::new();
    let (ai, bi) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(ai, bi).unwrap();
    assert!(tape.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn elementwise_reference_values() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0));
    let s = tape.elementwise(ElementwiseKind::Sigmoid, &[zero]).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);

    let neg = tape.constant(Tensor::scalar(-3.0));
    let r = tape.relu(neg).unwrap();
    assert_eq!(tape.value(r).item(), 0.0);

    // 50-digit evaluation of the tanh-approximated GELU.
    let x = tape.constant(Tensor::vector(vec![1.0, -0.7]));
    let g = tape.gelu(x).unwrap();
    let expect = [0.841_191_990_608_276_7, -0.169_429_865_294_883_25];
    for (v, e) in tape.value(g).data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-9, "{v} vs {e}");
    }
}

#[test]
fn elementwise_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    let y = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
    assert!(matches!(
        tape.elementwise(ElementwiseKind::Mul, &[x]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn softmax_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 3]));
    let s = tape.softmax(x, Axis::Cols).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = tape.softmax(x, Axis::Cols).unwrap();
    let v = tape.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);

    let x = tape.constant(Tensor::vector(vec![f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(x, Axis::Cols), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_rows_axis_normalizes_columns() {
    let mut r = rng(3);
    let mut tape = Tape::new();
    let x = tape.constant(uniform(&mut r, &[4, 3], 5.0));
    let s = tape.softmax(x, Axis::Rows).unwrap();
    let v = tape.value(s);
    for c in 0..3 {
        let total: f64 = (0..4).map(|i| v.get2(i, c)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn conv1d_identity_zero_and_oracle() {
    let mut r = rng(11);
    let x = uniform(&mut r, &[8, 3], 1.0);
    let mut delta = Tensor::zeros(&[3, 3, 3]);
    for i in 0..3 {
        delta.data_mut()[(3 + i) * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let di = tape.constant(delta);
    let y = tape.conv1d(xi, di, 1).unwrap();
    assert_eq!(tape.value(y), &x);

    let zi = tape.constant(Tensor::zeros(&[3, 3, 2]));
    let y = tape.conv1d(xi, zi, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let k = uniform(&mut r, &[3, 3, 2], 1.0);
    let ki = tape.constant(k.clone());
    let y = tape.conv1d(xi, ki, 1).unwrap();
    assert!(tape.value(y).max_abs_diff(&naive_conv(&x, &k)) < 1e-12);

    let even = tape.constant(Tensor::zeros(&[2, 3, 2]));
    assert!(matches!(tape.conv1d(xi, even, 1), Err(Error::Config(_))));
}

#[test]
fn topk_mean_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.2, 0.9, 0.9]));
    let t = tape.topk_mean(x, 1).unwrap();
    assert_eq!(tape.value(t).item(), 0.9);
    let g = tape.backward(t).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

    let all = tape.topk_mean(x, 3).unwrap();
    assert!((tape.value(all).item() - 2.0 / 3.0).abs() < 1e-15);

    assert!(matches!(tape.topk_mean(x, 0), Err(Error::Config(_))));
    assert!(matches!(tape.topk_mean(x, 4), Err(Error::Config(_))));

    let mut r = rng(5);
    let v = uniform(&mut r, &[10], 1.0);
    let xi = tape.constant(v.clone());
    let t = tape.topk_mean(xi, 3).unwrap();
    let mut sorted = v.data().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let oracle = sorted[..3].iter().sum::<f64>() / 3.0;
    assert!((tape.value(t).item() - oracle).abs() < 1e-15);
}

#[test]
fn topk_mean_over_columns() {
    let m = Tensor::from_rows(&[vec![0.1, 0.5], vec![0.7, 0.2], vec![0.3, 0.9]]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(m);
    let t = tape.topk_mean(x, 2).unwrap();
    let v = tape.value(t).data();
    assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
}

#[test]
fn gradcheck_sum_of_squares() {
    let report = gradcheck(
        |t, ids| {
            let sq = t.square(ids[0])?;
            t.sum(sq)
        },
        &[Tensor::vector(vec![1.0, 2.0])],
        1e-4,
    )
    .unwrap();
    assert!(report.worst() < 1e-8);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn gradcheck_rejects_non_scalar_root_and_bad_eps() {
    let inputs = [Tensor::vector(vec![1.0, 2.0])];
    let err = gradcheck(|t, ids| t.square(ids[0]), &inputs, 1e-4).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let err = gradcheck(|t, ids| t.sum(ids[0]), &inputs, 1e-1).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn multiple_consumers_accumulate() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 7.0);
}

#[test]
fn constants_never_receive_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some() && g.get(p).is_some() && g.get(s).is_some());
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn smooth_check_rejects_probes_across_a_kink() {
    let relu_sum = |t: &mut Tape, ids: &[NodeId]| {
        let y = t.relu(ids[0])?;
        t.sum(y)
    };
    let near = Tensor::vector(vec![0.5, 2e-5]);
    assert!(gradcheck_smooth(relu_sum, &[near], 1e-4).unwrap().is_none());
    let far = Tensor::vector(vec![0.5, -0.3]);
    let report = gradcheck_smooth(relu_sum, &[far], 1e-4).unwrap().unwrap();
    assert!(report.worst() < 1e-9);
}
