use lbcnn::conv::{
    conv2d_1x1, conv2d_1x1_backward, conv2d_dense, conv2d_dense_backward, conv2d_sparse_binary,
    conv2d_sparse_binary_backward, ConvGeometry, OpCounter,
};
use lbcnn::rng;
use lbcnn::{generate_bank, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn dense_adjoint_identity() {
    for (i, &(stride, pad, k)) in [(1, 1, 3), (1, 2, 5), (2, 1, 3), (1, 0, 3)].iter().enumerate() {
        let geom = ConvGeometry { stride, pad, groups: 1 };
        let x = random(&[2, 3, 9, 9], 10 + i as u64);
        let w = random(&[4, 3, k, k], 20 + i as u64);
        let y = conv2d_dense(&x, &w, geom, &mut OpCounter::default()).unwrap();
        let g = random(y.shape(), 30 + i as u64);
        let (gx, gw) = conv2d_dense_backward(&x, &w, &g, geom, &mut OpCounter::default()).unwrap();
        let lhs = y.dot(&g).unwrap();
        assert!(rel(lhs, x.dot(&gx).unwrap()) < 1e-10);
        assert!(rel(lhs, w.dot(&gw).unwrap()) < 1e-10);
    }
}

#[test]
fn sparse_adjoint_identity_and_densified_gradient() {
    let x = random(&[2, 4, 8, 8], 1);
    let bank = generate_bank(16, 4, 3, 3, 0.5, 2).unwrap();
    let geom = ConvGeometry::same(3);
    let mut ops = OpCounter::default();
    let y = conv2d_sparse_binary(&x, &bank, geom, &mut ops).unwrap();
    let g = random(y.shape(), 3);
    let gx = conv2d_sparse_binary_backward(&x, &bank, &g, geom, &mut ops).unwrap();
    assert_eq!(ops.multiplications, 0);
    assert!(rel(y.dot(&g).unwrap(), x.dot(&gx).unwrap()) < 1e-10);
    let (dense_gx, _) = conv2d_dense_backward(&x, &bank.densify(), &g, geom, &mut OpCounter::default()).unwrap();
    assert!(gx.max_abs_diff(&dense_gx).unwrap() <= 1e-12);
}

#[test]
fn sparse_addition_count_is_exact() {
    let x = random(&[3, 2, 7, 6], 4);
    let bank = generate_bank(5, 2, 3, 3, 0.3, 5).unwrap();
    let nnz = bank.filter(0).len() as u64;
    let mut ops = OpCounter::default();
    conv2d_sparse_binary(&x, &bank, ConvGeometry::same(3), &mut ops).unwrap();
    assert_eq!(ops.additions, 3 * 5 * 7 * 6 * nnz);
    assert_eq!(ops.multiplications, 0);
}

#[test]
fn one_by_one_adjoint_identity() {
    let x = random(&[2, 8, 5, 4], 6);
    let v = random(&[3, 8, 1, 1], 7);
    let y = conv2d_1x1(&x, &v, &mut OpCounter::default()).unwrap();
    let g = random(y.shape(), 8);
    let (gx, gv) = conv2d_1x1_backward(&x, &v, &g, &mut OpCounter::default()).unwrap();
    let lhs = y.dot(&g).unwrap();
    assert!(rel(lhs, x.dot(&gx).unwrap()) < 1e-10);
    assert!(rel(lhs, v.dot(&gv).unwrap()) < 1e-10);
}

#[test]
fn dense_gradients_match_central_differences() {
    let geom = ConvGeometry::same(3);
    let x = random(&[1, 2, 5, 5], 9);
    let w = random(&[3, 2, 3, 3], 10);
    let g = random(&[1, 3, 5, 5], 11);
    let loss = |x: &Tensor, w: &Tensor| conv2d_dense(x, w, geom, &mut OpCounter::default()).unwrap().dot(&g).unwrap();
    let (gx, gw) = conv2d_dense_backward(&x, &w, &g, geom, &mut OpCounter::default()).unwrap();
    let eps = 1e-5;
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp.data_mut()[i] += eps;
        wm.data_mut()[i] -= eps;
        let numeric = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
        assert!(rel(gw.data()[i], numeric) < 1e-6, "weight {i}");
    }
    for i in (0..x.len()).step_by(3) {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += eps;
        xm.data_mut()[i] -= eps;
        let numeric = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
        assert!(rel(gx.data()[i], numeric) < 1e-6, "input {i}");
    }
}

#[test]
fn grouped_dense_adjoint_identity() {
    let geom = ConvGeometry::same(3).with_groups(2);
    let x = random(&[1, 4, 6, 6], 12);
    let w = random(&[6, 2, 3, 3], 13);
    let y = conv2d_dense(&x, &w, geom, &mut OpCounter::default()).unwrap();
    let g = random(y.shape(), 14);
    let (gx, gw) = conv2d_dense_backward(&x, &w, &g, geom, &mut OpCounter::default()).unwrap();
    let lhs = y.dot(&g).unwrap();
    assert!(rel(lhs, x.dot(&gx).unwrap()) < 1e-10);
    assert!(rel(lhs, w.dot(&gw).unwrap()) < 1e-10);
}
