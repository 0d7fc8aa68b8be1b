use super::*;
use alloc::sync::Arc;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

#[test]
fn tensor_shape_contract() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::zeros(&[2, 3]).len(), 6);
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let i2 = g.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let x = g.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let y = g.matmul(i2, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
    let ones = g.constant(&t(&[2, 1], &[1., 1.]));
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(crate::Error::Shape(_))));
    assert!(g.matmul_nt(a, b).is_ok());
}

#[test]
fn matmul_backward_is_ones_times_b_transposed() {
    let a_t = lcg_tensor(&[3, 4], 1);
    let b_t = lcg_tensor(&[4, 2], 2);
    let mut g = Graph::new();
    let a = g.param(&a_t);
    let b = g.constant(&b_t);
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    let ga = grads.get(a).unwrap();
    // (ones[3x2] · Bᵀ)[i][k] = Σ_j B[k][j]
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = (0..2).map(|j| b_t.data()[k * 2 + j]).sum();
            assert_abs_diff_eq!(ga[i * 4 + k], expected, epsilon = 1e-14);
        }
    }
    assert!(grads.get(b).is_none());
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    let a = lcg_tensor(&[2, 3, 4], 3);
    let b = lcg_tensor(&[2, 5, 4], 4);
    let shared = lcg_tensor(&[4, 2], 5);
    let err = finite_diff_check_many(
        |g, v| {
            let c = g.matmul_nt(v[0], v[1])?;
            let d = g.matmul(v[0], v[2])?;
            let sq = g.mul(c, c)?;
            let s1 = g.sum(sq);
            let s2 = g.sum(d);
            g.add(s1, s2)
        },
        &[a, b, shared],
        1e-5,
    )
    .unwrap();
    assert!(err.iter().all(|&e| e < 1e-6), "{err:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[3, 2], &[0., 0., 1000., 1000., 0., libm::log(3.0)]));
    let y = g.softmax_lastdim(x).unwrap();
    let v = g.value(y);
    assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
    assert_abs_diff_eq!(v[4], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(v[5], 0.75, epsilon = 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(&Tensor::full(&[2], 1.0));
    let zeros = g.constant(&Tensor::zeros(&[2]));
    let x = g.constant(&t(&[2, 2], &[5., 5., 1., 3.]));
    let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
    let v = g.value(y);
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert_abs_diff_eq!(v[2], -1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(v[3], 1.0, epsilon = 1e-9);

    let b = g.constant(&t(&[2], &[0.7, -0.2]));
    let y = g.layer_norm(x, zeros, b, 1e-5).unwrap();
    assert_eq!(g.value(y), &[0.7, -0.2, 0.7, -0.2]);

    assert!(matches!(g.layer_norm(x, ones, zeros, 0.0), Err(crate::Error::Config(_))));
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[4], &[0.0, 800.0, -800.0, libm::log(3.0)]));
    let y = g.sigmoid(x);
    let v = g.value(y);
    assert_eq!(v[0], 0.5);
    assert_eq!(v[1], 1.0);
    assert!(v[2].is_finite() && v[2] >= 0.0);
    assert_abs_diff_eq!(v[3], 0.75, epsilon = 1e-15);
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[1, 1, 2], &[0.0, 1.0]));
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 4]);
    let row = &g.value(y)[..4];
    for (a, b) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }

    let c = g.constant(&Tensor::full(&[3, 4, 4], 0.25));
    let up = g.upsample_bilinear(c, 4).unwrap();
    assert_eq!(g.shape(up), &[3, 16, 16]);
    assert!(g.value(up).iter().all(|&v| (v - 0.25).abs() < 1e-15));

    assert!(matches!(g.upsample_bilinear(c, 3), Err(crate::Error::Config(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    assert_eq!(g.backward(sq).unwrap().get(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[5]));
    let s = g.sigmoid(x);
    let root = g.sum(s);
    assert!(g.backward(root).unwrap().get(x).unwrap().iter().all(|&d| d == 0.25));

    // two paths: x*2 + x*3 -> 5
    let mut g = Graph::new();
    let x = g.param(&Tensor::scalar(1.5));
    let a = g.scale(x, 2.0);
    let b = g.scale(x, 3.0);
    let c = g.add(a, b).unwrap();
    assert_eq!(g.backward(c).unwrap().get(x).unwrap(), &[5.0]);

    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(&lcg_tensor(&[6, 5], 9));
        let b = g.param(&lcg_tensor(&[5, 4], 10));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_lastdim(c).unwrap();
        let l = g.log(s);
        let r = g.sum(l);
        let grads = g.backward(r).unwrap();
        (g.scalar(r).to_bits(), grads.get(a).unwrap().to_vec(), grads.get(b).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn fd_check_of_sum_of_squares() {
    let x = lcg_tensor(&[7], 11);
    let err = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn fd_check_of_matmul_chain() {
    let a = lcg_tensor(&[3, 4], 12);
    let b = lcg_tensor(&[4, 5], 13);
    let c = lcg_tensor(&[5, 2], 14);
    let err = finite_diff_check_many(
        |g, v| {
            let ab = g.matmul(v[0], v[1])?;
            let abc = g.matmul(ab, v[2])?;
            let sq = g.mul(abc, abc)?;
            Ok(g.sum(sq))
        },
        &[a, b, c],
        1e-4,
    )
    .unwrap();
    assert!(err.iter().all(|&e| e <= 1e-4), "{err:?}");
}

#[test]
fn fd_check_of_every_op() {
    // One composed graph touching each differentiable op.
    let x = lcg_tensor(&[4, 6], 21);
    let row = lcg_tensor(&[6], 22);
    let gain = lcg_tensor(&[6], 23);
    let bias = lcg_tensor(&[6], 24);
    let s = Tensor::scalar(0.7);
    let up_map = Arc::new(SparseMap::bilinear_upsample(2, 2, 2).unwrap());
    let pool_map = Arc::new(SparseMap::avg_pool(4, 4, 2).unwrap());
    let err = finite_diff_check_many(
        |g, v| {
            let (x, row, gain, bias, s) = (v[0], v[1], v[2], v[3], v[4]);
            let a = g.add_row(x, row)?;
            let b = g.mul_row(a, gain)?;
            let ln = g.layer_norm(b, gain, bias, 1e-5)?;
            let ge = g.gelu(ln);
            let sm = g.softmax_lastdim(ge)?;
            let sig = g.sigmoid(x);
            let cat = g.concat_cols(&[sm, sig])?;
            let cm = g.col_max(cat)?;
            let sl = g.slice_cols(cat, 3, 4)?;
            let up = g.resample(sl, up_map.clone())?;
            let pooled = g.resample(up, pool_map.clone())?;
            let tr = g.transpose(pooled)?;
            let nrm = g.row_normalize(tr);
            let sq = g.sub(nrm, nrm)?;
            let ms = g.mul_scalar(nrm, s)?;
            let pw = g.powf(sig, 2.0);
            let cl = g.clamp(pw, 0.05, 0.9);
            let off = g.offset(cl, 0.5);
            let lg = g.log(off);
            let rc = g.recip(off);
            let mc = g.mul_const(rc, (0..24).map(|i| i as f64 * 0.1).collect())?;
            let r1 = g.sum(cm);
            let r2 = g.sum(ms);
            let r3 = g.sum(lg);
            let r4 = g.mean(mc);
            let r5 = g.sum(sq);
            let t1 = g.add(r1, r2)?;
            let t2 = g.add(r3, r4)?;
            let t3 = g.mul(t1, t2)?;
            g.add(t3, r5)
        },
        &[x, row, gain, bias, s],
        1e-5,
    )
    .unwrap();
    assert!(err.iter().all(|&e| e <= 1e-5), "{err:?}");
}

#[test]
fn gather_and_reshape_contracts() {
    let mut g = Graph::new();
    let x = g.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let tr = g.transpose(x).unwrap();
    assert_eq!(g.value(tr), &[1., 4., 2., 5., 3., 6.]);
    assert!(g.gather(x, vec![7], &[1]).is_err());
    assert!(g.reshape(x, &[4]).is_err());
    let c = g.col_max(x).unwrap();
    assert_eq!(g.value(c), &[4., 5., 6.]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        shift in -500.0f64..500.0,
    ) {
        let x = lcg_tensor(&[rows, cols], seed);
        let shifted = Tensor::from_fn(&[rows, cols], |i| x.data()[i] * 20.0 + shift);
        let mut g = Graph::new();
        let a = g.constant(&shifted);
        let y = g.softmax_lastdim(a).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(y)[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        // shift invariance
        let b = g.offset(a, 37.0);
        let z = g.softmax_lastdim(b).unwrap();
        for (p, q) in g.value(y).iter().zip(g.value(z)) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn composed_graph_matches_central_differences(seed in any::<u64>()) {
        let a = lcg_tensor(&[3, 4], seed);
        let w = lcg_tensor(&[4, 4], seed ^ 0x55);
        let err = finite_diff_check_many(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let s = g.softmax_lastdim(h)?;
                let k = g.matmul_nt(s, v[0])?;
                let gl = g.gelu(k);
                let m = g.sigmoid(gl);
                Ok(g.sum(m))
            },
            &[a, w],
            1e-4,
        ).unwrap();
        prop_assert!(err.iter().all(|&e| e <= 1e-3), "{:?}", err);
    }
}
