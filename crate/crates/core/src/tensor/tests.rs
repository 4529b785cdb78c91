use super::nn;
use super::{backward, no_grad, Tensor};

/// Deterministic pseudo-random fill in roughly [-1, 1].
fn wave(n: usize, phase: f32) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * 0.7312 + phase).sin()).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Central-difference gradient of a scalar-valued function of one tensor.
fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, h: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(plus, x.shape())).item() as f64;
        let fm = f(&Tensor::from_vec(minus, x.shape())).item() as f64;
        out.push(((fp - fm) / (2.0 * h as f64)) as f32);
    }
    out
}

/// Checks engine gradients of `f` at `x0` against central differences.
fn gradcheck(f: impl Fn(&Tensor) -> Tensor, x0: Vec<f32>, shape: &[usize], tol: f32) {
    let x = Tensor::var(x0, shape);
    let loss = f(&x);
    assert_eq!(loss.numel(), 1, "gradcheck needs a scalar loss");
    let grads = backward(&loss, false);
    let analytic = grads.get(&x).expect("no gradient for input").to_vec();
    let numeric = numeric_grad(&f, &x, 5e-3);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = 1.0f32.max(a.abs()).max(n.abs());
        assert!(
            (a - n).abs() / denom < tol,
            "grad mismatch at {i}: analytic {a} vs numeric {n}"
        );
    }
}

#[test]
fn add_mul_grads() {
    gradcheck(
        |x| x.mul(&x.add_scalar(1.5)).sum_all(),
        wave(12, 0.0),
        &[3, 4],
        1e-2,
    );
}

#[test]
fn unary_op_grads() {
    gradcheck(|x| x.exp().sum_all(), wave(10, 0.1), &[10], 1e-2);
    gradcheck(|x| x.sigmoid().sum_all(), wave(10, 0.2), &[10], 1e-2);
    gradcheck(|x| x.softplus().sum_all(), wave(10, 0.3), &[10], 1e-2);
    gradcheck(|x| x.silu().sum_all(), wave(10, 0.4), &[10], 1e-2);
    gradcheck(|x| x.add_scalar(2.0).recip().sum_all(), wave(10, 0.5), &[10], 1e-2);
    gradcheck(|x| x.add_scalar(3.0).rsqrt().sum_all(), wave(10, 0.6), &[10], 1e-2);
    gradcheck(|x| x.neg().mul_scalar(0.7).sum_all(), wave(10, 0.7), &[10], 1e-2);
    // abs away from the kink
    gradcheck(
        |x| x.abs().sum_all(),
        (0..10).map(|i| if i % 2 == 0 { 0.5 + i as f32 } else { -0.5 - i as f32 }).collect(),
        &[10],
        1e-2,
    );
    gradcheck(
        |x| x.leaky_relu(0.2).sum_all(),
        (0..10).map(|i| if i % 2 == 0 { 0.5 + i as f32 } else { -0.5 - i as f32 }).collect(),
        &[10],
        1e-2,
    );
}

#[test]
fn binary_op_grads_both_sides() {
    let b = Tensor::from_vec(wave(8, 1.0), &[2, 4]);
    gradcheck(|x| x.mul(&b).sum_all(), wave(8, 2.0), &[2, 4], 1e-2);
    gradcheck(|x| x.sub(&b).mul(&x).sum_all(), wave(8, 3.0), &[2, 4], 1e-2);
}

#[test]
fn shared_input_accumulates() {
    // y = x*x + 3x  =>  dy/dx = 2x + 3
    let x = Tensor::var(vec![1.5, -2.0], &[2]);
    let y = x.mul(&x).add(&x.mul_scalar(3.0)).sum_all();
    let grads = backward(&y, false);
    let g = grads.get(&x).unwrap().to_vec();
    assert!((g[0] - 6.0).abs() < 1e-6);
    assert!((g[1] + 1.0).abs() < 1e-6);
}

#[test]
fn reduction_and_broadcast_grads() {
    gradcheck(|x| x.sum_all(), wave(6, 0.0), &[6], 1e-2);
    gradcheck(|x| x.mean_all(), wave(6, 0.1), &[2, 3], 1e-2);
    gradcheck(|x| x.row_sum().mul(&x.row_sum()).sum_all(), wave(6, 0.2), &[2, 3], 1e-2);
    gradcheck(|x| x.row_broadcast(4).mul_scalar(0.5).sum_all(), wave(3, 0.3), &[3, 1], 1e-2);
    gradcheck(|x| x.sum_nhw().mul(&x.sum_nhw()).sum_all(), wave(24, 0.4), &[2, 3, 2, 2], 1e-2);
    gradcheck(|x| x.sum_hw().mul(&x.sum_hw()).sum_all(), wave(24, 0.5), &[2, 3, 2, 2], 1e-2);
    gradcheck(|x| x.chan_broadcast(2, 2, 2).exp().sum_all(), wave(3, 0.6), &[3], 1e-2);
    gradcheck(|x| x.bcast_nc_hw(2, 2).exp().sum_all(), wave(6, 0.7), &[2, 3], 1e-2);
    gradcheck(|x| x.bcast_to(&[3, 2]).exp().sum_all(), vec![0.4], &[1], 1e-2);
}

#[test]
fn matmul_forward_golden() {
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let b = Tensor::from_vec(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
    let c = a.matmul2(&b);
    assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn matmul_grads() {
    let b = Tensor::from_vec(wave(12, 1.0), &[4, 3]);
    gradcheck(|x| x.matmul2(&b).mul(&x.matmul2(&b)).sum_all(), wave(8, 2.0), &[2, 4], 1e-2);
    let a = Tensor::from_vec(wave(8, 3.0), &[2, 4]);
    gradcheck(|x| a.matmul2(x).exp().mean_all(), wave(12, 4.0), &[4, 3], 1e-2);
}

#[test]
fn bmm_matches_per_batch_matmul() {
    let a = Tensor::from_vec(wave(24, 0.0), &[2, 3, 4]);
    let b = Tensor::from_vec(wave(40, 1.0), &[2, 4, 5]);
    let c = a.bmm3(&b);
    for i in 0..2 {
        let ai = Tensor::from_vec(a.data()[i * 12..(i + 1) * 12].to_vec(), &[3, 4]);
        let bi = Tensor::from_vec(b.data()[i * 20..(i + 1) * 20].to_vec(), &[4, 5]);
        let ci = ai.matmul2(&bi);
        for (x, y) in c.data()[i * 15..(i + 1) * 15].iter().zip(ci.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    let bb = Tensor::from_vec(wave(40, 2.0), &[2, 4, 5]);
    gradcheck(|x| x.bmm3(&bb).mul(&x.bmm3(&bb)).sum_all(), wave(24, 3.0), &[2, 3, 4], 1e-2);
}

#[test]
fn shape_op_grads() {
    gradcheck(|x| x.reshape(&[6]).exp().sum_all(), wave(6, 0.0), &[2, 3], 1e-2);
    gradcheck(|x| x.transpose2().matmul2(x).sum_all(), wave(6, 0.1), &[2, 3], 1e-2);
    gradcheck(
        |x| x.transpose3_12().bmm3(x).sum_all(),
        wave(12, 0.2),
        &[2, 2, 3],
        1e-2,
    );
    gradcheck(
        |x| x.narrow_channels(1, 2).mul(&x.narrow_channels(0, 2)).sum_all(),
        wave(36, 0.3),
        &[1, 4, 3, 3],
        1e-2,
    );
    gradcheck(
        |x| {
            let top = x.narrow_channels(0, 1);
            Tensor::concat_channels(&[&top, x]).exp().sum_all()
        },
        wave(16, 0.4),
        &[2, 2, 2, 2],
        1e-2,
    );
}

#[test]
fn concat_narrow_roundtrip() {
    let x = Tensor::from_vec(wave(48, 0.0), &[2, 6, 2, 2]);
    let a = x.narrow_channels(0, 2);
    let b = x.narrow_channels(2, 3);
    let c = x.narrow_channels(5, 1);
    let y = Tensor::concat_channels(&[&a, &b, &c]);
    assert_eq!(x.to_vec(), y.to_vec());
}

#[test]
fn softmax_rows_is_stable_and_normalized() {
    let x = Tensor::from_vec(vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0], &[2, 3]);
    let s = x.softmax_rows();
    for row in 0..2 {
        let sum: f32 = s.data()[row * 3..(row + 1) * 3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-5, "row {row} sums to {sum}");
    }
    assert!(s.data().iter().all(|v| v.is_finite()));
    // Reference values for the second row.
    let e: Vec<f64> = [-5.0f64, 0.0, 5.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    for j in 0..3 {
        assert!((s.data()[3 + j] as f64 - e[j] / z).abs() < 1e-6);
    }
    gradcheck(
        |x| x.softmax_rows().mul(&Tensor::from_vec(wave(6, 1.0), &[2, 3])).sum_all(),
        wave(6, 2.0),
        &[2, 3],
        1e-2,
    );
}

#[test]
fn group_norm_statistics_and_grads() {
    let (n, c, h, w, groups) = (2, 6, 3, 3, 3);
    let x = Tensor::from_vec(wave(n * c * h * w, 0.0), &[n, c, h, w]);
    let weight = Tensor::from_vec(vec![1.0; c], &[c]);
    let bias = Tensor::from_vec(vec![0.0; c], &[c]);
    let y = nn::group_norm(&x, groups, &weight, &bias, 1e-5);
    let m = (c / groups) * h * w;
    for row in 0..n * groups {
        let vals = &y.data()[row * m..(row + 1) * m];
        let mean: f64 = vals.iter().map(|v| *v as f64).sum::<f64>() / m as f64;
        let var: f64 = vals.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
        assert!(mean.abs() < 1e-5, "group {row} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "group {row} var {var}");
    }
    let wt = Tensor::from_vec(wave(c, 1.0), &[c]);
    let bs = Tensor::from_vec(wave(c, 2.0), &[c]);
    gradcheck(
        |x| nn::group_norm(x, groups, &wt, &bs, 1e-5).mul(&x).sum_all(),
        wave(n * c * h * w, 3.0),
        &[n, c, h, w],
        1e-2,
    );
    let xf = Tensor::from_vec(wave(n * c * h * w, 4.0), &[n, c, h, w]);
    gradcheck(
        |w| nn::group_norm(&xf, groups, w, &bs, 1e-5).exp().mean_all(),
        wave(c, 5.0),
        &[c],
        1e-2,
    );
}

#[test]
fn linear_grads() {
    let w = Tensor::from_vec(wave(12, 0.0), &[3, 4]);
    let b = Tensor::from_vec(wave(3, 1.0), &[3]);
    gradcheck(|x| nn::linear(x, &w, &b).exp().sum_all(), wave(8, 2.0), &[2, 4], 1e-2);
    let x = Tensor::from_vec(wave(8, 3.0), &[2, 4]);
    gradcheck(|w| nn::linear(&x, w, &b).exp().sum_all(), wave(12, 4.0), &[3, 4], 1e-2);
    gradcheck(|b| nn::linear(&x, &w, b).exp().sum_all(), wave(3, 5.0), &[3], 1e-2);
}

#[test]
fn conv2d_forward_golden() {
    // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding; plain correlation.
    let x = Tensor::from_vec((1..=9).map(|v| v as f32).collect(), &[1, 1, 3, 3]);
    let w = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let y = x.conv2d(&w, None, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    // out[0,0] = 1*1 + 2*2 + 4*3 + 5*4 = 37, etc.
    assert_eq!(y.to_vec(), vec![37.0, 47.0, 67.0, 77.0]);
}

#[test]
fn conv2d_padding_and_stride_geometry() {
    let x = Tensor::from_vec(wave(2 * 3 * 8 * 8, 0.0), &[2, 3, 8, 8]);
    let w = Tensor::from_vec(wave(5 * 3 * 3 * 3, 1.0), &[5, 3, 3, 3]);
    assert_eq!(x.conv2d(&w, None, 1, 1).shape(), &[2, 5, 8, 8]);
    assert_eq!(x.conv2d(&w, None, 2, 1).shape(), &[2, 5, 4, 4]);
}

#[test]
fn conv_triad_adjoint_identities() {
    // <conv(x; w), y> == <x, conv_T(y; w)> == <w, wgrad(x, y)> for stride 1 and 2.
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        let (n, ci, h, w_) = (2, 3, 6, 6);
        let co = 4;
        let x = Tensor::from_vec(wave(n * ci * h * w_, 0.3), &[n, ci, h, w_]);
        let w = Tensor::from_vec(wave(co * ci * 9, 0.7), &[co, ci, 3, 3]);
        let y_shape = x.conv2d(&w, None, stride, pad).shape().to_vec();
        let y = Tensor::from_vec(wave(y_shape.iter().product(), 1.3), &y_shape);

        let fwd = x.conv2d(&w, None, stride, pad);
        let adj_x = y.conv_transpose2d(&w, stride, pad, (h, w_));
        let adj_w = Tensor::conv2d_wgrad(&x, &y, stride, pad, (3, 3));

        let lhs = dot(fwd.data(), y.data());
        let via_x = dot(x.data(), adj_x.data());
        let via_w = dot(w.data(), adj_w.data());
        assert!((lhs - via_x).abs() < 1e-3 * lhs.abs().max(1.0), "stride {stride}: {lhs} vs {via_x}");
        assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0), "stride {stride}: {lhs} vs {via_w}");
    }
}

#[test]
fn conv2d_grads_all_inputs() {
    let (n, ci, h, w_) = (1, 2, 5, 5);
    let co = 3;
    let wt = Tensor::from_vec(wave(co * ci * 9, 0.0), &[co, ci, 3, 3]);
    let bs = Tensor::from_vec(wave(co, 1.0), &[co]);
    let xf = Tensor::from_vec(wave(n * ci * h * w_, 2.0), &[n, ci, h, w_]);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        gradcheck(
            |x| x.conv2d(&wt, Some(&bs), stride, pad).mul(&x.conv2d(&wt, Some(&bs), stride, pad)).sum_all(),
            wave(n * ci * h * w_, 3.0),
            &[n, ci, h, w_],
            1e-2,
        );
        gradcheck(
            |w| xf.conv2d(w, Some(&bs), stride, pad).mul(&xf.conv2d(w, Some(&bs), stride, pad)).sum_all(),
            wave(co * ci * 9, 4.0),
            &[co, ci, 3, 3],
            1e-2,
        );
        gradcheck(
            |b| xf.conv2d(&wt, Some(b), stride, pad).exp().mean_all(),
            wave(co, 5.0),
            &[co],
            1e-2,
        );
    }
}

#[test]
fn conv_transpose_and_wgrad_grads() {
    let (n, co, oh, ow) = (1, 3, 3, 3);
    let (ci, kh, kw) = (2, 3, 3);
    let (stride, pad) = (2, 1);
    let (h, w_) = (5, 5);
    let wt = Tensor::from_vec(wave(co * ci * kh * kw, 0.0), &[co, ci, kh, kw]);
    let gf = Tensor::from_vec(wave(n * co * oh * ow, 1.0), &[n, co, oh, ow]);
    gradcheck(
        |g| g.conv_transpose2d(&wt, stride, pad, (h, w_)).mul(&g.conv_transpose2d(&wt, stride, pad, (h, w_))).sum_all(),
        wave(n * co * oh * ow, 2.0),
        &[n, co, oh, ow],
        1e-2,
    );
    gradcheck(
        |w| gf.conv_transpose2d(w, stride, pad, (h, w_)).mul(&gf.conv_transpose2d(w, stride, pad, (h, w_))).sum_all(),
        wave(co * ci * kh * kw, 3.0),
        &[co, ci, kh, kw],
        1e-2,
    );
    let xf = Tensor::from_vec(wave(n * ci * h * w_, 4.0), &[n, ci, h, w_]);
    gradcheck(
        |g| Tensor::conv2d_wgrad(&xf, g, stride, pad, (kh, kw)).mul(&Tensor::conv2d_wgrad(&xf, g, stride, pad, (kh, kw))).sum_all(),
        wave(n * co * oh * ow, 5.0),
        &[n, co, oh, ow],
        1e-2,
    );
    gradcheck(
        |x| Tensor::conv2d_wgrad(x, &gf, stride, pad, (kh, kw)).mul(&Tensor::conv2d_wgrad(x, &gf, stride, pad, (kh, kw))).sum_all(),
        wave(n * ci * h * w_, 6.0),
        &[n, ci, h, w_],
        1e-2,
    );
}

#[test]
fn dwt_idwt_roundtrip_and_adjoint() {
    let x = Tensor::from_vec(wave(2 * 3 * 8 * 8, 0.0), &[2, 3, 8, 8]);
    let y = x.dwt_nchw();
    assert_eq!(y.shape(), &[2, 12, 4, 4]);
    let back = y.idwt_nchw();
    for (a, b) in x.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    // Orthogonality: energy preserved and <dwt(x), z> == <x, idwt(z)>.
    let ex = dot(x.data(), x.data());
    let ey = dot(y.data(), y.data());
    assert!((ex - ey).abs() < 1e-3 * ex.max(1.0));
    let z = Tensor::from_vec(wave(2 * 12 * 4 * 4, 1.0), &[2, 12, 4, 4]);
    let lhs = dot(y.data(), z.data());
    let rhs = dot(x.data(), z.idwt_nchw().data());
    assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    gradcheck(
        |x| x.dwt_nchw().mul(&x.dwt_nchw()).sum_all(),
        wave(1 * 4 * 4 * 4, 2.0),
        &[1, 4, 4, 4],
        1e-2,
    );
    gradcheck(
        |z| z.idwt_nchw().mul(&z.idwt_nchw()).sum_all(),
        wave(1 * 4 * 2 * 2, 3.0),
        &[1, 4, 2, 2],
        1e-2,
    );
}

#[test]
fn dwt_block_golden() {
    // Single 2x2 block [[1,2],[3,4]]: LL=5, LH=2, HL=1, HH=0.
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let y = x.dwt_nchw();
    assert_eq!(y.to_vec(), vec![5.0, 2.0, 1.0, 0.0]);
}

#[test]
fn double_backward_quadratic() {
    // f(x) = sum(x^2); s = |grad f|^2 = 4 sum(x^2); ds/dx = 8x exactly.
    let x = Tensor::var(vec![0.5, -1.25, 2.0], &[3]);
    let f = x.mul(&x).sum_all();
    let grads = backward(&f, true);
    let gx = grads.get(&x).unwrap();
    let s = gx.mul(gx).sum_all();
    let grads2 = backward(&s, false);
    let gxx = grads2.get(&x).unwrap().to_vec();
    for (g, v) in gxx.iter().zip(x.data()) {
        assert!((g - 8.0 * v).abs() < 1e-4, "{g} vs {}", 8.0 * v);
    }
}

#[test]
fn double_backward_linear_head_is_exact() {
    // D(x) = <w, x>; penalty (gamma/2)|grad_x D|^2 = (gamma/2)|w|^2;
    // its gradient in w is exactly gamma * w.
    let gamma = 0.6f32;
    let w = Tensor::var(wave(8, 0.0), &[1, 8]);
    let x = Tensor::var(wave(8, 1.0), &[1, 8]);
    let d = x.mul(&w).sum_all();
    let grads = backward(&d, true);
    let gx = grads.get(&x).unwrap();
    let penalty = gx.mul(gx).sum_all().mul_scalar(gamma / 2.0);
    let grads2 = backward(&penalty, false);
    let gw = grads2.get(&w).unwrap().to_vec();
    for (g, wv) in gw.iter().zip(w.data()) {
        assert!((g - gamma * wv).abs() < 1e-6, "{g} vs {}", gamma * wv);
    }
}

#[test]
fn double_backward_through_conv_matches_fd() {
    // r1(w) = |grad_x sum(conv(x; w))|^2, differentiated in w by the engine,
    // compared against central differences of r1 evaluated from scratch.
    let (n, ci, h, ww) = (1, 2, 4, 4);
    let co = 2;
    let x0 = wave(n * ci * h * ww, 0.0);
    let r1_of = |wt: &Tensor| -> Tensor {
        let x = Tensor::var(x0.clone(), &[n, ci, h, ww]);
        let out = x.conv2d(wt, None, 1, 1).sigmoid().sum_all();
        let grads = backward(&out, true);
        let gx = grads.get(&x).unwrap();
        gx.mul(gx).sum_all()
    };
    let w = Tensor::var(wave(co * ci * 9, 1.0), &[co, ci, 3, 3]);
    let r1 = r1_of(&w);
    let grads = backward(&r1, false);
    let analytic = grads.get(&w).unwrap().to_vec();
    let numeric = numeric_grad(&|wt| r1_of(wt), &w, 5e-3);
    for (i, (a, nmr)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = 1.0f32.max(a.abs()).max(nmr.abs());
        assert!((a - nmr).abs() / denom < 2e-2, "w[{i}]: engine {a} vs fd {nmr}");
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let x = Tensor::var(wave(64, 0.0), &[1, 4, 4, 4]);
        let w = Tensor::var(wave(4 * 4 * 9, 1.0), &[4, 4, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).silu().sum_all();
        let grads = backward(&y, false);
        (grads.get(&x).unwrap().to_vec(), grads.get(&w).unwrap().to_vec())
    };
    let (gx1, gw1) = run();
    let (gx2, gw2) = run();
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn no_grad_suppresses_graph() {
    let x = Tensor::var(vec![1.0, 2.0], &[2]);
    let y = no_grad(|| x.mul(&x).sum_all());
    assert!(!y.requires_grad());
    let grads = backward(&y, false);
    assert!(grads.get(&x).is_none());
}

#[test]
fn detach_cuts_graph() {
    let x = Tensor::var(vec![3.0], &[1]);
    let y = x.mul(&x);
    let z = y.detach().mul(&x).sum_all();
    let grads = backward(&z, false);
    // z = detach(x^2) * x, so dz/dx = 9 (not 27).
    assert!((grads.get(&x).unwrap().item() - 9.0).abs() < 1e-5);
}
