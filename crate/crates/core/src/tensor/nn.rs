//! Composite layers built purely from differentiable primitives, so they
//! inherit exact higher-order gradients.

use super::Tensor;

/// x[n, in] * w[out, in]^T + b[out].
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let out = weight.shape()[0];
    assert_eq!(x.shape()[1], weight.shape()[1], "linear: feature dims disagree");
    assert_eq!(bias.shape(), &[out], "linear: bias must be [out]");
    let y = x.matmul2(&weight.transpose2());
    let ones = Tensor::full(&[n, 1], 1.0);
    y.add(&ones.matmul2(&bias.reshape(&[1, out])))
}

/// GroupNorm over NCHW with affine parameters. Statistics are taken per
/// (sample, group) across the group's channels and all spatial positions.
pub fn group_norm(x: &Tensor, groups: usize, weight: &Tensor, bias: &Tensor, eps: f32) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "group_norm expects NCHW");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible by {groups} groups");
    assert_eq!(weight.shape(), &[c], "group_norm: weight must be [c]");
    assert_eq!(bias.shape(), &[c], "group_norm: bias must be [c]");
    let m = (c / groups) * h * w;
    let rows = x.reshape(&[n * groups, m]);
    let mean = rows.row_sum().mul_scalar(1.0 / m as f32);
    let centered = rows.sub(&mean.row_broadcast(m));
    let var = centered.mul(&centered).row_sum().mul_scalar(1.0 / m as f32);
    let inv_std = var.add_scalar(eps).rsqrt();
    let normed = centered.mul(&inv_std.row_broadcast(m)).reshape(&[n, c, h, w]);
    normed
        .mul(&weight.chan_broadcast(n, h, w))
        .add(&bias.chan_broadcast(n, h, w))
}
