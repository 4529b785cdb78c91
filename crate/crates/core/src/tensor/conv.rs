//! 2D convolution and its two adjoints.
//!
//! `conv2d`, `conv_transpose2d`, and `conv2d_wgrad` form a closed triad: the
//! gradient of each is expressed with the other two, so convolutions stay
//! differentiable to arbitrary order. All three reduce to im2col plus a
//! sequential matmul.

use super::ops::matmul_kernel;
use super::Tensor;

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {}", size + 2 * pad);
    (size + 2 * pad - k) / stride + 1
}

/// cols[(c*kh+ky)*kw+kx, oy*ow+ox] = x[c, oy*stride+ky-pad, ox*stride+kx-pad]
/// with zeros outside the input.
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(cols.len(), ci * kh * kw * oh * ow);
    cols.fill(0.0);
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = (c * h + y as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        cols[dst + ox] = x[src + xx as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`].
fn col2im(
    cols: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f32],
) {
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = (c * h + y as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        x[dst + xx as usize] += cols[src + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_kernel(
    x: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, usize, usize) {
    let oh = out_dim(h, kh, stride, pad);
    let ow = out_dim(w, kw, stride, pad);
    let cikk = ci * kh * kw;
    let ohow = oh * ow;
    let mut cols = vec![0.0f32; cikk * ohow];
    let mut out = vec![0.0f32; n * co * ohow];
    for i in 0..n {
        im2col(&x[i * ci * h * w..], ci, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
        matmul_kernel(weight, &cols, &mut out[i * co * ohow..(i + 1) * co * ohow], co, cikk, ohow);
    }
    if let Some(b) = bias {
        for i in 0..n {
            for c in 0..co {
                let base = (i * co + c) * ohow;
                let bv = b[c];
                for v in &mut out[base..base + ohow] {
                    *v += bv;
                }
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn conv_transpose2d_kernel(
    g: &[f32],
    n: usize,
    co: usize,
    oh: usize,
    ow: usize,
    weight: &[f32],
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let cikk = ci * kh * kw;
    let ohow = oh * ow;
    // weight laid out [co, ci*kh*kw]; transpose once to [ci*kh*kw, co].
    let mut wt = vec![0.0f32; cikk * co];
    for c in 0..co {
        for r in 0..cikk {
            wt[r * co + c] = weight[c * cikk + r];
        }
    }
    let mut cols = vec![0.0f32; cikk * ohow];
    let mut out = vec![0.0f32; n * ci * h * w];
    for i in 0..n {
        cols.fill(0.0);
        matmul_kernel(&wt, &g[i * co * ohow..(i + 1) * co * ohow], &mut cols, cikk, co, ohow);
        col2im(&cols, ci, h, w, kh, kw, stride, pad, oh, ow, &mut out[i * ci * h * w..(i + 1) * ci * h * w]);
    }
    out
}

pub(crate) fn conv2d_wgrad_kernel(
    x: &[f32],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    g: &[f32],
    co: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Vec<f32> {
    let cikk = ci * kh * kw;
    let ohow = oh * ow;
    let mut cols = vec![0.0f32; cikk * ohow];
    let mut colst = vec![0.0f32; ohow * cikk];
    let mut dw = vec![0.0f32; co * cikk];
    for i in 0..n {
        im2col(&x[i * ci * h * w..], ci, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
        for r in 0..cikk {
            for p in 0..ohow {
                colst[p * cikk + r] = cols[r * ohow + p];
            }
        }
        matmul_kernel(&g[i * co * ohow..(i + 1) * co * ohow], &colst, &mut dw, co, ohow, cikk);
    }
    dw
}

impl Tensor {
    /// 2D convolution. `self` is NCHW, `weight` is [co, ci, kh, kw], `bias`
    /// (if any) is [co]. Zero padding of `pad` on all sides.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let s = self.shape();
        let ws = weight.shape();
        assert_eq!(s.len(), 4, "conv2d input must be NCHW, got {:?}", s);
        assert_eq!(ws.len(), 4, "conv2d weight must be [co, ci, kh, kw], got {:?}", ws);
        assert_eq!(s[1], ws[1], "conv2d: input channels {} vs weight {}", s[1], ws[1]);
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[co], "conv2d bias must be [co]");
        }
        let (data, oh, ow) = conv2d_kernel(
            self.data(), n, ci, h, w,
            weight.data(), co, kh, kw,
            bias.map(|b| b.data()),
            stride, pad,
        );
        let inputs: Vec<&Tensor> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let has_bias = bias.is_some();
        Tensor::from_op(data, &[n, co, oh, ow], &inputs, move |g, inputs, _| {
            let (x, wt) = (&inputs[0], &inputs[1]);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
            let mut grads = vec![
                Some(g.conv_transpose2d(wt, stride, pad, (h, w))),
                Some(Tensor::conv2d_wgrad(x, g, stride, pad, (kh, kw))),
            ];
            if has_bias {
                grads.push(Some(g.sum_nhw()));
            }
            grads
        })
    }

    /// Adjoint of [`Tensor::conv2d`] in its input: maps [n, co, oh, ow] back
    /// to [n, ci, h, w] for the given geometry.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, pad: usize, out_hw: (usize, usize)) -> Tensor {
        let s = self.shape();
        let ws = weight.shape();
        assert_eq!(s.len(), 4, "conv_transpose2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [co, ci, kh, kw]");
        assert_eq!(s[1], ws[0], "conv_transpose2d: channels {} vs weight co {}", s[1], ws[0]);
        let (n, co, oh, ow) = (s[0], s[1], s[2], s[3]);
        let (ci, kh, kw) = (ws[1], ws[2], ws[3]);
        let (h, w) = out_hw;
        assert_eq!(out_dim(h, kh, stride, pad), oh, "conv_transpose2d: output height inconsistent");
        assert_eq!(out_dim(w, kw, stride, pad), ow, "conv_transpose2d: output width inconsistent");
        let data = conv_transpose2d_kernel(
            self.data(), n, co, oh, ow,
            weight.data(), ci, kh, kw,
            stride, pad, h, w,
        );
        Tensor::from_op(data, &[n, ci, h, w], &[self, weight], move |gg, inputs, _| {
            let (g0, wt) = (&inputs[0], &inputs[1]);
            let (kh, kw) = (wt.shape()[2], wt.shape()[3]);
            vec![
                Some(gg.conv2d(wt, None, stride, pad)),
                Some(Tensor::conv2d_wgrad(gg, g0, stride, pad, (kh, kw))),
            ]
        })
    }

    /// Adjoint of [`Tensor::conv2d`] in its weight: correlates input `x` with
    /// output-gradient `gout` to produce a [co, ci, kh, kw] tensor.
    pub fn conv2d_wgrad(x: &Tensor, gout: &Tensor, stride: usize, pad: usize, k: (usize, usize)) -> Tensor {
        let xs = x.shape();
        let gs = gout.shape();
        assert_eq!(xs.len(), 4, "conv2d_wgrad x must be NCHW");
        assert_eq!(gs.len(), 4, "conv2d_wgrad gout must be NCHW");
        assert_eq!(xs[0], gs[0], "conv2d_wgrad: batch {} vs {}", xs[0], gs[0]);
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, oh, ow) = (gs[1], gs[2], gs[3]);
        let (kh, kw) = k;
        assert_eq!(out_dim(h, kh, stride, pad), oh, "conv2d_wgrad: height geometry inconsistent");
        assert_eq!(out_dim(w, kw, stride, pad), ow, "conv2d_wgrad: width geometry inconsistent");
        let data = conv2d_wgrad_kernel(
            x.data(), n, ci, h, w,
            gout.data(), co, oh, ow,
            stride, pad, kh, kw,
        );
        Tensor::from_op(data, &[co, ci, kh, kw], &[x, gout], move |gg, inputs, _| {
            let (x, gout) = (&inputs[0], &inputs[1]);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            vec![
                Some(gout.conv_transpose2d(gg, stride, pad, (h, w))),
                Some(x.conv2d(gg, None, stride, pad)),
            ]
        })
    }
}
