//! Differentiable primitives.
//!
//! Every backward closure builds its result out of the public ops in this
//! module, so gradients recorded with `create_graph` are themselves exact
//! graph nodes. Piecewise-constant derivative factors (abs, leaky_relu) are
//! emitted as plain constants, which is the correct second derivative almost
//! everywhere.
//!
//! Reductions accumulate in f64 and round once at the end: cheaper than
//! pairwise summation and bitwise deterministic, since all loops are
//! sequential.

use super::Tensor;

pub(crate) fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn unary(&self, data: Vec<f32>, backward: impl Fn(&Tensor, &[Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static) -> Tensor {
        Tensor::from_op(data, self.shape(), &[self], backward)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        self.unary(data, |g, _, _| vec![Some(g.neg())])
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.exp()).collect();
        self.unary(data, |g, _, out| vec![Some(g.mul(out))])
    }

    pub fn recip(&self) -> Tensor {
        let data = self.data().iter().map(|v| 1.0 / v).collect();
        self.unary(data, |g, _, out| vec![Some(g.mul(&out.mul(out)).neg())])
    }

    pub fn rsqrt(&self) -> Tensor {
        let data = self.data().iter().map(|v| 1.0 / v.sqrt()).collect();
        self.unary(data, |g, _, out| {
            vec![Some(g.mul(&out.mul(out).mul(out)).mul_scalar(-0.5))]
        })
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        self.unary(data, |g, inputs, _| {
            let x = &inputs[0];
            let sign: Vec<f32> = x.data().iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            vec![Some(g.mul(&Tensor::from_vec(sign, x.shape())))]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|v| stable_sigmoid(*v)).collect();
        self.unary(data, |g, _, out| {
            let one_minus = out.neg().add_scalar(1.0);
            vec![Some(g.mul(out).mul(&one_minus))]
        })
    }

    /// log(1 + exp(x)), evaluated in overflow-safe form.
    pub fn softplus(&self) -> Tensor {
        let data = self.data().iter().map(|v| stable_softplus(*v)).collect();
        self.unary(data, |g, inputs, _| vec![Some(g.mul(&inputs[0].sigmoid()))])
    }

    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid())
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|v| if *v >= 0.0 { *v } else { slope * v })
            .collect();
        self.unary(data, move |g, inputs, _| {
            let x = &inputs[0];
            let mask: Vec<f32> = x.data().iter().map(|v| if *v >= 0.0 { 1.0 } else { slope }).collect();
            vec![Some(g.mul(&Tensor::from_vec(mask, x.shape())))]
        })
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        self.unary(data, |g, _, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        self.unary(data, move |g, _, _| vec![Some(g.mul_scalar(s))])
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(data, self.shape(), &[self, other], |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(data, self.shape(), &[self, other], |g, _, _| {
            vec![Some(g.clone()), Some(g.neg())]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op(data, self.shape(), &[self, other], |g, inputs, _| {
            vec![Some(g.mul(&inputs[1])), Some(g.mul(&inputs[0]))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(self.numel(), numel, "reshape {:?} -> {:?}", self.shape(), shape);
        let orig = self.shape().to_vec();
        Tensor::from_op(self.to_vec(), shape, &[self], move |g, _, _| {
            vec![Some(g.reshape(&orig))]
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|v| *v as f64).sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(vec![total as f32], &[1], &[self], move |g, _, _| {
            vec![Some(g.bcast_to(&shape))]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Broadcast of a one-element tensor to an arbitrary shape.
    pub fn bcast_to(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), 1, "bcast_to requires a scalar");
        let v = self.data()[0];
        let numel: usize = shape.iter().product();
        Tensor::from_op(vec![v; numel], shape, &[self], |g, _, _| vec![Some(g.sum_all())])
    }

    /// Row sums of a matrix: [r, c] -> [r, 1].
    pub fn row_sum(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "row_sum expects a matrix");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![0.0f32; r];
        for i in 0..r {
            let mut acc = 0.0f64;
            for j in 0..c {
                acc += x[i * c + j] as f64;
            }
            data[i] = acc as f32;
        }
        Tensor::from_op(data, &[r, 1], &[self], move |g, _, _| vec![Some(g.row_broadcast(c))])
    }

    /// Repeats a column vector across `c` columns: [r, 1] -> [r, c].
    pub fn row_broadcast(&self, c: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "row_broadcast expects a matrix");
        assert_eq!(self.shape()[1], 1, "row_broadcast expects shape [r, 1]");
        let r = self.shape()[0];
        let x = self.data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            data[i * c..(i + 1) * c].fill(x[i]);
        }
        Tensor::from_op(data, &[r, c], &[self], |g, _, _| vec![Some(g.row_sum())])
    }

    /// Row maxima as a constant (no gradient): used for softmax stabilization,
    /// where subtracting the detached max leaves the function unchanged.
    pub fn row_max_detached(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "row_max expects a matrix");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![f32::NEG_INFINITY; r];
        for i in 0..r {
            for j in 0..c {
                data[i] = data[i].max(x[i * c + j]);
            }
        }
        Tensor::from_vec(data, &[r, 1])
    }

    /// Numerically stable softmax over the last axis of a matrix.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.shape()[1];
        let mx = self.row_max_detached();
        let e = self.sub(&mx.row_broadcast(c)).exp();
        let denom = e.row_sum().recip();
        e.mul(&denom.row_broadcast(c))
    }

    /// Matrix product: [m, k] x [k, n] -> [m, n].
    pub fn matmul2(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul2 lhs must be a matrix");
        assert_eq!(other.shape().len(), 2, "matmul2 rhs must be a matrix");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul2: inner dims {} vs {}", k, k2);
        let mut data = vec![0.0f32; m * n];
        matmul_kernel(self.data(), other.data(), &mut data, m, k, n);
        Tensor::from_op(data, &[m, n], &[self, other], |g, inputs, _| {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                Some(g.matmul2(&b.transpose2())),
                Some(a.transpose2().matmul2(g)),
            ]
        })
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose2 expects a matrix");
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        Tensor::from_op(data, &[c, r], &[self], |g, _, _| vec![Some(g.transpose2())])
    }

    /// Batched matrix product: [b, m, k] x [b, k, n] -> [b, m, n].
    pub fn bmm3(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 3, "bmm3 lhs must be rank 3");
        assert_eq!(other.shape().len(), 3, "bmm3 rhs must be rank 3");
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        assert_eq!(b, b2, "bmm3: batch dims {} vs {}", b, b2);
        assert_eq!(k, k2, "bmm3: inner dims {} vs {}", k, k2);
        let mut data = vec![0.0f32; b * m * n];
        for i in 0..b {
            matmul_kernel(
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor::from_op(data, &[b, m, n], &[self, other], |g, inputs, _| {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                Some(g.bmm3(&b.transpose3_12())),
                Some(a.transpose3_12().bmm3(g)),
            ]
        })
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose3_12(&self) -> Tensor {
        assert_eq!(self.shape().len(), 3, "transpose3_12 expects rank 3");
        let (b, r, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let x = self.data();
        let mut data = vec![0.0f32; b * r * c];
        for i in 0..b {
            let src = &x[i * r * c..];
            let dst = &mut data[i * r * c..(i + 1) * r * c];
            for p in 0..r {
                for q in 0..c {
                    dst[q * r + p] = src[p * c + q];
                }
            }
        }
        Tensor::from_op(data, &[b, c, r], &[self], |g, _, _| vec![Some(g.transpose3_12())])
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_channels: empty input");
        let first = parts[0].shape();
        assert_eq!(first.len(), 4, "concat_channels expects NCHW");
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = Vec::with_capacity(parts.len());
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), 4, "concat_channels expects NCHW");
            assert_eq!((s[0], s[2], s[3]), (n, h, w), "concat_channels: mismatched dims");
            channels.push(s[1]);
            c_total += s[1];
        }
        let hw = h * w;
        let mut data = vec![0.0f32; n * c_total * hw];
        let mut offset = 0;
        for (p, &c) in parts.iter().zip(&channels) {
            let src = p.data();
            for i in 0..n {
                let dst_base = (i * c_total + offset) * hw;
                let src_base = i * c * hw;
                data[dst_base..dst_base + c * hw].copy_from_slice(&src[src_base..src_base + c * hw]);
            }
            offset += c;
        }
        Tensor::from_op(data, &[n, c_total, h, w], parts, move |g, _, _| {
            let mut grads = Vec::with_capacity(channels.len());
            let mut start = 0;
            for &c in &channels {
                grads.push(Some(g.narrow_channels(start, c)));
                start += c;
            }
            grads
        })
    }

    /// Channel slice [start, start+len) of an NCHW tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "narrow_channels expects NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(start + len <= c, "narrow_channels: [{start}, {}) out of {c}", start + len);
        let hw = h * w;
        let x = self.data();
        let mut data = vec![0.0f32; n * len * hw];
        for i in 0..n {
            let src_base = (i * c + start) * hw;
            data[i * len * hw..(i + 1) * len * hw]
                .copy_from_slice(&x[src_base..src_base + len * hw]);
        }
        Tensor::from_op(data, &[n, len, h, w], &[self], move |g, _, _| {
            let mut parts: Vec<Tensor> = Vec::new();
            if start > 0 {
                parts.push(Tensor::zeros(&[n, start, h, w]));
            }
            parts.push(g.clone());
            if start + len < c {
                parts.push(Tensor::zeros(&[n, c - start - len, h, w]));
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            vec![Some(Tensor::concat_channels(&refs))]
        })
    }

    /// Broadcast of a per-channel vector [c] over NCHW.
    pub fn chan_broadcast(&self, n: usize, h: usize, w: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "chan_broadcast expects [c]");
        let c = self.shape()[0];
        let x = self.data();
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                data[(i * c + ch) * hw..(i * c + ch + 1) * hw].fill(x[ch]);
            }
        }
        Tensor::from_op(data, &[n, c, h, w], &[self], |g, _, _| vec![Some(g.sum_nhw())])
    }

    /// Reduction of NCHW over batch and spatial axes: -> [c].
    pub fn sum_nhw(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "sum_nhw expects NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let x = self.data();
        let mut acc = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let mut s = 0.0f64;
                for v in &x[base..base + hw] {
                    s += *v as f64;
                }
                acc[ch] += s;
            }
        }
        let data = acc.iter().map(|v| *v as f32).collect();
        Tensor::from_op(data, &[c], &[self], move |g, _, _| {
            vec![Some(g.chan_broadcast(n, h, w))]
        })
    }

    /// Reduction of NCHW over spatial axes only: -> [n, c].
    pub fn sum_hw(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "sum_hw expects NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let x = self.data();
        let mut data = vec![0.0f32; n * c];
        for i in 0..n * c {
            let mut acc = 0.0f64;
            for v in &x[i * hw..(i + 1) * hw] {
                acc += *v as f64;
            }
            data[i] = acc as f32;
        }
        Tensor::from_op(data, &[n, c], &[self], move |g, _, _| {
            vec![Some(g.bcast_nc_hw(h, w))]
        })
    }

    /// Broadcast of a per-sample channel matrix [n, c] over spatial axes.
    pub fn bcast_nc_hw(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 2, "bcast_nc_hw expects [n, c]");
        let (n, c) = (s[0], s[1]);
        let hw = h * w;
        let x = self.data();
        let mut data = vec![0.0f32; n * c * hw];
        for i in 0..n * c {
            data[i * hw..(i + 1) * hw].fill(x[i]);
        }
        Tensor::from_op(data, &[n, c, h, w], &[self], |g, _, _| vec![Some(g.sum_hw())])
    }
}

/// C[m,n] += A[m,k] * B[k,n], sequential i-k-j order for cache locality.
pub(crate) fn matmul_kernel(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
