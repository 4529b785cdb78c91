//! Single-level orthonormal Haar transform on channel-packed feature maps.
//!
//! Each channel of an NCHW tensor becomes four half-resolution sub-band
//! channels, grouped band-major: [LL(all c), LH(all c), HL(all c), HH(all c)].
//! The first sub-band letter is the horizontal filter, the second vertical.
//! The transform is orthogonal, so `dwt_nchw` and `idwt_nchw` are exact
//! inverses and exact adjoints of one another — each is the other's VJP.

use super::Tensor;

/// [c, h, w] -> [4c, h/2, w/2] with the orthonormal butterfly
/// (sum and differences of each 2x2 block, divided by 2).
pub(crate) fn dwt_chw(x: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) {
    debug_assert_eq!(h % 2, 0);
    debug_assert_eq!(w % 2, 0);
    let (hh, ww) = (h / 2, w / 2);
    let plane = hh * ww;
    debug_assert_eq!(out.len(), 4 * c * plane);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..hh {
            for xx in 0..ww {
                let a = src[(2 * y) * w + 2 * xx];
                let b = src[(2 * y) * w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                let i = y * ww + xx;
                out[ch * plane + i] = 0.5 * (a + b + cc + d);
                out[(c + ch) * plane + i] = 0.5 * ((cc + d) - (a + b));
                out[(2 * c + ch) * plane + i] = 0.5 * ((b - a) + (d - cc));
                out[(3 * c + ch) * plane + i] = 0.5 * ((d - cc) - (b - a));
            }
        }
    }
}

/// [4c, h, w] -> [c, 2h, 2w], exact inverse of [`dwt_chw`].
pub(crate) fn idwt_chw(x: &[f32], c4: usize, h: usize, w: usize, out: &mut [f32]) {
    debug_assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(out.len(), c * oh * ow);
    for ch in 0..c {
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                let ll = x[ch * plane + i];
                let lh = x[(c + ch) * plane + i];
                let hl = x[(2 * c + ch) * plane + i];
                let hh = x[(3 * c + ch) * plane + i];
                dst[(2 * y) * ow + 2 * xx] = 0.5 * (ll - lh - hl + hh);
                dst[(2 * y) * ow + 2 * xx + 1] = 0.5 * (ll - lh + hl - hh);
                dst[(2 * y + 1) * ow + 2 * xx] = 0.5 * (ll + lh - hl - hh);
                dst[(2 * y + 1) * ow + 2 * xx + 1] = 0.5 * (ll + lh + hl + hh);
            }
        }
    }
}

impl Tensor {
    /// Batched forward transform: [n, c, h, w] -> [n, 4c, h/2, w/2].
    pub fn dwt_nchw(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "dwt_nchw expects NCHW, got {:?}", s);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "dwt_nchw needs even spatial dims, got {h}x{w}");
        let mut data = vec![0.0f32; n * 4 * c * (h / 2) * (w / 2)];
        let chunk_in = c * h * w;
        let chunk_out = 4 * c * (h / 2) * (w / 2);
        for i in 0..n {
            dwt_chw(
                &self.data()[i * chunk_in..(i + 1) * chunk_in],
                c,
                h,
                w,
                &mut data[i * chunk_out..(i + 1) * chunk_out],
            );
        }
        Tensor::from_op(data, &[n, 4 * c, h / 2, w / 2], &[self], |g, _, _| {
            vec![Some(g.idwt_nchw())]
        })
    }

    /// Batched inverse transform: [n, 4c, h, w] -> [n, c, 2h, 2w].
    pub fn idwt_nchw(&self) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "idwt_nchw expects NCHW, got {:?}", s);
        let (n, c4, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c4 % 4, 0, "idwt_nchw needs channels divisible by 4, got {c4}");
        let c = c4 / 4;
        let mut data = vec![0.0f32; n * c * 2 * h * 2 * w];
        let chunk_in = c4 * h * w;
        let chunk_out = c * 4 * h * w;
        for i in 0..n {
            idwt_chw(
                &self.data()[i * chunk_in..(i + 1) * chunk_in],
                c4,
                h,
                w,
                &mut data[i * chunk_out..(i + 1) * chunk_out],
            );
        }
        Tensor::from_op(data, &[n, c, 2 * h, 2 * w], &[self], |g, _, _| {
            vec![Some(g.dwt_nchw())]
        })
    }
}
