//! im2col convolution kernels.

use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], weight: &[usize], stride: usize) -> Option<Self> {
        if input.len() != 4 || weight.len() != 4 || !(1..=2).contains(&stride) {
            return None;
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c_in || kh != kw || kh % 2 == 0 || h == 0 || w == 0 {
            return None;
        }
        let pad = kh / 2;
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Some(ConvGeometry { n, c_in, h, w, c_out, kernel: kh, stride, pad, h_out, w_out })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> usize {
        self.n * self.c_out * self.out_plane() * self.patch()
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-sample column matrices kept for the backward pass.
pub(super) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> (Vec<T>, Vec<T>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.n * patch * plane] };
    for s in 0..g.n {
        let o = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                o[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let xs = &x[s * in_len..(s + 1) * in_len];
        if g.is_pointwise() {
            gemm(MatRef::new(w, g.c_out, patch), MatRef::new(xs, patch, plane), beta, o);
        } else {
            let c = &mut cols[s * patch * plane..(s + 1) * patch * plane];
            im2col(g, xs, c);
            gemm(MatRef::new(w, g.c_out, patch), MatRef::new(c, patch, plane), beta, o);
        }
    }
    (out, cols)
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(super) fn backward<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    x: &[T],
    w: &[T],
    cols: &[T],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut gx = want_x.then(|| vec![T::zero(); g.n * in_len]);
    let mut gw = want_w.then(|| vec![T::zero(); g.c_out * patch]);
    let mut gb = want_b.then(|| vec![T::zero(); g.c_out]);
    let mut dcols = if want_x && !g.is_pointwise() { vec![T::zero(); patch * plane] } else { Vec::new() };
    for s in 0..g.n {
        let go = &grad_out[s * out_len..(s + 1) * out_len];
        let c = if g.is_pointwise() { &x[s * in_len..(s + 1) * in_len] } else { &cols[s * patch * plane..(s + 1) * patch * plane] };
        if let Some(gw) = gw.as_mut() {
            gemm(MatRef::new(go, g.c_out, plane), MatRef::new(c, patch, plane).t(), T::one(), gw);
        }
        if let Some(gb) = gb.as_mut() {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += go[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(MatRef::new(w, g.c_out, patch).t(), MatRef::new(go, g.c_out, plane), T::zero(), dst);
            } else {
                gemm(MatRef::new(w, g.c_out, patch).t(), MatRef::new(go, g.c_out, plane), T::zero(), &mut dcols);
                col2im(g, &dcols, dst);
            }
        }
    }
    (gx, gw, gb)
}
