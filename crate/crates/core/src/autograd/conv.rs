//! Grouped 2-D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: (1, 1), padding: (0, 0), groups: 1 }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams { stride: (stride, stride), padding: (padding, padding), groups }
    }
}

/// Resolved extents of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub p: Conv2dParams,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn resolve(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects input [n,c,h,w] and weight [o,c/g,kh,kw], got {input:?} and {weight:?}"
            )));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, cg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        let g = p.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 {
            return Err(Error::config(format!(
                "conv2d groups={g} must divide in-channels {c_in} and out-channels {c_out}"
            )));
        }
        if p.stride.0 == 0 || p.stride.1 == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if cg != c_in / g {
            return Err(Error::dim(format!(
                "weight {weight:?} expects {} in-channels per group, input {input:?} has {}",
                cg,
                c_in / g
            )));
        }
        let (ph, pw) = (h + 2 * p.padding.0, w + 2 * p.padding.1);
        if kh > ph || kw > pw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            p,
            oh: (ph - kh) / p.stride.0 + 1,
            ow: (pw - kw) / p.stride.1 + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.p.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.p.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input slice already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == (1, 1) && self.p.padding == (0, 0)
    }

    fn im2col<F: Element>(&self, input: &[F], n: usize, g: usize, cols: &mut [F]) {
        let (sh, sw) = self.p.stride;
        let (ph, pw) = self.p.padding;
        let plane = self.h * self.w;
        let p = self.pixels();
        for c in 0..self.cin_g() {
            let src = &input[(n * self.c_in + g * self.cin_g() + c) * plane..][..plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                src[iy as usize * self.w + ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<F: Element>(&self, cols: &[F], n: usize, g: usize, grad_in: &mut [F]) {
        let (sh, sw) = self.p.stride;
        let (ph, pw) = self.p.padding;
        let plane = self.h * self.w;
        let p = self.pixels();
        for c in 0..self.cin_g() {
            let dst = &mut grad_in[(n * self.c_in + g * self.cin_g() + c) * plane..][..plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                let d = &mut dst[iy as usize * self.w + ix as usize];
                                *d = *d + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Element>(&self, input: &[F], weight: &[F]) -> Vec<F> {
        let (k, p) = (self.col_rows(), self.pixels());
        let mut out = vec![F::zero(); self.n * self.c_out * p];
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
        for n in 0..self.n {
            for g in 0..self.p.groups {
                let w_g = &weight[g * self.cout_g() * k..][..self.cout_g() * k];
                let o = &mut out[(n * self.c_out + g * self.cout_g()) * p..][..self.cout_g() * p];
                if self.is_pointwise() {
                    let src = &input[(n * self.c_in + g * self.cin_g()) * p..][..k * p];
                    gemm(self.cout_g(), k, p, w_g, false, src, false, o, false);
                } else {
                    self.im2col(input, n, g, &mut cols);
                    gemm(self.cout_g(), k, p, w_g, false, &cols, false, o, false);
                }
            }
        }
        out
    }

    /// Accumulates input and/or weight gradients for upstream gradient `gout`.
    pub fn backward<F: Element>(
        &self,
        input: &[F],
        weight: &[F],
        gout: &[F],
        mut grad_in: Option<&mut [F]>,
        mut grad_w: Option<&mut [F]>,
    ) {
        let (k, p) = (self.col_rows(), self.pixels());
        let mut cols = vec![F::zero(); k * p];
        let mut dcols = vec![F::zero(); k * p];
        for n in 0..self.n {
            for g in 0..self.p.groups {
                let w_off = g * self.cout_g() * k;
                let go = &gout[(n * self.c_out + g * self.cout_g()) * p..][..self.cout_g() * p];
                if let Some(gw) = grad_w.as_deref_mut() {
                    let gw_g = &mut gw[w_off..w_off + self.cout_g() * k];
                    if self.is_pointwise() {
                        let src = &input[(n * self.c_in + g * self.cin_g()) * p..][..k * p];
                        gemm(self.cout_g(), p, k, go, false, src, true, gw_g, true);
                    } else {
                        self.im2col(input, n, g, &mut cols);
                        gemm(self.cout_g(), p, k, go, false, &cols, true, gw_g, true);
                    }
                }
                if let Some(gi) = grad_in.as_deref_mut() {
                    let w_g = &weight[w_off..w_off + self.cout_g() * k];
                    if self.is_pointwise() {
                        let dst = &mut gi[(n * self.c_in + g * self.cin_g()) * p..][..k * p];
                        gemm(k, self.cout_g(), p, w_g, true, go, false, dst, true);
                    } else {
                        gemm(k, self.cout_g(), p, w_g, true, go, false, &mut dcols, false);
                        self.col2im_add(&dcols, n, g, gi);
                    }
                }
            }
        }
    }
}
