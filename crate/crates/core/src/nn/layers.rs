//! Dense CHW tensors and the handful of layers the decoders need.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A single-sample feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Mismatch {
                what: "tensor data length",
                expected: c * h * w,
                found: data.len(),
            });
        }
        Ok(Self { c, h, w, data })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let p = self.plane();
        &self.data[k * p..(k + 1) * p]
    }

    pub fn same_shape(&self, o: &Tensor) -> bool {
        self.c == o.c && self.h == o.h && self.w == o.w
    }
}

/// A 3x3 convolution with padding 1 whose parameters live in a flat buffer:
/// weights `[out][in][3][3]` at `w_off`, then biases `[out]` at `b_off`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv3 {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv3 {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * 9
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.stride == 1 {
            (h, w)
        } else {
            (h.div_ceil(2), w.div_ceil(2))
        }
    }

    /// Shifted input planes, one column per (input channel, tap), as a
    /// `plane x (in_c * 9)` column-major matrix.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> DMatrix<f64> {
        let plane = oh * ow;
        let s = self.stride;
        let mut col = DMatrix::<f64>::zeros(plane, self.in_c * 9);
        col.as_mut_slice()
            .par_chunks_mut(plane * 9)
            .enumerate()
            .for_each(|(i, cols)| {
                let src = x.channel(i);
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, s, oh, x.h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, s, ow, x.w);
                        let c = &mut cols[(ky * 3 + kx) * plane..][..plane];
                        for y in y0..y1 {
                            let irow = &src[(y * s + ky - 1) * x.w..][..x.w];
                            for xx in x0..x1 {
                                c[y * ow + xx] = irow[xx * s + kx - 1];
                            }
                        }
                    }
                }
            });
        col
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im(&self, col: &DMatrix<f64>, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let plane = oh * ow;
        let s = self.stride;
        let mut gx = vec![0.0; self.in_c * h * w];
        gx.par_chunks_mut(h * w)
            .zip(col.as_slice().par_chunks(plane * 9))
            .for_each(|(dst, cols)| {
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, s, oh, h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, s, ow, w);
                        let c = &cols[(ky * 3 + kx) * plane..][..plane];
                        for y in y0..y1 {
                            let drow = &mut dst[(y * s + ky - 1) * w..][..w];
                            for xx in x0..x1 {
                                drow[xx * s + kx - 1] += c[y * ow + xx];
                            }
                        }
                    }
                }
            });
        gx
    }

    /// Weights as a `(in_c * 9) x out_c` column-major matrix; column `o` is
    /// the row-major filter bank of output channel `o`.
    fn weight_matrix(&self, params: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.in_c * 9, self.out_c, &params[self.w_off..self.w_off + self.weight_len()])
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_size(x.h, x.w);
        let plane = oh * ow;
        let col = self.im2col(x, oh, ow);
        // (plane x out_c) column-major is exactly channel-major output.
        let mut out = DMatrix::<f64>::zeros(plane, self.out_c);
        for (o, c) in out.as_mut_slice().chunks_mut(plane).enumerate() {
            c.fill(params[self.b_off + o]);
        }
        out.gemm(1.0, &col, &self.weight_matrix(params), 1.0);
        Tensor {
            c: self.out_c,
            h: oh,
            w: ow,
            data: out.as_slice().to_vec(),
        }
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// input gradient when `need_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        gy: &Tensor,
        grad_params: &mut [f64],
        need_input: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (gy.h, gy.w);
        let plane = oh * ow;
        let col = self.im2col(x, oh, ow);
        let g = DMatrix::from_column_slice(plane, self.out_c, &gy.data);
        let gw = col.transpose() * &g;
        for (d, v) in grad_params[self.w_off..self.w_off + self.weight_len()]
            .iter_mut()
            .zip(gw.as_slice())
        {
            *d += v;
        }
        for o in 0..self.out_c {
            grad_params[self.b_off + o] += gy.channel(o).iter().sum::<f64>();
        }
        if !need_input {
            return None;
        }
        let gcol = &g * self.weight_matrix(params).transpose();
        Some(Tensor {
            c: self.in_c,
            h: x.h,
            w: x.w,
            data: self.col2im(&gcol, x.h, x.w, oh, ow),
        })
    }
}

/// Output index range `[lo, hi)` of outputs `j` with `0 <= j*s + k - 1 < n`.
#[inline]
fn valid_range(k: usize, s: usize, out_n: usize, in_n: usize) -> (usize, usize) {
    // j*s + k - 1 >= 0  =>  j >= ceil((1 - k) / s)
    let lo = if k == 0 { 1usize.div_ceil(s) } else { 0 };
    // j*s + k - 1 <= in_n - 1  =>  j <= (in_n - k) / s
    let hi = if in_n + 1 > k { ((in_n - k) / s + 1).min(out_n) } else { 0 };
    (lo, hi.max(lo))
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|v| if *v > 0.0 { *v } else { LEAKY_SLOPE * v }).collect(),
        ..*x
    }
}

/// `pre` is the layer input.
pub fn leaky_relu_backward(pre: &Tensor, gy: &Tensor) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&gy.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { LEAKY_SLOPE * g })
            .collect(),
        ..*gy
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(gy: &Tensor) -> Tensor {
    let (h, w) = (gy.h / 2, gy.w / 2);
    let mut out = Tensor::zeros(gy.c, h, w);
    for c in 0..gy.c {
        let src = gy.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..gy.h {
            for x in 0..gy.w {
                dst[(y / 2) * w + x / 2] += src[y * gy.w + x];
            }
        }
    }
    out
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a concatenation gradient back into its `a.c`-channel head and tail.
pub fn concat_backward(g: &Tensor, a_channels: usize) -> (Tensor, Tensor) {
    let split = a_channels * g.plane();
    (
        Tensor {
            c: a_channels,
            h: g.h,
            w: g.w,
            data: g.data[..split].to_vec(),
        },
        Tensor {
            c: g.c - a_channels,
            h: g.h,
            w: g.w,
            data: g.data[split..].to_vec(),
        },
    )
}

/// Broadcasts a vector to a `len x h x w` map.
pub fn broadcast(v: &[f64], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(v.len() * h * w);
    for x in v {
        data.extend(std::iter::repeat(*x).take(h * w));
    }
    Tensor { c: v.len(), h, w, data }
}

pub fn broadcast_backward(g: &Tensor) -> Vec<f64> {
    (0..g.c).map(|c| g.channel(c).iter().sum()).collect()
}
