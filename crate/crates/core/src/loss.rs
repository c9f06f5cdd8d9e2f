//! Photometric losses, image metrics and the parameter-space regression
//! loss used for decoder pretraining.

use crate::atlas::TexelTable;
use crate::avatar::{GaussianParamMaps, TEXEL_CHANNELS};
use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const C1: f64 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
const C2: f64 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub structure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 0.1,
            structure: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel >= 0.0 && self.structure >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    std::array::from_fn(|k| {
        let d = k as f64 - r;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    })
}

/// Row-normalized 1D filter of length `n`: taps falling outside the signal
/// are dropped and the rest rescaled to sum to one.
struct Filter1d {
    n: usize,
    /// Per output index: first input index and weights.
    rows: Vec<(usize, Vec<f64>)>,
}

impl Filter1d {
    fn new(n: usize) -> Self {
        let taps = gaussian_taps();
        let r = SSIM_WINDOW / 2;
        let rows = (0..n)
            .map(|p| {
                let lo = p.saturating_sub(r);
                let hi = (p + r).min(n - 1);
                let w: Vec<f64> = (lo..=hi).map(|q| taps[q + r - p]).collect();
                let s: f64 = w.iter().sum();
                (lo, w.into_iter().map(|v| v / s).collect())
            })
            .collect();
        Self { n, rows }
    }

    fn apply(&self, src: &[f64], stride: usize, count: usize, dst: &mut [f64]) {
        // Filters `count` interleaved signals: element `i` of signal `s` at
        // `s + i * stride`. The signal index runs innermost so that the
        // vertical pass reads whole rows.
        for (p, (lo, w)) in self.rows.iter().enumerate() {
            let out = &mut dst[p * stride..p * stride + count];
            out.fill(0.0);
            for (k, wk) in w.iter().enumerate() {
                let row = &src[(lo + k) * stride..(lo + k) * stride + count];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wk * v;
                }
            }
        }
    }

    /// The adjoint filter as an explicit banded matrix.
    fn transposed(&self) -> Self {
        let mut cols: Vec<(usize, Vec<f64>)> = vec![(usize::MAX, Vec::new()); self.n];
        for (p, (lo, w)) in self.rows.iter().enumerate() {
            for (k, wk) in w.iter().enumerate() {
                let col = &mut cols[lo + k];
                if col.0 == usize::MAX {
                    col.0 = p;
                }
                col.1.push(*wk);
            }
        }
        Self { n: self.n, rows: cols }
    }
}

/// Separable windowed mean over one `h x w` plane.
struct Blur {
    h: usize,
    w: usize,
    fx: Filter1d,
    fy: Filter1d,
    fx_t: Filter1d,
    fy_t: Filter1d,
}

impl Blur {
    fn new(h: usize, w: usize) -> Self {
        let (fx, fy) = (Filter1d::new(w), Filter1d::new(h));
        Self {
            h,
            w,
            fx_t: fx.transposed(),
            fy_t: fy.transposed(),
            fx,
            fy,
        }
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut tmp = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for y in 0..self.h {
            let row = y * self.w..(y + 1) * self.w;
            self.fx.apply(&src[row.clone()], 1, 1, &mut tmp[row]);
        }
        self.fy.apply(&tmp, self.w, self.w, &mut out);
        out
    }

    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        let mut tmp = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        self.fy_t.apply(src, self.w, self.w, &mut tmp);
        for y in 0..self.h {
            let row = y * self.w..(y + 1) * self.w;
            self.fx_t.apply(&tmp[row.clone()], 1, 1, &mut out[row]);
        }
        out
    }
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data().iter().skip(ch).step_by(3).copied().collect()
}

struct SsimParts {
    value: f64,
    /// Gradient with respect to the second image, when requested.
    grad: Option<Image>,
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<SsimParts> {
    a.same_size(b)?;
    let (w, h) = (a.width(), a.height());
    let n = (w * h * 3) as f64;
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let blur = Blur::new(h, w);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let mx = blur.apply(&x);
        let my = blur.apply(&y);
        let exx = blur.apply(&x.iter().map(|v| v * v).collect::<Vec<_>>());
        let eyy = blur.apply(&y.iter().map(|v| v * v).collect::<Vec<_>>());
        let exy = blur.apply(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>());
        let mut d_my = vec![0.0; w * h];
        let mut d_eyy = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for p in 0..w * h {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_my[p] = 2.0 * ux * (a2 - a1) / (b1 * b2) - 2.0 * uy * s * (1.0 / b1 - 1.0 / b2);
                d_eyy[p] = -s / b2;
                d_exy[p] = 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_my = blur.apply_transpose(&d_my);
            let t_eyy = blur.apply_transpose(&d_eyy);
            let t_exy = blur.apply_transpose(&d_exy);
            let data = g.data_mut();
            for p in 0..w * h {
                data[3 * p + ch] = (t_my[p] + 2.0 * y[p] * t_eyy[p] + x[p] * t_exy[p]) / n;
            }
        }
    }
    Ok(SsimParts {
        value: total / n,
        grad,
    })
}

/// Mean local SSIM over all pixels and channels (11x11 Gaussian window,
/// `σ = 1.5`, window renormalized at the borders).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.value)
}

/// SSIM and its gradient with respect to `b`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let parts = ssim_impl(a, b, true)?;
    Ok((parts.value, parts.grad.expect("gradient requested")))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n)
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Gradient with respect to the predicted image.
    pub grad: Image,
}

/// `λ_pix · L1 + λ_str · (1 - SSIM)` between `target` and `predicted`.
pub fn loss_main(target: &Image, predicted: &Image, w: &LossWeights) -> Result<LossValue> {
    w.validate()?;
    target.same_size(predicted)?;
    let l1v = l1(target, predicted)?;
    let n = target.data().len() as f64;
    let mut grad = Image::new(target.width(), target.height());
    for ((g, t), p) in grad.data_mut().iter_mut().zip(target.data()).zip(predicted.data()) {
        let d = p - t;
        *g = if d > 0.0 {
            w.pixel / n
        } else if d < 0.0 {
            -w.pixel / n
        } else {
            0.0
        };
    }
    let s = if w.structure != 0.0 {
        let (s, gs) = ssim_with_grad(target, predicted)?;
        for (g, v) in grad.data_mut().iter_mut().zip(gs.data()) {
            *g -= w.structure * v;
        }
        s
    } else {
        ssim(target, predicted)?
    };
    Ok(LossValue {
        total: w.pixel * l1v + w.structure * (1.0 - s),
        l1: l1v,
        ssim: s,
        grad,
    })
}

/// Mean squared error over covered texels and the 59 non-position
/// channels, with its gradient with respect to `predicted`.
pub fn loss_warmup(
    table: &TexelTable,
    predicted: &GaussianParamMaps,
    target: &GaussianParamMaps,
) -> Result<(f64, GaussianParamMaps)> {
    let r = table.resolution();
    if predicted.resolution != r || target.resolution != r {
        return Err(Error::Mismatch {
            what: "parameter map resolution",
            expected: r,
            found: if predicted.resolution != r {
                predicted.resolution
            } else {
                target.resolution
            },
        });
    }
    let denom = (table.len() * TEXEL_CHANNELS) as f64;
    let mut grad = GaussianParamMaps::zeros(r);
    let mut total = 0.0;
    for e in table.entries() {
        let t = e.texel_index(r);
        let p = predicted.texel_channels(t);
        let q = target.texel_channels(t);
        let mut g = [0.0; TEXEL_CHANNELS];
        for k in 0..TEXEL_CHANNELS {
            let d = p[k] - q[k];
            total += d * d;
            g[k] = 2.0 * d / denom;
        }
        grad.set_texel_channels(t, &g);
    }
    Ok((total / denom, grad))
}
