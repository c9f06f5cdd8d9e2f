//! Global appearance feature from the root translation: positional encoding
//! followed by a small fully connected network.

use rand::Rng;

use super::layers::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::math::Vec3;

pub const FEATURE_DIM: usize = 16;
pub const HIDDEN_WIDTH: usize = 32;
pub const DEFAULT_BANDS: usize = 4;

/// `[x, y, z]` followed, per band `f` and per axis, by
/// `sin(2^f v), cos(2^f v)`.
pub fn positional_encoding(t: &Vec3, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(t.as_slice());
    for f in 0..bands {
        let freq = (1u64 << f) as f64;
        for axis in 0..3 {
            let (s, c) = (freq * t[axis]).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &p[self.w_off + o * self.inputs..][..self.inputs];
                p[self.b_off + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.inputs];
        for (o, g) in gy.iter().enumerate() {
            grads[self.b_off + o] += g;
            let base = self.w_off + o * self.inputs;
            for i in 0..self.inputs {
                grads[base + i] += g * x[i];
                gx[i] += g * p[base + i];
            }
        }
        gx
    }
}

/// Three linear layers `(3 + 6F) -> 32 -> 32 -> 16` with leaky ReLU between.
#[derive(Debug, Clone)]
pub struct GlobalFeatureMlp {
    bands: usize,
    layers: [Dense; 3],
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer and the pre-activations of the hidden layers.
    inputs: [Vec<f64>; 3],
    pre: [Vec<f64>; 2],
}

fn lrelu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| if *x > 0.0 { *x } else { LEAKY_SLOPE * x }).collect()
}

impl GlobalFeatureMlp {
    pub fn new(bands: usize) -> Self {
        let dims = [3 + 6 * bands, HIDDEN_WIDTH, HIDDEN_WIDTH, FEATURE_DIM];
        let mut off = 0;
        let layers = std::array::from_fn(|k| {
            let d = Dense {
                inputs: dims[k],
                outputs: dims[k + 1],
                w_off: off,
                b_off: off + dims[k] * dims[k + 1],
            };
            off = d.b_off + d.outputs;
            d
        });
        Self {
            bands,
            layers,
            params: vec![0.0; off],
        }
    }

    pub fn initialize<R: Rng>(&mut self, rng: &mut R) {
        self.params.fill(0.0);
        for d in &self.layers {
            let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * d.inputs as f64)).sqrt();
            for w in &mut self.params[d.w_off..d.b_off] {
                *w = rng.gen_range(-bound..bound);
            }
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, root_translation: &Vec3) -> Result<(Vec<f64>, MlpCache)> {
        if !root_translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite root translation"));
        }
        let x0 = positional_encoding(root_translation, self.bands);
        let p0 = self.layers[0].forward(&self.params, &x0);
        let x1 = lrelu(&p0);
        let p1 = self.layers[1].forward(&self.params, &x1);
        let x2 = lrelu(&p1);
        let out = self.layers[2].forward(&self.params, &x2);
        Ok((
            out,
            MlpCache {
                inputs: [x0, x1, x2],
                pre: [p0, p1],
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [f64]) -> Result<()> {
        if grad_out.len() != FEATURE_DIM || grads.len() != self.params.len() {
            return Err(Error::invalid("global feature gradient shape mismatch"));
        }
        let mut g = self.layers[2].backward(&self.params, &cache.inputs[2], grad_out, grads);
        for k in (0..2).rev() {
            for (gv, pre) in g.iter_mut().zip(&cache.pre[k]) {
                if *pre <= 0.0 {
                    *gv *= LEAKY_SLOPE;
                }
            }
            g = self.layers[k].backward(&self.params, &cache.inputs[k], &g, grads);
        }
        Ok(())
    }
}
