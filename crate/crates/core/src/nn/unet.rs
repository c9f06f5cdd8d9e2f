//! U-Net image-to-image decoder with an optional global-vector injection at
//! the bottleneck.

use rand::Rng;

use super::layers::{
    broadcast, broadcast_backward, concat, concat_backward, leaky_relu, leaky_relu_backward, upsample2,
    upsample2_backward, Conv3, Tensor, LEAKY_SLOPE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNetSpec {
    /// Number of stride-2 downsamplings.
    pub levels: usize,
    pub base_channels: usize,
    /// Channel multiplier per level, `levels + 1` entries.
    pub channel_mults: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the vector concatenated at the bottleneck (0 for none).
    pub inject_channels: usize,
}

impl ConvNetSpec {
    /// Multipliers `1, 2, 4, 4, ...`.
    pub fn with_defaults(levels: usize, base_channels: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            levels,
            base_channels,
            channel_mults: (0..=levels).map(|l| (1usize << l).min(4)).collect(),
            in_channels,
            out_channels,
            inject_channels: 0,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "need {} channel multipliers, got {}",
                self.levels + 1,
                self.channel_mults.len()
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be nonzero".into()));
        }
        if self.channel_mults.contains(&0) {
            return Err(Error::Config("channel multipliers must be nonzero".into()));
        }
        Ok(())
    }

    /// Inputs must have sides divisible by `2^levels`.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let d = 1usize << self.levels;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by 2^{} = {d}",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    spec: ConvNetSpec,
    layers: Vec<Conv3>,
    params: Vec<f64>,
    idx_in: usize,
    idx_enc: Vec<usize>,
    idx_down: Vec<usize>,
    idx_inject: Option<usize>,
    idx_mid: usize,
    idx_up: Vec<usize>,
    idx_dec: Vec<usize>,
    idx_out: usize,
}

/// Activations kept by [`UNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetCache {
    /// Per layer: (input, pre-activation output).
    steps: Vec<Option<(Tensor, Tensor)>>,
    inject: Option<Vec<f64>>,
}

impl UNet {
    /// Builds the layer graph with all parameters zero.
    pub fn new(spec: ConvNetSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut off = 0usize;
        let mut add = |name: String, in_c: usize, out_c: usize, stride: usize| -> usize {
            let l = Conv3 {
                name,
                in_c,
                out_c,
                stride,
                w_off: off,
                b_off: off + out_c * in_c * 9,
            };
            off += l.param_len();
            layers.push(l);
            layers.len() - 1
        };
        let c = |l: usize| spec.channels(l);
        let idx_in = add("in".into(), spec.in_channels, c(0), 1);
        let mut idx_enc = Vec::new();
        let mut idx_down = Vec::new();
        for l in 0..spec.levels {
            idx_enc.push(add(format!("enc{l}"), c(l), c(l), 1));
            idx_down.push(add(format!("down{l}"), c(l), c(l + 1), 2));
        }
        let bottom = c(spec.levels);
        let idx_inject = (spec.inject_channels > 0)
            .then(|| add("inject".into(), bottom + spec.inject_channels, bottom, 1));
        let idx_mid = add("mid".into(), bottom, bottom, 1);
        let mut idx_up = vec![0; spec.levels];
        let mut idx_dec = vec![0; spec.levels];
        for l in (0..spec.levels).rev() {
            idx_up[l] = add(format!("up{l}"), c(l + 1), c(l), 1);
            idx_dec[l] = add(format!("dec{l}"), 2 * c(l), c(l), 1);
        }
        let idx_out = add("out".into(), c(0), spec.out_channels, 1);
        let params = vec![0.0; off];
        Ok(Self {
            spec,
            layers,
            params,
            idx_in,
            idx_enc,
            idx_down,
            idx_inject,
            idx_mid,
            idx_up,
            idx_dec,
            idx_out,
        })
    }

    /// Fan-in scaled uniform weights, zero biases, zero output layer.
    pub fn initialize<R: Rng>(&mut self, rng: &mut R) {
        self.params.fill(0.0);
        for (k, l) in self.layers.iter().enumerate() {
            if k == self.idx_out {
                continue;
            }
            let fan_in = (l.in_c * 9) as f64;
            let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
            for w in &mut self.params[l.w_off..l.w_off + l.weight_len()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Conv3] {
        &self.layers
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

    pub fn output_layer(&self) -> &Conv3 {
        &self.layers[self.idx_out]
    }

    pub fn inject_layer(&self) -> Option<&Conv3> {
        self.idx_inject.map(|i| &self.layers[i])
    }

    fn step(&self, idx: usize, x: Tensor, act: bool, cache: &mut UNetCache) -> Tensor {
        let pre = self.layers[idx].forward(&self.params, &x);
        let out = if act { leaky_relu(&pre) } else { pre.clone() };
        cache.steps[idx] = Some((x, pre));
        out
    }

    fn step_back(
        &self,
        idx: usize,
        g: &Tensor,
        act: bool,
        cache: &UNetCache,
        grads: &mut [f64],
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        let (x, pre) = cache.steps[idx]
            .as_ref()
            .ok_or(Error::MissingState("decoder activation cache"))?;
        let gpre = if act { leaky_relu_backward(pre, g) } else { g.clone() };
        Ok(self.layers[idx].backward(&self.params, x, &gpre, grads, need_input))
    }

    pub fn forward(&self, input: &Tensor, inject: Option<&[f64]>) -> Result<(Tensor, UNetCache)> {
        if input.c != self.spec.in_channels {
            return Err(Error::Mismatch {
                what: "decoder input channels",
                expected: self.spec.in_channels,
                found: input.c,
            });
        }
        self.spec.check_input_size(input.h, input.w)?;
        if let Some(v) = inject {
            if v.len() != self.spec.inject_channels {
                return Err(Error::Mismatch {
                    what: "injected feature length",
                    expected: self.spec.inject_channels,
                    found: v.len(),
                });
            }
        }
        let mut cache = UNetCache {
            steps: vec![None; self.layers.len()],
            inject: inject.map(|v| v.to_vec()),
        };
        let mut h = self.step(self.idx_in, input.clone(), true, &mut cache);
        let mut skips = Vec::with_capacity(self.spec.levels);
        for l in 0..self.spec.levels {
            h = self.step(self.idx_enc[l], h, true, &mut cache);
            skips.push(h.clone());
            h = self.step(self.idx_down[l], h, true, &mut cache);
        }
        if let Some(idx) = self.idx_inject {
            // A missing vector is fed as zeros.
            let zeros = vec![0.0; self.spec.inject_channels];
            let b = broadcast(inject.unwrap_or(&zeros), h.h, h.w);
            h = self.step(idx, concat(&h, &b), true, &mut cache);
        }
        h = self.step(self.idx_mid, h, true, &mut cache);
        for l in (0..self.spec.levels).rev() {
            h = self.step(self.idx_up[l], upsample2(&h), true, &mut cache);
            h = self.step(self.idx_dec[l], concat(&h, &skips[l]), true, &mut cache);
        }
        let out = self.step(self.idx_out, h, false, &mut cache);
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grads`; returns the gradients
    /// with respect to the input (when requested) and the injected vector.
    pub fn backward(
        &self,
        cache: &UNetCache,
        grad_out: &Tensor,
        grads: &mut [f64],
        need_input: bool,
    ) -> Result<(Option<Tensor>, Option<Vec<f64>>)> {
        if grads.len() != self.params.len() {
            return Err(Error::Mismatch {
                what: "decoder gradient buffer",
                expected: self.params.len(),
                found: grads.len(),
            });
        }
        let missing = || Error::MissingState("decoder activation cache");
        let mut g = self
            .step_back(self.idx_out, grad_out, false, cache, grads, true)?
            .ok_or_else(missing)?;
        let mut gskip = vec![None; self.spec.levels];
        for l in 0..self.spec.levels {
            let gcat = self
                .step_back(self.idx_dec[l], &g, true, cache, grads, true)?
                .ok_or_else(missing)?;
            let (gh, gs) = concat_backward(&gcat, self.spec.channels(l));
            gskip[l] = Some(gs);
            let gu = self
                .step_back(self.idx_up[l], &gh, true, cache, grads, true)?
                .ok_or_else(missing)?;
            g = upsample2_backward(&gu);
        }
        g = self
            .step_back(self.idx_mid, &g, true, cache, grads, true)?
            .ok_or_else(missing)?;
        let mut ginject = None;
        if let Some(idx) = self.idx_inject {
            let gcat = self.step_back(idx, &g, true, cache, grads, true)?.ok_or_else(missing)?;
            let (gh, gv) = concat_backward(&gcat, self.spec.channels(self.spec.levels));
            g = gh;
            if cache.inject.is_some() {
                ginject = Some(broadcast_backward(&gv));
            }
        }
        for l in (0..self.spec.levels).rev() {
            g = self
                .step_back(self.idx_down[l], &g, true, cache, grads, true)?
                .ok_or_else(missing)?;
            let gs = gskip[l].take().ok_or_else(missing)?;
            for (a, b) in g.data.iter_mut().zip(&gs.data) {
                *a += b;
            }
            g = self
                .step_back(self.idx_enc[l], &g, true, cache, grads, true)?
                .ok_or_else(missing)?;
        }
        let gin = self.step_back(self.idx_in, &g, true, cache, grads, need_input)?;
        Ok((gin, ginject))
    }

    /// Input index hull (per axis) that can influence output indices
    /// `[lo, hi]`.
    pub fn receptive_interval(&self, lo: i64, hi: i64) -> (i64, i64) {
        let (lo, hi) = (lo - 1, hi + 1); // out
        self.from_decoder(0, lo, hi)
    }

    /// `[lo, hi]` indexes the output of decoder level `l` (or the bottleneck
    /// when `l == levels`).
    fn from_decoder(&self, l: usize, lo: i64, hi: i64) -> (i64, i64) {
        if l == self.spec.levels {
            let pad = if self.idx_inject.is_some() { 2 } else { 1 };
            let (lo, hi) = (lo - pad, hi + pad);
            return self.from_encoder(l, 2 * lo - 1, 2 * hi + 1, true);
        }
        let (lo, hi) = (lo - 1, hi + 1); // dec conv on the concatenation
        let skip = self.from_encoder(l, lo, hi, false);
        let (ulo, uhi) = (lo - 1, hi + 1); // up conv
        let deep = self.from_decoder(l + 1, ulo.div_euclid(2), uhi.div_euclid(2));
        (skip.0.min(deep.0), skip.1.max(deep.1))
    }

    /// `[lo, hi]` indexes the output of encoder conv `l`, or the output of
    /// down conv `l - 1` when `after_down` is set.
    fn from_encoder(&self, l: usize, lo: i64, hi: i64, after_down: bool) -> (i64, i64) {
        let (mut lo, mut hi) = (lo, hi);
        let mut level = l;
        if after_down {
            // Interval sits on the output of enc `l - 1`.
            level -= 1;
        }
        loop {
            lo -= 1; // enc conv
            hi += 1;
            if level == 0 {
                return (lo - 1, hi + 1); // in conv
            }
            level -= 1;
            lo = 2 * lo - 1; // down conv of the level above
            hi = 2 * hi + 1;
        }
    }
}
