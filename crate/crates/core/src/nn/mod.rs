//! Motion-aware decoders: two independent U-Nets that map the normal and
//! position textures of a frame to raw geometry (11 channels) and raw
//! appearance (48 channels) maps, the latter conditioned on a global feature
//! computed from the root translation.

pub mod archive;
pub mod layers;
pub mod mlp;
pub mod unet;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use archive::{NamedTensor, Precision};
pub use layers::Tensor;
pub use mlp::{positional_encoding, GlobalFeatureMlp, MlpCache, DEFAULT_BANDS, FEATURE_DIM};
pub use unet::{ConvNetSpec, UNet, UNetCache};

use crate::atlas::MotionTexture;
use crate::avatar::{APPEARANCE_CHANNELS, GEOMETRY_CHANNELS};
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Normal (3) + position (3).
pub const INPUT_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub bands: usize,
}

impl DecoderConfig {
    pub fn new(levels: usize, base_channels: usize) -> Self {
        let d = ConvNetSpec::with_defaults(levels, base_channels, 1, 1);
        Self {
            levels,
            base_channels,
            channel_mults: d.channel_mults,
            bands: DEFAULT_BANDS,
        }
    }

    /// Three levels, 16 base channels.
    pub fn desk() -> Self {
        Self::new(3, 16)
    }

    /// Five levels, 32 base channels.
    pub fn production() -> Self {
        Self::new(5, 32)
    }

    fn spec(&self, out_channels: usize, inject: usize) -> ConvNetSpec {
        ConvNetSpec {
            levels: self.levels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            in_channels: INPUT_CHANNELS,
            out_channels,
            inject_channels: inject,
        }
    }
}

/// Geometry decoder, appearance decoder and global-feature network. The two
/// decoders share no parameters.
#[derive(Debug, Clone)]
pub struct Decoders {
    pub config: DecoderConfig,
    pub geo: UNet,
    pub app: UNet,
    pub mlp: GlobalFeatureMlp,
}

/// Forward results plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct DecoderForward {
    pub geo_raw: Tensor,
    pub app_raw: Tensor,
    pub feature: Vec<f64>,
    geo_cache: UNetCache,
    app_cache: UNetCache,
    mlp_cache: MlpCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub geo: Vec<f64>,
    pub app: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl DecoderGrads {
    pub fn zeros(d: &Decoders) -> Self {
        Self {
            geo: vec![0.0; d.geo.param_count()],
            app: vec![0.0; d.app.param_count()],
            mlp: vec![0.0; d.mlp.param_count()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.geo.iter_mut().chain(&mut self.app).chain(&mut self.mlp) {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.geo.iter().chain(&self.app).chain(&self.mlp).all(|v| v.is_finite())
    }
}

impl Decoders {
    /// Randomly initialized decoders (output layers zero).
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        let mut geo = UNet::new(config.spec(GEOMETRY_CHANNELS, 0))?;
        let mut app = UNet::new(config.spec(APPEARANCE_CHANNELS, FEATURE_DIM))?;
        let mut mlp = GlobalFeatureMlp::new(config.bands);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        geo.initialize(&mut rng);
        app.initialize(&mut rng);
        mlp.initialize(&mut rng);
        Ok(Self { config, geo, app, mlp })
    }

    pub fn param_count(&self) -> usize {
        self.geo.param_count() + self.app.param_count() + self.mlp.param_count()
    }

    /// Stacks the normal and position textures into the decoder input;
    /// uncovered texels are zero.
    pub fn input_tensor(normals: &MotionTexture, positions: &MotionTexture) -> Result<Tensor> {
        let r = normals.resolution;
        if positions.resolution != r {
            return Err(Error::Mismatch {
                what: "motion texture resolution",
                expected: r,
                found: positions.resolution,
            });
        }
        let plane = r * r;
        let mut t = Tensor::zeros(INPUT_CHANNELS, r, r);
        for (k, tex) in [normals, positions].into_iter().enumerate() {
            for (i, v) in tex.texels.iter().enumerate() {
                if tex.mask[i] {
                    for a in 0..3 {
                        t.data[(3 * k + a) * plane + i] = v[a];
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn geo_decode(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.geo.forward(input, None)?.0)
    }

    pub fn app_decode(&self, input: &Tensor, feature: &[f64]) -> Result<Tensor> {
        Ok(self.app.forward(input, Some(feature))?.0)
    }

    pub fn global_feature(&self, root_translation: &Vec3) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(root_translation)?.0)
    }

    pub fn forward(&self, input: &Tensor, root_translation: &Vec3) -> Result<DecoderForward> {
        let (feature, mlp_cache) = self.mlp.forward(root_translation)?;
        let (geo_raw, geo_cache) = self.geo.forward(input, None)?;
        let (app_raw, app_cache) = self.app.forward(input, Some(&feature))?;
        Ok(DecoderForward {
            geo_raw,
            app_raw,
            feature,
            geo_cache,
            app_cache,
            mlp_cache,
        })
    }

    /// Accumulates gradients of all three networks. Either upstream may be
    /// `None` when that branch does not affect the loss.
    pub fn backward(
        &self,
        fwd: &DecoderForward,
        grad_geo: Option<&Tensor>,
        grad_app: Option<&Tensor>,
        grads: &mut DecoderGrads,
    ) -> Result<()> {
        if let Some(g) = grad_geo {
            self.geo.backward(&fwd.geo_cache, g, &mut grads.geo, false)?;
        }
        if let Some(g) = grad_app {
            let (_, gf) = self.app.backward(&fwd.app_cache, g, &mut grads.app, false)?;
            let gf = gf.ok_or(Error::MissingState("global feature gradient"))?;
            self.mlp.backward(&fwd.mlp_cache, &gf, &mut grads.mlp)?;
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let c = &self.config;
        let mut meta = vec![c.levels as f64, c.base_channels as f64, c.bands as f64];
        meta.extend(c.channel_mults.iter().map(|m| *m as f64));
        let mut out = vec![NamedTensor::new("config", vec![meta.len()], meta)];
        for (prefix, net) in [("geo", &self.geo), ("app", &self.app)] {
            for l in net.layers() {
                out.push(NamedTensor::new(
                    format!("{prefix}/{}.weight", l.name),
                    vec![l.out_c, l.in_c, 3, 3],
                    net.params()[l.w_off..l.b_off].to_vec(),
                ));
                out.push(NamedTensor::new(
                    format!("{prefix}/{}.bias", l.name),
                    vec![l.out_c],
                    net.params()[l.b_off..l.b_off + l.out_c].to_vec(),
                ));
            }
        }
        out.push(NamedTensor::new("mlp/params", vec![self.mlp.param_count()], self.mlp.params().to_vec()));
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|t| t.name == "config")
            .ok_or_else(|| Error::format("weight archive", "missing tensor config"))?;
        if meta.data.len() < 4 {
            return Err(Error::format("weight archive", "config tensor too short"));
        }
        let levels = meta.data[0] as usize;
        let config = DecoderConfig {
            levels,
            base_channels: meta.data[1] as usize,
            bands: meta.data[2] as usize,
            channel_mults: meta.data[3..].iter().map(|v| *v as usize).collect(),
        };
        let mut d = Decoders::new(config, 0)?;
        for (prefix, net) in [("geo", &mut d.geo), ("app", &mut d.app)] {
            for l in net.layers().to_vec() {
                let w = archive::take_tensor(tensors, &format!("{prefix}/{}.weight", l.name), &[l.out_c, l.in_c, 3, 3])?;
                let b = archive::take_tensor(tensors, &format!("{prefix}/{}.bias", l.name), &[l.out_c])?;
                net.params_mut()[l.w_off..l.b_off].copy_from_slice(&w);
                net.params_mut()[l.b_off..l.b_off + l.out_c].copy_from_slice(&b);
            }
        }
        let n = d.mlp.param_count();
        let p = archive::take_tensor(tensors, "mlp/params", &[n])?;
        d.mlp.params_mut().copy_from_slice(&p);
        Ok(d)
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        let bytes = archive::encode(&self.to_tensors(), precision)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tensors(&archive::decode(&bytes)?)
    }
}
