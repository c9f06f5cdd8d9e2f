//! Two-stage training: per-frame pseudo ground truth with frozen positions,
//! decoder pretraining against it in activated parameter space, then joint
//! photometric training of the decoders through the whole chain.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::atlas::{bake_normal_texture, bake_position_texture};
use crate::avatar::{
    activate, activate_backward, geo, pose_gaussians_backward, Avatar, FramePlacement, GaussianParamMaps, SplatFrame,
    SplatGrads, APPEARANCE_CHANNELS, GEOMETRY_CHANNELS,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::Scene;
use crate::loss::{loss_main, loss_warmup, psnr, ssim, LossWeights};
use crate::math::Vec3;
use crate::nn::archive::{self, take_tensor};
use crate::nn::{DecoderGrads, Decoders, NamedTensor, Precision, Tensor};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::render::{render, render_backward, Camera, RenderOptions};
use crate::rig::{compute_vertex_normals, GraphFrame, PoseFrame};

/// One calibrated view of a frame.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// Everything training needs about one frame: splat placement, decoder
/// input and the observed views.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub frame_id: u64,
    pub placement: FramePlacement,
    pub input: Tensor,
    pub root: Vec3,
    pub views: Vec<View>,
}

/// Decoder input of a posed frame: normal and position textures of the
/// posed, deformed template.
pub fn motion_input(avatar: &Avatar, posed: &[Vec3]) -> Result<Tensor> {
    let normals = compute_vertex_normals(posed, &avatar.rig.mesh.faces);
    let tn = bake_normal_texture(&avatar.table, &normals)?;
    let tp = bake_position_texture(&avatar.table, posed)?;
    Decoders::input_tensor(&tn, &tp)
}

pub fn prepare_frame(avatar: &Avatar, pose: &PoseFrame, graph: &GraphFrame, views: Vec<View>) -> Result<FrameData> {
    let rf = avatar.rig.evaluate(pose, graph)?;
    Ok(FrameData {
        frame_id: pose.frame_id,
        placement: avatar.placement(&rf)?,
        input: motion_input(avatar, &rf.posed)?,
        root: pose.root_translation,
        views,
    })
}

/// Loads frames of `scene` with every camera's image.
pub fn load_frames(scene: &Scene, avatar: &Avatar, frames: &[usize]) -> Result<Vec<FrameData>> {
    frames
        .iter()
        .map(|&f| {
            if f >= scene.frame_count() {
                return Err(Error::invalid(format!(
                    "frame {f} out of range (scene has {})",
                    scene.frame_count()
                )));
            }
            let views = (0..scene.cameras.len())
                .map(|c| {
                    Ok(View {
                        camera: scene.cameras[c].clone(),
                        image: scene.load_image(f, c)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            prepare_frame(avatar, &scene.poses[f], &scene.graph_frames[f], views)
        })
        .collect()
}

/// `count` frame indices spread evenly over `0..total`.
pub fn even_frames(total: usize, count: usize) -> Vec<usize> {
    let count = count.min(total);
    (0..count).map(|k| k * total / count).collect()
}

/// Photometric metrics averaged over views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
}

struct Photometric {
    metrics: Metrics,
    grads: SplatGrads,
}

fn photometric(
    splats: &SplatFrame,
    views: &[View],
    background: [f64; 3],
    opts: &RenderOptions,
    weights: &LossWeights,
) -> Result<Photometric> {
    if views.is_empty() {
        return Err(Error::invalid("no views to fit against"));
    }
    let per_view: Vec<(crate::loss::LossValue, f64, SplatGrads)> = views
        .iter()
        .map(|v| {
            let out = render(splats, &v.camera, background, opts, true)?;
            let lv = loss_main(&v.image, &out.image, weights)?;
            let p = psnr(&v.image, &out.image)?;
            let g = render_backward(splats, &out, &lv.grad)?;
            Ok((lv, p, g))
        })
        .collect::<Result<_>>()?;
    let n = views.len() as f64;
    let mut grads = SplatGrads::zeros(splats.len());
    let mut m = Metrics {
        loss: 0.0,
        l1: 0.0,
        ssim: 0.0,
        psnr: 0.0,
    };
    for (lv, p, g) in &per_view {
        m.loss += lv.total / n;
        m.l1 += lv.l1 / n;
        m.ssim += lv.ssim / n;
        m.psnr += p.min(PSNR_CAP) / n;
        grads.add_assign(g);
    }
    grads.scale(1.0 / n);
    Ok(Photometric { metrics: m, grads })
}

/// Identical images have infinite PSNR; averages use this stand-in.
pub const PSNR_CAP: f64 = 100.0;

/// Renders every view of `frame` with `maps` and averages the metrics.
pub fn evaluate_maps(
    avatar: &Avatar,
    frame: &FrameData,
    maps: &GaussianParamMaps,
    background: [f64; 3],
    opts: &RenderOptions,
) -> Result<Metrics> {
    let splats = avatar.pose(&frame.placement, maps)?;
    let n = frame.views.len() as f64;
    let mut m = Metrics {
        loss: 0.0,
        l1: 0.0,
        ssim: 0.0,
        psnr: 0.0,
    };
    for v in &frame.views {
        let img = render(&splats, &v.camera, background, opts, false)?.image;
        let lv = loss_main(&v.image, &img, &LossWeights::default())?;
        m.loss += lv.total / n;
        m.l1 += lv.l1 / n;
        m.ssim += ssim(&v.image, &img)? / n;
        m.psnr += psnr(&v.image, &img)?.min(PSNR_CAP) / n;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub render: RenderOptions,
    pub background: [f64; 3],
    /// Stop as soon as the current parameters reach this mean PSNR.
    pub target_psnr: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-2,
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            background: [0.0; 3],
            target_psnr: None,
        }
    }
}

/// Fitted activated parameters of one frame, offsets zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGtSnapshot {
    pub frame_id: u64,
    pub maps: GaussianParamMaps,
    pub metrics: Metrics,
    pub loss_history: Vec<f64>,
    /// Adam steps taken.
    pub steps: usize,
}

/// Optimizes rotation, scale, opacity and SH of one frame with the splat
/// positions held at the posed template texels.
pub fn fit_frame(avatar: &Avatar, frame: &FrameData, cfg: &FitConfig) -> Result<PseudoGtSnapshot> {
    let r = avatar.resolution();
    let plane = r * r;
    let mask = avatar.table.mask();
    let frozen = avatar.surface_positions(&frame.placement);
    let mut raw_geo = vec![0.0; GEOMETRY_CHANNELS * plane];
    let mut raw_app = vec![0.0; APPEARANCE_CHANNELS * plane];
    let mut adam_geo = AdamState::new(raw_geo.len());
    let mut adam_app = AdamState::new(raw_app.len());
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut steps = 0;

    for step in 0..=cfg.steps {
        let maps = activate(&raw_geo, &raw_app, &mask, r, &avatar.activation)?;
        let splats = avatar.pose(&frame.placement, &maps)?;
        if splats.len() != frozen.len() || splats.positions != frozen {
            return Err(Error::Pipeline {
                stage: "pseudo ground truth",
                detail: format!("splat positions moved at step {step}"),
            });
        }
        let ph = photometric(&splats, &frame.views, cfg.background, &cfg.render, &cfg.weights)?;
        if !ph.metrics.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: ph.metrics.loss,
            });
        }
        history.push(ph.metrics.loss);
        if step == cfg.steps || cfg.target_psnr.is_some_and(|t| ph.metrics.psnr >= t) {
            break;
        }
        let gmaps = pose_gaussians_backward(&avatar.table, &frame.placement.transforms, &ph.grads);
        let (mut dg, da) = activate_backward(&raw_geo, &mask, r, &avatar.activation, &gmaps);
        dg[geo::OFFSET * plane..(geo::OFFSET + 3) * plane].fill(0.0);
        if !dg.iter().chain(&da).all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
        adam_step(&mut raw_geo, &dg, &mut adam_geo, &adam)?;
        adam_step(&mut raw_app, &da, &mut adam_app, &adam)?;
        steps += 1;
    }
    let maps = activate(&raw_geo, &raw_app, &mask, r, &avatar.activation)?;
    let metrics = evaluate_maps(avatar, frame, &maps, cfg.background, &cfg.render)?;
    Ok(PseudoGtSnapshot {
        frame_id: frame.frame_id,
        maps,
        metrics,
        loss_history: history,
        steps,
    })
}

/// One snapshot per frame; frames are independent and fitted in parallel.
pub fn fit_pseudo_gt(avatar: &Avatar, frames: &[FrameData], cfg: &FitConfig) -> Result<Vec<PseudoGtSnapshot>> {
    if frames.iter().any(|f| f.views.is_empty()) {
        return Err(Error::invalid("pseudo ground truth fitting needs at least one camera per frame"));
    }
    frames.par_iter().map(|f| fit_frame(avatar, f, cfg)).collect()
}

/// Decoder pretraining sample: decoder input and its fitted target.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub input: Tensor,
    pub root: Vec3,
    pub target: GaussianParamMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Raw decoder outputs to activated maps, and the pullback of map gradients
/// to decoder-output gradients.
fn decode_to_maps(avatar: &Avatar, dec: &Decoders, input: &Tensor, root: &Vec3) -> Result<(crate::nn::DecoderForward, GaussianParamMaps)> {
    let fwd = dec.forward(input, root)?;
    let mask = avatar.table.mask();
    let maps = activate(
        &fwd.geo_raw.data,
        &fwd.app_raw.data,
        &mask,
        avatar.resolution(),
        &avatar.activation,
    )?;
    Ok((fwd, maps))
}

fn maps_backward(
    avatar: &Avatar,
    dec: &Decoders,
    fwd: &crate::nn::DecoderForward,
    gmaps: &GaussianParamMaps,
    grads: &mut DecoderGrads,
) -> Result<()> {
    let r = avatar.resolution();
    let mask = avatar.table.mask();
    let (dg, da) = activate_backward(&fwd.geo_raw.data, &mask, r, &avatar.activation, gmaps);
    let dg = Tensor::from_data(GEOMETRY_CHANNELS, r, r, dg)?;
    let da = Tensor::from_data(APPEARANCE_CHANNELS, r, r, da)?;
    dec.backward(fwd, Some(&dg), Some(&da), grads)
}

/// Optimizer state for all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOptimizer {
    pub geo: AdamState,
    pub app: AdamState,
    pub mlp: AdamState,
}

impl DecoderOptimizer {
    pub fn new(dec: &Decoders) -> Self {
        Self {
            geo: AdamState::new(dec.geo.param_count()),
            app: AdamState::new(dec.app.param_count()),
            mlp: AdamState::new(dec.mlp.param_count()),
        }
    }

    fn step(&mut self, dec: &mut Decoders, g: &DecoderGrads, lr_geo: f64, lr_app: f64) -> Result<()> {
        adam_step(dec.geo.params_mut(), &g.geo, &mut self.geo, &AdamConfig::with_lr(lr_geo))?;
        adam_step(dec.app.params_mut(), &g.app, &mut self.app, &AdamConfig::with_lr(lr_app))?;
        adam_step(dec.mlp.params_mut(), &g.mlp, &mut self.mlp, &AdamConfig::with_lr(lr_app))
    }
}

/// Minimizes the activated-space L2 between decoder predictions and the
/// snapshots, cycling through them in a seeded shuffled order. Returns the
/// per-step loss.
pub fn pretrain_decoders(
    avatar: &Avatar,
    dec: &mut Decoders,
    samples: &[PretrainSample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("pretraining needs at least one snapshot"));
    }
    let r = avatar.resolution();
    for (k, s) in samples.iter().enumerate() {
        if s.target.resolution != r {
            return Err(Error::invalid(format!(
                "snapshot {k} has resolution {}, avatar has {r}",
                s.target.resolution
            )));
        }
        s.target.validate(&avatar.table)?;
    }
    let mut opt = DecoderOptimizer::new(dec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
        }
        let s = &samples[order.pop().unwrap()];
        let (fwd, maps) = decode_to_maps(avatar, dec, &s.input, &s.root)?;
        let (loss, gmaps) = loss_warmup(&avatar.table, &maps, &s.target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grads = DecoderGrads::zeros(dec);
        maps_backward(avatar, dec, &fwd, &gmaps, &mut grads)?;
        if !grads.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        opt.step(dec, &grads, cfg.lr, cfg.lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean warmup loss of the current decoders over all samples.
pub fn warmup_loss(avatar: &Avatar, dec: &Decoders, samples: &[PretrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (_, maps) = decode_to_maps(avatar, dec, &s.input, &s.root)?;
        total += loss_warmup(&avatar.table, &maps, &s.target)?.0;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_geo: f64,
    pub lr_app: f64,
    pub weights: LossWeights,
    pub render: RenderOptions,
    pub background: [f64; 3],
    pub seed: u64,
    /// Views rendered per step, drawn from one frame.
    pub views_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr_geo: 1e-4,
            lr_app: 2e-4,
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            background: [0.0; 3],
            seed: 0,
            views_per_step: usize::MAX,
        }
    }
}

/// Decoders plus optimizer moments and the step counter; everything needed
/// to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub decoders: Decoders,
    pub optimizer: DecoderOptimizer,
    pub step: usize,
}

impl TrainState {
    pub fn new(decoders: Decoders) -> Self {
        let optimizer = DecoderOptimizer::new(&decoders);
        Self {
            decoders,
            optimizer,
            step: 0,
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut t = self.decoders.to_tensors();
        for (name, s) in [
            ("geo", &self.optimizer.geo),
            ("app", &self.optimizer.app),
            ("mlp", &self.optimizer.mlp),
        ] {
            t.push(NamedTensor::new(format!("adam/{name}/m"), vec![s.m.len()], s.m.clone()));
            t.push(NamedTensor::new(format!("adam/{name}/v"), vec![s.v.len()], s.v.clone()));
            t.push(NamedTensor::new(format!("adam/{name}/step"), vec![1], vec![s.step as f64]));
        }
        t.push(NamedTensor::new("train/step", vec![1], vec![self.step as f64]));
        t
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let decoders = Decoders::from_tensors(tensors)?;
        let adam = |name: &str, n: usize| -> Result<AdamState> {
            Ok(AdamState {
                m: take_tensor(tensors, &format!("adam/{name}/m"), &[n])?,
                v: take_tensor(tensors, &format!("adam/{name}/v"), &[n])?,
                step: take_tensor(tensors, &format!("adam/{name}/step"), &[1])?[0] as u64,
            })
        };
        let optimizer = DecoderOptimizer {
            geo: adam("geo", decoders.geo.param_count())?,
            app: adam("app", decoders.app.param_count())?,
            mlp: adam("mlp", decoders.mlp.param_count())?,
        };
        let step = take_tensor(tensors, "train/step", &[1])?[0] as usize;
        Ok(Self {
            decoders,
            optimizer,
            step,
        })
    }

    /// Always 64-bit so that resuming is exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = archive::encode(&self.to_tensors(), Precision::F64)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tensors(&archive::decode(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })?)
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub metrics: Metrics,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "step,loss,l1,ssim,psnr,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{:e},{:e},{:e},{:e},{:.3}",
            self.step, m.loss, m.l1, m.ssim, m.psnr, self.wall_ms
        )
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// The (frame, views) sample of a step depends only on the seed and the
/// step index, so resumed runs draw the same samples.
fn step_sample(seed: u64, step: usize, frames: usize, views: usize, per_step: usize) -> (usize, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let f = rng.gen_range(0..frames);
    let mut v: Vec<usize> = (0..views).collect();
    if per_step < views {
        v.shuffle(&mut rng);
        v.truncate(per_step);
        v.sort_unstable();
    }
    (f, v)
}

/// Runs `cfg.steps - state.step` photometric steps through the full chain:
/// decoders, activation, posing, rendering and the image loss. On a
/// non-finite loss or gradient the state is left at the last good step and
/// an error is returned.
pub fn train_full(
    avatar: &Avatar,
    state: &mut TrainState,
    frames: &[FrameData],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if frames.is_empty() || frames.iter().any(|f| f.views.is_empty()) {
        return Err(Error::invalid("training needs frames with at least one view each"));
    }
    let views = frames[0].views.len();
    if frames.iter().any(|f| f.views.len() != views) {
        return Err(Error::invalid("all training frames need the same number of views"));
    }
    let start = Instant::now();
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let (fi, vi) = step_sample(cfg.seed, state.step, frames.len(), views, cfg.views_per_step.max(1));
        let frame = &frames[fi];
        let chosen: Vec<View> = vi.iter().map(|&k| frame.views[k].clone()).collect();
        let (fwd, maps) = decode_to_maps(avatar, &state.decoders, &frame.input, &frame.root)?;
        let splats = avatar.pose(&frame.placement, &maps)?;
        let ph = photometric(&splats, &chosen, cfg.background, &cfg.render, &cfg.weights)?;
        if !ph.metrics.loss.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                loss: ph.metrics.loss,
            });
        }
        let gmaps = pose_gaussians_backward(&avatar.table, &frame.placement.transforms, &ph.grads);
        let mut grads = DecoderGrads::zeros(&state.decoders);
        maps_backward(avatar, &state.decoders, &fwd, &gmaps, &mut grads)?;
        if !grads.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                loss: f64::NAN,
            });
        }
        state
            .optimizer
            .step(&mut state.decoders, &grads, cfg.lr_geo, cfg.lr_app)?;
        let row = LogRow {
            step: state.step,
            metrics: ph.metrics,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&row);
        log.push(row);
        state.step += 1;
    }
    Ok(log)
}

/// Per-frame metrics of the decoders over every view.
pub fn evaluate_decoders(
    avatar: &Avatar,
    dec: &Decoders,
    frames: &[FrameData],
    background: [f64; 3],
    opts: &RenderOptions,
) -> Result<Vec<Metrics>> {
    frames
        .iter()
        .map(|f| {
            let (_, maps) = decode_to_maps(avatar, dec, &f.input, &f.root)?;
            evaluate_maps(avatar, f, &maps, background, opts)
        })
        .collect()
}

/// Activated maps predicted by the decoders for one frame.
pub fn predict_maps(avatar: &Avatar, dec: &Decoders, input: &Tensor, root: &Vec3) -> Result<GaussianParamMaps> {
    Ok(decode_to_maps(avatar, dec, input, root)?.1)
}

/// Scalar full-chain objective and its gradient wrt all decoder weights, for
/// gradient checks: decode, activate, pose, render every view and apply the
/// image loss.
pub fn full_chain_loss(
    avatar: &Avatar,
    dec: &Decoders,
    frame: &FrameData,
    weights: &LossWeights,
    opts: &RenderOptions,
    background: [f64; 3],
) -> Result<(f64, DecoderGrads)> {
    let (fwd, maps) = decode_to_maps(avatar, dec, &frame.input, &frame.root)?;
    let splats = avatar.pose(&frame.placement, &maps)?;
    let ph = photometric(&splats, &frame.views, background, opts, weights)?;
    let gmaps = pose_gaussians_backward(&avatar.table, &frame.placement.transforms, &ph.grads);
    let mut grads = DecoderGrads::zeros(dec);
    maps_backward(avatar, dec, &fwd, &gmaps, &mut grads)?;
    Ok((ph.metrics.loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_frames_spread_and_clamp() {
        assert_eq!(even_frames(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(even_frames(8, 1), vec![0]);
        assert_eq!(even_frames(3, 5), vec![0, 1, 2]);
    }

    #[test]
    fn step_sample_is_a_function_of_seed_and_step() {
        assert_eq!(step_sample(3, 17, 8, 4, 2), step_sample(3, 17, 8, 4, 2));
        let (_, v) = step_sample(3, 17, 8, 4, 9);
        assert_eq!(v, vec![0, 1, 2, 3]);
        let draws: std::collections::HashSet<usize> = (0..200).map(|s| step_sample(1, s, 8, 4, 4).0).collect();
        assert_eq!(draws.len(), 8);
    }

    #[test]
    fn log_rows_have_six_columns() {
        let row = LogRow {
            step: 3,
            metrics: Metrics {
                loss: 0.5,
                l1: 0.1,
                ssim: 0.9,
                psnr: 20.0,
            },
            wall_ms: 1.25,
        };
        assert_eq!(row.csv().split(',').count(), LOG_HEADER.split(',').count());
    }
}
