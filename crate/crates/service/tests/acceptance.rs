//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 7`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splat_avatar::atlas::build_texel_table;
use splat_avatar::avatar::{Avatar, SplatFrame, SplatGrads};
use splat_avatar::image::Image;
use splat_avatar::io::{build_synthetic, load_scene, make_synthetic_scene, read_param_maps, render_ground_truth, SyntheticSpec};
use splat_avatar::loss::loss_main;
use splat_avatar::math::{Quaternion, ShCoeffs, Vec3};
use splat_avatar::nn::{DecoderConfig, Decoders, Precision};
use splat_avatar::render::{render, render_backward, render_reference, Camera, RenderOptions};
use splat_avatar::rig::{GraphFrame, PoseFrame};
use splat_avatar::train::*;

const C1_COMPONENTS: usize = 3 + 4 + 3 + 1 + 48 + 3;
const C1_BUDGET_S: f64 = 1.0;

const C2_POSES: usize = 100;
const C2_BUDGET_S: f64 = 10.0;

const C3_SCENES: usize = 50;
const C3_MAX_SPLATS: usize = 200;
const C3_SIZE: usize = 64;
const C3_MAX_ABS: f64 = 1e-5;
const C3_BUDGET_S: f64 = 60.0;

const FD_STEP: f64 = 1e-5;
const FD_TIGHT: f64 = 1e-4;
const FD_TIGHT_SHARE: f64 = 0.99;
const FD_LOOSE: f64 = 1e-3;
const C4_CHAIN_RESOLUTION: usize = 16;
const C4_BUDGET_S: f64 = 300.0;

const C5_PSNR: f64 = 35.0;
const C5_STEPS: usize = 2000;
const C5_BUDGET_S: f64 = 600.0;

const C6_PSNR: f64 = 30.0;
const C6_SSIM: f64 = 0.95;
const C6_STEPS: usize = 5000;
const C6_EVAL_EVERY: usize = 500;
const C6_BUDGET_S: f64 = 1800.0;

const C7_PAIRS: usize = 10;
const C7_ABS: f64 = 1e-9;
const C7_BUDGET_S: f64 = 5.0;

const C8_TRIALS: usize = 200;
const C8_ABS: f64 = 1e-9;
const C8_BUDGET_S: f64 = 30.0;

const C9_FRAMES: usize = 3;
const C9_RESOLUTIONS: [usize; 2] = [128, 256];
const C9_OVERHEAD_SHARE: f64 = 0.05;
const C9_BUDGET_S: f64 = 120.0;

const C10_STEPS: &str = "30";

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn within_budget(start: Instant, budget: f64) -> (bool, String) {
    let s = start.elapsed().as_secs_f64();
    (s < budget, format!("{s:.1} s of {budget:.0} s"))
}

struct Synthetic {
    scene: splat_avatar::io::Scene,
    avatar: Avatar,
    frames: Vec<FrameData>,
}

struct Ctx {
    tmp: tempfile::TempDir,
    synthetic: Option<Synthetic>,
    snapshots: Option<(Vec<PseudoGtSnapshot>, f64)>,
}

impl Ctx {
    fn synthetic(&mut self) -> &Synthetic {
        if self.synthetic.is_none() {
            let dir = self.tmp.path().join("synthetic");
            let scene = make_synthetic_scene(&SyntheticSpec::default(), &dir).unwrap();
            let avatar = Avatar::new(scene.rig.clone(), scene.manifest.resolution).unwrap();
            let all: Vec<usize> = (0..scene.frame_count()).collect();
            let frames = load_frames(&scene, &avatar, &all).unwrap();
            self.synthetic = Some(Synthetic { scene, avatar, frames });
        }
        self.synthetic.as_ref().unwrap()
    }

    /// Per-frame fits of the synthetic scene and the seconds they took.
    fn snapshots(&mut self) -> (Vec<PseudoGtSnapshot>, f64) {
        if self.snapshots.is_none() {
            let bg = self.synthetic().scene.manifest.background;
            let s = self.synthetic.as_ref().unwrap();
            let start = Instant::now();
            let cfg = FitConfig {
                steps: C5_STEPS,
                target_psnr: Some(C5_PSNR),
                background: bg,
                ..FitConfig::default()
            };
            let snaps = fit_pseudo_gt(&s.avatar, &s.frames, &cfg).unwrap();
            self.snapshots = Some((snaps, start.elapsed().as_secs_f64()));
        }
        self.snapshots.clone().unwrap()
    }
}

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/demo")
}

fn random_unit(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return Quaternion::from_array(q.map(|v| v / n));
        }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r))
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> PoseFrame {
    PoseFrame {
        frame_id: 0,
        root_translation: random_vec(rng, 1.0),
        rotations: (0..joints).map(|_| random_unit(rng)).collect(),
    }
}

fn random_graph_frame(rng: &mut ChaCha8Rng, rest: &GraphFrame) -> GraphFrame {
    let mut g = rest.clone();
    g.angles.iter_mut().for_each(|a| *a = random_vec(rng, 0.3));
    g.translations.iter_mut().for_each(|t| *t = random_vec(rng, 0.05));
    g.displacements.iter_mut().for_each(|d| *d = random_vec(rng, 0.01));
    g
}

// 1. Every covered texel carries base(3) offset(3) rotation(4) scale(3)
// opacity(1) SH(48).
fn c1(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let scene = load_scene(&demo_dir()).unwrap();
    let avatar = Avatar::new(scene.rig.clone(), scene.manifest.resolution).unwrap();
    let (maps, mask) = read_param_maps(&scene.gt_checkpoint_path().unwrap()).unwrap();
    let rest = scene
        .rig
        .evaluate(&scene.rig.skeleton.rest_pose(), &scene.rig.rest_graph_frame())
        .unwrap();
    let r = avatar.resolution();
    let n = avatar.gaussian_count();
    let mut bad = 0;
    for e in avatar.table.entries() {
        let t = e.texel_index(r);
        let base = avatar.table.interpolate(e, &rest.canonical);
        let v = maps.parameter_vector(t, &base);
        let parts: [&[f64]; 6] = [
            base.as_slice(),
            maps.offset[t].as_slice(),
            &maps.rotation[t].to_array(),
            maps.scale[t].as_slice(),
            &[maps.opacity[t]],
            &maps.sh[t].0,
        ];
        let expected: Vec<f64> = parts.concat();
        if v.len() != C1_COMPONENTS || v.as_slice() != expected.as_slice() {
            bad += 1;
        }
    }
    let covered = mask.iter().filter(|m| **m).count();
    let (fast, t) = within_budget(start, C1_BUDGET_S);
    outcome(
        bad == 0 && covered == n && n > 0 && fast,
        format!("{n} texels x {C1_COMPONENTS} components, {bad} mismatches, {t}"),
    )
}

// 2. N does not depend on the pose.
fn c2(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let scene = load_scene(&demo_dir()).unwrap();
    let avatar = Avatar::new(scene.rig.clone(), scene.manifest.resolution).unwrap();
    let (maps, _) = read_param_maps(&scene.gt_checkpoint_path().unwrap()).unwrap();
    let n = avatar.gaussian_count();
    let rest = scene.rig.rest_graph_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = std::collections::BTreeSet::new();
    let mut finite = true;
    for _ in 0..C2_POSES {
        let pose = random_pose(&mut rng, scene.rig.skeleton.len());
        let graph = random_graph_frame(&mut rng, &rest);
        let frame = scene.rig.evaluate(&pose, &graph).unwrap();
        let splats = avatar.pose(&avatar.placement(&frame).unwrap(), &maps).unwrap();
        counts.insert(splats.len());
        finite &= splats.positions.iter().all(|p| p.iter().all(|v| v.is_finite()));
    }
    let (fast, t) = within_budget(start, C2_BUDGET_S);
    outcome(
        counts.len() == 1 && counts.contains(&n) && finite && fast,
        format!("{C2_POSES} poses, splat counts {counts:?} (table N = {n}), {t}"),
    )
}

fn random_splats(rng: &mut ChaCha8Rng, n: usize, depth_span: f64) -> SplatFrame {
    // Depths are jittered points of an even grid, so no two coincide.
    let mut depths: Vec<f64> = (0..n)
        .map(|k| -depth_span + 2.0 * depth_span * (k as f64 + 0.5 + rng.gen_range(-0.3..0.3)) / n as f64)
        .collect();
    for k in (1..n).rev() {
        depths.swap(k, rng.gen_range(0..=k));
    }
    let mut f = SplatFrame::with_capacity(n);
    for z in depths {
        let mut sh = ShCoeffs::default();
        for (k, v) in sh.0.iter_mut().enumerate() {
            *v = if k < 3 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(-0.2..0.2) };
        }
        f.push(
            Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), z),
            random_unit(rng),
            Vec3::new(rng.gen_range(0.01..0.12), rng.gen_range(0.01..0.12), rng.gen_range(0.01..0.12)),
            rng.gen_range(0.05..0.95),
            sh,
        );
    }
    f
}

// 3. Tiled renderer against the per-pixel reference.
fn c3(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = Camera::look_at(
        &Vec3::new(0.0, 0.0, -4.0),
        &Vec3::zeros(),
        &Vec3::new(0.0, -1.0, 0.0),
        70.0,
        C3_SIZE,
        C3_SIZE,
    )
    .unwrap();
    let exact = RenderOptions::without_early_stop();
    let (mut worst, mut worst_default) = (0.0f64, 0.0f64);
    let (mut covered, mut pixels) = (0usize, 0usize);
    for _ in 0..C3_SCENES {
        let n = rng.gen_range(1..=C3_MAX_SPLATS);
        let scene = random_splats(&mut rng, n, 1.0);
        let bg = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let out = render(&scene, &cam, bg, &exact, false).unwrap();
        covered += out.transmittance.iter().filter(|t| **t < 0.99).count();
        pixels += out.transmittance.len();
        let a = out.image;
        let b = render_reference(&scene, &cam, bg, &exact).unwrap().image;
        worst = worst.max(a.max_abs_diff(&b).unwrap());
        let d = render(&scene, &cam, bg, &RenderOptions::default(), false).unwrap().image;
        let e = render_reference(&scene, &cam, bg, &RenderOptions::default()).unwrap().image;
        worst_default = worst_default.max(d.max_abs_diff(&e).unwrap());
    }
    let (fast, t) = within_budget(start, C3_BUDGET_S);
    outcome(
        worst <= C3_MAX_ABS && fast,
        format!(
            "{C3_SCENES} scenes ({:.0}% of pixels covered), max |tiled - reference| {worst:.2e} (limit {C3_MAX_ABS:.0e}); with early stop {worst_default:.2e}; {t}",
            100.0 * covered as f64 / pixels as f64
        ),
    )
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(a.abs()).max(1e-6)
}

struct FdStats {
    count: usize,
    tight: usize,
    worst: f64,
}

impl FdStats {
    fn new(errs: &[f64]) -> Self {
        Self {
            count: errs.len(),
            tight: errs.iter().filter(|e| **e <= FD_TIGHT).count(),
            worst: errs.iter().copied().fold(0.0, f64::max),
        }
    }

    fn ok(&self) -> bool {
        self.count > 0 && self.tight as f64 >= FD_TIGHT_SHARE * self.count as f64 && self.worst <= FD_LOOSE
    }

    fn describe(&self, name: &str) -> String {
        format!("{name} {}/{} tight, worst {:.1e}", self.tight, self.count, self.worst)
    }
}

const SPLAT_PARAMS: usize = 59;

fn splat_param(f: &mut SplatFrame, i: usize, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut f.positions[i][k],
        3 => &mut f.rotations[i].w,
        4 => &mut f.rotations[i].x,
        5 => &mut f.rotations[i].y,
        6 => &mut f.rotations[i].z,
        7..=9 => &mut f.scales[i][k - 7],
        10 => &mut f.opacities[i],
        _ => &mut f.sh[i].0[k - 11],
    }
}

fn splat_grad(g: &SplatGrads, i: usize, k: usize) -> f64 {
    match k {
        0..=2 => g.positions[i][k],
        3..=6 => g.rotations[i].to_array()[k - 3],
        7..=9 => g.scales[i][k - 7],
        10 => g.opacities[i],
        _ => g.sh[i].0[k - 11],
    }
}

fn rasterizer_fd(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let opts = RenderOptions::exhaustive();
    let mut errs = Vec::new();
    for _ in 0..4 {
        let dir = random_vec(rng, 1.0).normalize();
        let cam = Camera::look_at(&(dir * 2.5), &Vec3::zeros(), &Vec3::new(0.0, 1.0, 0.1), 12.0, 8, 8).unwrap();
        let mut scene = random_splats(rng, 3, 0.3);
        for p in scene.positions.iter_mut() {
            *p = random_vec(rng, 0.3);
        }
        for s in scene.scales.iter_mut() {
            *s = Vec3::new(rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3));
        }
        let bg = [0.1, 0.2, 0.3];
        let weights: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |f: &SplatFrame| -> f64 {
            let img = render(f, &cam, bg, &opts, false).unwrap().image;
            img.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let out = render(&scene, &cam, bg, &opts, true).unwrap();
        let g = render_backward(&scene, &out, &Image::from_raw(8, 8, weights.clone()).unwrap()).unwrap();
        for i in 0..3 {
            for k in 0..SPLAT_PARAMS {
                let mut p = scene.clone();
                *splat_param(&mut p, i, k) += FD_STEP;
                let mut m = scene.clone();
                *splat_param(&mut m, i, k) -= FD_STEP;
                let numeric = (objective(&p) - objective(&m)) / (2.0 * FD_STEP);
                errs.push(rel_err(splat_grad(&g, i, k), numeric));
            }
        }
    }
    errs
}

fn loss_fd(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (9, 7);
    let target = Image::from_raw(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    // Keep every residual away from zero, where L1 has a kink.
    let pred = Image::from_raw(
        w,
        h,
        target
            .data()
            .iter()
            .map(|t| t + rng.gen_range(0.02..0.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
    )
    .unwrap();
    let weights = Default::default();
    let g = loss_main(&target, &pred, &weights).unwrap().grad;
    (0..w * h * 3)
        .map(|k| {
            let at = |d: f64| {
                let mut p = pred.clone();
                p.data_mut()[k] += d;
                loss_main(&target, &p, &weights).unwrap().total
            };
            rel_err(g.data()[k], (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP))
        })
        .collect()
}

fn chain_fd(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spec = SyntheticSpec {
        cameras: 2,
        frames: 1,
        width: 16,
        height: 16,
        resolution: C4_CHAIN_RESOLUTION,
        seed: 7,
    };
    let scene = build_synthetic(&spec).unwrap();
    let images = render_ground_truth(&scene).unwrap();
    let avatar = Avatar::new(scene.rig.clone(), spec.resolution).unwrap();
    let views = scene
        .cameras
        .iter()
        .zip(&images[0])
        .map(|(c, i)| View {
            camera: c.clone(),
            image: i.clone(),
        })
        .collect();
    let frame = prepare_frame(&avatar, &scene.poses[0], &scene.graph_frames[0], views).unwrap();
    let mut dec = Decoders::new(DecoderConfig::desk(), 4).unwrap();
    for p in dec
        .geo
        .params_mut()
        .iter_mut()
        .chain(dec.app.params_mut())
        .chain(dec.mlp.params_mut())
    {
        *p += rng.gen_range(-0.02..0.02);
    }
    let opts = RenderOptions::exhaustive();
    let weights = Default::default();
    let (_, g) = full_chain_loss(&avatar, &dec, &frame, &weights, &opts, [0.0; 3]).unwrap();
    let mut errs = Vec::new();
    for k in 0..60 {
        let net = k % 3;
        let len = [g.geo.len(), g.app.len(), g.mlp.len()][net];
        let i = rng.gen_range(0..len);
        let at = |d: f64| {
            let mut x = dec.clone();
            match net {
                0 => x.geo.params_mut()[i] += d,
                1 => x.app.params_mut()[i] += d,
                _ => x.mlp.params_mut()[i] += d,
            }
            full_chain_loss(&avatar, &x, &frame, &weights, &opts, [0.0; 3]).unwrap().0
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        errs.push(rel_err([&g.geo, &g.app, &g.mlp][net][i], numeric));
    }
    errs
}

// 4. Analytic gradients against central differences.
fn c4(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = FdStats::new(&rasterizer_fd(&mut rng));
    let b = FdStats::new(&loss_fd(&mut rng));
    let c = FdStats::new(&chain_fd(&mut rng));
    let (fast, t) = within_budget(start, C4_BUDGET_S);
    outcome(
        a.ok() && b.ok() && c.ok() && fast,
        format!(
            "{}; {}; {}; {t}",
            a.describe("rasterizer"),
            b.describe("loss"),
            c.describe("full chain")
        ),
    )
}

fn mean_psnr(avatar: &Avatar, frame: &FrameData, maps: &splat_avatar::avatar::GaussianParamMaps, bg: [f64; 3]) -> f64 {
    let splats = avatar.pose(&frame.placement, maps).unwrap();
    let mut total = 0.0;
    for v in &frame.views {
        let img = render(&splats, &v.camera, bg, &RenderOptions::default(), false).unwrap().image;
        let mse = img
            .data()
            .iter()
            .zip(v.image.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / img.data().len() as f64;
        total += (10.0 * (1.0 / mse).log10()).min(PSNR_CAP);
    }
    total / frame.views.len() as f64
}

// 5. Frozen-position fitting reaches the bar on every synthetic frame.
fn c5(ctx: &mut Ctx) -> Outcome {
    let (snaps, secs) = ctx.snapshots();
    let s = ctx.synthetic();
    let bg = s.scene.manifest.background;
    let psnrs: Vec<f64> = s
        .frames
        .iter()
        .zip(&snaps)
        .map(|(f, snap)| mean_psnr(&s.avatar, f, &snap.maps, bg))
        .collect();
    let min = psnrs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_steps = snaps.iter().map(|s| s.steps).max().unwrap_or(0);
    let ok = snaps.len() == 8 && min >= C5_PSNR && max_steps <= C5_STEPS && secs < C5_BUDGET_S;
    outcome(
        ok,
        format!(
            "{} frames, min PSNR {min:.2} dB (bar {C5_PSNR}), at most {max_steps} of {C5_STEPS} steps, {secs:.1} s of {C5_BUDGET_S:.0} s",
            snaps.len()
        ),
    )
}

// 6. Pretraining on the snapshots, then whole-chain training.
fn c6(ctx: &mut Ctx) -> Outcome {
    let (snaps, fit_secs) = ctx.snapshots();
    let s = ctx.synthetic();
    let start = Instant::now();
    let samples: Vec<PretrainSample> = s
        .frames
        .iter()
        .zip(&snaps)
        .map(|(f, snap)| PretrainSample {
            input: f.input.clone(),
            root: f.root,
            target: snap.maps.clone(),
        })
        .collect();
    let mut dec = Decoders::new(DecoderConfig::desk(), 0).unwrap();
    pretrain_decoders(&s.avatar, &mut dec, &samples, &PretrainConfig::default()).unwrap();
    let mut state = TrainState::new(dec);
    let bg = s.scene.manifest.background;
    let mut metrics = Vec::new();
    let mut reached = false;
    for steps in (C6_EVAL_EVERY..=C6_STEPS).step_by(C6_EVAL_EVERY) {
        let cfg = TrainConfig {
            steps,
            background: bg,
            ..TrainConfig::default()
        };
        train_full(&s.avatar, &mut state, &s.frames, &cfg, |_| {}).unwrap();
        metrics = evaluate_decoders(&s.avatar, &state.decoders, &s.frames, bg, &RenderOptions::default()).unwrap();
        if metrics.iter().all(|m| m.psnr >= C6_PSNR && m.ssim >= C6_SSIM) {
            reached = true;
            break;
        }
    }
    let min_psnr = metrics.iter().map(|m| m.psnr).fold(f64::INFINITY, f64::min);
    let min_ssim = metrics.iter().map(|m| m.ssim).fold(f64::INFINITY, f64::min);
    let secs = fit_secs + start.elapsed().as_secs_f64();
    outcome(
        reached && metrics.len() == 8 && secs < C6_BUDGET_S,
        format!(
            "after {} steps min PSNR {min_psnr:.2} dB (bar {C6_PSNR}), min SSIM {min_ssim:.4} (bar {C6_SSIM}), {secs:.1} s of {C6_BUDGET_S:.0} s including fitting",
            state.step
        ),
    )
}

/// Plain SSIM: Gaussian window (11 taps, sigma 1.5) truncated at the
/// borders and renormalized over the pixels it covers, per channel.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width() as i64, a.height() as i64);
    let g = |d: i64| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (mut sw, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5i64 {
                    for dx in -5..=5i64 {
                        let (u, v) = (x + dx, y + dy);
                        if u < 0 || v < 0 || u >= w || v >= h {
                            continue;
                        }
                        let k = g(dx) * g(dy);
                        let p = a.pixel(u as usize, v as usize)[ch];
                        let q = b.pixel(u as usize, v as usize)[ch];
                        sw += k;
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (mx, my) = (mx / sw, my / sw);
                let vx = xx / sw - mx * mx;
                let vy = yy / sw - my * my;
                let cxy = xy / sw - mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

// 7. Default loss weights.
fn c7(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..C7_PAIRS {
        let (w, h) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let a = Image::from_raw(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = (*v + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0);
        }
        let l1 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / (w * h * 3) as f64;
        let expected = 0.1 * l1 + 0.9 * (1.0 - ssim_oracle(&a, &b));
        let got = loss_main(&a, &b, &Default::default()).unwrap().total;
        worst = worst.max((got - expected).abs());
    }
    let (fast, t) = within_budget(start, C7_BUDGET_S);
    outcome(
        worst <= C7_ABS && fast,
        format!("{C7_PAIRS} pairs, max |loss - 0.1 L1 - 0.9 (1 - SSIM)| {worst:.1e} (limit {C7_ABS:.0e}), {t}"),
    )
}

fn nq(q: &Quaternion) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q.w, q.x, q.y, q.z))
}

fn from_nq(q: &UnitQuaternion<f64>) -> Quaternion {
    Quaternion::new(q.w, q.i, q.j, q.k)
}

fn max_dist(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

// 8. Rig invariants.
fn c8(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let scene = load_scene(&demo_dir()).unwrap();
    let rig = &scene.rig;
    let joints = rig.skeleton.len();
    let rest_graph = rig.rest_graph_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut identity, mut rigid, mut graph_rest, mut weights) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let root = &rig.skeleton.joints()[0];
    let (root_q, root_t) = (nq(&root.rest_rotation), Vector3::from(root.rest_translation));
    for _ in 0..C8_TRIALS {
        // Identity pose leaves the (deformed) canonical mesh in place.
        let g = random_graph_frame(&mut rng, &rest_graph);
        let f = rig.evaluate(&PoseFrame::identity(0, joints), &g).unwrap();
        identity = identity.max(max_dist(&f.posed, &f.canonical));

        // A global rigid motion folded into the root moves the skin rigidly:
        // root' = G o T(t) o rest o R(q)  =>  q' = rest_q^-1 G_q rest_q q,
        // t' = G_q (t + rest_t) + G_t - rest_t.
        let pose = random_pose(&mut rng, joints);
        let (gq, gt) = (nq(&random_unit(&mut rng)), Vector3::from(random_vec(&mut rng, 2.0)));
        let mut moved = pose.clone();
        moved.rotations[0] = from_nq(&(root_q.inverse() * gq * root_q * nq(&pose.rotations[0])));
        moved.root_translation = gq * (Vector3::from(pose.root_translation) + root_t) + gt - root_t;
        let a = rig.evaluate(&pose, &g).unwrap().posed;
        let b = rig.evaluate(&moved, &g).unwrap().posed;
        let expected: Vec<Vec3> = a.iter().map(|p| gq * p + gt).collect();
        rigid = rigid.max(max_dist(&b, &expected));

        // The rest graph frame leaves the template untouched.
        let f = rig.evaluate(&pose, &rest_graph).unwrap();
        graph_rest = graph_rest.max(max_dist(&f.canonical, &rig.mesh.positions));

        // Texel influences are convex combinations of vertex weights.
        let table = build_texel_table(&rig.mesh, rng.gen_range(4..=48)).unwrap();
        for e in table.entries() {
            let s: f64 = e.skin.iter().map(|(_, w)| w).sum();
            weights = weights.max((s - 1.0).abs());
            if e.skin.iter().any(|(_, w)| *w < 0.0) {
                weights = f64::INFINITY;
            }
        }
    }
    for w in &rig.mesh.skin_weights {
        weights = weights.max((w.iter().map(|(_, v)| v).sum::<f64>() - 1.0).abs());
    }
    let (fast, t) = within_budget(start, C8_BUDGET_S);
    let worst = identity.max(rigid).max(graph_rest).max(weights);
    outcome(
        worst <= C8_ABS && fast,
        format!(
            "{C8_TRIALS} trials each: identity {identity:.1e}, rigid {rigid:.1e}, graph rest {graph_rest:.1e}, weight sums {weights:.1e} (limit {C8_ABS:.0e}), {t}"
        ),
    )
}

fn cli(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splat-avatar"));
    c.args(args);
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("runs the CLI")
}

/// The timing row and the printed overhead of a benchmark table.
fn table_row(table: &str) -> Option<(Vec<f64>, f64)> {
    let mut lines = table.lines();
    lines.find(|l| l.split_whitespace().collect::<Vec<_>>() == ["Stg.1", "Stg.2", "Stg.3", "Stg.4", "Time", "FPS"])?;
    let v: Vec<f64> = lines.next()?.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
    let overhead: f64 = lines
        .next()?
        .strip_prefix("overhead ")?
        .strip_suffix(" ms")?
        .parse()
        .ok()?;
    (v.len() == 6).then_some((v, overhead))
}

// 9. Benchmark table, and stage 3 grows with the texel resolution.
fn c9(ctx: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let weights = ctx.tmp.path().join("bench.ashw");
    Decoders::new(DecoderConfig::desk(), 0)
        .unwrap()
        .save(&weights, Precision::F32)
        .unwrap();
    let demo = demo_dir();
    let mut stg3 = Vec::new();
    let mut notes = Vec::new();
    let mut formatted = true;
    for r in C9_RESOLUTIONS {
        let out = cli(
            &[
                "benchmark",
                "--scene",
                demo.to_str().unwrap(),
                "--checkpoint",
                weights.to_str().unwrap(),
                "--frames",
                &C9_FRAMES.to_string(),
                "--resolution",
                &r.to_string(),
            ],
            &[],
        );
        let text = String::from_utf8_lossy(&out.stdout);
        match table_row(&text) {
            Some((row, overhead)) if out.status.success() => {
                let staged: f64 = row[..4].iter().sum();
                let share = (row[4] - staged) / row[4];
                let consistent = (staged + overhead - row[4]).abs() < 0.01 && (1000.0 / row[4] - row[5]).abs() < 0.01;
                formatted &= consistent && share.abs() <= C9_OVERHEAD_SHARE;
                stg3.push(row[2]);
                notes.push(format!("R={r} Stg.3 {:.1} ms, unattributed {:.1}%", row[2], 100.0 * share));
            }
            _ => {
                formatted = false;
                notes.push(format!("R={r}: no table ({})", String::from_utf8_lossy(&out.stderr).trim()));
            }
        }
    }
    let increasing = stg3.len() == 2 && stg3[1] > stg3[0];
    let (fast, t) = within_budget(start, C9_BUDGET_S);
    outcome(formatted && increasing && fast, format!("{}; {t}", notes.join("; ")))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Metric log without the wall-clock column.
fn log_without_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

// 10. Bundle generation and single-threaded training reproduce bit for bit.
fn c10(ctx: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let root = ctx.tmp.path().join("c10");
    let st = [("ASH_THREADS", "1")];
    let mut runs = Vec::new();
    for k in 0..2 {
        let d = root.join(format!("run{k}"));
        let bundle = d.join("bundle");
        let (fit, weights, state, log) = (d.join("fit"), d.join("w.ashw"), d.join("state.ashw"), d.join("log.csv"));
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let steps: &[(&str, Vec<String>)] = &[
            ("make-synthetic", vec!["--out".into(), s(&bundle), "--seed".into(), "7".into()]),
            (
                "fit",
                vec!["--scene".into(), s(&bundle), "--out".into(), s(&fit), "--steps".into(), C10_STEPS.into()],
            ),
            (
                "pretrain",
                vec![
                    "--scene".into(),
                    s(&bundle),
                    "--snapshots".into(),
                    s(&fit),
                    "--out".into(),
                    s(&weights),
                    "--steps".into(),
                    C10_STEPS.into(),
                ],
            ),
            (
                "train",
                vec![
                    "--scene".into(),
                    s(&bundle),
                    "--init".into(),
                    s(&weights),
                    "--out".into(),
                    s(&state),
                    "--log".into(),
                    s(&log),
                    "--steps".into(),
                    C10_STEPS.into(),
                    "--seed".into(),
                    "3".into(),
                ],
            ),
        ];
        for (cmd, args) in steps {
            let mut all = vec![*cmd];
            all.extend(args.iter().map(String::as_str));
            let out = cli(&all, &st);
            if !out.status.success() {
                return outcome(false, format!("{cmd} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
            }
        }
        let mut files = tree(&d);
        files.remove("log.csv");
        runs.push((files, log_without_time(&log)));
    }
    let differing: Vec<&String> = runs[0]
        .0
        .iter()
        .filter(|(k, v)| runs[1].0.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_keys = runs[0].0.keys().eq(runs[1].0.keys());
    let same_log = runs[0].1 == runs[1].1 && runs[0].1.len() > 1;
    let ok = differing.is_empty() && same_keys && same_log;
    outcome(
        ok,
        format!(
            "{} files compared (bundle, snapshots, weights, training state, records), {} differ; metric log {}; {:.1} s",
            runs[0].0.len(),
            differing.len(),
            if same_log { "identical" } else { "differs" },
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn(&mut Ctx) -> Outcome); 10] = [
        (1, "parameter-vector contract", c1),
        (2, "fixed Gaussian count", c2),
        (3, "tiled renderer equals reference", c3),
        (4, "gradient suite", c4),
        (5, "warmup self-consistency", c5),
        (6, "end-to-end overfit", c6),
        (7, "loss-weight conformance", c7),
        (8, "rig invariants", c8),
        (9, "benchmark format and scaling", c9),
        (10, "determinism", c10),
    ];
    let mut ctx = Ctx {
        tmp: tempfile::tempdir().unwrap(),
        synthetic: None,
        snapshots: None,
    };
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let o = catch_unwind(AssertUnwindSafe(|| run(&mut ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!("[{}] criterion {n} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        if !o.ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
