//! Gaussian splat rasterization.
//!
//! Splats are projected with the local affine approximation of the
//! perspective map, sorted once globally by `(depth, index)` and composited
//! front to back. The production path bins splats into 16x16 tiles; the
//! reference path visits every splat at every pixel.

use rayon::prelude::*;

use crate::avatar::{SplatFrame, SplatGrads};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{
    covariance_from_qs, quat_to_rotmat, quat_to_rotmat_backward, sh_basis, sh_basis_grad, sh_eval_linear, Mat3,
    Quaternion, Vec3, SH_BASES,
};

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every projected covariance (pixels²).
pub const COV2D_DILATION: f64 = 0.3;

type Mat2x3 = nalgebra::Matrix2x3<f64>;
type Mat2 = nalgebra::Matrix2<f64>;

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.fx > 0.0 && self.fy > 0.0) {
            problems.push(format!("focal lengths must be positive (fx {}, fy {})", self.fx, self.fy));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            problems.push(format!("need 0 < near < far (near {}, far {})", self.near, self.far));
        }
        if self.width == 0 || self.height == 0 {
            problems.push("image size must be nonzero".into());
        }
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite())
            || (r * r.transpose() - Mat3::identity()).abs().max() > 1e-6
            || (r.determinant() - 1.0).abs() > 1e-6
        {
            problems.push("world-to-camera rotation is not orthonormal".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Builds from a row-major 3x3 `K` and a row-major 4x4 world-to-camera
    /// matrix.
    pub fn from_matrices(k: &[f64; 9], w2c: &[f64; 16], width: usize, height: usize) -> Result<Self> {
        if k[1].abs() > 1e-12 || k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0 || k[8] != 1.0 {
            return Err(Error::invalid("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]"));
        }
        if w2c[12] != 0.0 || w2c[13] != 0.0 || w2c[14] != 0.0 || w2c[15] != 1.0 {
            return Err(Error::invalid("world-to-camera bottom row must be [0,0,0,1]"));
        }
        let cam = Camera {
            fx: k[0],
            fy: k[4],
            cx: k[2],
            cy: k[5],
            rotation: Mat3::new(w2c[0], w2c[1], w2c[2], w2c[4], w2c[5], w2c[6], w2c[8], w2c[9], w2c[10]),
            translation: Vec3::new(w2c[3], w2c[7], w2c[11]),
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn intrinsics_matrix(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn world_to_camera_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera at `eye` looking at `target`; the principal point is the
    /// image center.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::invalid("eye equals target"))?;
        let right = forward
            .cross(up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("up vector parallel to view direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let cam = Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation: -(rotation * eye),
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    fn jacobian(&self, t: &Vec3) -> Mat2x3 {
        let iz = 1.0 / t.z;
        Mat2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * t.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * t.y * iz * iz,
        )
    }
}

/// Knobs that trade exactness for speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Contributions with `α' <` this are skipped.
    pub alpha_threshold: f64,
    /// The tiled path stops a pixel once transmittance would drop below
    /// this. The reference path ignores it.
    pub transmittance_min: f64,
    /// Half-width of the screen footprint in standard deviations.
    pub footprint_sigma: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_threshold: 1.0 / 255.0,
            transmittance_min: 1e-4,
            footprint_sigma: 3.0,
        }
    }
}

impl RenderOptions {
    /// Default coverage rules without early termination.
    pub fn without_early_stop() -> Self {
        Self {
            transmittance_min: 0.0,
            ..Self::default()
        }
    }

    /// Every splat touches every pixel. Makes the image a smooth function of
    /// the splat parameters.
    pub fn exhaustive() -> Self {
        Self {
            alpha_threshold: 0.0,
            transmittance_min: 0.0,
            footprint_sigma: 1e6,
        }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenGaussian {
    /// Pixel coordinates; pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
    pub mean: [f64; 2],
    /// Dilated covariance `(xx, xy, yy)`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Half extents of the footprint box.
    pub extent: [f64; 2],
}

impl ScreenGaussian {
    fn covers(&self, px: f64, py: f64) -> bool {
        (px - self.mean[0]).abs() <= self.extent[0] && (py - self.mean[1]).abs() <= self.extent[1]
    }

    /// `-½ dᵀ Σ'⁻¹ d` with `d = p - mean`.
    fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy, dx, dy)
    }

    fn pixel_range(&self, width: usize, height: usize) -> Option<([usize; 2], [usize; 2])> {
        let lo_x = (self.mean[0] - self.extent[0] - 0.5).ceil().max(0.0);
        let hi_x = (self.mean[0] + self.extent[0] - 0.5).floor().min(width as f64 - 1.0);
        let lo_y = (self.mean[1] - self.extent[1] - 0.5).ceil().max(0.0);
        let hi_y = (self.mean[1] + self.extent[1] - 0.5).floor().min(height as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            return None;
        }
        Some(([lo_x as usize, hi_x as usize], [lo_y as usize, hi_y as usize]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(ScreenGaussian),
    Culled,
    /// Projected covariance not invertible.
    Singular,
}

/// Projects a world-space Gaussian to the image plane.
pub fn project_gaussian(mean: &Vec3, cov: &Mat3, cam: &Camera, footprint_sigma: f64) -> Projection {
    let t = cam.to_camera(mean);
    if !(t.z > cam.near && t.z < cam.far) {
        return Projection::Culled;
    }
    let m = cam.jacobian(&t) * cam.rotation;
    let c2 = m * cov * m.transpose();
    let cov2 = [c2[(0, 0)] + COV2D_DILATION, 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)] + COV2D_DILATION];
    let det = cov2[0] * cov2[2] - cov2[1] * cov2[1];
    if !(det > 0.0) || !det.is_finite() {
        return Projection::Singular;
    }
    let conic = [cov2[2] / det, -cov2[1] / det, cov2[0] / det];
    let screen = ScreenGaussian {
        mean: [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy],
        cov: cov2,
        conic,
        depth: t.z,
        extent: [footprint_sigma * cov2[0].sqrt(), footprint_sigma * cov2[2].sqrt()],
    };
    if screen.pixel_range(cam.width, cam.height).is_none() {
        return Projection::Culled;
    }
    Projection::Visible(screen)
}

/// A projected, colored splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub index: usize,
    pub screen: ScreenGaussian,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Counts of splats that did not reach the compositor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub culled: usize,
    pub singular: usize,
    pub invalid: usize,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct RenderState {
    camera: Camera,
    background: [f64; 3],
    options: RenderOptions,
    splat_count: usize,
    /// Visible splats in compositing order.
    sorted: Vec<Splat2D>,
    /// Per tile, positions into `sorted`.
    tiles: Vec<Vec<u32>>,
    /// Per sorted splat: colors clamped at zero, per channel.
    clamped: Vec<[bool; 3]>,
}

#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: Image,
    /// Residual transmittance per pixel.
    pub transmittance: Vec<f64>,
    pub diagnostics: RenderDiagnostics,
    state: Option<RenderState>,
}

impl RenderedImage {
    pub fn has_state(&self) -> bool {
        self.state.is_some()
    }

    pub fn drop_state(&mut self) {
        self.state = None;
    }
}

struct Prepared {
    sorted: Vec<Splat2D>,
    clamped: Vec<[bool; 3]>,
    diagnostics: RenderDiagnostics,
}

fn prepare(splats: &SplatFrame, cam: &Camera, opts: &RenderOptions) -> Prepared {
    let center = cam.center();
    let projected: Vec<std::result::Result<(Splat2D, [bool; 3]), u8>> = (0..splats.len())
        .into_par_iter()
        .map(|i| {
            let Ok(cov) = covariance_from_qs(&splats.rotations[i], &splats.scales[i]) else {
                return Err(2);
            };
            let mean = splats.positions[i];
            if !mean.iter().all(|v| v.is_finite()) || !splats.opacities[i].is_finite() {
                return Err(2);
            }
            match project_gaussian(&mean, &cov.0, cam, opts.footprint_sigma) {
                Projection::Culled => Err(0),
                Projection::Singular => Err(1),
                Projection::Visible(screen) => {
                    let dir = (mean - center).normalize();
                    let lin = sh_eval_linear(&splats.sh[i], &dir);
                    let clamped = lin.map(|v| v + 0.5 < 0.0);
                    Ok((
                        Splat2D {
                            index: i,
                            screen,
                            opacity: splats.opacities[i],
                            color: lin.map(|v| (v + 0.5).max(0.0)),
                        },
                        clamped,
                    ))
                }
            }
        })
        .collect();
    let mut diagnostics = RenderDiagnostics::default();
    let mut visible = Vec::with_capacity(projected.len());
    for p in projected {
        match p {
            Ok(v) => visible.push(v),
            Err(0) => diagnostics.culled += 1,
            Err(1) => diagnostics.singular += 1,
            Err(_) => diagnostics.invalid += 1,
        }
    }
    visible.sort_by(|a, b| {
        a.0.screen
            .depth
            .total_cmp(&b.0.screen.depth)
            .then(a.0.index.cmp(&b.0.index))
    });
    let (sorted, clamped) = visible.into_iter().unzip();
    Prepared {
        sorted,
        clamped,
        diagnostics,
    }
}

fn tile_grid(cam: &Camera) -> (usize, usize) {
    (cam.width.div_ceil(TILE_SIZE), cam.height.div_ceil(TILE_SIZE))
}

fn bin_tiles(sorted: &[Splat2D], cam: &Camera) -> Vec<Vec<u32>> {
    let (tx, ty) = tile_grid(cam);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (k, s) in sorted.iter().enumerate() {
        if let Some(([x0, x1], [y0, y1])) = s.screen.pixel_range(cam.width, cam.height) {
            for ty_ in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx_ in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tiles[ty_ * tx + tx_].push(k as u32);
                }
            }
        }
    }
    tiles
}

/// One accepted contribution at a pixel.
#[derive(Clone, Copy)]
struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Front-to-back compositing at one pixel. Returns color and residual
/// transmittance; `visit` sees every accepted contribution in order.
fn composite_pixel<I>(
    px: f64,
    py: f64,
    candidates: I,
    sorted: &[Splat2D],
    opts: &RenderOptions,
    early_stop: bool,
    background: &[f64; 3],
    mut visit: impl FnMut(Contribution),
) -> ([f64; 3], f64)
where
    I: Iterator<Item = usize>,
{
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for slot in candidates {
        let s = &sorted[slot];
        if !s.screen.covers(px, py) {
            continue;
        }
        let (power, dx, dy) = s.screen.power(px, py);
        let gauss = power.exp();
        let alpha = s.opacity * gauss;
        if alpha < opts.alpha_threshold {
            continue;
        }
        let next = t * (1.0 - alpha);
        if early_stop && next < opts.transmittance_min {
            break;
        }
        for (ch, v) in c.iter_mut().enumerate() {
            *v += s.color[ch] * alpha * t;
        }
        visit(Contribution {
            slot,
            alpha,
            gauss,
            transmittance: t,
            dx,
            dy,
        });
        t = next;
    }
    for (ch, v) in c.iter_mut().enumerate() {
        *v += t * background[ch];
    }
    (c, t)
}

/// Tiled production renderer.
pub fn render(
    splats: &SplatFrame,
    cam: &Camera,
    background: [f64; 3],
    opts: &RenderOptions,
    retain_state: bool,
) -> Result<RenderedImage> {
    cam.validate()?;
    let prep = prepare(splats, cam, opts);
    let tiles = bin_tiles(&prep.sorted, cam);
    let (tx, _) = tile_grid(cam);
    let (w, h) = (cam.width, cam.height);

    let blocks: Vec<(Vec<[f64; 3]>, Vec<f64>)> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let (x0, y0) = ((ti % tx) * TILE_SIZE, (ti / tx) * TILE_SIZE);
            let (x1, y1) = ((x0 + TILE_SIZE).min(w), (y0 + TILE_SIZE).min(h));
            let mut colors = Vec::with_capacity((x1 - x0) * (y1 - y0));
            let mut trans = Vec::with_capacity(colors.capacity());
            for y in y0..y1 {
                for x in x0..x1 {
                    let (c, t) = composite_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        list.iter().map(|k| *k as usize),
                        &prep.sorted,
                        opts,
                        true,
                        &background,
                        |_| {},
                    );
                    colors.push(c);
                    trans.push(t);
                }
            }
            (colors, trans)
        })
        .collect();

    let mut image = Image::new(w, h);
    let mut transmittance = vec![0.0; w * h];
    for (ti, (colors, trans)) in blocks.into_iter().enumerate() {
        let (x0, y0) = ((ti % tx) * TILE_SIZE, (ti / tx) * TILE_SIZE);
        let bw = (x0 + TILE_SIZE).min(w) - x0;
        for (k, (c, t)) in colors.into_iter().zip(trans).enumerate() {
            let (x, y) = (x0 + k % bw, y0 + k / bw);
            image.set_pixel(x, y, c);
            transmittance[y * w + x] = t;
        }
    }

    let state = retain_state.then(|| RenderState {
        camera: cam.clone(),
        background,
        options: *opts,
        splat_count: splats.len(),
        sorted: prep.sorted,
        tiles,
        clamped: prep.clamped,
    });
    Ok(RenderedImage {
        image,
        transmittance,
        diagnostics: prep.diagnostics,
        state,
    })
}

/// Brute-force renderer: every pixel visits every visible splat in the
/// global order, applying the same per-splat coverage rules as [`render`]
/// but never terminating early.
pub fn render_reference(
    splats: &SplatFrame,
    cam: &Camera,
    background: [f64; 3],
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    cam.validate()?;
    let prep = prepare(splats, cam, opts);
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::new(w, h);
    let mut transmittance = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (c, t) = composite_pixel(
                x as f64 + 0.5,
                y as f64 + 0.5,
                0..prep.sorted.len(),
                &prep.sorted,
                opts,
                false,
                &background,
                |_| {},
            );
            image.set_pixel(x, y, c);
            transmittance[y * w + x] = t;
        }
    }
    Ok(RenderedImage {
        image,
        transmittance,
        diagnostics: prep.diagnostics,
        state: None,
    })
}

/// Gradients with respect to the 2D quantities of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct Grad2D {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Grad2D {
    fn add(&mut self, o: &Grad2D) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Reverse-mode gradients of [`render`] with respect to every splat
/// parameter. Culled splats receive zero gradient.
pub fn render_backward(splats: &SplatFrame, forward: &RenderedImage, grad: &Image) -> Result<SplatGrads> {
    let state = forward.state.as_ref().ok_or(Error::MissingState("render forward state"))?;
    if state.splat_count != splats.len() {
        return Err(Error::Mismatch {
            what: "splat count between forward and backward",
            expected: state.splat_count,
            found: splats.len(),
        });
    }
    let cam = &state.camera;
    let (w, h) = (cam.width, cam.height);
    if grad.width() != w || grad.height() != h {
        return Err(Error::invalid("gradient image size differs from the rendered image"));
    }
    let (tx, _) = tile_grid(cam);
    let opts = &state.options;
    let sorted = &state.sorted;

    // Per tile: partial 2D gradients aligned with the tile's list.
    let partials: Vec<Vec<Grad2D>> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let mut acc = vec![Grad2D::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (x0, y0) = ((ti % tx) * TILE_SIZE, (ti / tx) * TILE_SIZE);
            let (x1, y1) = ((x0 + TILE_SIZE).min(w), (y0 + TILE_SIZE).min(h));
            let mut contribs: Vec<(usize, Contribution)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let g = grad.pixel(x, y);
                    if g == [0.0; 3] {
                        continue;
                    }
                    contribs.clear();
                    composite_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        list.iter().map(|k| *k as usize),
                        sorted,
                        opts,
                        true,
                        &state.background,
                        |c| contribs.push((0, c)),
                    );
                    // Lists are ascending, so slots map back to positions in one sweep.
                    let mut pos = 0usize;
                    for (p, c) in contribs.iter_mut() {
                        while list[pos] as usize != c.slot {
                            pos += 1;
                        }
                        *p = pos;
                    }
                    let mut after = state.background;
                    for (p, c) in contribs.iter().rev() {
                        let s = &sorted[c.slot];
                        let mut d_alpha = 0.0;
                        let ga = &mut acc[*p];
                        for ch in 0..3 {
                            d_alpha += g[ch] * c.transmittance * (s.color[ch] - after[ch]);
                            ga.color[ch] += g[ch] * c.alpha * c.transmittance;
                            after[ch] = s.color[ch] * c.alpha + (1.0 - c.alpha) * after[ch];
                        }
                        ga.opacity += d_alpha * c.gauss;
                        let d_power = d_alpha * s.opacity * c.gauss;
                        let [a, b, cc] = s.screen.conic;
                        ga.mean[0] += d_power * (a * c.dx + b * c.dy);
                        ga.mean[1] += d_power * (b * c.dx + cc * c.dy);
                        ga.conic[0] += d_power * (-0.5 * c.dx * c.dx);
                        ga.conic[1] += d_power * (-c.dx * c.dy);
                        ga.conic[2] += d_power * (-0.5 * c.dy * c.dy);
                    }
                }
            }
            acc
        })
        .collect();

    // Deterministic reduction in tile order.
    let mut per_slot = vec![Grad2D::default(); sorted.len()];
    for (list, part) in state.tiles.iter().zip(&partials) {
        for (k, g) in list.iter().zip(part) {
            per_slot[*k as usize].add(g);
        }
    }

    let center = cam.center();
    let chained: Vec<(usize, Vec3, Quaternion, Vec3, f64, [f64; 48])> = sorted
        .par_iter()
        .zip(per_slot.par_iter())
        .zip(state.clamped.par_iter())
        .map(|((s, g), clamped)| {
            let i = s.index;
            let (dmu, dq, ds, dsh) = splat_backward(
                &splats.positions[i],
                &splats.rotations[i],
                &splats.scales[i],
                &splats.sh[i].0,
                cam,
                &center,
                g,
                clamped,
            );
            (i, dmu, dq, ds, g.opacity, dsh)
        })
        .collect();

    let mut out = SplatGrads::zeros(splats.len());
    for (i, dmu, dq, ds, da, dsh) in chained {
        out.positions[i] = dmu;
        out.rotations[i] = dq;
        out.scales[i] = ds;
        out.opacities[i] = da;
        out.sh[i].0 = dsh;
    }
    Ok(out)
}

/// Chains 2D gradients through SH color, projection and covariance.
#[allow(clippy::too_many_arguments)]
fn splat_backward(
    mean: &Vec3,
    q: &Quaternion,
    s: &Vec3,
    sh: &[f64; 48],
    cam: &Camera,
    center: &Vec3,
    g: &Grad2D,
    clamped: &[bool; 3],
) -> (Vec3, Quaternion, Vec3, [f64; 48]) {
    let w = &cam.rotation;
    let t = cam.to_camera(mean);
    let j = cam.jacobian(&t);
    let m = j * w;
    let r = quat_to_rotmat(q).unwrap_or_else(|_| Mat3::identity());
    let sf = s.map(|v| v.max(crate::math::MIN_SCALE));
    let s2 = Mat3::from_diagonal(&sf.map(|v| v * v));
    let sigma = r * s2 * r.transpose();
    let c2 = m * sigma * m.transpose() + Mat2::identity() * COV2D_DILATION;
    let k = c2.try_inverse().unwrap_or_else(Mat2::zeros);

    // Conic gradient in symmetric-matrix form, then through the inverse.
    let gk = Mat2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let gc2 = -(k * gk * k);
    let gsigma = m.transpose() * gc2 * m;
    let gm = 2.0 * gc2 * m * sigma;
    let gj = gm * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let mut gt = Vec3::zeros();
    gt.x += gj[(0, 2)] * (-cam.fx * iz2);
    gt.y += gj[(1, 2)] * (-cam.fy * iz2);
    gt.z += gj[(0, 0)] * (-cam.fx * iz2)
        + gj[(0, 2)] * (2.0 * cam.fx * t.x * iz2 * iz)
        + gj[(1, 1)] * (-cam.fy * iz2)
        + gj[(1, 2)] * (2.0 * cam.fy * t.y * iz2 * iz);
    gt.x += g.mean[0] * cam.fx * iz;
    gt.z += g.mean[0] * (-cam.fx * t.x * iz2);
    gt.y += g.mean[1] * cam.fy * iz;
    gt.z += g.mean[1] * (-cam.fy * t.y * iz2);
    let mut gmu = w.transpose() * gt;

    // Covariance factors.
    let gr = 2.0 * gsigma * r * s2;
    let inner = r.transpose() * gsigma * r;
    let gs = Vec3::from_fn(|a, _| {
        if s[a] < crate::math::MIN_SCALE {
            0.0
        } else {
            2.0 * sf[a] * inner[(a, a)]
        }
    });
    let gq = quat_to_rotmat_backward(q, &gr);

    // SH color through the view direction.
    let v = mean - center;
    let n = v.norm();
    let dir = v / n;
    let basis = sh_basis(&dir);
    let bgrad = sh_basis_grad(&dir);
    let gcol: [f64; 3] = std::array::from_fn(|ch| if clamped[ch] { 0.0 } else { g.color[ch] });
    let mut gsh = [0.0; 48];
    let mut gdir = Vec3::zeros();
    for kb in 0..SH_BASES {
        let mut wsum = 0.0;
        for ch in 0..3 {
            gsh[3 * kb + ch] = gcol[ch] * basis[kb];
            wsum += gcol[ch] * sh[3 * kb + ch];
        }
        gdir += Vec3::new(bgrad[kb][0], bgrad[kb][1], bgrad[kb][2]) * wsum;
    }
    gmu += (gdir - dir * dir.dot(&gdir)) / n;
    (gmu, gq, gs, gsh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{ShCoeffs, SH_Y00};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_camera(w: usize, h: usize, focal: f64) -> Camera {
        Camera::look_at(
            &Vec3::new(0.0, 0.0, -2.0),
            &Vec3::zeros(),
            &Vec3::new(0.0, -1.0, 0.0),
            focal,
            w,
            h,
        )
        .unwrap()
    }

    fn identity_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            width: w,
            height: h,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    fn colored(rgb: [f64; 3]) -> ShCoeffs {
        let mut sh = ShCoeffs::default();
        for (ch, v) in rgb.iter().enumerate() {
            sh.set(0, ch, (v - 0.5) / SH_Y00);
        }
        sh
    }

    fn single(pos: Vec3, scale: f64, opacity: f64, rgb: [f64; 3]) -> SplatFrame {
        let mut f = SplatFrame::with_capacity(1);
        f.push(pos, Quaternion::IDENTITY, Vec3::repeat(scale), opacity, colored(rgb));
        f
    }

    #[test]
    fn look_at_matches_explicit_axes() {
        let cam = front_camera(10, 10, 5.0);
        // Camera at z = -2 looking along +z with image y along world -y... up (0,-1,0).
        assert_abs_diff_eq!(cam.to_camera(&Vec3::zeros()), Vec3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(cam.center(), Vec3::new(0.0, 0.0, -2.0), epsilon = 1e-12);
        let back = Camera::from_matrices(&cam.intrinsics_matrix(), &cam.world_to_camera_matrix(), 10, 10).unwrap();
        assert_eq!(back.rotation, cam.rotation);
    }

    #[test]
    fn on_axis_projection_closed_form() {
        let cam = identity_camera(64, 64, 100.0);
        let sigma = 0.01;
        let cov = Mat3::identity() * sigma * sigma;
        let Projection::Visible(s) = project_gaussian(&Vec3::new(0.0, 0.0, 2.0), &cov, &cam, 3.0) else {
            panic!("culled");
        };
        assert_abs_diff_eq!(s.cov[0], 0.25 + COV2D_DILATION, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cov[2], 0.25 + COV2D_DILATION, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cov[1], 0.0, epsilon = 1e-15);
        assert_eq!(s.mean, [32.0, 32.0]);
    }

    #[test]
    fn doubling_focal_scales_offset_and_covariance() {
        let cov = Mat3::identity() * 1e-4;
        let p = Vec3::new(0.1, 0.0, 2.0);
        let mut cam = identity_camera(256, 256, 100.0);
        let Projection::Visible(a) = project_gaussian(&Vec3::new(0.0, 0.0, 2.0), &cov, &cam, 3.0) else {
            panic!()
        };
        let Projection::Visible(off_a) = project_gaussian(&p, &cov, &cam, 3.0) else { panic!() };
        cam.fx *= 2.0;
        let Projection::Visible(b) = project_gaussian(&Vec3::new(0.0, 0.0, 2.0), &cov, &cam, 3.0) else {
            panic!()
        };
        let Projection::Visible(off_b) = project_gaussian(&p, &cov, &cam, 3.0) else { panic!() };
        assert_abs_diff_eq!(off_b.mean[0] - cam.cx, 2.0 * (off_a.mean[0] - cam.cx), epsilon = 1e-12);
        assert_abs_diff_eq!(
            b.cov[0] - COV2D_DILATION,
            4.0 * (a.cov[0] - COV2D_DILATION),
            epsilon = 1e-12
        );
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = identity_camera(32, 32, 50.0);
        let cov = Mat3::identity() * 1e-4;
        assert_eq!(project_gaussian(&Vec3::new(0.0, 0.0, -1.0), &cov, &cam, 3.0), Projection::Culled);
        assert_eq!(project_gaussian(&Vec3::new(50.0, 0.0, 1.0), &cov, &cam, 3.0), Projection::Culled);
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = identity_camera(20, 12, 10.0);
        let out = render(&SplatFrame::with_capacity(0), &cam, [0.1, 0.2, 0.3], &RenderOptions::default(), false)
            .unwrap();
        assert_eq!(out.image, Image::filled(20, 12, [0.1, 0.2, 0.3]));
        assert!(out.transmittance.iter().all(|t| *t == 1.0));
    }

    #[test]
    fn single_centered_splat_hits_closed_form() {
        let cam = identity_camera(33, 33, 50.0);
        // Center exactly at the middle pixel center.
        let z = 2.0;
        let x = (16.5 - cam.cx) * z / cam.fx;
        let frame = single(Vec3::new(x, x, z), 0.01, 0.8, [1.0, 0.0, 0.0]);
        let out = render(&frame, &cam, [0.0; 3], &RenderOptions::default(), false).unwrap();
        let p = out.image.pixel(16, 16);
        assert_abs_diff_eq!(p[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.transmittance[16 * 33 + 16], 0.2, epsilon = 1e-12);

        // Falloff against direct evaluation of the Gaussian.
        let cov = 0.01f64.powi(2) * (cam.fx / z).powi(2) + COV2D_DILATION;
        let reference = render_reference(&frame, &cam, [0.0; 3], &RenderOptions::exhaustive()).unwrap();
        for yy in 0..33 {
            for xx in 0..33 {
                let dx = xx as f64 + 0.5 - 16.5;
                let dy = yy as f64 + 0.5 - 16.5;
                let expect = 0.8 * (-0.5 * (dx * dx + dy * dy) / cov).exp();
                assert_abs_diff_eq!(reference.image.pixel(xx, yy)[0], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_coincident_splats_compose() {
        let cam = identity_camera(1, 1, 10.0);
        let mut f = SplatFrame::with_capacity(2);
        // Back splat listed first to exercise sorting.
        f.push(Vec3::new(0.0, 0.0, 3.0), Quaternion::IDENTITY, Vec3::repeat(0.05), 0.5, colored([0.0, 1.0, 0.0]));
        f.push(Vec3::new(0.0, 0.0, 2.0), Quaternion::IDENTITY, Vec3::repeat(0.05), 0.6, colored([1.0, 0.0, 0.0]));
        let out = render(&f, &cam, [0.0; 3], &RenderOptions::default(), false).unwrap();
        let p = out.image.pixel(0, 0);
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-12);
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> SplatFrame {
        let mut f = SplatFrame::with_capacity(n);
        for _ in 0..n {
            let mut sh = ShCoeffs::default();
            for v in sh.0.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            f.push(
                Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(1.5..3.5)),
                Quaternion::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Vec3::new(rng.gen_range(0.01..0.15), rng.gen_range(0.01..0.15), rng.gen_range(0.01..0.15)),
                rng.gen_range(0.05..0.95),
                sh,
            );
        }
        f
    }

    #[test]
    fn tiled_matches_reference_without_early_stop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = identity_camera(48, 40, 40.0);
        let opts = RenderOptions::without_early_stop();
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 60);
            let a = render(&scene, &cam, [0.2, 0.1, 0.0], &opts, false).unwrap();
            let b = render_reference(&scene, &cam, [0.2, 0.1, 0.0], &opts).unwrap();
            assert!(a.image.max_abs_diff(&b.image).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn early_stop_deviation_is_bounded_by_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cam = identity_camera(32, 32, 40.0);
        let opts = RenderOptions::default();
        for _ in 0..5 {
            let mut scene = random_scene(&mut rng, 200);
            scene.opacities.iter_mut().for_each(|a| *a = 0.99);
            let a = render(&scene, &cam, [0.0; 3], &opts, false).unwrap();
            let b = render_reference(&scene, &cam, [0.0; 3], &opts).unwrap();
            // The dropped tail is a convex mix of splat colors and background,
            // weighted by the transmittance before the stopping splat.
            let max_color = (0..scene.len())
                .flat_map(|i| crate::math::sh_eval(&scene.sh[i], &(scene.positions[i] - cam.center()).normalize()))
                .fold(0.0f64, f64::max);
            let bound = opts.transmittance_min / (1.0 - 0.99) * max_color;
            assert!(a.image.max_abs_diff(&b.image).unwrap() <= bound);
        }
    }

    #[test]
    fn input_permutation_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = identity_camera(32, 32, 40.0);
        let scene = random_scene(&mut rng, 40);
        let mut idx: Vec<usize> = (0..40).collect();
        idx.reverse();
        idx.swap(3, 17);
        let permuted = scene.subset(&idx);
        let opts = RenderOptions::default();
        let a = render(&scene, &cam, [0.0; 3], &opts, false).unwrap();
        let b = render(&permuted, &cam, [0.0; 3], &opts, false).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn adding_a_splat_never_raises_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = identity_camera(32, 32, 40.0);
        let opts = RenderOptions::without_early_stop();
        let scene = random_scene(&mut rng, 30);
        let fewer = scene.subset(&(0..29).collect::<Vec<_>>());
        let a = render(&fewer, &cam, [0.0; 3], &opts, false).unwrap();
        let b = render(&scene, &cam, [0.0; 3], &opts, false).unwrap();
        for (ta, tb) in a.transmittance.iter().zip(&b.transmittance) {
            assert!(tb <= ta);
        }
    }

    #[test]
    fn energy_bounded_with_unit_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = identity_camera(32, 32, 40.0);
        let mut scene = random_scene(&mut rng, 100);
        for sh in scene.sh.iter_mut() {
            *sh = colored([rng.gen_range(0.0..1.0), 1.0, rng.gen_range(0.0..1.0)]);
        }
        let out = render(&scene, &cam, [0.0; 3], &RenderOptions::default(), false).unwrap();
        assert!(out.image.data().iter().all(|v| *v <= 1.0 + 1e-6));
    }

    #[test]
    fn backward_without_state_is_an_error() {
        let cam = identity_camera(8, 8, 10.0);
        let f = single(Vec3::new(0.0, 0.0, 2.0), 0.1, 0.5, [1.0; 3]);
        let out = render(&f, &cam, [0.0; 3], &RenderOptions::default(), false).unwrap();
        assert!(matches!(
            render_backward(&f, &out, &Image::new(8, 8)),
            Err(Error::MissingState(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = identity_camera(16, 16, 20.0);
        let f = random_scene(&mut rng, 5);
        let out = render(&f, &cam, [0.0; 3], &RenderOptions::default(), true).unwrap();
        let g = render_backward(&f, &out, &Image::new(16, 16)).unwrap();
        assert_eq!(g, SplatGrads::zeros(5));
    }

    #[test]
    fn opacity_gradient_of_single_splat_is_gaussian_weight() {
        let cam = identity_camera(8, 8, 20.0);
        let f = single(Vec3::new(0.03, -0.02, 2.0), 0.1, 0.5, [1.0, 0.0, 0.0]);
        let opts = RenderOptions::exhaustive();
        let mut up = Image::new(8, 8);
        up.set_pixel(3, 4, [1.0, 0.0, 0.0]);
        let out = render(&f, &cam, [0.0; 3], &opts, true).unwrap();
        let g = render_backward(&f, &out, &up).unwrap();
        let loss = |a: f64| {
            let mut f2 = f.clone();
            f2.opacities[0] = a;
            render(&f2, &cam, [0.0; 3], &opts, false).unwrap().image.pixel(3, 4)[0]
        };
        let h = 1e-5;
        let fd = (loss(0.5 + h) - loss(0.5 - h)) / (2.0 * h);
        assert!(((g.opacities[0] - fd) / fd).abs() < 1e-6, "{} vs {}", g.opacities[0], fd);
    }

    fn param_count() -> usize {
        3 + 4 + 3 + 1 + 48
    }

    fn get_param(f: &SplatFrame, i: usize, k: usize) -> f64 {
        match k {
            0..=2 => f.positions[i][k],
            3..=6 => f.rotations[i].to_array()[k - 3],
            7..=9 => f.scales[i][k - 7],
            10 => f.opacities[i],
            _ => f.sh[i].0[k - 11],
        }
    }

    fn set_param(f: &mut SplatFrame, i: usize, k: usize, v: f64) {
        match k {
            0..=2 => f.positions[i][k] = v,
            3..=6 => {
                let mut a = f.rotations[i].to_array();
                a[k - 3] = v;
                f.rotations[i] = Quaternion::from_array(a);
            }
            7..=9 => f.scales[i][k - 7] = v,
            10 => f.opacities[i] = v,
            _ => f.sh[i].0[k - 11] = v,
        }
    }

    fn grad_param(g: &SplatGrads, i: usize, k: usize) -> f64 {
        match k {
            0..=2 => g.positions[i][k],
            3..=6 => g.rotations[i].to_array()[k - 3],
            7..=9 => g.scales[i][k - 7],
            10 => g.opacities[i],
            _ => g.sh[i].0[k - 11],
        }
    }

    #[test]
    fn three_splat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = Camera::look_at(
            &Vec3::new(0.3, -0.2, -2.5),
            &Vec3::zeros(),
            &Vec3::new(0.0, -1.0, 0.0),
            12.0,
            8,
            8,
        )
        .unwrap();
        let opts = RenderOptions::exhaustive();
        let mut scene = random_scene(&mut rng, 3);
        for p in scene.positions.iter_mut() {
            *p = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        }
        for s in scene.scales.iter_mut() {
            *s = Vec3::new(rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3));
        }
        let weights: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up = Image::from_raw(8, 8, weights.clone()).unwrap();
        let loss = |f: &SplatFrame| -> f64 {
            let img = render(f, &cam, [0.1, 0.2, 0.3], &opts, false).unwrap().image;
            img.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let out = render(&scene, &cam, [0.1, 0.2, 0.3], &opts, true).unwrap();
        let g = render_backward(&scene, &out, &up).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for k in 0..param_count() {
                let v = get_param(&scene, i, k);
                let mut p = scene.clone();
                set_param(&mut p, i, k, v + h);
                let mut m = scene.clone();
                set_param(&mut m, i, k, v - h);
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grad_param(&g, i, k);
                let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "splat {i} param {k}: analytic {an} fd {fd}");
            }
        }
        assert!(worst < 1e-4);
    }
}
