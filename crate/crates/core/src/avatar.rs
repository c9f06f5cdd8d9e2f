//! Per-texel Gaussian parameter maps and their placement in world space.
//!
//! Each covered texel hosts one splat. Its canonical base position is the
//! barycentric blend of the deformed template, a learned offset is added in
//! canonical space and the result is carried to world space by the texel's
//! blended skinning transform. The splat orientation is rotated by the same
//! transform.

use rayon::prelude::*;

use crate::atlas::TexelTable;
use crate::error::{Error, Result};
use crate::math::{normalize_backward, DualQuaternion, Quaternion, ShCoeffs, Vec3, MIN_SCALE, SH_LEN};
use crate::rig::{blend_influences, Rig, RigFrame};

/// Offset (3) + scale (3) + rotation (4) + opacity (1).
pub const GEOMETRY_CHANNELS: usize = 11;
pub const APPEARANCE_CHANNELS: usize = SH_LEN;
/// Channels of a texel excluding its base position.
pub const TEXEL_CHANNELS: usize = 3 + 4 + 3 + 1 + SH_LEN;
/// Base position plus [`TEXEL_CHANNELS`].
pub const PARAMETER_VECTOR_LEN: usize = 3 + TEXEL_CHANNELS;

pub(crate) mod geo {
    pub const OFFSET: usize = 0;
    pub const SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const OPACITY: usize = 10;
}

/// Dense `R x R` parameter maps; only covered texels carry meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParamMaps {
    pub resolution: usize,
    pub offset: Vec<Vec3>,
    pub rotation: Vec<Quaternion>,
    pub scale: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

impl GaussianParamMaps {
    /// All-zero maps, also used as a gradient accumulator.
    pub fn zeros(resolution: usize) -> Self {
        let n = resolution * resolution;
        Self {
            resolution,
            offset: vec![Vec3::zeros(); n],
            rotation: vec![Quaternion::ZERO; n],
            scale: vec![Vec3::zeros(); n],
            opacity: vec![0.0; n],
            sh: vec![ShCoeffs::default(); n],
        }
    }

    /// Identity rotations, minimum scales, zero opacity and color.
    pub fn neutral(resolution: usize) -> Self {
        let n = resolution * resolution;
        Self {
            rotation: vec![Quaternion::IDENTITY; n],
            scale: vec![Vec3::repeat(MIN_SCALE); n],
            ..Self::zeros(resolution)
        }
    }

    pub fn texel_count(&self) -> usize {
        self.resolution * self.resolution
    }

    /// The 59 non-position channels of one texel:
    /// offset, rotation, scale, opacity, SH.
    pub fn texel_channels(&self, texel: usize) -> [f64; TEXEL_CHANNELS] {
        let mut out = [0.0; TEXEL_CHANNELS];
        out[0..3].copy_from_slice(self.offset[texel].as_slice());
        out[3..7].copy_from_slice(&self.rotation[texel].to_array());
        out[7..10].copy_from_slice(self.scale[texel].as_slice());
        out[10] = self.opacity[texel];
        out[11..].copy_from_slice(&self.sh[texel].0);
        out
    }

    pub fn set_texel_channels(&mut self, texel: usize, c: &[f64; TEXEL_CHANNELS]) {
        self.offset[texel] = Vec3::new(c[0], c[1], c[2]);
        self.rotation[texel] = Quaternion::new(c[3], c[4], c[5], c[6]);
        self.scale[texel] = Vec3::new(c[7], c[8], c[9]);
        self.opacity[texel] = c[10];
        self.sh[texel].0.copy_from_slice(&c[11..]);
    }

    /// Full per-Gaussian parameter vector: canonical base position followed
    /// by the texel channels.
    pub fn parameter_vector(&self, texel: usize, base: &Vec3) -> [f64; PARAMETER_VECTOR_LEN] {
        let mut out = [0.0; PARAMETER_VECTOR_LEN];
        out[0..3].copy_from_slice(base.as_slice());
        out[3..].copy_from_slice(&self.texel_channels(texel));
        out
    }

    /// Checks range invariants on the covered texels of `table`.
    pub fn validate(&self, table: &TexelTable) -> Result<()> {
        if self.resolution != table.resolution() {
            return Err(Error::Mismatch {
                what: "parameter map resolution",
                expected: table.resolution(),
                found: self.resolution,
            });
        }
        let mut problems = Vec::new();
        for (i, e) in table.entries().iter().enumerate() {
            let t = e.texel_index(self.resolution);
            let ch = self.texel_channels(t);
            if !ch.iter().all(|v| v.is_finite()) {
                problems.push(format!("gaussian {i}: non-finite parameter"));
                continue;
            }
            if !(0.0..=1.0).contains(&self.opacity[t]) {
                problems.push(format!("gaussian {i}: opacity {} outside [0,1]", self.opacity[t]));
            }
            if self.scale[t].iter().any(|s| *s < MIN_SCALE) {
                problems.push(format!("gaussian {i}: scale below minimum"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// World-space splats in texel order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatFrame {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quaternion>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

impl SplatFrame {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            sh: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vec3, rotation: Quaternion, scale: Vec3, opacity: f64, sh: ShCoeffs) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.scales.push(scale);
        self.opacities.push(opacity);
        self.sh.push(sh);
    }

    pub fn subset(&self, indices: &[usize]) -> SplatFrame {
        let mut out = SplatFrame::with_capacity(indices.len());
        for &i in indices {
            out.push(self.positions[i], self.rotations[i], self.scales[i], self.opacities[i], self.sh[i]);
        }
        out
    }
}

/// Canonical base position per Gaussian (texel order).
pub fn canonical_positions(table: &TexelTable, canonical: &[Vec3]) -> Result<Vec<Vec3>> {
    table.check_vertex_count(canonical.len())?;
    Ok(table
        .entries()
        .iter()
        .map(|e| table.interpolate(e, canonical))
        .collect())
}

/// Blended skinning transform per Gaussian.
pub fn texel_transforms(table: &TexelTable, joint_transforms: &[DualQuaternion]) -> Result<Vec<DualQuaternion>> {
    table
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, e)| blend_influences(&e.skin, joint_transforms, i))
        .collect()
}

/// `μ = T(μ̄ + d̄)`, world rotation `rot(T) ∘ q`; scale, opacity and SH are
/// copied through.
pub fn pose_gaussians(
    table: &TexelTable,
    base: &[Vec3],
    maps: &GaussianParamMaps,
    transforms: &[DualQuaternion],
) -> Result<SplatFrame> {
    let n = table.len();
    if base.len() != n || transforms.len() != n {
        return Err(Error::Mismatch {
            what: "per-gaussian input length",
            expected: n,
            found: if base.len() != n { base.len() } else { transforms.len() },
        });
    }
    if maps.resolution != table.resolution() {
        return Err(Error::Mismatch {
            what: "parameter map resolution",
            expected: table.resolution(),
            found: maps.resolution,
        });
    }
    let r = maps.resolution;
    let mut out = SplatFrame::with_capacity(n);
    for (i, e) in table.entries().iter().enumerate() {
        let t = e.texel_index(r);
        let offset = maps.offset[t];
        if !offset.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("gaussian {i} has a non-finite offset")));
        }
        let tr = &transforms[i];
        out.push(
            tr.transform_point(&(base[i] + offset)),
            tr.real * maps.rotation[t],
            maps.scale[t],
            maps.opacity[t],
            maps.sh[t],
        );
    }
    Ok(out)
}

/// Gradients with respect to world-space splat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quaternion>,
    pub scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

impl SplatGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vec3::zeros(); n],
            rotations: vec![Quaternion::ZERO; n],
            scales: vec![Vec3::zeros(); n],
            opacities: vec![0.0; n],
            sh: vec![ShCoeffs::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &SplatGrads) {
        for i in 0..self.len() {
            self.positions[i] += other.positions[i];
            self.rotations[i] = self.rotations[i] + other.rotations[i];
            self.scales[i] += other.scales[i];
            self.opacities[i] += other.opacities[i];
            for k in 0..SH_LEN {
                self.sh[i].0[k] += other.sh[i].0[k];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for i in 0..self.len() {
            self.positions[i] *= s;
            self.rotations[i] = self.rotations[i].scale(s);
            self.scales[i] *= s;
            self.opacities[i] *= s;
            self.sh[i].0.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Pulls splat gradients back onto the (activated) parameter maps.
pub fn pose_gaussians_backward(
    table: &TexelTable,
    transforms: &[DualQuaternion],
    grads: &SplatGrads,
) -> GaussianParamMaps {
    let r = table.resolution();
    let mut out = GaussianParamMaps::zeros(r);
    for (i, e) in table.entries().iter().enumerate() {
        let t = e.texel_index(r);
        let tr = &transforms[i];
        // μ = R(p + d) + t  =>  dL/dd = Rᵀ dL/dμ.
        out.offset[t] = tr.real.conjugate().rotate(&grads.positions[i]);
        // q_w = p ⊗ q is orthogonal-linear in q for unit p.
        out.rotation[t] = tr.real.conjugate() * grads.rotations[i];
        out.scale[t] = grads.scales[i];
        out.opacity[t] = grads.opacities[i];
        out.sh[t] = grads.sh[i];
    }
    out
}

/// Maps unconstrained decoder outputs to valid splat parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationConfig {
    /// Offsets are `offset_max * tanh(raw)`.
    pub offset_max: f64,
    /// Scales are `clamp(scale_init * exp(raw), scale_min, scale_max)`.
    pub scale_init: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl ActivationConfig {
    /// Offsets bounded by 5% of the template bounding-box diagonal, scales by
    /// half of it; the zero-raw scale is half a texel's share of the diagonal.
    pub fn for_template(positions: &[Vec3], resolution: usize) -> Self {
        let diag = bbox_diagonal(positions);
        Self {
            offset_max: 0.05 * diag,
            scale_init: 0.5 * diag / resolution as f64,
            scale_min: MIN_SCALE,
            scale_max: 0.5 * diag,
        }
    }
}

pub fn bbox_diagonal(positions: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if positions.is_empty() {
        0.0
    } else {
        (hi - lo).norm()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn raw_rotation(raw_geo: &[f64], plane: usize, t: usize) -> Quaternion {
    let c = |k: usize| raw_geo[(geo::ROTATION + k) * plane + t];
    Quaternion::new(1.0 + c(0), c(1), c(2), c(3))
}

/// Activates channel-major raw maps (`[channel][texel]`, 11 geometry and 48
/// appearance channels). Uncovered texels keep neutral values.
pub fn activate(
    raw_geo: &[f64],
    raw_app: &[f64],
    mask: &[bool],
    resolution: usize,
    cfg: &ActivationConfig,
) -> Result<GaussianParamMaps> {
    let plane = resolution * resolution;
    if raw_geo.len() != GEOMETRY_CHANNELS * plane || raw_app.len() != APPEARANCE_CHANNELS * plane {
        return Err(Error::Mismatch {
            what: "raw map length",
            expected: (GEOMETRY_CHANNELS + APPEARANCE_CHANNELS) * plane,
            found: raw_geo.len() + raw_app.len(),
        });
    }
    let mut maps = GaussianParamMaps::neutral(resolution);
    for t in (0..plane).filter(|&t| mask[t]) {
        let g = |c: usize| raw_geo[c * plane + t];
        maps.offset[t] = Vec3::from_fn(|k, _| cfg.offset_max * g(geo::OFFSET + k).tanh());
        maps.scale[t] = Vec3::from_fn(|k, _| {
            (cfg.scale_init * g(geo::SCALE + k).exp()).clamp(cfg.scale_min, cfg.scale_max)
        });
        let q = raw_rotation(raw_geo, plane, t);
        maps.rotation[t] = q.normalize().unwrap_or(Quaternion::IDENTITY);
        maps.opacity[t] = sigmoid(g(geo::OPACITY));
        for k in 0..SH_LEN {
            maps.sh[t].0[k] = raw_app[k * plane + t];
        }
    }
    Ok(maps)
}

/// Gradient of [`activate`]: map gradients back to channel-major raw
/// gradients `(geometry, appearance)`.
pub fn activate_backward(
    raw_geo: &[f64],
    mask: &[bool],
    resolution: usize,
    cfg: &ActivationConfig,
    grads: &GaussianParamMaps,
) -> (Vec<f64>, Vec<f64>) {
    let plane = resolution * resolution;
    let mut dg = vec![0.0; GEOMETRY_CHANNELS * plane];
    let mut da = vec![0.0; APPEARANCE_CHANNELS * plane];
    for t in (0..plane).filter(|&t| mask[t]) {
        let g = |c: usize| raw_geo[c * plane + t];
        for k in 0..3 {
            let th = g(geo::OFFSET + k).tanh();
            dg[(geo::OFFSET + k) * plane + t] = grads.offset[t][k] * cfg.offset_max * (1.0 - th * th);
            let s = cfg.scale_init * g(geo::SCALE + k).exp();
            if s > cfg.scale_min && s < cfg.scale_max {
                dg[(geo::SCALE + k) * plane + t] = grads.scale[t][k] * s;
            }
        }
        let q = raw_rotation(raw_geo, plane, t);
        if q.norm() > 1e-12 {
            let dq = normalize_backward(&q, &grads.rotation[t]).to_array();
            for (k, v) in dq.iter().enumerate() {
                dg[(geo::ROTATION + k) * plane + t] = *v;
            }
        }
        let a = sigmoid(g(geo::OPACITY));
        dg[geo::OPACITY * plane + t] = grads.opacity[t] * a * (1.0 - a);
        for k in 0..SH_LEN {
            da[k * plane + t] = grads.sh[t].0[k];
        }
    }
    (dg, da)
}

/// A rig together with its texel parameterization.
#[derive(Debug, Clone)]
pub struct Avatar {
    pub rig: Rig,
    pub table: TexelTable,
    pub activation: ActivationConfig,
}

/// Everything needed to place the Gaussians of one frame.
#[derive(Debug, Clone)]
pub struct FramePlacement {
    pub frame_id: u64,
    pub base: Vec<Vec3>,
    pub transforms: Vec<DualQuaternion>,
}

impl Avatar {
    pub fn new(rig: Rig, resolution: usize) -> Result<Self> {
        let table = crate::atlas::build_texel_table(&rig.mesh, resolution)?;
        let activation = ActivationConfig::for_template(&rig.mesh.positions, resolution);
        Ok(Self {
            rig,
            table,
            activation,
        })
    }

    pub fn resolution(&self) -> usize {
        self.table.resolution()
    }

    pub fn gaussian_count(&self) -> usize {
        self.table.len()
    }

    pub fn placement(&self, frame: &RigFrame) -> Result<FramePlacement> {
        let base = canonical_positions(&self.table, &frame.canonical).map_err(|e| Error::Pipeline {
            stage: "canonical positions",
            detail: e.to_string(),
        })?;
        let transforms = texel_transforms(&self.table, &frame.joint_transforms).map_err(|e| Error::Pipeline {
            stage: "texel transforms",
            detail: e.to_string(),
        })?;
        Ok(FramePlacement {
            frame_id: frame.frame_id,
            base,
            transforms,
        })
    }

    pub fn pose(&self, placement: &FramePlacement, maps: &GaussianParamMaps) -> Result<SplatFrame> {
        pose_gaussians(&self.table, &placement.base, maps, &placement.transforms)
    }

    /// World positions of the splats with zero offsets.
    pub fn surface_positions(&self, placement: &FramePlacement) -> Vec<Vec3> {
        placement
            .base
            .iter()
            .zip(&placement.transforms)
            .map(|(b, t)| t.transform_point(b))
            .collect()
    }
}

/// Composes canonical positions, texel transforms and posing for one frame.
pub fn assemble_splat_frame(avatar: &Avatar, maps: &GaussianParamMaps, frame: &RigFrame) -> Result<SplatFrame> {
    let placement = avatar.placement(frame)?;
    avatar.pose(&placement, maps).map_err(|e| Error::Pipeline {
        stage: "pose gaussians",
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::build_texel_table;
    use crate::math::{covariance_from_qs, Mat3};
    use crate::rig::SkinnedMesh;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn square() -> SkinnedMesh {
        SkinnedMesh {
            positions: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            uvs: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            face_uvs: vec![[0, 1, 2], [0, 2, 3]],
            skin_weights: vec![vec![(0, 1.0)]; 4],
        }
    }

    #[test]
    fn parameter_vector_has_62_components() {
        assert_eq!(PARAMETER_VECTOR_LEN, 62);
        let maps = GaussianParamMaps::neutral(4);
        assert_eq!(maps.parameter_vector(3, &Vec3::zeros()).len(), 62);
    }

    #[test]
    fn identity_transform_and_zero_offset_keep_base() {
        let m = square();
        let table = build_texel_table(&m, 4).unwrap();
        let base = canonical_positions(&table, &m.positions).unwrap();
        let maps = GaussianParamMaps::neutral(4);
        let tr = vec![DualQuaternion::IDENTITY; table.len()];
        let f = pose_gaussians(&table, &base, &maps, &tr).unwrap();
        assert_eq!(f.positions, base);
    }

    #[test]
    fn translation_adds_offset_and_shift() {
        let m = square();
        let table = build_texel_table(&m, 2).unwrap();
        let base = canonical_positions(&table, &m.positions).unwrap();
        let mut maps = GaussianParamMaps::neutral(2);
        let d = Vec3::new(0.01, 0.02, -0.03);
        maps.offset.iter_mut().for_each(|o| *o = d);
        let t = Vec3::new(1.0, 2.0, 3.0);
        let tr = vec![DualQuaternion::from_translation(&t); table.len()];
        let f = pose_gaussians(&table, &base, &maps, &tr).unwrap();
        for (p, b) in f.positions.iter().zip(&base) {
            assert_abs_diff_eq!(*p, b + d + t, epsilon = 1e-14);
        }
    }

    #[test]
    fn rotation_carries_position_and_covariance() {
        let m = square();
        let table = build_texel_table(&m, 1).unwrap();
        // Single texel at the center of the square; move it to (1,0,0).
        let base = vec![Vec3::new(1.0, 0.0, 0.0)];
        let mut maps = GaussianParamMaps::neutral(1);
        let q_c = Quaternion::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.3);
        maps.rotation[0] = q_c;
        maps.scale[0] = Vec3::new(0.1, 0.2, 0.3);
        let rz = Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2);
        let tr = vec![DualQuaternion::from_rotation(&rz)];
        let f = pose_gaussians(&table, &base, &maps, &tr).unwrap();
        assert_abs_diff_eq!(f.positions[0], Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        let world = covariance_from_qs(&f.rotations[0], &f.scales[0]).unwrap().0;
        let canon = covariance_from_qs(&q_c, &maps.scale[0]).unwrap().0;
        let r: Mat3 = rz.to_rotation_matrix().unwrap();
        assert_abs_diff_eq!(world, r * canon * r.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn canonical_positions_match_position_baking() {
        let m = square();
        let table = build_texel_table(&m, 8).unwrap();
        let base = canonical_positions(&table, &m.positions).unwrap();
        let tex = crate::atlas::bake_position_texture(&table, &m.positions).unwrap();
        for (b, e) in base.iter().zip(table.entries()) {
            assert_eq!(*b, tex.texels[e.texel_index(8)]);
        }
    }

    #[test]
    fn offset_is_linear_through_rotation() {
        let m = square();
        let table = build_texel_table(&m, 2).unwrap();
        let base = canonical_positions(&table, &m.positions).unwrap();
        let q = Quaternion::from_axis_angle(&Vec3::new(0.2, -1.0, 0.5), 1.1);
        let tr = vec![DualQuaternion::from_rotation_translation(&q, &Vec3::new(0.3, 0.0, 1.0)); table.len()];
        let mut maps = GaussianParamMaps::neutral(2);
        let a = pose_gaussians(&table, &base, &maps, &tr).unwrap();
        let delta = Vec3::new(1e-3, -2e-3, 5e-4);
        maps.offset.iter_mut().for_each(|o| *o += delta);
        let b = pose_gaussians(&table, &base, &maps, &tr).unwrap();
        for (pa, pb) in a.positions.iter().zip(&b.positions) {
            assert_abs_diff_eq!(pb - pa, q.rotate(&delta), epsilon = 1e-14);
        }
    }

    #[test]
    fn non_finite_offset_names_the_gaussian() {
        let m = square();
        let table = build_texel_table(&m, 2).unwrap();
        let base = canonical_positions(&table, &m.positions).unwrap();
        let mut maps = GaussianParamMaps::neutral(2);
        let t = table.entries()[1].texel_index(2);
        maps.offset[t] = Vec3::new(f64::NAN, 0.0, 0.0);
        let tr = vec![DualQuaternion::IDENTITY; table.len()];
        let err = pose_gaussians(&table, &base, &maps, &tr).unwrap_err();
        assert!(err.to_string().contains("gaussian 1"), "{err}");
    }

    #[test]
    fn zero_raw_maps_activate_to_template_defaults() {
        let r = 4;
        let plane = r * r;
        let cfg = ActivationConfig {
            offset_max: 0.1,
            scale_init: 0.02,
            scale_min: MIN_SCALE,
            scale_max: 1.0,
        };
        let mask = vec![true; plane];
        let maps = activate(
            &vec![0.0; GEOMETRY_CHANNELS * plane],
            &vec![0.0; APPEARANCE_CHANNELS * plane],
            &mask,
            r,
            &cfg,
        )
        .unwrap();
        assert!(maps.offset.iter().all(|o| *o == Vec3::zeros()));
        assert!(maps.rotation.iter().all(|q| *q == Quaternion::IDENTITY));
        assert!(maps.scale.iter().all(|s| *s == Vec3::repeat(0.02)));
        assert!(maps.opacity.iter().all(|a| *a == 0.5));
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let r = 2;
        let plane = r * r;
        let cfg = ActivationConfig {
            offset_max: 0.1,
            scale_init: 0.05,
            scale_min: MIN_SCALE,
            scale_max: 10.0,
        };
        let mask = vec![true, false, true, true];
        let geo: Vec<f64> = (0..GEOMETRY_CHANNELS * plane).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let app: Vec<f64> = (0..APPEARANCE_CHANNELS * plane).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = GaussianParamMaps::zeros(r);
        for t in 0..plane {
            let mut c = [0.0; TEXEL_CHANNELS];
            c.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            w.set_texel_channels(t, &c);
        }
        let loss = |g: &[f64], a: &[f64]| -> f64 {
            let m = activate(g, a, &mask, r, &cfg).unwrap();
            (0..plane)
                .map(|t| {
                    let x = m.texel_channels(t);
                    let y = w.texel_channels(t);
                    x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>()
                })
                .sum()
        };
        let (dg, da) = activate_backward(&geo, &mask, r, &cfg, &w);
        let h = 1e-6;
        for i in 0..geo.len() {
            let mut p = geo.clone();
            let mut m = geo.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &app) - loss(&m, &app)) / (2.0 * h);
            assert_abs_diff_eq!(dg[i], fd, epsilon = 1e-7);
        }
        for i in (0..app.len()).step_by(7) {
            let mut p = app.clone();
            let mut m = app.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&geo, &p) - loss(&geo, &m)) / (2.0 * h);
            assert_abs_diff_eq!(da[i], fd, epsilon = 1e-7);
        }
    }
}
