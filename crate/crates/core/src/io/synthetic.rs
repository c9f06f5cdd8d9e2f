//! Deterministic synthetic bundle: a capped tube with a bending, twisting
//! two-joint skeleton, a ring of cameras and ground-truth parameter maps
//! rendered into float images.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    image_file_name, load_scene, write_json, write_obj, write_param_maps, CameraDoc, CamerasDoc, GraphDoc,
    GraphFrameDoc, Manifest, ObjMesh, PoseDoc, Scene, SkeletonDoc, SkinningDoc, MANIFEST_FILE,
};
use crate::avatar::{assemble_splat_frame, canonical_positions, Avatar, GaussianParamMaps};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{Quaternion, ShCoeffs, Vec3, SH_BASES, SH_Y00};
use crate::render::{render_reference, Camera, RenderOptions};
use crate::rig::{EmbeddedGraph, GraphFrame, Joint, PoseFrame, Rig, Skeleton, SkinnedMesh};

pub const TUBE_RADIUS: f64 = 0.25;
pub const TUBE_LENGTH: f64 = 1.0;
const RINGS: usize = 9;
const SEGMENTS: usize = 16;
const GRAPH_NODES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub cameras: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cameras: 4,
            frames: 8,
            width: 96,
            height: 96,
            resolution: 32,
            seed: 7,
        }
    }
}

/// The synthetic scene in memory, before anything is rendered or written.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub rig: Rig,
    pub cameras: Vec<Camera>,
    pub poses: Vec<PoseFrame>,
    pub graph_frames: Vec<GraphFrame>,
    pub gt_maps: GaussianParamMaps,
    pub background: [f64; 3],
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn tube_geometry() -> ObjMesh {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let ring_vertex = |k: usize, s: usize| k * SEGMENTS + s % SEGMENTS;
    for k in 0..RINGS {
        let y = TUBE_LENGTH * k as f64 / (RINGS - 1) as f64;
        for s in 0..SEGMENTS {
            let a = TAU * s as f64 / SEGMENTS as f64;
            positions.push(Vec3::new(TUBE_RADIUS * a.cos(), y, TUBE_RADIUS * a.sin()));
        }
    }
    // Side chart: one extra UV column closes the seam.
    let side_uv = |k: usize, s: usize| k * (SEGMENTS + 1) + s;
    for k in 0..RINGS {
        for s in 0..=SEGMENTS {
            uvs.push([
                0.02 + 0.96 * s as f64 / SEGMENTS as f64,
                0.27 + 0.71 * k as f64 / (RINGS - 1) as f64,
            ]);
        }
    }
    for k in 0..RINGS - 1 {
        for s in 0..SEGMENTS {
            faces.push([ring_vertex(k, s), ring_vertex(k + 1, s), ring_vertex(k, s + 1)]);
            face_uvs.push([side_uv(k, s), side_uv(k + 1, s), side_uv(k, s + 1)]);
            faces.push([ring_vertex(k, s + 1), ring_vertex(k + 1, s), ring_vertex(k + 1, s + 1)]);
            face_uvs.push([side_uv(k, s + 1), side_uv(k + 1, s), side_uv(k + 1, s + 1)]);
        }
    }
    // Caps: disc charts below the side chart.
    for (ring, y, cu, outward_down) in [(0, 0.0, 0.25, true), (RINGS - 1, TUBE_LENGTH, 0.75, false)] {
        let center = positions.len();
        positions.push(Vec3::new(0.0, y, 0.0));
        let center_uv = uvs.len();
        uvs.push([cu, 0.13]);
        let first_uv = uvs.len();
        for s in 0..SEGMENTS {
            let a = TAU * s as f64 / SEGMENTS as f64;
            uvs.push([cu + 0.11 * a.cos(), 0.13 + 0.11 * a.sin()]);
        }
        for s in 0..SEGMENTS {
            let (v0, v1) = (ring_vertex(ring, s), ring_vertex(ring, s + 1));
            let (t0, t1) = (first_uv + s, first_uv + (s + 1) % SEGMENTS);
            if outward_down {
                faces.push([center, v0, v1]);
                face_uvs.push([center_uv, t0, t1]);
            } else {
                faces.push([center, v1, v0]);
                face_uvs.push([center_uv, t1, t0]);
            }
        }
    }
    ObjMesh {
        positions,
        uvs,
        faces,
        face_uvs,
    }
}

fn tube_rig() -> Result<Rig> {
    let obj = tube_geometry();
    let skin_weights = obj
        .positions
        .iter()
        .map(|p| {
            let w1 = smoothstep((p.y - 0.3) / 0.4);
            [(0, 1.0 - w1), (1, w1)].into_iter().filter(|(_, w)| *w > 0.0).collect()
        })
        .collect();
    let nodes: Vec<Vec3> = (0..GRAPH_NODES)
        .map(|j| Vec3::new(0.0, TUBE_LENGTH * j as f64 / (GRAPH_NODES - 1) as f64, 0.0))
        .collect();
    let bindings = obj
        .positions
        .iter()
        .map(|p| {
            let x = (p.y / TUBE_LENGTH * (GRAPH_NODES - 1) as f64).clamp(0.0, (GRAPH_NODES - 1) as f64);
            let j = (x.floor() as usize).min(GRAPH_NODES - 2);
            let t = x - j as f64;
            [(j, 1.0 - t), (j + 1, t)].into_iter().filter(|(_, w)| *w > 0.0).collect()
        })
        .collect();
    let skeleton = Skeleton::new(vec![
        Joint {
            name: "base".into(),
            parent: None,
            rest_rotation: Quaternion::IDENTITY,
            rest_translation: Vec3::zeros(),
        },
        Joint {
            name: "mid".into(),
            parent: Some(0),
            rest_rotation: Quaternion::IDENTITY,
            rest_translation: Vec3::new(0.0, 0.5 * TUBE_LENGTH, 0.0),
        },
    ])?;
    let mesh = SkinnedMesh {
        positions: obj.positions,
        faces: obj.faces,
        uvs: obj.uvs,
        face_uvs: obj.face_uvs,
        skin_weights,
    };
    Rig::new(mesh, skeleton, EmbeddedGraph { nodes, bindings })
}

/// Sum of a few random plane waves, normalized to roughly [-1, 1].
struct SmoothField {
    waves: Vec<(Vec3, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, max_freq: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let dir = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                (dir * rng.gen_range(0.3 * max_freq..max_freq), rng.gen_range(0.0..TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: &Vec3) -> f64 {
        0.5 * self.waves.iter().map(|(k, phi)| (k.dot(p) + phi).sin()).sum::<f64>()
    }
}

fn gt_maps(avatar: &Avatar, rng: &mut ChaCha8Rng) -> Result<GaussianParamMaps> {
    let r = avatar.resolution();
    let rest = canonical_positions(&avatar.table, &avatar.rig.mesh.positions)?;
    let mut f = |freq: f64| SmoothField::new(rng, freq);
    let rot: Vec<SmoothField> = (0..3).map(|_| f(6.0)).collect();
    let scl: Vec<SmoothField> = (0..3).map(|_| f(6.0)).collect();
    let opa = f(6.0);
    let dc: Vec<SmoothField> = (0..3).map(|_| f(9.0)).collect();
    let higher: Vec<SmoothField> = (0..3 * (SH_BASES - 1)).map(|_| f(5.0)).collect();
    let stripe_phase = rng.gen_range(0.0..TAU);
    let texel_scale = 0.96 / r as f64;

    let mut maps = GaussianParamMaps::neutral(r);
    for (e, p) in avatar.table.entries().iter().zip(&rest) {
        let t = e.texel_index(r);
        let rv = Vec3::new(rot[0].at(p), rot[1].at(p), rot[2].at(p)) * 0.8;
        maps.rotation[t] = match rv.try_normalize(1e-12) {
            Some(axis) => Quaternion::from_axis_angle(&axis, rv.norm()),
            None => Quaternion::IDENTITY,
        };
        maps.scale[t] = Vec3::new(scl[0].at(p), scl[1].at(p), scl[2].at(p)).map(|v| texel_scale * (0.3 * v).exp());
        maps.opacity[t] = (0.82 + 0.12 * opa.at(p)).clamp(0.05, 0.95);
        let mut sh = ShCoeffs::default();
        let stripe = 0.15 * (14.0 * p.y + stripe_phase).sin();
        for c in 0..3 {
            let color = (0.5 + 0.3 * dc[c].at(p) + stripe).clamp(0.05, 0.95);
            sh.set(0, c, (color - 0.5) / SH_Y00);
            for b in 1..SH_BASES {
                sh.set(b, c, 0.04 * higher[3 * (b - 1) + c].at(p));
            }
        }
        maps.sh[t] = sh;
    }
    Ok(maps)
}

fn poses(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<PoseFrame> {
    let phases: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..TAU)).collect();
    (0..spec.frames)
        .map(|f| {
            let t = TAU * f as f64 / spec.frames.max(1) as f64;
            let y = Vec3::y();
            let base = Quaternion::from_axis_angle(&y, 0.5 * (t + phases[0]).sin())
                * Quaternion::from_axis_angle(&Vec3::x(), 0.15 * (t + phases[1]).sin());
            let mid = Quaternion::from_axis_angle(&Vec3::z(), 0.8 * (t + phases[2]).sin())
                * Quaternion::from_axis_angle(&y, 0.3 * (2.0 * t + phases[3]).sin());
            PoseFrame {
                frame_id: f as u64,
                root_translation: Vec3::new(0.05 * (t + phases[4]).sin(), 0.0, 0.05 * (t + phases[5]).cos()),
                rotations: vec![base, mid],
            }
        })
        .collect()
}

fn graph_frames(spec: &SyntheticSpec, rig: &Rig, rng: &mut ChaCha8Rng) -> Vec<GraphFrame> {
    let n = rig.graph.nodes.len();
    let phases: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..TAU)).collect();
    (0..spec.frames)
        .map(|f| {
            let t = TAU * f as f64 / spec.frames.max(1) as f64;
            let mut g = rig.rest_graph_frame();
            for j in 0..n {
                g.angles[j] = Vec3::new(0.0, 0.05 * (t + phases[j]).sin(), 0.0);
                g.translations[j] = Vec3::new(0.01 * (t + phases[n + j]).sin(), 0.0, 0.0);
            }
            g
        })
        .collect()
}

fn ring_cameras(spec: &SyntheticSpec) -> Result<Vec<Camera>> {
    let target = Vec3::new(0.0, 0.5 * TUBE_LENGTH, 0.0);
    let focal = 1.8 * spec.width.min(spec.height) as f64;
    (0..spec.cameras)
        .map(|c| {
            let a = TAU * c as f64 / spec.cameras as f64 + PI / 8.0;
            let h = if c % 2 == 0 { 0.9 } else { 0.2 };
            let eye = Vec3::new(3.2 * a.cos(), h, 3.2 * a.sin());
            Camera::look_at(&eye, &target, &Vec3::y(), focal, spec.width, spec.height)
        })
        .collect()
}

pub fn build_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    if spec.cameras == 0 || spec.frames == 0 || spec.width == 0 || spec.height == 0 || spec.resolution == 0 {
        return Err(Error::Config(format!("synthetic scene needs positive sizes, got {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rig = tube_rig()?;
    let avatar = Avatar::new(rig.clone(), spec.resolution)?;
    let gt_maps = gt_maps(&avatar, &mut rng)?;
    let poses = poses(spec, &mut rng);
    let graph_frames = graph_frames(spec, &rig, &mut rng);
    Ok(SyntheticScene {
        spec: *spec,
        rig,
        cameras: ring_cameras(spec)?,
        poses,
        graph_frames,
        gt_maps,
        background: [0.0; 3],
    })
}

/// Renders the ground-truth image of every (frame, camera) pair with the
/// reference compositor, indexed `[frame][camera]`.
pub fn render_ground_truth(scene: &SyntheticScene) -> Result<Vec<Vec<Image>>> {
    let avatar = Avatar::new(scene.rig.clone(), scene.spec.resolution)?;
    scene
        .poses
        .par_iter()
        .zip(&scene.graph_frames)
        .map(|(pose, gf)| {
            let frame = scene.rig.evaluate(pose, gf)?;
            let splats = assemble_splat_frame(&avatar, &scene.gt_maps, &frame)?;
            scene
                .cameras
                .iter()
                .map(|cam| Ok(render_reference(&splats, cam, scene.background, &RenderOptions::default())?.image))
                .collect()
        })
        .collect()
}

/// Writes the bundle for `spec` into `dir`, with ground-truth images, and
/// loads it back.
pub fn make_synthetic_scene(spec: &SyntheticSpec, dir: &Path) -> Result<Scene> {
    write_synthetic_bundle(spec, dir, true)?;
    load_scene(dir)
}

/// Writes the bundle files. Without images the manifest omits the image
/// directory.
pub fn write_synthetic_bundle(spec: &SyntheticSpec, dir: &Path, images: bool) -> Result<()> {
    let scene = build_synthetic(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mesh = &scene.rig.mesh;
    let obj = ObjMesh {
        positions: mesh.positions.clone(),
        uvs: mesh.uvs.clone(),
        faces: mesh.faces.clone(),
        face_uvs: mesh.face_uvs.clone(),
    };
    let path = dir.join("template.obj");
    std::fs::write(&path, write_obj(&obj)).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("skeleton.json"), &SkeletonDoc::from_skeleton(&scene.rig.skeleton))?;
    write_json(
        &dir.join("skinning.json"),
        &SkinningDoc {
            weights: mesh.skin_weights.clone(),
        },
    )?;
    write_json(
        &dir.join("graph.json"),
        &GraphDoc {
            nodes: scene.rig.graph.nodes.iter().map(|n| [n.x, n.y, n.z]).collect(),
            bindings: scene.rig.graph.bindings.clone(),
            frames: Some(scene.graph_frames.iter().map(GraphFrameDoc::from_frame).collect()),
        },
    )?;
    write_json(
        &dir.join("cameras.json"),
        &CamerasDoc {
            cameras: scene
                .cameras
                .iter()
                .enumerate()
                .map(|(i, c)| CameraDoc::from_camera(format!("ring{i:02}"), c))
                .collect(),
        },
    )?;
    write_json(
        &dir.join("poses.json"),
        &scene.poses.iter().map(PoseDoc::from_pose).collect::<Vec<_>>(),
    )?;
    let avatar = Avatar::new(scene.rig.clone(), spec.resolution)?;
    write_param_maps(&dir.join("gt_params.ashp"), &scene.gt_maps, &avatar.table.mask())?;
    if images {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (f, row) in render_ground_truth(&scene)?.iter().enumerate() {
            for (c, img) in row.iter().enumerate() {
                img.write_float(&img_dir.join(image_file_name(f, c)))?;
            }
        }
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &Manifest {
            mesh: "template.obj".into(),
            skeleton: "skeleton.json".into(),
            skinning: "skinning.json".into(),
            graph: "graph.json".into(),
            cameras: "cameras.json".into(),
            poses: "poses.json".into(),
            images: images.then(|| "images".into()),
            resolution: spec.resolution,
            background: scene.background,
            gt_checkpoint: Some("gt_params.ashp".into()),
        },
    )
}
