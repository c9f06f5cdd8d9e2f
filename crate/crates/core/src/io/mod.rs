//! Scene bundles on disk.
//!
//! A bundle is a directory holding a `manifest.json` that points at an OBJ
//! template (with `vt` and `f v/vt` corners), JSON skeleton, skinning,
//! deformation graph, camera and pose files, and an image directory with
//! one float image per (frame, camera), named `f{frame:04}_c{camera:02}.ashi`.

pub mod checkpoint;
pub mod synthetic;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{Quaternion, Vec3};
use crate::render::Camera;
use crate::rig::{EmbeddedGraph, GraphFrame, Joint, PoseFrame, Rig, Skeleton, SkinnedMesh};

pub use checkpoint::{read_param_maps, write_param_maps, PARAM_MAPS_VERSION};
pub use synthetic::{build_synthetic, make_synthetic_scene, render_ground_truth, write_synthetic_bundle, SyntheticScene, SyntheticSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub mesh: String,
    pub skeleton: String,
    pub skinning: String,
    pub graph: String,
    pub cameras: String,
    pub poses: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<String>,
    pub resolution: usize,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDoc {
    pub name: String,
    pub parent: Option<usize>,
    /// `[w, x, y, z]`.
    pub rest_rotation: [f64; 4],
    pub rest_translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonDoc {
    pub joints: Vec<JointDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkinningDoc {
    /// Per vertex, `[joint, weight]` pairs.
    pub weights: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFrameDoc {
    pub angles: Vec<[f64; 3]>,
    pub translations: Vec<[f64; 3]>,
    /// Omitted means zero displacement.
    #[serde(default)]
    pub displacements: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub nodes: Vec<[f64; 3]>,
    pub bindings: Vec<Vec<(usize, f64)>>,
    /// One per pose; omitted means the graph stays at rest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<GraphFrameDoc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub name: String,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "W2C")]
    pub w2c: [f64; 16],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasDoc {
    pub cameras: Vec<CameraDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDoc {
    pub root: [f64; 3],
    /// Local joint rotations, `[w, x, y, z]`.
    pub joints: Vec<[f64; 4]>,
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl GraphFrameDoc {
    fn to_frame(&self, vertices: usize) -> GraphFrame {
        GraphFrame {
            angles: self.angles.iter().map(v3).collect(),
            translations: self.translations.iter().map(v3).collect(),
            displacements: match &self.displacements {
                Some(d) => d.iter().map(v3).collect(),
                None => vec![Vec3::zeros(); vertices],
            },
        }
    }

    pub fn from_frame(f: &GraphFrame) -> Self {
        Self {
            angles: f.angles.iter().map(arr3).collect(),
            translations: f.translations.iter().map(arr3).collect(),
            displacements: f
                .displacements
                .iter()
                .any(|d| *d != Vec3::zeros())
                .then(|| f.displacements.iter().map(arr3).collect()),
        }
    }
}

impl CameraDoc {
    pub fn from_camera(name: impl Into<String>, cam: &Camera) -> Self {
        Self {
            name: name.into(),
            k: cam.intrinsics_matrix(),
            w2c: cam.world_to_camera_matrix(),
            width: cam.width,
            height: cam.height,
        }
    }
}

impl PoseDoc {
    pub fn from_pose(p: &PoseFrame) -> Self {
        Self {
            root: arr3(&p.root_translation),
            joints: p.rotations.iter().map(|q| q.to_array()).collect(),
        }
    }
}

impl SkeletonDoc {
    pub fn from_skeleton(s: &Skeleton) -> Self {
        Self {
            joints: s
                .joints()
                .iter()
                .map(|j| JointDoc {
                    name: j.name.clone(),
                    parent: j.parent,
                    rest_rotation: j.rest_rotation.to_array(),
                    rest_translation: arr3(&j.rest_translation),
                })
                .collect(),
        }
    }
}

/// Template geometry read from an OBJ file.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjMesh {
    pub positions: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub faces: Vec<[usize; 3]>,
    pub face_uvs: Vec<[usize; 3]>,
}

/// Parses `v`, `vt` and `f` records. Polygons are fan-triangulated; every
/// corner needs a texture index. Other records are ignored.
pub fn parse_obj(text: &str) -> std::result::Result<ObjMesh, Vec<String>> {
    let mut mesh = ObjMesh {
        positions: Vec::new(),
        uvs: Vec::new(),
        faces: Vec::new(),
        face_uvs: Vec::new(),
    };
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let rest: Vec<&str> = it.collect();
        let floats = |k: usize| -> Option<Vec<f64>> {
            let v: Vec<f64> = rest.iter().take(k).filter_map(|s| s.parse().ok()).collect();
            (v.len() == k).then_some(v)
        };
        match tag {
            "v" => match floats(3) {
                Some(v) => mesh.positions.push(Vec3::new(v[0], v[1], v[2])),
                None => problems.push(format!("line {line_no}: malformed vertex")),
            },
            "vt" => match floats(2) {
                Some(v) => mesh.uvs.push([v[0], v[1]]),
                None => problems.push(format!("line {line_no}: malformed texture coordinate")),
            },
            "f" => {
                let mut corners = Vec::with_capacity(rest.len());
                for c in &rest {
                    let mut parts = c.split('/');
                    let vi = parts.next().and_then(|s| s.parse::<i64>().ok());
                    let ti = parts.next().and_then(|s| s.parse::<i64>().ok());
                    match (vi, ti) {
                        (Some(v), Some(t)) => corners.push((v, t)),
                        (Some(_), None) => {
                            problems.push(format!("line {line_no}: face corner `{c}` has no texture index"));
                        }
                        _ => problems.push(format!("line {line_no}: malformed face corner `{c}`")),
                    }
                }
                if corners.len() != rest.len() {
                    continue;
                }
                if corners.len() < 3 {
                    problems.push(format!("line {line_no}: face with fewer than 3 corners"));
                    continue;
                }
                // OBJ indices are 1-based; negative values count from the end.
                let resolve = |i: i64, len: usize| -> Option<usize> {
                    match i {
                        i if i > 0 && (i as usize) <= len => Some(i as usize - 1),
                        i if i < 0 && (i.unsigned_abs() as usize) <= len => Some(len - i.unsigned_abs() as usize),
                        _ => None,
                    }
                };
                let mut idx = Vec::with_capacity(corners.len());
                for (v, t) in corners {
                    match (resolve(v, mesh.positions.len()), resolve(t, mesh.uvs.len())) {
                        (Some(v), Some(t)) => idx.push((v, t)),
                        _ => {
                            problems.push(format!("line {line_no}: face index out of range"));
                            break;
                        }
                    }
                }
                if idx.len() != rest.len() {
                    continue;
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0].0, idx[k].0, idx[k + 1].0]);
                    mesh.face_uvs.push([idx[0].1, idx[k].1, idx[k + 1].1]);
                }
            }
            _ => {}
        }
    }
    if mesh.faces.is_empty() && problems.is_empty() {
        problems.push("no faces".into());
    }
    if problems.is_empty() {
        Ok(mesh)
    } else {
        Err(problems)
    }
}

pub fn write_obj(mesh: &ObjMesh) -> String {
    let mut s = String::new();
    for p in &mesh.positions {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {} {}", t[0], t[1]);
    }
    for (f, t) in mesh.faces.iter().zip(&mesh.face_uvs) {
        let _ = writeln!(
            s,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            t[0] + 1,
            f[1] + 1,
            t[1] + 1,
            f[2] + 1,
            t[2] + 1
        );
    }
    s
}

pub fn image_file_name(frame: usize, camera: usize) -> String {
    format!("f{frame:04}_c{camera:02}.ashi")
}

/// A validated, fully loaded bundle.
#[derive(Debug, Clone)]
pub struct Scene {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub rig: Rig,
    pub camera_names: Vec<String>,
    pub cameras: Vec<Camera>,
    pub poses: Vec<PoseFrame>,
    /// One per pose.
    pub graph_frames: Vec<GraphFrame>,
}

impl Scene {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn image_path(&self, frame: usize, camera: usize) -> Option<PathBuf> {
        let dir = self.manifest.images.as_ref()?;
        Some(self.root.join(dir).join(image_file_name(frame, camera)))
    }

    pub fn load_image(&self, frame: usize, camera: usize) -> Result<Image> {
        let path = self
            .image_path(frame, camera)
            .ok_or_else(|| Error::invalid("scene has no image directory"))?;
        let img = Image::read_float(&path)?;
        let cam = &self.cameras[camera];
        if img.width() != cam.width || img.height() != cam.height {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "image is {}x{}, camera {camera} is {}x{}",
                    img.width(),
                    img.height(),
                    cam.width,
                    cam.height
                ),
            ));
        }
        Ok(img)
    }

    pub fn gt_checkpoint_path(&self) -> Option<PathBuf> {
        self.manifest.gt_checkpoint.as_ref().map(|p| self.root.join(p))
    }
}

/// Accumulates problems, each prefixed with the file it came from.
struct Problems(Vec<String>);

impl Problems {
    fn add(&mut self, file: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{file}: {msg}"));
    }

    fn extend(&mut self, file: &str, msgs: impl IntoIterator<Item = String>) {
        for m in msgs {
            self.add(file, m);
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(root: &Path, rel: &str, problems: &mut Problems) -> Option<T> {
    let path = root.join(rel);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            problems.add(rel, e);
            return None;
        }
    };
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.add(rel, e);
            None
        }
    }
}

/// Loads and cross-checks every file of the bundle at `root`, reporting all
/// problems found rather than the first.
pub fn load_scene(root: &Path) -> Result<Scene> {
    let mut problems = Problems(Vec::new());
    let Some(manifest) = read_json::<Manifest>(root, MANIFEST_FILE, &mut problems) else {
        return Err(Error::Validation(problems.0));
    };
    if manifest.resolution == 0 {
        problems.add(MANIFEST_FILE, "resolution must be positive");
    }
    if !manifest.background.iter().all(|c| c.is_finite()) {
        problems.add(MANIFEST_FILE, "background is not finite");
    }

    let obj = match std::fs::read_to_string(root.join(&manifest.mesh)) {
        Ok(text) => match parse_obj(&text) {
            Ok(m) => Some(m),
            Err(p) => {
                problems.extend(&manifest.mesh, p);
                None
            }
        },
        Err(e) => {
            problems.add(&manifest.mesh, e);
            None
        }
    };
    let skeleton_doc: Option<SkeletonDoc> = read_json(root, &manifest.skeleton, &mut problems);
    let skinning: Option<SkinningDoc> = read_json(root, &manifest.skinning, &mut problems);
    let graph_doc: Option<GraphDoc> = read_json(root, &manifest.graph, &mut problems);
    let cameras_doc: Option<CamerasDoc> = read_json(root, &manifest.cameras, &mut problems);
    let pose_docs: Option<Vec<PoseDoc>> = read_json(root, &manifest.poses, &mut problems);

    let skeleton = skeleton_doc.and_then(|doc| {
        let joints: Vec<Joint> = doc
            .joints
            .into_iter()
            .map(|j| Joint {
                name: j.name,
                parent: j.parent,
                rest_rotation: Quaternion::from_array(j.rest_rotation),
                rest_translation: v3(&j.rest_translation),
            })
            .collect();
        let p = Skeleton::check(&joints);
        if p.is_empty() {
            Skeleton::new(joints).ok()
        } else {
            problems.extend(&manifest.skeleton, p);
            None
        }
    });
    let joint_count = skeleton.as_ref().map(|s| s.len());

    let mesh = match (obj, skinning) {
        (Some(obj), Some(skin)) => {
            let mesh = SkinnedMesh {
                positions: obj.positions,
                faces: obj.faces,
                uvs: obj.uvs,
                face_uvs: obj.face_uvs,
                skin_weights: skin.weights,
            };
            let p = mesh.problems(joint_count);
            if p.is_empty() {
                Some(mesh)
            } else {
                problems.extend(&format!("{} + {}", manifest.mesh, manifest.skinning), p);
                None
            }
        }
        _ => None,
    };
    let vertex_count = mesh.as_ref().map(|m| m.positions.len());

    let mut graph_frame_docs = None;
    let graph = graph_doc.and_then(|doc| {
        let graph = EmbeddedGraph {
            nodes: doc.nodes.iter().map(v3).collect(),
            bindings: doc.bindings,
        };
        graph_frame_docs = doc.frames;
        match vertex_count {
            Some(nv) => {
                let p = graph.problems(nv);
                if p.is_empty() {
                    Some(graph)
                } else {
                    problems.extend(&manifest.graph, p);
                    None
                }
            }
            None => None,
        }
    });

    let mut camera_names = Vec::new();
    let mut cameras = Vec::new();
    if let Some(doc) = cameras_doc {
        if doc.cameras.is_empty() {
            problems.add(&manifest.cameras, "no cameras");
        }
        for (i, c) in doc.cameras.iter().enumerate() {
            match Camera::from_matrices(&c.k, &c.w2c, c.width, c.height) {
                Ok(cam) => {
                    camera_names.push(c.name.clone());
                    cameras.push(cam);
                }
                Err(e) => problems.add(&manifest.cameras, format!("camera {i} ({}): {e}", c.name)),
            }
        }
    }

    let mut poses = Vec::new();
    if let Some(docs) = pose_docs {
        if docs.is_empty() {
            problems.add(&manifest.poses, "no poses");
        }
        for (f, d) in docs.into_iter().enumerate() {
            if let Some(n) = joint_count {
                if d.joints.len() != n {
                    problems.add(
                        &manifest.poses,
                        format!("pose {f}: {} joint rotations for a {n}-joint skeleton", d.joints.len()),
                    );
                    continue;
                }
            }
            let pose = PoseFrame {
                frame_id: f as u64,
                root_translation: v3(&d.root),
                rotations: d.joints.iter().map(|q| Quaternion::from_array(*q)).collect(),
            };
            match pose.normalized() {
                Ok(p) => poses.push(p),
                Err(e) => problems.add(&manifest.poses, format!("pose {f}: {e}")),
            }
        }
    }

    let mut graph_frames = Vec::new();
    if let (Some(g), Some(nv)) = (&graph, vertex_count) {
        match graph_frame_docs {
            Some(docs) => {
                if docs.len() != poses.len() {
                    problems.add(
                        &manifest.graph,
                        format!("{} graph frames for {} poses", docs.len(), poses.len()),
                    );
                }
                for (f, d) in docs.iter().enumerate() {
                    let frame = d.to_frame(nv);
                    let p = frame.problems(g.nodes.len(), nv);
                    if p.is_empty() {
                        graph_frames.push(frame);
                    } else {
                        problems.extend(&manifest.graph, p.into_iter().map(|m| format!("frame {f}: {m}")));
                    }
                }
            }
            None => graph_frames = vec![GraphFrame::rest(g.nodes.len(), nv); poses.len()],
        }
    }

    if let Some(dir) = &manifest.images {
        for f in 0..poses.len() {
            for c in 0..cameras.len() {
                let name = image_file_name(f, c);
                if !root.join(dir).join(&name).is_file() {
                    problems.add(dir, format!("missing image {name}"));
                }
            }
        }
    }
    if let Some(ckpt) = &manifest.gt_checkpoint {
        if !root.join(ckpt).is_file() {
            problems.add(ckpt, "checkpoint not found");
        }
    }

    if !problems.0.is_empty() {
        return Err(Error::Validation(problems.0));
    }
    let (Some(mesh), Some(skeleton), Some(graph)) = (mesh, skeleton, graph) else {
        return Err(Error::Validation(vec!["scene is incomplete".into()]));
    };
    let rig = Rig::new(mesh, skeleton, graph)?;
    Ok(Scene {
        root: root.to_path_buf(),
        manifest,
        rig,
        camera_names,
        cameras,
        poses,
        graph_frames,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
