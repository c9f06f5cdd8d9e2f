//! Skeleton, embedded deformation graph and dual-quaternion skinning.
//!
//! A frame is evaluated in two steps: the template is deformed in canonical
//! (unposed) space by the embedded graph plus per-vertex displacements, then
//! the canonical vertices are skinned to world space.

use crate::error::{Error, Result};
use crate::math::{dq_blend, euler_xyz_to_rotmat, DualQuaternion, Quaternion, Vec3};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest transform relative to the parent (world for the root).
    pub rest_rotation: Quaternion,
    pub rest_translation: Vec3,
}

impl Joint {
    fn rest_local(&self) -> DualQuaternion {
        DualQuaternion::from_rotation_translation(&self.rest_rotation, &self.rest_translation)
    }
}

/// Topologically sorted joint hierarchy with a single root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        let problems = Self::check(&joints);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self { joints })
    }

    pub(crate) fn check(joints: &[Joint]) -> Vec<String> {
        let mut problems = Vec::new();
        if joints.is_empty() {
            problems.push("skeleton has no joints".to_string());
        }
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 {
            problems.push(format!("skeleton must have exactly one root, found {roots}"));
        }
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    problems.push(format!(
                        "joint {i} ({}) has parent {p}; parents must precede children",
                        j.name
                    ));
                }
            }
            if (j.rest_rotation.norm() - 1.0).abs() > 1e-6 {
                problems.push(format!("joint {i} ({}) rest rotation is not unit", j.name));
            }
            if !j.rest_translation.iter().all(|v| v.is_finite()) {
                problems.push(format!("joint {i} ({}) rest translation is not finite", j.name));
            }
        }
        problems
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Degrees of freedom of a pose: three rotational per joint plus the root
    /// translation.
    pub fn dof_count(&self) -> usize {
        3 * self.joints.len() + 3
    }

    pub fn rest_pose(&self) -> PoseFrame {
        PoseFrame::identity(0, self.joints.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame_id: u64,
    pub root_translation: Vec3,
    /// Local rotation per joint, applied after the joint's rest transform.
    pub rotations: Vec<Quaternion>,
}

impl PoseFrame {
    pub fn identity(frame_id: u64, joints: usize) -> Self {
        Self {
            frame_id,
            root_translation: Vec3::zeros(),
            rotations: vec![Quaternion::IDENTITY; joints],
        }
    }

    /// Normalizes every rotation and checks finiteness.
    pub fn normalized(mut self) -> Result<Self> {
        if !self.root_translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "pose frame {} has a non-finite root translation",
                self.frame_id
            )));
        }
        for q in self.rotations.iter_mut() {
            *q = q.normalize()?;
        }
        Ok(self)
    }
}

/// The last `k` poses with root translations expressed relative to the most
/// recent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionWindow {
    frames: Vec<PoseFrame>,
}

impl MotionWindow {
    pub fn new(mut frames: Vec<PoseFrame>) -> Result<Self> {
        let last = frames
            .last()
            .ok_or_else(|| Error::invalid("motion window needs at least one frame"))?
            .root_translation;
        for f in frames.iter_mut() {
            f.root_translation -= last;
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn current(&self) -> &PoseFrame {
        self.frames.last().expect("window is never empty")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Global rigid transform of every joint for `pose`.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &PoseFrame) -> Result<Vec<DualQuaternion>> {
    if pose.rotations.len() != skeleton.len() {
        return Err(Error::Mismatch {
            what: "pose joint count",
            expected: skeleton.len(),
            found: pose.rotations.len(),
        });
    }
    let mut globals: Vec<DualQuaternion> = Vec::with_capacity(skeleton.len());
    for (joint, rot) in skeleton.joints.iter().zip(&pose.rotations) {
        let local = joint
            .rest_local()
            .compose(&DualQuaternion::from_rotation(&rot.normalize()?));
        let global = match joint.parent {
            Some(p) => globals[p].compose(&local),
            None => DualQuaternion::from_translation(&pose.root_translation).compose(&local),
        };
        globals.push(global);
    }
    Ok(globals)
}

/// Per-joint transforms taking bind-pose geometry to `pose`:
/// `global(pose) ∘ global(rest)⁻¹`.
pub fn skinning_transforms(skeleton: &Skeleton, pose: &PoseFrame) -> Result<Vec<DualQuaternion>> {
    let rest = forward_kinematics(skeleton, &skeleton.rest_pose())?;
    let posed = forward_kinematics(skeleton, pose)?;
    posed
        .iter()
        .zip(&rest)
        .map(|(p, r)| p.compose(&r.inverse()).normalize())
        .collect()
}

/// Sparse influence list, `(index, weight)` pairs.
pub type Influences = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedMesh {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    /// UV index per face corner.
    pub face_uvs: Vec<[usize; 3]>,
    pub skin_weights: Vec<Influences>,
}

impl SkinnedMesh {
    pub fn validate(&self, joint_count: Option<usize>) -> Result<()> {
        let problems = self.problems(joint_count);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub(crate) fn problems(&self, joint_count: Option<usize>) -> Vec<String> {
        let mut p = Vec::new();
        let nv = self.positions.len();
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i >= nv) {
                p.push(format!("face {f} references a vertex outside 0..{nv}"));
            }
        }
        if self.face_uvs.len() != self.faces.len() {
            p.push(format!(
                "mesh has {} faces but {} UV faces",
                self.faces.len(),
                self.face_uvs.len()
            ));
        }
        for (f, face) in self.face_uvs.iter().enumerate() {
            if face.iter().any(|&i| i >= self.uvs.len()) {
                p.push(format!("face {f} references a UV outside 0..{}", self.uvs.len()));
            }
        }
        for (i, uv) in self.uvs.iter().enumerate() {
            if !uv.iter().all(|c| (0.0..=1.0).contains(c)) {
                p.push(format!("uv {i} = {uv:?} lies outside [0,1]^2"));
            }
        }
        if self.skin_weights.len() != nv {
            p.push(format!(
                "skinning has {} weight rows for {nv} vertices",
                self.skin_weights.len()
            ));
        }
        for (v, row) in self.skin_weights.iter().enumerate() {
            p.extend(influence_problems("vertex", v, row, "joint", joint_count));
        }
        p
    }
}

fn influence_problems(
    owner: &str,
    index: usize,
    row: &Influences,
    target: &str,
    count: Option<usize>,
) -> Vec<String> {
    let mut p = Vec::new();
    if row.is_empty() {
        p.push(format!("{owner} {index} has no {target} influences"));
        return p;
    }
    let sum: f64 = row.iter().map(|(_, w)| w).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        p.push(format!("{owner} {index} {target} weights sum to {sum}, expected 1"));
    }
    for &(j, w) in row {
        if !(w >= 0.0) || !w.is_finite() {
            p.push(format!("{owner} {index} has invalid weight {w} for {target} {j}"));
        }
        if let Some(n) = count {
            if j >= n {
                p.push(format!("{owner} {index} references {target} {j} (only {n} exist)"));
            }
        }
    }
    p
}

/// Static part of the embedded deformation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedGraph {
    pub nodes: Vec<Vec3>,
    /// Node influences per template vertex.
    pub bindings: Vec<Influences>,
}

impl EmbeddedGraph {
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        let p = self.problems(vertex_count);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub(crate) fn problems(&self, vertex_count: usize) -> Vec<String> {
        let mut p = Vec::new();
        if self.bindings.len() != vertex_count {
            p.push(format!(
                "graph binds {} vertices, mesh has {vertex_count}",
                self.bindings.len()
            ));
        }
        for (v, row) in self.bindings.iter().enumerate() {
            p.extend(influence_problems("vertex", v, row, "node", Some(self.nodes.len())));
        }
        p
    }
}

/// Per-frame graph state: node Euler angles (radians, intrinsic XYZ), node
/// translations and per-vertex displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFrame {
    pub angles: Vec<Vec3>,
    pub translations: Vec<Vec3>,
    pub displacements: Vec<Vec3>,
}

impl GraphFrame {
    pub fn rest(nodes: usize, vertices: usize) -> Self {
        Self {
            angles: vec![Vec3::zeros(); nodes],
            translations: vec![Vec3::zeros(); nodes],
            displacements: vec![Vec3::zeros(); vertices],
        }
    }

    pub(crate) fn problems(&self, nodes: usize, vertices: usize) -> Vec<String> {
        let mut p = Vec::new();
        if self.angles.len() != nodes || self.translations.len() != nodes {
            p.push(format!(
                "graph frame has {} angles / {} translations for {nodes} nodes",
                self.angles.len(),
                self.translations.len()
            ));
        }
        if self.displacements.len() != vertices {
            p.push(format!(
                "graph frame has {} displacements for {vertices} vertices",
                self.displacements.len()
            ));
        }
        let finite = self
            .angles
            .iter()
            .chain(&self.translations)
            .chain(&self.displacements)
            .all(|v| v.iter().all(|c| c.is_finite()));
        if !finite {
            p.push("graph frame contains non-finite values".to_string());
        }
        p
    }
}

/// Canonical vertices `D_i + Σ_j w_ij (R(A_j)(V_i − G_j) + G_j + T_j)`.
pub fn embedded_deform(
    mesh: &SkinnedMesh,
    graph: &EmbeddedGraph,
    frame: &GraphFrame,
) -> Result<Vec<Vec3>> {
    let nv = mesh.positions.len();
    let mut problems = graph.problems(nv);
    problems.extend(frame.problems(graph.nodes.len(), nv));
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let rotations: Vec<_> = frame.angles.iter().map(euler_xyz_to_rotmat).collect();
    Ok(mesh
        .positions
        .iter()
        .zip(&graph.bindings)
        .zip(&frame.displacements)
        .map(|((v, binding), d)| {
            let mut acc = *d;
            for &(j, w) in binding {
                let g = graph.nodes[j];
                acc += w * (rotations[j] * (v - g) + g + frame.translations[j]);
            }
            acc
        })
        .collect())
}

/// Poses canonical vertices with the DLB-blended joint transforms.
pub fn skin_vertices(
    canonical: &[Vec3],
    mesh: &SkinnedMesh,
    joint_transforms: &[DualQuaternion],
) -> Result<Vec<Vec3>> {
    if canonical.len() != mesh.skin_weights.len() {
        return Err(Error::Mismatch {
            what: "canonical vertex count",
            expected: mesh.skin_weights.len(),
            found: canonical.len(),
        });
    }
    canonical
        .iter()
        .zip(&mesh.skin_weights)
        .enumerate()
        .map(|(i, (v, row))| Ok(blend_influences(row, joint_transforms, i)?.transform_point(v)))
        .collect()
}

pub(crate) fn blend_influences(
    row: &Influences,
    transforms: &[DualQuaternion],
    owner: usize,
) -> Result<DualQuaternion> {
    let mut weights = Vec::with_capacity(row.len());
    let mut dqs = Vec::with_capacity(row.len());
    for &(j, w) in row {
        let dq = transforms.get(j).ok_or_else(|| {
            Error::invalid(format!(
                "element {owner} references joint {j}, only {} transforms given",
                transforms.len()
            ))
        })?;
        weights.push(w);
        dqs.push(*dq);
    }
    dq_blend(&weights, &dqs)
}

/// Area-weighted unit vertex normals. Vertices touched by no
/// non-degenerate face get a zero normal.
pub fn compute_vertex_normals(positions: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for f in faces {
        let (a, b, c) = (positions[f[0]], positions[f[1]], positions[f[2]]);
        // |cross| is twice the area; the factor is common to all faces.
        let n = (b - a).cross(&(c - a));
        if 0.5 * n.norm() <= 1e-12 {
            continue;
        }
        for &i in f {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

/// Template mesh, skeleton and embedded graph of one character.
#[derive(Debug, Clone)]
pub struct Rig {
    pub mesh: SkinnedMesh,
    pub skeleton: Skeleton,
    pub graph: EmbeddedGraph,
}

/// Geometry of one evaluated frame.
#[derive(Debug, Clone)]
pub struct RigFrame {
    pub frame_id: u64,
    pub canonical: Vec<Vec3>,
    pub posed: Vec<Vec3>,
    pub joint_transforms: Vec<DualQuaternion>,
}

impl Rig {
    pub fn new(mesh: SkinnedMesh, skeleton: Skeleton, graph: EmbeddedGraph) -> Result<Self> {
        let mut problems = mesh.problems(Some(skeleton.len()));
        problems.extend(graph.problems(mesh.positions.len()));
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            mesh,
            skeleton,
            graph,
        })
    }

    pub fn rest_graph_frame(&self) -> GraphFrame {
        GraphFrame::rest(self.graph.nodes.len(), self.mesh.positions.len())
    }

    pub fn evaluate(&self, pose: &PoseFrame, graph_frame: &GraphFrame) -> Result<RigFrame> {
        let canonical = embedded_deform(&self.mesh, &self.graph, graph_frame)?;
        let joint_transforms = skinning_transforms(&self.skeleton, pose)?;
        let posed = skin_vertices(&canonical, &self.mesh, &joint_transforms)?;
        Ok(RigFrame {
            frame_id: pose.frame_id,
            canonical,
            posed,
            joint_transforms,
        })
    }
}
