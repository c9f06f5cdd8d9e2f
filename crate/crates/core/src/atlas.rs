//! Texel table construction and motion-texture baking.
//!
//! A texel is covered when its center lies inside a UV triangle. Covered
//! texels are enumerated row-major by `(v, u)`; that order is the Gaussian
//! index used everywhere downstream.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result, TexelOverlap};
use crate::math::Vec3;
use crate::rig::{Influences, SkinnedMesh};

const BARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TexelEntry {
    pub u: u32,
    pub v: u32,
    pub face: usize,
    /// Barycentric weights of the face's three corners at the texel center.
    pub bary: [f64; 3],
    /// Interpolated joint influences, renormalized and sorted by joint.
    pub skin: Influences,
}

impl TexelEntry {
    pub fn texel_index(&self, resolution: usize) -> usize {
        self.v as usize * resolution + self.u as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TexelTable {
    resolution: usize,
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    entries: Vec<TexelEntry>,
}

impl TexelTable {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Number of covered texels, i.e. the Gaussian count.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TexelEntry] {
        &self.entries
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    /// Coverage mask over the full `R x R` grid.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.resolution * self.resolution];
        for e in &self.entries {
            m[e.texel_index(self.resolution)] = true;
        }
        m
    }

    /// Barycentric blend of per-vertex values at one covered texel.
    pub fn interpolate(&self, entry: &TexelEntry, values: &[Vec3]) -> Vec3 {
        let [a, b, c] = self.faces[entry.face];
        entry.bary[0] * values[a] + entry.bary[1] * values[b] + entry.bary[2] * values[c]
    }

    pub fn face_vertices(&self, entry: &TexelEntry) -> [usize; 3] {
        self.faces[entry.face]
    }

    pub(crate) fn check_vertex_count(&self, n: usize) -> Result<()> {
        if n != self.vertex_count {
            return Err(Error::Mismatch {
                what: "vertex count for texel table",
                expected: self.vertex_count,
                found: n,
            });
        }
        Ok(())
    }
}

struct Claim {
    face: usize,
    bary: [f64; 3],
    interior: bool,
}

fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 3] {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let wa = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let wb = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    [wa, wb, 1.0 - wa - wb]
}

/// Builds the texel table of `mesh` at `resolution` texels per side.
pub fn build_texel_table(mesh: &SkinnedMesh, resolution: usize) -> Result<TexelTable> {
    if resolution == 0 {
        return Err(Error::invalid("texel resolution must be positive"));
    }
    if mesh.uvs.is_empty() || mesh.face_uvs.len() != mesh.faces.len() {
        return Err(Error::invalid("mesh has no per-corner UV coordinates"));
    }
    let r = resolution;
    let rf = r as f64;
    let mut claims: Vec<Vec<Claim>> = (0..r * r).map(|_| Vec::new()).collect();
    let mut degenerate = Vec::new();

    for (f, uvf) in mesh.face_uvs.iter().enumerate() {
        let [a, b, c] = uvf.map(|i| mesh.uvs[i]);
        let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]));
        if area.abs() <= 1e-12 {
            degenerate.push(f);
            continue;
        }
        let lo = |k: usize| a[k].min(b[k]).min(c[k]);
        let hi = |k: usize| a[k].max(b[k]).max(c[k]);
        // Centers (i + 0.5) / R inside [lo, hi].
        let range = |k: usize| {
            let first = ((lo(k) * rf - 0.5).ceil().max(0.0)) as usize;
            let last = ((hi(k) * rf - 0.5).floor()).min(rf - 1.0);
            (first, last)
        };
        let (u0, u1) = range(0);
        let (v0, v1) = range(1);
        if u1 < 0.0 || v1 < 0.0 {
            continue;
        }
        for v in v0..=(v1 as usize) {
            for u in u0..=(u1 as usize) {
                let p = [(u as f64 + 0.5) / rf, (v as f64 + 0.5) / rf];
                let w = barycentric(p, a, b, c);
                let min = w[0].min(w[1]).min(w[2]);
                if min < -BARY_EPS {
                    continue;
                }
                claims[v * r + u].push(Claim {
                    face: f,
                    bary: w,
                    interior: min > BARY_EPS,
                });
            }
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::invalid(format!(
            "UV triangles with zero area: faces {degenerate:?}"
        )));
    }

    let mut entries = Vec::new();
    let mut overlaps = Vec::new();
    for (idx, list) in claims.into_iter().enumerate() {
        let (u, v) = ((idx % r) as u32, (idx / r) as u32);
        let Some(first) = list.first() else { continue };
        if list.len() > 1 && list.iter().any(|c| c.interior) {
            overlaps.push(TexelOverlap {
                u,
                v,
                faces: list.iter().map(|c| c.face).collect(),
            });
            continue;
        }
        // Faces were visited in ascending order, so the first claim has
        // the lowest face id.
        let face = first.face;
        let bary = first.bary;
        let corners = mesh.faces[face];
        entries.push(TexelEntry {
            u,
            v,
            face,
            bary,
            skin: blend_skin_weights(mesh, corners, bary),
        });
    }
    if !overlaps.is_empty() {
        return Err(Error::UvOverlap(overlaps));
    }
    Ok(TexelTable {
        resolution: r,
        vertex_count: mesh.positions.len(),
        faces: mesh.faces.clone(),
        entries,
    })
}

fn blend_skin_weights(mesh: &SkinnedMesh, corners: [usize; 3], bary: [f64; 3]) -> Influences {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (corner, w) in corners.iter().zip(bary) {
        let w = w.max(0.0);
        for &(j, sw) in &mesh.skin_weights[*corner] {
            *acc.entry(j).or_default() += w * sw;
        }
    }
    let total: f64 = acc.values().sum();
    acc.into_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(j, w)| (j, w / total))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Position,
    Normal,
}

impl TextureKind {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            TextureKind::Position => b"ASTP",
            TextureKind::Normal => b"ASTN",
        }
    }
}

/// `R x R x 3` texture with a coverage mask; uncovered texels are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTexture {
    pub kind: TextureKind,
    pub resolution: usize,
    pub texels: Vec<Vec3>,
    pub mask: Vec<bool>,
}

impl MotionTexture {
    fn empty(kind: TextureKind, resolution: usize) -> Self {
        Self {
            kind,
            resolution,
            texels: vec![Vec3::zeros(); resolution * resolution],
            mask: vec![false; resolution * resolution],
        }
    }

    pub fn at(&self, u: usize, v: usize) -> Option<Vec3> {
        let i = v * self.resolution + u;
        self.mask[i].then(|| self.texels[i])
    }

    /// Binary layout: magic (`ASTP` position / `ASTN` normal), `R` as u32 LE,
    /// `R*R*3` f32 LE texel values, then the mask bitmap (LSB first).
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.resolution * self.resolution;
        let mut out = Vec::with_capacity(8 + n * 12 + n.div_ceil(8));
        out.extend_from_slice(self.kind.magic());
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        for t in &self.texels {
            for c in t.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        let mut bits = vec![0u8; n.div_ceil(8)];
        for (i, m) in self.mask.iter().enumerate() {
            if *m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "motion texture";
        if bytes.len() < 8 {
            return Err(Error::format(ctx, "truncated header"));
        }
        let kind = match &bytes[0..4] {
            b"ASTP" => TextureKind::Position,
            b"ASTN" => TextureKind::Normal,
            m => return Err(Error::format(ctx, format!("bad magic {m:?}"))),
        };
        let r = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = r * r;
        let want = 8 + n * 12 + n.div_ceil(8);
        if bytes.len() != want {
            return Err(Error::format(
                ctx,
                format!("expected {want} bytes for R = {r}, found {}", bytes.len()),
            ));
        }
        let mut tex = MotionTexture::empty(kind, r);
        let body = &bytes[8..8 + n * 12];
        for (i, chunk) in body.chunks_exact(12).enumerate() {
            let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            tex.texels[i] = Vec3::new(f(0), f(1), f(2));
        }
        let bits = &bytes[8 + n * 12..];
        for i in 0..n {
            tex.mask[i] = bits[i / 8] & (1 << (i % 8)) != 0;
        }
        Ok(tex)
    }

    /// 8-bit RGB preview: normals map `[-1,1] -> [0,1]`, positions are
    /// normalized by the bounding box of covered texels.
    pub fn write_png_preview(&self, path: &Path) -> Result<()> {
        let r = self.resolution;
        let (lo, hi) = match self.kind {
            TextureKind::Normal => (Vec3::repeat(-1.0), Vec3::repeat(1.0)),
            TextureKind::Position => {
                let mut lo = Vec3::repeat(f64::INFINITY);
                let mut hi = Vec3::repeat(f64::NEG_INFINITY);
                for (t, m) in self.texels.iter().zip(&self.mask) {
                    if *m {
                        lo = lo.inf(t);
                        hi = hi.sup(t);
                    }
                }
                (lo, hi)
            }
        };
        let mut img = image::RgbImage::new(r as u32, r as u32);
        for (i, (t, m)) in self.texels.iter().zip(&self.mask).enumerate() {
            if !*m {
                continue;
            }
            let px = std::array::from_fn(|k| {
                let span = (hi[k] - lo[k]).max(1e-12);
                (((t[k] - lo[k]) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel((i % r) as u32, (i / r) as u32, image::Rgb(px));
        }
        let mut buf = Vec::new();
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }
}

/// Position texture: barycentric blend of posed vertices at every covered
/// texel.
pub fn bake_position_texture(table: &TexelTable, vertices: &[Vec3]) -> Result<MotionTexture> {
    table.check_vertex_count(vertices.len())?;
    let r = table.resolution;
    let mut tex = MotionTexture::empty(TextureKind::Position, r);
    let values: Vec<Vec3> = table
        .entries
        .par_iter()
        .map(|e| table.interpolate(e, vertices))
        .collect();
    for (e, val) in table.entries.iter().zip(values) {
        let i = e.texel_index(r);
        tex.texels[i] = val;
        tex.mask[i] = true;
    }
    Ok(tex)
}

/// Normal texture: interpolated vertex normals, renormalized. Texels that
/// draw on a zero (isolated-vertex) normal, or whose blend vanishes, stay
/// masked out.
pub fn bake_normal_texture(table: &TexelTable, normals: &[Vec3]) -> Result<MotionTexture> {
    table.check_vertex_count(normals.len())?;
    let r = table.resolution;
    let mut tex = MotionTexture::empty(TextureKind::Normal, r);
    for e in &table.entries {
        let corners = table.face_vertices(e);
        let invalid = corners
            .iter()
            .zip(e.bary)
            .any(|(&c, w)| w.abs() > BARY_EPS && normals[c] == Vec3::zeros());
        if invalid {
            continue;
        }
        let n = table.interpolate(e, normals);
        let len = n.norm();
        if len <= 1e-12 {
            continue;
        }
        let i = e.texel_index(r);
        tex.texels[i] = n / len;
        tex.mask[i] = true;
    }
    Ok(tex)
}
