//! Parameter-map checkpoint (`.ashp`).
//!
//! ```text
//! "ASHP" | version u32 | R u32 | N u32
//! coverage bitmap, ceil(R²/8) bytes, LSB first, row-major texels
//! R² x 59 f64 LE: per texel offset(3) rotation(4) scale(3) opacity(1) SH(48)
//! ```
//!
//! `N` is the number of covered texels and must match the bitmap.

use std::path::Path;

use crate::avatar::{GaussianParamMaps, TEXEL_CHANNELS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ASHP";
pub const PARAM_MAPS_VERSION: u32 = 1;

pub fn encode_param_maps(maps: &GaussianParamMaps, mask: &[bool]) -> Result<Vec<u8>> {
    let r = maps.resolution;
    if mask.len() != r * r {
        return Err(Error::Mismatch {
            what: "coverage mask length",
            expected: r * r,
            found: mask.len(),
        });
    }
    let n = mask.iter().filter(|m| **m).count();
    let mut out = Vec::with_capacity(16 + (r * r).div_ceil(8) + r * r * TEXEL_CHANNELS * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&PARAM_MAPS_VERSION.to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    let mut bits = vec![0u8; (r * r).div_ceil(8)];
    for (i, m) in mask.iter().enumerate() {
        if *m {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    for t in 0..r * r {
        for v in maps.texel_channels(t) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_param_maps(bytes: &[u8]) -> Result<(GaussianParamMaps, Vec<bool>)> {
    let ctx = "parameter checkpoint";
    if bytes.len() < 16 {
        return Err(Error::format(ctx, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(ctx, "bad magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
    let version = word(4);
    if version != PARAM_MAPS_VERSION {
        return Err(Error::Version {
            context: ctx.into(),
            found: version,
            expected: PARAM_MAPS_VERSION,
        });
    }
    let r = word(8) as usize;
    let n = word(12) as usize;
    let plane = r
        .checked_mul(r)
        .ok_or_else(|| Error::format(ctx, "resolution overflow"))?;
    let bitmap = plane.div_ceil(8);
    let expected = plane
        .checked_mul(TEXEL_CHANNELS * 8)
        .and_then(|v| v.checked_add(16 + bitmap))
        .ok_or_else(|| Error::format(ctx, "size overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            ctx,
            format!("expected {expected} bytes for R = {r}, found {}", bytes.len()),
        ));
    }
    let mask: Vec<bool> = (0..plane).map(|i| bytes[16 + i / 8] >> (i % 8) & 1 == 1).collect();
    let covered = mask.iter().filter(|m| **m).count();
    if covered != n {
        return Err(Error::format(ctx, format!("header says N = {n}, bitmap covers {covered}")));
    }
    let mut maps = GaussianParamMaps::zeros(r);
    let body = &bytes[16 + bitmap..];
    for t in 0..plane {
        let mut c = [0.0; TEXEL_CHANNELS];
        for (k, v) in c.iter_mut().enumerate() {
            let at = (t * TEXEL_CHANNELS + k) * 8;
            *v = f64::from_le_bytes(body[at..at + 8].try_into().unwrap());
        }
        maps.set_texel_channels(t, &c);
    }
    Ok((maps, mask))
}

pub fn write_param_maps(path: &Path, maps: &GaussianParamMaps, mask: &[bool]) -> Result<()> {
    std::fs::write(path, encode_param_maps(maps, mask)?).map_err(|e| Error::io(path, e))
}

pub fn read_param_maps(path: &Path) -> Result<(GaussianParamMaps, Vec<bool>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_param_maps(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
        Error::Version { found, expected, .. } => Error::Version {
            context: path.display().to_string(),
            found,
            expected,
        },
        other => other,
    })
}
