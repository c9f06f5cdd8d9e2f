//! WebSocket wire format.
//!
//! Control messages are JSON text frames. Rendered frames are binary:
//!
//! ```text
//! "ASHF" | version u8 | format u8 | width u16 | height u16 | frame_id u32 | reserved u16
//! payload: RGB8 rows (format 0) or a PNG file (format 1)
//! ```
//!
//! All integers little-endian; the header is exactly 16 bytes.

use serde::{Deserialize, Serialize};
use splat_avatar::image::Image;
use splat_avatar::math::{Quaternion, Vec3};
use splat_avatar::render::Camera;
use splat_avatar::rig::PoseFrame;

pub const FRAME_MAGIC: &[u8; 4] = b"ASHF";
pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Raw,
    Png,
}

impl FrameFormat {
    pub fn code(self) -> u8 {
        match self {
            FrameFormat::Raw => 0,
            FrameFormat::Png => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FrameFormat::Raw),
            1 => Some(FrameFormat::Png),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMessage {
    Pose {
        frame_id: u32,
        root: [f64; 3],
        joints: Vec<[f64; 4]>,
    },
    Camera {
        #[serde(rename = "K")]
        k: [f64; 9],
        #[serde(rename = "W2C")]
        w2c: [f64; 16],
        width: u32,
        height: u32,
        /// Defaults to the frame_id of the latest pose.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame_id: Option<u32>,
    },
    /// Selects the payload encoding of subsequent frames; PNG until sent.
    Hello { format: FrameFormat },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn pose(frame_id: u32, pose: &PoseFrame) -> Self {
        let r = pose.root_translation;
        ClientMessage::Pose {
            frame_id,
            root: [r.x, r.y, r.z],
            joints: pose.rotations.iter().map(|q| q.to_array()).collect(),
        }
    }

    pub fn camera(cam: &Camera, frame_id: Option<u32>) -> Self {
        ClientMessage::Camera {
            k: cam.intrinsics_matrix(),
            w2c: cam.world_to_camera_matrix(),
            width: cam.width as u32,
            height: cam.height as u32,
            frame_id,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }
}

/// Pose message contents as a normalized pose for a `joints`-joint skeleton.
pub fn pose_from_message(frame_id: u32, root: &[f64; 3], rotations: &[[f64; 4]], joints: usize) -> Result<PoseFrame, String> {
    if rotations.len() != joints {
        return Err(format!("pose has {} joint rotations, skeleton has {joints} joints", rotations.len()));
    }
    PoseFrame {
        frame_id: frame_id as u64,
        root_translation: Vec3::new(root[0], root[1], root[2]),
        rotations: rotations
            .iter()
            .map(|q| Quaternion::from_array(*q))
            .collect(),
    }
    .normalized()
    .map_err(|e| e.to_string())
}

pub fn camera_from_message(k: &[f64; 9], w2c: &[f64; 16], width: u32, height: u32) -> Result<Camera, String> {
    if width == 0 || height == 0 || width > u16::MAX as u32 || height > u16::MAX as u32 {
        return Err(format!("image size {width}x{height} outside 1..=65535"));
    }
    Camera::from_matrices(k, w2c, width as usize, height as usize).map_err(|e| e.to_string())
}

pub fn error_reply(detail: &str) -> String {
    serde_json::json!({ "type": "error", "detail": detail }).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u8,
    pub format: FrameFormat,
    pub width: u16,
    pub height: u16,
    pub frame_id: u32,
}

impl FrameHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(FRAME_MAGIC);
        b[4] = self.version;
        b[5] = self.format.code();
        b[6..8].copy_from_slice(&self.width.to_le_bytes());
        b[8..10].copy_from_slice(&self.height.to_le_bytes());
        b[10..14].copy_from_slice(&self.frame_id.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("frame of {} bytes is shorter than the header", bytes.len()));
        }
        if &bytes[0..4] != FRAME_MAGIC {
            return Err("bad frame magic".into());
        }
        let u16_at = |k: usize| u16::from_le_bytes([bytes[k], bytes[k + 1]]);
        Ok(Self {
            version: bytes[4],
            format: FrameFormat::from_code(bytes[5]).ok_or_else(|| format!("unknown frame format {}", bytes[5]))?,
            width: u16_at(6),
            height: u16_at(8),
            frame_id: u32::from_le_bytes(bytes[10..14].try_into().unwrap()),
        })
    }
}

pub fn encode_frame(image: &Image, frame_id: u32, format: FrameFormat) -> Result<Vec<u8>, String> {
    let header = FrameHeader {
        version: FRAME_VERSION,
        format,
        width: image.width() as u16,
        height: image.height() as u16,
        frame_id,
    };
    let payload = match format {
        FrameFormat::Raw => image.to_rgb8(),
        FrameFormat::Png => image.encode_png().map_err(|e| e.to_string())?,
    };
    let mut out = header.to_bytes().to_vec();
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Header and 8-bit image of a received frame.
pub fn decode_frame(bytes: &[u8]) -> Result<(FrameHeader, Image), String> {
    let h = FrameHeader::parse(bytes)?;
    let (w, ht) = (h.width as usize, h.height as usize);
    let payload = &bytes[HEADER_LEN..];
    let image = match h.format {
        FrameFormat::Raw => {
            if payload.len() != w * ht * 3 {
                return Err(format!("raw payload of {} bytes for {w}x{ht}", payload.len()));
            }
            Image::from_rgb8(w, ht, payload).map_err(|e| e.to_string())?
        }
        FrameFormat::Png => {
            let img = image::load_from_memory_with_format(payload, image::ImageFormat::Png)
                .map_err(|e| e.to_string())?
                .to_rgb8();
            if img.width() as usize != w || img.height() as usize != ht {
                return Err("PNG size disagrees with header".into());
            }
            Image::from_rgb8(w, ht, img.as_raw()).map_err(|e| e.to_string())?
        }
    };
    Ok((h, image))
}
