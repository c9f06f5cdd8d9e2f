//! RGB float images plus their PNG and raw float encodings.
//!
//! Float dump layout: `"ASHI"`, width u32 LE, height u32 LE, then
//! `width * height * 3` f32 LE values, row-major, RGB interleaved.

use std::path::Path;

use crate::error::{Error, Result};

const FLOAT_MAGIC: &[u8; 4] = b"ASHI";
const FLOAT_HEADER: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Mismatch {
                what: "image buffer length",
                expected: width * height * 3,
                found: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid(format!(
                "image size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.same_size(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Rounds every value through f32, as the float dump does.
    pub fn quantized_f32(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| *v as f32 as f64).collect(),
        }
    }

    /// 8-bit RGB after clamping to [0,1]; `v * 255` is rounded half-up.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| {
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                (v * 255.0 + 0.5).floor() as u8
            })
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_raw(width, height, bytes.iter().map(|b| *b as f64 / 255.0).collect())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(
                &self.to_rgb8(),
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::format("png encode", e.to_string()))?;
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
            .to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn to_float_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FLOAT_HEADER + self.data.len() * 4);
        out.extend_from_slice(FLOAT_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_float_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "float image";
        if bytes.len() < FLOAT_HEADER {
            return Err(Error::format(ctx, "truncated header"));
        }
        if &bytes[0..4] != FLOAT_MAGIC {
            return Err(Error::format(ctx, "bad magic"));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = FLOAT_HEADER + w * h * 3 * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                ctx,
                format!("expected {expected} bytes for {w}x{h}, found {}", bytes.len()),
            ));
        }
        let data = bytes[FLOAT_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_raw(w, h, data)
    }

    pub fn write_float(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_float_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_float(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_float_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })
    }
}
