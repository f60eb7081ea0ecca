//! Linear-light RGB images, sRGB transfer and PNG I/O.

use std::io::Cursor;

use crate::error::{Error, Result};

/// Row-major RGB image, three `f32` channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[[f32; 3]]) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            data: pixels.iter().flatten().copied().collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear lookup at continuous pixel coordinates, clamped to the edge.
    /// `(0.5, 0.5)` is the centre of the first pixel.
    pub fn sample_bilinear(&self, px: f64, py: f64) -> [f32; 3] {
        bilinear(&self.data, 3, self.width, self.height, px, py)
    }

    pub fn map_in_place(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn to_srgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| linear_to_srgb8(v)).collect()
    }

    pub fn from_srgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| srgb8_to_linear(b)).collect(),
        }
    }

    /// RGBA8 sRGB bytes, alpha 255, for canvas upload.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for px in self.data.chunks_exact(3) {
            out.extend(px.iter().map(|&v| linear_to_srgb8(v)));
            out.push(255);
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_rgb8(self.width, self.height, &self.to_srgb8())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, rgb) = decode_png_rgb8(bytes)?;
        Ok(Self::from_srgb8(w, h, &rgb))
    }
}

/// Bilinear interpolation of an interleaved `channels`-wide buffer.
pub fn bilinear<const C: usize>(
    data: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    px: f64,
    py: f64,
) -> [f32; C] {
    debug_assert_eq!(channels, C);
    let x = (px - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (py - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let at = |xx: usize, yy: usize, c: usize| data[(yy * width + xx) * C + c];
    let mut out = [0.0; C];
    for (c, o) in out.iter_mut().enumerate() {
        let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
        let bot = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb8(v: f32) -> u8 {
    (linear_to_srgb(v) * 255.0).round() as u8
}

pub fn srgb8_to_linear(b: u8) -> f32 {
    srgb_to_linear(b as f32 / 255.0)
}

pub fn encode_png_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Fast);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(rgb).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png_rgb8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// Single-channel `f32` map with a `u32 width, u32 height` header when
/// serialized; all values little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Image("depth map header truncated".into()));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * width * height {
            return Err(Error::Image(format!(
                "depth map body is {} bytes, expected {}",
                body.len(),
                4 * width * height
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { width, height, data })
    }
}
