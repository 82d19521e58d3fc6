//! RGB frames, 8-bit frame storage and grayscale map output.

use std::io::Write;

use crate::error::{Error, Result};

/// RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        crate::error::check_len("image data", width * height * 3, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        crate::error::check_len("8-bit frame", width * height * 3, bytes.len())?;
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

/// Magic prefix of a frames blob.
pub const FRAMES_MAGIC: &[u8; 4] = b"FRM1";

/// Writes frames as `FRM1`, then little-endian u32 width, height, channels,
/// count, followed by `count * height * width * channels` bytes (row-major,
/// channels interleaved).
pub fn write_frames_blob<W: Write>(mut w: W, width: usize, height: usize, frames: &[Vec<u8>]) -> std::io::Result<()> {
    w.write_all(FRAMES_MAGIC)?;
    for v in [width, height, Image::CHANNELS, frames.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for f in frames {
        w.write_all(f)?;
    }
    Ok(())
}

/// Parses a frames blob into `(width, height, frames)`.
pub fn read_frames_blob(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    if bytes.len() < 20 || &bytes[..4] != FRAMES_MAGIC {
        return Err(Error::Format("frames blob has a bad header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (width, height, channels, count) = (field(0), field(1), field(2), field(3));
    if channels != Image::CHANNELS {
        return Err(Error::Format(format!("frames blob has {channels} channels")));
    }
    let frame_len = width * height * channels;
    if bytes.len() != 20 + frame_len * count {
        return Err(Error::Format(format!(
            "frames blob is {} bytes, header implies {}",
            bytes.len(),
            20 + frame_len * count
        )));
    }
    let frames = bytes[20..].chunks(frame_len.max(1)).take(count).map(<[u8]>::to_vec).collect();
    Ok((width, height, frames))
}

/// Binary (P5) 8-bit portable graymap of values in `[0, 1]`.
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, values: &[f64]) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", width, height)?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)
}
