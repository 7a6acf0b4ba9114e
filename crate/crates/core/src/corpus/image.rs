use std::path::Path;

use crate::error::{Error, Result};

/// `b"IGRS"` read as a little-endian u32.
pub const RASTER_MAGIC: u32 = u32::from_le_bytes(*b"IGRS");

/// `[H, W, C]` raster, row-major with channels innermost, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract("image extents must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// All-zero raster.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Non-overlapping `p×p` patches, each flattened `(dy, dx, c)`, in raster order.
    pub fn patches(&self, p: usize) -> Vec<f64> {
        let (gh, gw) = (self.height / p, self.width / p);
        let mut out = Vec::with_capacity(self.data.len());
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..self.channels {
                            out.push(f64::from(self.pixel(py * p + dy, px * p + dx, c)));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_raster_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        for v in [self.height as u32, self.width as u32, self.channels as u32, RASTER_MAGIC] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raster_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 {
            return Err("raster shorter than its 16-byte header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if word(3) != RASTER_MAGIC {
            return Err("bad raster magic".into());
        }
        let (h, w, c) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let body = &bytes[16..];
        if body.len() != 4 * h * w * c {
            return Err(format!("raster {h}x{w}x{c} expects {} bytes of pixels, found {}", 4 * h * w * c, body.len()));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Image::new(h, w, c, data).map_err(|e| e.to_string())
    }

    pub fn save_raster(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raster_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_raster(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_raster_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}
