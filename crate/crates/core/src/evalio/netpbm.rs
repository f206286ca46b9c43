//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::saliency::PixelMask;
use crate::tensor::{bilinear_resize, nearest_resize_mask, Tensor};

/// Raw 8-bit raster, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Byte value mapped to `[0, 1]`.
pub fn byte_to_unit(b: u8) -> f32 {
    (b as f64 / 255.0) as f32
}

/// Nearest byte of a `[0, 1]` value, saturating.
pub fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8
}

fn parse(bytes: &[u8], magic: &[u8; 2], channels: usize) -> std::result::Result<Raster, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("malformed header: missing field {}", n + 1));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed header: number out of range".to_string())?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header: no separator before pixel data".into());
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported max value {maxval}, only 8-bit (255) files are read"));
    }
    if width == 0 || height == 0 {
        return Err("empty raster".into());
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| "raster dimensions overflow".to_string())?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        ));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload[..need].to_vec(),
    })
}

fn read(path: &Path, magic: &[u8; 2], channels: usize) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, magic, channels).map_err(|m| Error::format(path, m))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    read(path, b"P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    read(path, b"P5", 1)
}

fn encode(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

/// Writes a 1-channel raster as P5 or a 3-channel raster as P6.
pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    if !matches!(raster.channels, 1 | 3)
        || raster.data.len() != raster.width * raster.height * raster.channels
    {
        return Err(Error::argument("raster size does not match its dimensions"));
    }
    fs::write(path, encode(raster)).map_err(|e| Error::io(path, e))
}

/// Per-channel normalization `(v − mean) / std` applied to `[0, 1]` values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != 3 || self.std.len() != 3 {
            return Err(Error::config("normalization needs 3 means and 3 stds"));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::config("normalization stds must be positive and finite"));
        }
        Ok(())
    }

    pub fn apply(&self, channel: usize, unit: f32) -> f32 {
        ((unit as f64 - self.mean[channel] as f64) / self.std[channel] as f64) as f32
    }

    pub fn invert(&self, channel: usize, v: f32) -> f32 {
        (v as f64 * self.std[channel] as f64 + self.mean[channel] as f64) as f32
    }
}

/// Loaded image plus whether it had to be resized.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub tensor: Tensor,
    pub source_size: (usize, usize),
    pub resized: bool,
}

/// PPM to a normalized `[3, H, W]` tensor at `size`.
pub fn load_image(path: &Path, norm: &Normalization, size: (usize, usize)) -> Result<LoadedImage> {
    norm.validate()?;
    let raster = read_ppm(path)?;
    let (h, w) = (raster.height, raster.width);
    let tensor = Tensor::from_fn(&[3, h, w], |i| {
        norm.apply(i[0], byte_to_unit(raster.data[(i[1] * w + i[2]) * 3 + i[0]]))
    });
    let resized = (h, w) != size;
    let tensor = if resized {
        bilinear_resize(&tensor, size.0, size.1)?
    } else {
        tensor
    };
    Ok(LoadedImage {
        tensor,
        source_size: (h, w),
        resized,
    })
}

/// Normalized `[3, H, W]` tensor back to bytes.
pub fn image_raster(x: &Tensor, norm: &Normalization) -> Result<Raster> {
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(Error::argument("PPM output needs 3 channels"));
    }
    let mut data = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            data[p * 3 + ch] = unit_to_byte(norm.invert(ch, x.data()[ch * h * w + p]));
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

/// PGM to an object mask: values above 127 are object. The mask is
/// nearest-neighbour resized to `size` when its aspect ratio matches
/// `source_size`.
pub fn load_segmentation(
    path: &Path,
    source_size: (usize, usize),
    size: (usize, usize),
) -> Result<PixelMask> {
    let raster = read_pgm(path)?;
    let (h, w) = (raster.height, raster.width);
    if h * source_size.1 != w * source_size.0 {
        return Err(Error::format(
            path,
            format!(
                "{h}x{w} segmentation cannot be matched to a {}x{} image",
                source_size.0, source_size.1
            ),
        ));
    }
    let bits: Vec<bool> = raster.data.iter().map(|&b| b > 127).collect();
    let bits = if (h, w) == size {
        bits
    } else {
        nearest_resize_mask(&bits, h, w, size.0, size.1)
    };
    PixelMask::new(size.0, size.1, bits)
}

/// Saliency map as a grayscale dump, scaled so its maximum is 255.
pub fn saliency_raster(values: &Tensor) -> Result<Raster> {
    let (h, w) = values.dims2()?;
    let max = values.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Ok(Raster {
        width: w,
        height: h,
        channels: 1,
        data: values
            .data()
            .iter()
            .map(|&v| unit_to_byte(v * scale))
            .collect(),
    })
}

pub fn mask_raster(mask: &PixelMask) -> Raster {
    Raster {
        width: mask.width(),
        height: mask.height(),
        channels: 1,
        data: mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}
