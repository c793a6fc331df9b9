//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for `P5`, 3 for `P6`.
    pub channels: usize,
    /// Interleaved, row-major samples.
    pub pixels: Vec<u8>,
}

impl Pnm {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Pnm {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), 3 * width * height);
        Pnm {
            width,
            height,
            channels: 3,
            pixels,
        }
    }

    /// Quantizes a `[H, W]`-sized plane of values in `[0, 1]` (clamped).
    pub fn from_unit_plane(width: usize, height: usize, plane: &[f64]) -> Self {
        Pnm::gray(width, height, plane.iter().map(|&v| to_u8(v)).collect())
    }

    /// `[C, H, W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            f64::from(self.pixels[p * c + ch]) / 255.0
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        let err = |message: &str| Error::Image {
            path: source.to_string(),
            message: message.to_string(),
        };
        let mut pos = 0;
        let token = |pos: &mut usize| -> Option<String> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
                *pos += 1;
            }
            (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        let channels = match token(&mut pos).as_deref() {
            Some("P5") => 1,
            Some("P6") => 3,
            _ => return Err(err("not a binary PGM (P5) or PPM (P6) file")),
        };
        let mut number = |what: &str| -> Result<usize> {
            token(&mut pos)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(&format!("invalid {what} in header")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if width == 0 || height == 0 {
            return Err(err("zero image dimension"));
        }
        if !(1..=255).contains(&maxval) {
            return Err(err("only 8-bit samples (maxval 1..=255) are supported"));
        }
        // Exactly one whitespace byte separates the header from the samples.
        pos += 1;
        let n = width * height * channels;
        let data = bytes
            .get(pos..pos + n)
            .ok_or_else(|| err("truncated pixel data"))?;
        let pixels = if maxval == 255 {
            data.to_vec()
        } else {
            data.iter()
                .map(|&v| {
                    ((u32::from(v.min(maxval as u8)) * 255 + maxval as u32 / 2) / maxval as u32)
                        as u8
                })
                .collect()
        };
        Ok(Pnm {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pnm::decode(&bytes, &path.display().to_string())
    }
}

/// Rounds a value in `[0, 1]` to the nearest 8-bit level, clamping outside.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
