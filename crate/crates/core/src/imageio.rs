//! Image inputs and pixmap output.
//!
//! Two input formats are accepted:
//! - binary PPM (`P6`, maxval ≤ 255), mapped to `[3, H, W]` with values
//!   `byte / maxval` and no further normalization;
//! - raw tensors (`.f32`/`.raw`/`.bin`): `3·S·S` little-endian `f32`
//!   values in channel, row, column order, already normalized.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Image(format!("unsupported PPM magic `{}`", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Image(format!("bad PPM field `{s}`")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Image(format!("unsupported PPM maxval {maxval}")));
        }
        pos += 1;
        let len = width * height * 3;
        let data = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Image("truncated PPM pixel data".into()))?;
        let mut rgb = data.to_vec();
        if maxval != 255 {
            for v in &mut rgb {
                *v = ((*v as usize * 255) / maxval) as u8;
            }
        }
        Ok(Self { width, height, rgb })
    }

    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([3, h, w], |i| {
            let c = i / (w * h);
            let p = i % (w * h);
            self.rgb[p * 3 + c] as f32 / 255.0
        })
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Pixmap> {
    let path = path.as_ref();
    Pixmap::parse_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_raw_f32(path: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 3 * size * size * 4;
    if bytes.len() != expected {
        return Err(Error::Image(format!(
            "{}: {} bytes, expected {expected} for a [3, {size}, {size}] f32 tensor",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new([3, size, size], data)
}

pub fn write_raw_f32(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ppm" | "pnm" | "f32" | "raw" | "bin")
    )
}

/// Loads a PPM or raw tensor and checks it is `size × size`.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "ppm" || ext == "pnm" {
        let pm = read_ppm(path)?;
        if pm.width != size || pm.height != size {
            return Err(Error::Image(format!(
                "{}: {}x{} image, expected {size}x{size}",
                path.display(),
                pm.width,
                pm.height
            )));
        }
        Ok(pm.to_tensor())
    } else {
        read_raw_f32(path, size)
    }
}
