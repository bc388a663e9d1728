//! Images in [-1, 1] and binary PPM/PGM file IO.
//!
//! The internal range [-1, 1] maps linearly onto [0, 255] with
//! round-half-to-even; files are 8-bit binary PPM (P6) for images and
//! binary PGM (P5) for masks.

use crate::error::{Result, TidmError};
use crate::numerics::Tensor;
use std::io::{Read, Write};
use std::path::Path;

/// RGB image tensor [3, h, w], values clamped to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(TidmError::shape(
                "image",
                format!("expected [3, h, w], got {s:?}"),
            ));
        }
        Ok(ImageTensor {
            tensor: tensor.clamp_values(-1.0, 1.0),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// 8-bit quantization of the [-1, 1] range, round-half-to-even.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        let mut out = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = (d[(c * h + y) * w + x] + 1.0) * 0.5 * 255.0;
                    out.push(v.round_ties_even().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * h * w {
            return Err(TidmError::shape(
                "image",
                format!("{} bytes for {h}x{w} RGB", bytes.len()),
            ));
        }
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = bytes[(y * w + x) * 3 + c] as f32 / 255.0 * 2.0 - 1.0;
                }
            }
        }
        ImageTensor::new(Tensor::from_vec(vec![3, h, w], data)?)
    }

    /// Peak signal-to-noise ratio in dB over the [-1, 1] range (peak 2).
    pub fn psnr(&self, other: &ImageTensor) -> Result<f64> {
        let mse = self.tensor.mse(other.tensor())? as f64;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(10.0 * (4.0 / mse).log10())
    }
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    buf.extend_from_slice(&image.to_bytes());
    std::fs::write(path, buf).map_err(|e| TidmError::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TidmError::io(path.display().to_string(), e))?;
    let (magic, w, h, maxval, payload) = parse_netpbm_header(&bytes, path)?;
    if magic != "P6" {
        return Err(TidmError::invalid(format!(
            "{}: expected P6 magic, got {magic}",
            path.display()
        )));
    }
    if maxval != 255 {
        return Err(TidmError::invalid(format!(
            "{}: only maxval 255 supported",
            path.display()
        )));
    }
    ImageTensor::from_bytes(h, w, payload)
}

/// Write a binary mask as PGM (255 = masked true).
pub fn write_pgm_mask(path: &Path, h: usize, w: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != h * w {
        return Err(TidmError::shape(
            "mask",
            format!("{} entries for {h}x{w}", mask.len()),
        ));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    let mut f = std::fs::File::create(path).map_err(|e| TidmError::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| TidmError::io(path.display().to_string(), e))
}

pub fn read_pgm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TidmError::io(path.display().to_string(), e))?;
    let (magic, w, h, _maxval, payload) = parse_netpbm_header(&bytes, path)?;
    if magic != "P5" {
        return Err(TidmError::invalid(format!(
            "{}: expected P5 magic, got {magic}",
            path.display()
        )));
    }
    if payload.len() != h * w {
        return Err(TidmError::invalid(format!(
            "{}: truncated mask payload",
            path.display()
        )));
    }
    Ok((h, w, payload.iter().map(|&b| b >= 128).collect()))
}

fn parse_netpbm_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(String, usize, usize, u32, &'a [u8])> {
    // magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the payload
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 && i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start < i {
            fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
        }
    }
    if fields.len() < 4 || i >= bytes.len() {
        return Err(TidmError::invalid(format!(
            "{}: malformed netpbm header",
            path.display()
        )));
    }
    i += 1; // single whitespace after maxval
    let w: usize = fields[1]
        .parse()
        .map_err(|_| TidmError::invalid(format!("{}: bad width", path.display())))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| TidmError::invalid(format!("{}: bad height", path.display())))?;
    let maxval: u32 = fields[3]
        .parse()
        .map_err(|_| TidmError::invalid(format!("{}: bad maxval", path.display())))?;
    Ok((fields[0].clone(), w, h, maxval, &bytes[i..]))
}
