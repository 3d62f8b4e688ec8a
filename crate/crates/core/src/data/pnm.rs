//! Binary netpbm images: P5 (grey) and P6 (RGB) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("netpbm", start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("netpbm", start, format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    if bytes.len() < 2 {
        return Err(Error::format("netpbm", bytes.len(), "truncated magic"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::format("netpbm", 0, "expected P5 or P6 magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("netpbm", maxval_at, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::Unsupported {
            format: "netpbm",
            detail: format!("maxval {maxval} (only 8-bit maxval 255 is supported)"),
        });
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(Error::format(
                "netpbm",
                h.pos,
                "expected one whitespace byte before the raster",
            ))
        }
    }
    let need = width * height * channels;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(Error::format(
            "netpbm",
            bytes.len(),
            format!("truncated raster: {need} bytes expected from offset {}", h.pos),
        ));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        data: raster[..need].to_vec(),
    })
}

pub fn encode_pnm(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

fn write(path: &Path, img: &Pnm) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar `1×3×H×W` samples in `[0, 1]` from an 8-bit image; grey is replicated.
pub fn image_to_tensor(img: &Pnm) -> Tensor4<f32> {
    Tensor4::from_fn(Shape4::new(1, 3, img.height, img.width), |_, c, y, x| {
        let p = y * img.width + x;
        let s = if img.channels == 1 {
            img.data[p]
        } else {
            img.data[3 * p + c]
        };
        s as f32 / 255.0
    })
}

/// 8-bit P6 image from a `1×3×H×W` tensor, clamped and rounded.
pub fn tensor_to_image(t: &Tensor4<f32>) -> Result<Pnm> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_image", format!("expected 1x3xHxW, got {s}")));
    }
    let mut data = Vec::with_capacity(3 * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    Ok(Pnm {
        width: s.w,
        height: s.h,
        channels: 3,
        data,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor4<f32>> {
    Ok(image_to_tensor(&read(path.as_ref())?))
}

pub fn write_image(path: impl AsRef<Path>, t: &Tensor4<f32>) -> Result<()> {
    write(path.as_ref(), &tensor_to_image(t)?)
}

/// `1×1×H×W` mask of 0/1 from a P5 file; samples ≥ 128 are foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor4<f32>> {
    let path = path.as_ref();
    let img = read(path)?;
    if img.channels != 1 {
        return Err(Error::format("netpbm", 0, "masks must be P5 greyscale"));
    }
    let data = img.data.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor4::from_vec(Shape4::new(1, 1, img.height, img.width), data)
}

/// Writes a `1×1×H×W` mask as P5 with 0/255 samples.
pub fn write_mask(path: impl AsRef<Path>, mask: &Tensor4<f32>) -> Result<()> {
    let s = mask.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("write_mask", format!("expected 1x1xHxW, got {s}")));
    }
    let data = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write(
        path.as_ref(),
        &Pnm {
            width: s.w,
            height: s.h,
            channels: 1,
            data,
        },
    )
}
