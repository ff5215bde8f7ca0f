//! 8-bit raster grids and binary netpbm IO (PPM `P6` for RGB, PGM `P5` for masks).

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensor_file::write_atomic;

/// Row-major `width × height` grid of pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<P> {
    width: usize,
    height: usize,
    pixels: Vec<P>,
}

pub type RgbImage = Grid<[u8; 3]>;
/// Per-pixel class ids, 0 = background.
pub type Mask = Grid<u8>;

impl<P: Copy> Grid<P> {
    pub fn new(width: usize, height: usize, fill: P) -> Self {
        Grid { width, height, pixels: vec![fill; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<P>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!("{} pixels for a {width}×{height} grid", pixels.len())));
        }
        Ok(Grid { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Grid { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> P {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, p: P) {
        self.pixels[y * self.width + x] = p;
    }

    pub fn pixels(&self) -> &[P] {
        &self.pixels
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Grid<Q> {
        Grid { width: self.width, height: self.height, pixels: self.pixels.iter().map(|&p| f(p)).collect() }
    }
}

impl RgbImage {
    /// `H × W × 3` tensor with channel values mapped from `[0, 255]` to `[-1, 1]`.
    pub fn to_input<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .pixels
            .iter()
            .flat_map(|px| px.iter().map(|&c| T::of(c as f64 / 127.5 - 1.0)))
            .collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("pixel count matches shape")
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().flatten());
    out
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.pixels);
    out
}

/// Parses a binary netpbm header; returns `(width, height, offset of the raster)`.
fn parse_header(buf: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(Error::Format(format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header number out of range".into()))?;
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("maxval {} unsupported, only 255", fields[2])));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_ppm(buf: &[u8]) -> Result<RgbImage> {
    let (w, h, off) = parse_header(buf, b"P6")?;
    let raster = &buf[off..];
    if raster.len() != w * h * 3 {
        return Err(Error::Format(format!("expected {} raster bytes, found {}", w * h * 3, raster.len())));
    }
    let pixels = raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Grid::from_pixels(w, h, pixels)
}

pub fn decode_pgm(buf: &[u8]) -> Result<Mask> {
    let (w, h, off) = parse_header(buf, b"P5")?;
    let raster = &buf[off..];
    if raster.len() != w * h {
        return Err(Error::Format(format!("expected {} raster bytes, found {}", w * h, raster.len())));
    }
    Grid::from_pixels(w, h, raster.to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &encode_pgm(mask))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&std::fs::read(path)?)
}
