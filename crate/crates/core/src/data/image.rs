//! Binary PPM (P6) images.
//!
//! Every image is center-cropped to a square, resized with nearest-neighbor
//! sampling to the model's `image_side`, and scaled to `[0, 1]`. Other formats
//! can be converted beforehand, e.g. `convert in.jpg out.ppm`.

use std::path::Path;

use crate::error::{Error, Result};

/// Square RGB image, row-major `side × side × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side * 3 {
            return Err(Error::shape("image", &[side, side, 3], &[pixels.len()]));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image channel values must lie in [0, 1]"));
        }
        Ok(Self { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0.0; side * side * 3],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Raw decoded PPM before cropping.
#[derive(Clone, Debug, PartialEq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved RGB samples.
    pub samples: Vec<u16>,
}

pub fn parse_ppm(bytes: &[u8]) -> std::result::Result<Ppm, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (expected P6 magic)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("invalid header {width}x{height} max {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * 3;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let samples = if wide {
        raster.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Ppm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

impl Ppm {
    /// Center-crop to a square, nearest-neighbor resize to `side`, scale by
    /// `maxval`.
    pub fn to_image(&self, side: usize) -> Image {
        let s = self.width.min(self.height);
        let x0 = (self.width - s) / 2;
        let y0 = (self.height - s) / 2;
        let scale = self.maxval as f32;
        let mut pixels = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            let sy = y0 + y * s / side;
            for x in 0..side {
                let sx = x0 + x * s / side;
                let i = (sy * self.width + sx) * 3;
                for c in 0..3 {
                    pixels.push(self.samples[i + c] as f32 / scale);
                }
            }
        }
        Image { side, pixels }
    }
}

pub fn load_ppm(path: &Path, side: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let ppm = parse_ppm(&bytes).map_err(|msg| Error::Image {
        path: path.to_path_buf(),
        msg,
    })?;
    Ok(ppm.to_image(side))
}
