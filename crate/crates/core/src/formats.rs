//! Byte-exact codecs: PFM depth, binary PPM images and ASCII PLY clouds.
//!
//! PFM stores little-endian `f32` rows bottom-to-top with NaN marking
//! invalid pixels. Depth is therefore persisted at single precision; a map
//! passed through [`quantize_depth`] survives a write/read cycle unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PointCloud};
use crate::image::Image;

/// Rounds every valid depth to the nearest `f32`.
pub fn quantize_depth(depth: &DepthMap) -> DepthMap {
    let values = depth
        .to_nan_filled()
        .into_iter()
        .map(|d| d as f32 as f64)
        .collect();
    DepthMap::from_values(depth.width(), depth.height(), values).expect("same size")
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    encode_pfm_values(depth.width(), depth.height(), &depth.to_nan_filled())
}

/// Encodes a raw row-major grid (such as a σ map, where zero is a value
/// rather than a hole).
pub fn encode_pfm_values(w: usize, h: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), w * h, "grid size");
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for &v in &values[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads ASCII header tokens separated by single whitespace bytes.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8], context: &'static str) -> Self {
        Self { bytes, pos: 0, context }
    }

    fn token(&mut self) -> Result<(&'a str, usize)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(self.context, start, "unexpected end of header"));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(self.context, start, "non-ASCII header"))?;
        Ok((tok, start))
    }

    fn number<N: std::str::FromStr>(&mut self) -> Result<N> {
        let (tok, at) = self.token()?;
        tok.parse()
            .map_err(|_| Error::parse(self.context, at, format!("expected a number, found `{tok}`")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn finish(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::parse(self.context, self.pos, "missing header terminator")),
        }
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut hdr = HeaderReader::new(bytes, "pfm");
    let (magic, _) = hdr.token()?;
    if magic != "Pf" {
        return Err(Error::parse("pfm", 0, format!("expected `Pf` magic, found `{magic}`")));
    }
    let w: usize = hdr.number()?;
    let h: usize = hdr.number()?;
    let scale_at = hdr.pos;
    let scale: f64 = hdr.number()?;
    if scale >= 0.0 {
        return Err(Error::parse("pfm", scale_at, "only little-endian (negative scale) files are supported"));
    }
    let start = hdr.finish()?;
    let need = w * h * 4;
    let body = &bytes[start..];
    if body.len() < need {
        return Err(Error::parse(
            "pfm",
            bytes.len(),
            format!("truncated raster: expected {need} bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::parse("pfm", start + need, "trailing bytes after raster"));
    }
    let mut values = vec![0.0; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (row, x) = (i / w, i % w);
        let y = h - 1 - row;
        values[y * w + x] = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    DepthMap::from_values(w, h, values)
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb8());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut hdr = HeaderReader::new(bytes, "ppm");
    let (magic, _) = hdr.token()?;
    if magic != "P6" {
        return Err(Error::parse("ppm", 0, format!("expected `P6` magic, found `{magic}`")));
    }
    let w: usize = hdr.number()?;
    let h: usize = hdr.number()?;
    let max_at = hdr.pos;
    let max: u32 = hdr.number()?;
    if max != 255 {
        return Err(Error::parse("ppm", max_at, format!("only 8-bit images are supported, maxval {max}")));
    }
    let start = hdr.finish()?;
    let need = w * h * 3;
    let body = &bytes[start..];
    if body.len() != need {
        return Err(Error::parse(
            "ppm",
            start + body.len().min(need),
            format!("expected {need} raster bytes, found {}", body.len()),
        ));
    }
    Image::from_rgb8(w, h, body)
}

/// ASCII PLY 1.0 with float xyz and uchar rgb per vertex.
pub fn encode_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for (p, c) in cloud.points().iter().zip(cloud.colors()) {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]
        );
    }
    out
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    Ok(fs::write(path, encode_pfm(depth))?)
}

pub fn write_pfm_values(path: &Path, w: usize, h: usize, values: &[f64]) -> Result<()> {
    Ok(fs::write(path, encode_pfm_values(w, h, values))?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?).map_err(|e| with_path(e, path))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image))?)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, encode_ply(cloud))?)
}

pub(crate) fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { offset, reason, .. } => Error::Parse {
            context: path.display().to_string(),
            offset,
            reason,
        },
        other => other,
    }
}
