//! Portable anymap (P5 PGM, P6 PPM) and portable floatmap (Pf/PF) IO.
//!
//! Only the binary variants are supported. PFM scanlines run bottom-to-top and the
//! sign of the scale field selects byte order: negative means little-endian.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{default_band_names, MultibandRaster, Raster, SampleKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Ppm,
    Pfm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(Self::Pgm),
            "ppm" => Some(Self::Ppm),
            "pfm" => Some(Self::Pfm),
            _ => None,
        }
    }
}

/// A raster whose element kind is only known at run time (after reading a header).
#[derive(Debug, Clone, PartialEq)]
pub enum AnyRaster {
    U8(MultibandRaster<u8>),
    I32(MultibandRaster<i32>),
    F32(MultibandRaster<f32>),
}

impl AnyRaster {
    pub fn kind(&self) -> SampleKind {
        match self {
            AnyRaster::U8(_) => SampleKind::U8,
            AnyRaster::I32(_) => SampleKind::I32,
            AnyRaster::F32(_) => SampleKind::F32,
        }
    }

    pub fn band_count(&self) -> usize {
        match self {
            AnyRaster::U8(r) => r.band_count(),
            AnyRaster::I32(r) => r.band_count(),
            AnyRaster::F32(r) => r.band_count(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            AnyRaster::U8(r) => (r.width(), r.height()),
            AnyRaster::I32(r) => (r.width(), r.height()),
            AnyRaster::F32(r) => (r.width(), r.height()),
        }
    }

    /// Integer view; fails for float rasters.
    pub fn into_i32(self) -> Result<MultibandRaster<i32>> {
        match self {
            AnyRaster::U8(r) => {
                let names = r.band_names().to_vec();
                let bands = r.into_bands().iter().map(|b| b.map(|v| v as i32)).collect();
                MultibandRaster::new(bands, names)
            }
            AnyRaster::I32(r) => Ok(r),
            AnyRaster::F32(_) => Err(Error::format("expected an integer raster, found float")),
        }
    }

    pub fn into_u8(self) -> Result<MultibandRaster<u8>> {
        match self {
            AnyRaster::U8(r) => Ok(r),
            AnyRaster::I32(r) => {
                let names = r.band_names().to_vec();
                let mut bands = Vec::new();
                for b in r.into_bands() {
                    if b.data().iter().any(|&v| !(0..=255).contains(&v)) {
                        return Err(Error::format("integer raster does not fit in 8 bits"));
                    }
                    bands.push(b.map(|v| v as u8));
                }
                MultibandRaster::new(bands, names)
            }
            AnyRaster::F32(_) => Err(Error::format("expected an 8-bit raster, found float")),
        }
    }

    pub fn into_f32(self) -> Result<MultibandRaster<f32>> {
        let (bands, names): (Vec<Raster<f32>>, Vec<String>) = match self {
            AnyRaster::U8(r) => (
                r.bands().iter().map(|b| b.map(|v| v as f32)).collect(),
                r.band_names().to_vec(),
            ),
            AnyRaster::I32(r) => (
                r.bands().iter().map(|b| b.map(|v| v as f32)).collect(),
                r.band_names().to_vec(),
            ),
            AnyRaster::F32(r) => return Ok(r),
        };
        MultibandRaster::new(bands, names)
    }
}

pub fn read_raster(path: impl AsRef<Path>, format: ImageFormat) -> Result<AnyRaster> {
    let bytes = fs::read(path)?;
    decode(&bytes, format)
}

pub fn write_raster(raster: &AnyRaster, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let bytes = encode(raster, format)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("header ended early"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::format("header is not ASCII"))
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::format(format!("bad header number {tok:?}")))
    }

    /// Consumes the single whitespace byte separating header and payload.
    fn payload(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            Some(_) => Err(Error::format("missing whitespace after header")),
            None => Ok(&[]),
        }
    }
}

fn truncated(expected: usize, got: usize) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("payload truncated: expected {expected} bytes, found {got}"),
    ))
}

fn decode(bytes: &[u8], format: ImageFormat) -> Result<AnyRaster> {
    let mut header = Header { bytes, pos: 0 };
    let magic = header.token()?;
    let channels = match (format, magic) {
        (ImageFormat::Pgm, "P5") | (ImageFormat::Pfm, "Pf") => 1,
        (ImageFormat::Ppm, "P6") | (ImageFormat::Pfm, "PF") => 3,
        _ => return Err(Error::format(format!("unexpected magic {magic:?} for {format:?}"))),
    };
    let width = header.number()?;
    let height = header.number()?;
    if width == 0 || height == 0 {
        return Err(Error::format("zero image dimension"));
    }
    let pixels = width * height;

    if format == ImageFormat::Pfm {
        let tok = header.token()?;
        let scale: f32 = tok
            .parse()
            .map_err(|_| Error::format(format!("bad PFM scale {tok:?}")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::format("PFM scale must be finite and non-zero"));
        }
        let little = scale < 0.0;
        let payload = header.payload()?;
        let need = pixels * channels * 4;
        if payload.len() < need {
            return Err(truncated(need, payload.len()));
        }
        let mut planes = vec![vec![0f32; pixels]; channels];
        for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let c = i % channels;
            let p = i / channels;
            let (file_row, x) = (p / width, p % width);
            let y = height - 1 - file_row;
            planes[c][y * width + x] = v;
        }
        let bands = planes
            .into_iter()
            .map(|d| Raster::new(width, height, d))
            .collect::<Result<Vec<_>>>()?;
        return Ok(AnyRaster::F32(MultibandRaster::new(bands, default_band_names(channels))?));
    }

    let maxval = header.number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("maxval {maxval} out of range")));
    }
    let payload = header.payload()?;
    let wide = maxval > 255;
    let sample_bytes = if wide { 2 } else { 1 };
    let need = pixels * channels * sample_bytes;
    if payload.len() < need {
        return Err(truncated(need, payload.len()));
    }
    let names = default_band_names(channels);
    if wide {
        let mut planes = vec![vec![0i32; pixels]; channels];
        for (i, chunk) in payload[..need].chunks_exact(2).enumerate() {
            planes[i % channels][i / channels] = u16::from_be_bytes([chunk[0], chunk[1]]) as i32;
        }
        let bands = planes
            .into_iter()
            .map(|d| Raster::new(width, height, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnyRaster::I32(MultibandRaster::new(bands, names)?))
    } else {
        let mut planes = vec![vec![0u8; pixels]; channels];
        for (i, &b) in payload[..need].iter().enumerate() {
            planes[i % channels][i / channels] = b;
        }
        let bands = planes
            .into_iter()
            .map(|d| Raster::new(width, height, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnyRaster::U8(MultibandRaster::new(bands, names)?))
    }
}

fn encode(raster: &AnyRaster, format: ImageFormat) -> Result<Vec<u8>> {
    let bands = raster.band_count();
    let allowed = match format {
        ImageFormat::Pgm => bands == 1,
        ImageFormat::Ppm => bands == 3,
        ImageFormat::Pfm => bands == 1 || bands == 3,
    };
    if !allowed {
        return Err(Error::format(format!("{format:?} cannot hold {bands} bands")));
    }
    let (width, height) = raster.dims();
    let pixels = width * height;
    let mut out = Vec::new();

    if format == ImageFormat::Pfm {
        let planes: Vec<Vec<f32>> = match raster {
            AnyRaster::F32(r) => r.bands().iter().map(|b| b.data().to_vec()).collect(),
            AnyRaster::U8(r) => r
                .bands()
                .iter()
                .map(|b| b.data().iter().map(|&v| v as f32).collect())
                .collect(),
            AnyRaster::I32(r) => {
                let limit = 1 << 24;
                let mut planes = Vec::new();
                for b in r.bands() {
                    if b.data().iter().any(|v| v.abs() > limit) {
                        return Err(Error::format("integer values too large for exact float storage"));
                    }
                    planes.push(b.data().iter().map(|&v| v as f32).collect());
                }
                planes
            }
        };
        let magic = if bands == 1 { "Pf" } else { "PF" };
        write!(out, "{magic}\n{width} {height}\n-1.0\n")?;
        out.reserve(pixels * bands * 4);
        for file_row in 0..height {
            let y = height - 1 - file_row;
            for x in 0..width {
                for plane in &planes {
                    out.extend_from_slice(&plane[y * width + x].to_le_bytes());
                }
            }
        }
        return Ok(out);
    }

    let magic = if format == ImageFormat::Pgm { "P5" } else { "P6" };
    match raster {
        AnyRaster::U8(r) => {
            write!(out, "{magic}\n{width} {height}\n255\n")?;
            for p in 0..pixels {
                for b in r.bands() {
                    out.push(b.data()[p]);
                }
            }
        }
        AnyRaster::I32(r) => {
            let mut max = 0;
            for b in r.bands() {
                for &v in b.data() {
                    if !(0..=65535).contains(&v) {
                        return Err(Error::format(format!("value {v} outside the 16-bit anymap range")));
                    }
                    max = max.max(v);
                }
            }
            let wide = max > 255;
            write!(out, "{magic}\n{width} {height}\n{}\n", if wide { 65535 } else { 255 })?;
            for p in 0..pixels {
                for b in r.bands() {
                    let v = b.data()[p];
                    if wide {
                        out.extend_from_slice(&(v as u16).to_be_bytes());
                    } else {
                        out.push(v as u8);
                    }
                }
            }
        }
        AnyRaster::F32(_) => {
            return Err(Error::format("float rasters must be written as PFM"));
        }
    }
    Ok(out)
}
