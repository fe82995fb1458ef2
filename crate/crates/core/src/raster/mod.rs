//! Raster containers shared by every stage of the pipeline.

mod image;
mod pnm;

use std::fmt::Debug;

use crate::{Error, Result};

pub use image::{read_image, sidecar_path, write_image};
pub use pnm::{read_raster, write_raster, AnyRaster, ImageFormat};

/// Element kinds a raster may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    U8,
    I32,
    F32,
}

pub trait Sample: Copy + Default + PartialOrd + PartialEq + Debug + Send + Sync + 'static {
    const KIND: SampleKind;

    fn to_f64(self) -> f64;
}

impl Sample for u8 {
    const KIND: SampleKind = SampleKind::U8;

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Sample for i32 {
    const KIND: SampleKind = SampleKind::I32;

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Sample for f32 {
    const KIND: SampleKind = SampleKind::F32;

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Single-band, row-major grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    pixel_size_m: f64,
    data: Vec<T>,
}

impl<T: Sample> Raster<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "raster data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_size_m: 1.0,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            pixel_size_m: 1.0,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixel_size_m: 1.0,
            data,
        }
    }

    pub fn with_pixel_size(mut self, pixel_size_m: f64) -> Result<Self> {
        if !(pixel_size_m > 0.0 && pixel_size_m.is_finite()) {
            return Err(Error::argument(format!(
                "pixel size must be positive, got {pixel_size_m}"
            )));
        }
        self.pixel_size_m = pixel_size_m;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.pixel_size_m
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Sample>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            pixel_size_m: self.pixel_size_m,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the window `[x0, x0 + w) x [y0, y0 + h)`; must lie inside the raster.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.row(y)[x0..x0 + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixel_size_m: self.pixel_size_m,
            data,
        })
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn ensure_same_dims<U>(&self, other: &Raster<U>, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

/// Ordered stack of equally sized bands, e.g. R, G, B, NIR.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandRaster<T> {
    bands: Vec<Raster<T>>,
    band_names: Vec<String>,
}

impl<T: Sample> MultibandRaster<T> {
    pub fn new(bands: Vec<Raster<T>>, band_names: Vec<String>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::argument("multiband raster needs at least one band"));
        }
        if bands.len() != band_names.len() {
            return Err(Error::argument(format!(
                "{} bands but {} band names",
                bands.len(),
                band_names.len()
            )));
        }
        let first = &bands[0];
        for band in &bands[1..] {
            if !first.same_dims(band) || first.pixel_size_m != band.pixel_size_m {
                return Err(Error::shape("bands differ in size or pixel size"));
            }
        }
        for (i, name) in band_names.iter().enumerate() {
            if band_names[..i].contains(name) {
                return Err(Error::argument(format!("duplicate band name {name:?}")));
            }
        }
        Ok(Self { bands, band_names })
    }

    /// Wraps bands with default names (`b0`, `b1`, ... or R,G,B / R,G,B,NIR).
    pub fn from_bands(bands: Vec<Raster<T>>) -> Result<Self> {
        let names = default_band_names(bands.len());
        Self::new(bands, names)
    }

    pub fn single(band: Raster<T>) -> Self {
        Self {
            bands: vec![band],
            band_names: default_band_names(1),
        }
    }

    pub fn width(&self) -> usize {
        self.bands[0].width
    }

    pub fn height(&self) -> usize {
        self.bands[0].height
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.bands[0].pixel_size_m
    }

    pub fn with_pixel_size(self, pixel_size_m: f64) -> Result<Self> {
        let bands = self
            .bands
            .into_iter()
            .map(|b| b.with_pixel_size(pixel_size_m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bands, ..self })
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[Raster<T>] {
        &self.bands
    }

    pub fn band(&self, i: usize) -> &Raster<T> {
        &self.bands[i]
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn band_by_name(&self, name: &str) -> Option<&Raster<T>> {
        self.band_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| &self.bands[i])
    }

    /// New raster holding the named bands in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let mut bands = Vec::with_capacity(names.len());
        for name in names {
            let band = self
                .band_by_name(name)
                .ok_or_else(|| Error::argument(format!("no band named {name:?}")))?;
            bands.push(band.clone());
        }
        Self::new(bands, names.to_vec())
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let bands = self
            .bands
            .iter()
            .map(|b| b.crop(x0, y0, w, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bands,
            band_names: self.band_names.clone(),
        })
    }

    pub fn into_bands(self) -> Vec<Raster<T>> {
        self.bands
    }
}

pub fn default_band_names(count: usize) -> Vec<String> {
    match count {
        1 => vec!["gray".into()],
        3 => ["R", "G", "B"].iter().map(|s| s.to_string()).collect(),
        4 => ["R", "G", "B", "NIR"].iter().map(|s| s.to_string()).collect(),
        n => (0..n).map(|i| format!("b{i}")).collect(),
    }
}

/// Normalized difference vegetation index, `(nir - red) / (nir + red)`.
///
/// Pixels where `nir + red == 0` map to 0.0 (no radiance is not vegetation).
pub fn ndvi<T: Sample>(nir: &Raster<T>, red: &Raster<T>) -> Result<Raster<f32>> {
    nir.ensure_same_dims(red, "ndvi band size mismatch")?;
    let data = nir
        .data
        .iter()
        .zip(&red.data)
        .map(|(&n, &r)| {
            let (n, r) = (n.to_f64(), r.to_f64());
            let sum = n + r;
            if sum == 0.0 {
                0.0
            } else {
                ((n - r) / sum) as f32
            }
        })
        .collect();
    Ok(Raster {
        width: nir.width,
        height: nir.height,
        pixel_size_m: nir.pixel_size_m,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandStat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandStats {
    pub band_names: Vec<String>,
    pub bands: Vec<BandStat>,
}

/// Streaming accumulator behind [`band_statistics`].
#[derive(Debug, Clone, Default)]
pub struct BandStatsAccumulator {
    band_names: Vec<String>,
    sums: Vec<f64>,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    count: u64,
}

impl BandStatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Sample>(&mut self, raster: &MultibandRaster<T>) -> Result<()> {
        if self.count == 0 && self.sums.is_empty() {
            let n = raster.band_count();
            self.band_names = raster.band_names.clone();
            self.sums = vec![0.0; n];
            self.mins = vec![f64::INFINITY; n];
            self.maxs = vec![f64::NEG_INFINITY; n];
        } else if raster.band_count() != self.sums.len() {
            return Err(Error::argument(format!(
                "inconsistent band count: expected {}, got {}",
                self.sums.len(),
                raster.band_count()
            )));
        }
        for (i, band) in raster.bands.iter().enumerate() {
            let mut sum = 0.0f64;
            let (mut lo, mut hi) = (self.mins[i], self.maxs[i]);
            for &v in &band.data {
                let v = v.to_f64();
                sum += v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            self.sums[i] += sum;
            self.mins[i] = lo;
            self.maxs[i] = hi;
        }
        self.count += (raster.width() * raster.height()) as u64;
        Ok(())
    }

    pub fn finish(self) -> Result<BandStats> {
        if self.sums.is_empty() {
            return Err(Error::argument("band statistics need at least one raster"));
        }
        if self.count == 0 {
            return Err(Error::argument("band statistics over zero pixels"));
        }
        let n = self.count as f64;
        let bands = (0..self.sums.len())
            .map(|i| BandStat {
                // Clamp guards the last-ulp rounding of sum / n against min/max.
                mean: (self.sums[i] / n).clamp(self.mins[i], self.maxs[i]),
                min: self.mins[i],
                max: self.maxs[i],
            })
            .collect();
        Ok(BandStats {
            band_names: self.band_names,
            bands,
        })
    }
}

/// Per-band mean, min and max over every pixel of every raster.
pub fn band_statistics<'a, T: Sample>(
    rasters: impl IntoIterator<Item = &'a MultibandRaster<T>>,
) -> Result<BandStats> {
    let mut acc = BandStatsAccumulator::new();
    for r in rasters {
        acc.push(r)?;
    }
    acc.finish()
}
