//! Signed-distance labels.
//!
//! A building mask becomes a field of signed Euclidean distances to the nearest
//! building boundary (positive inside, negative outside), which is then binned into
//! 128 classes with the boundary at class 64. Decoding is the threshold `y >= 64`.

use crate::raster::Raster;
use crate::{Error, Result};

/// Number of classes in distance mode.
pub const DISTANCE_CLASSES: usize = 128;
/// Class assigned to boundary pixels; every class at or above it is building.
pub const BOUNDARY_CLASS: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// 128 signed-distance classes, `1..=128`.
    Distance,
    /// Two classes: 1 = background, 2 = building.
    Binary,
}

impl LabelMode {
    pub fn classes(self) -> usize {
        match self {
            LabelMode::Distance => DISTANCE_CLASSES,
            LabelMode::Binary => 2,
        }
    }

    pub fn from_classes(k: usize) -> Option<Self> {
        match k {
            DISTANCE_CLASSES => Some(LabelMode::Distance),
            2 => Some(LabelMode::Binary),
            _ => None,
        }
    }
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dist" | "distance" => Ok(LabelMode::Distance),
            "bin" | "binary" => Ok(LabelMode::Binary),
            other => Err(Error::argument(format!("unknown label mode {other:?}"))),
        }
    }
}

/// Which way a single-class mask degenerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    /// Every pixel is building; the field is `+inf` everywhere.
    AllBuilding,
    /// No building pixel; the field is `-inf` everywhere.
    NoBuilding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub field: Raster<f32>,
    pub degenerate: Option<Degenerate>,
}

/// Per-pixel classes, 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Raster<i32>,
    mode: LabelMode,
}

impl LabelMap {
    pub fn new(labels: Raster<i32>, mode: LabelMode) -> Result<Self> {
        let k = mode.classes() as i32;
        if let Some(&bad) = labels.data().iter().find(|&&y| y < 1 || y > k) {
            return Err(Error::argument(format!("label {bad} outside 1..={k}")));
        }
        Ok(Self { labels, mode })
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn classes(&self) -> usize {
        self.mode.classes()
    }

    pub fn raster(&self) -> &Raster<i32> {
        &self.labels
    }

    pub fn into_raster(self) -> Raster<i32> {
        self.labels
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.labels.get(x, y)
    }

    /// Building mask for either mode.
    pub fn building_mask(&self) -> Raster<u8> {
        match self.mode {
            LabelMode::Distance => self.labels.map(|y| (y >= BOUNDARY_CLASS) as u8),
            LabelMode::Binary => self.labels.map(|y| (y == 2) as u8),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        Ok(Self {
            labels: self.labels.crop(x0, y0, w, h)?,
            mode: self.mode,
        })
    }
}

fn check_binary(mask: &Raster<u8>) -> Result<()> {
    if let Some(&bad) = mask.data().iter().find(|&&v| v > 1) {
        return Err(Error::argument(format!("mask value {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Building pixels that touch background through a 4-neighbour or sit on the raster edge.
pub fn boundary_pixels(mask: &Raster<u8>) -> Raster<u8> {
    let (w, h) = mask.dims();
    Raster::from_fn(w, h, |x, y| {
        if mask.get(x, y) == 0 {
            return 0;
        }
        let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
        let touches = edge
            || mask.get(x - 1, y) == 0
            || mask.get(x + 1, y) == 0
            || mask.get(x, y - 1) == 0
            || mask.get(x, y + 1) == 0;
        touches as u8
    })
}

// Squared distances stand in for "no site" with a large finite value so that the
// envelope arithmetic never sees inf - inf.
const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], hull: &mut [usize], bounds: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    hull[0] = 0;
    bounds[0] = f64::NEG_INFINITY;
    bounds[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let v = hull[k];
            let s = (fq - (f[v] + (v * v) as f64)) / (2.0 * q as f64 - 2.0 * v as f64);
            if s <= bounds[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= bounds[k] {
                // k == 0 and the new parabola dominates the only one on the hull.
                hull[0] = q;
                bounds[0] = f64::NEG_INFINITY;
                bounds[1] = f64::INFINITY;
            } else {
                k += 1;
                hull[k] = q;
                bounds[k] = s;
                bounds[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while bounds[k + 1] < q as f64 {
            k += 1;
        }
        let v = hull[k];
        let d = q as f64 - v as f64;
        *o = d * d + f[v];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `site` pixel,
/// row-major. Pixels far from any site keep a huge finite value.
pub fn squared_distance_to(sites: &Raster<u8>) -> Vec<f64> {
    let (w, h) = sites.dims();
    let n = w.max(h);
    let mut grid: Vec<f64> = sites.data().iter().map(|&s| if s != 0 { 0.0 } else { FAR }).collect();
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut hull = vec![0usize; n];
    let mut bounds = vec![0.0; n + 1];

    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut hull, &mut bounds);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        f[..w].copy_from_slice(row);
        edt_1d(&f[..w], &mut out[..w], &mut hull, &mut bounds);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

/// Signed Euclidean distance (pixels) to the nearest building boundary pixel.
///
/// Boundary pixels get exactly 0, building interiors are positive, background is
/// negative. A mask with only one class yields a flagged field of `+inf` or `-inf`.
pub fn signed_distance_transform(mask: &Raster<u8>) -> Result<DistanceField> {
    check_binary(mask)?;
    let ones = mask.data().iter().filter(|&&v| v == 1).count();
    let (w, h) = mask.dims();
    let degenerate = if ones == mask.len() {
        Some(Degenerate::AllBuilding)
    } else if ones == 0 {
        Some(Degenerate::NoBuilding)
    } else {
        None
    };
    if let Some(kind) = degenerate {
        let v = match kind {
            Degenerate::AllBuilding => f32::INFINITY,
            Degenerate::NoBuilding => f32::NEG_INFINITY,
        };
        log::warn!("signed distance transform of a single-class mask ({kind:?})");
        return Ok(DistanceField {
            field: Raster::filled(w, h, v).with_pixel_size(mask.pixel_size_m())?,
            degenerate,
        });
    }

    let sq = squared_distance_to(&boundary_pixels(mask));
    let data = sq
        .iter()
        .zip(mask.data())
        .map(|(&d2, &m)| {
            let d = d2.sqrt() as f32;
            if m == 1 {
                d
            } else {
                -d
            }
        })
        .collect();
    Ok(DistanceField {
        field: Raster::new(w, h, data)?.with_pixel_size(mask.pixel_size_m())?,
        degenerate: None,
    })
}

/// `y = clamp(64 + floor(d), 1, 128)`.
pub fn quantize_value(d: f32) -> i32 {
    let y = BOUNDARY_CLASS as f64 + (d as f64).floor();
    y.clamp(1.0, DISTANCE_CLASSES as f64) as i32
}

pub fn quantize_distance(d: &DistanceField) -> Result<LabelMap> {
    if d.degenerate.is_some() || d.field.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("cannot quantize a non-finite distance field"));
    }
    Ok(LabelMap {
        labels: d.field.map(quantize_value),
        mode: LabelMode::Distance,
    })
}

/// Building mask from distance-mode labels: 1 where `y >= 64`.
pub fn decode_labels(labels: &LabelMap) -> Result<Raster<u8>> {
    if labels.mode != LabelMode::Distance {
        return Err(Error::Mode("decode_labels expects distance-mode labels".into()));
    }
    Ok(labels.building_mask())
}

/// Two-class labels: building 2, background 1.
pub fn binary_labels(mask: &Raster<u8>) -> Result<LabelMap> {
    check_binary(mask)?;
    Ok(LabelMap {
        labels: mask.map(|m| if m == 1 { 2 } else { 1 }),
        mode: LabelMode::Binary,
    })
}

/// Distance-mode labels straight from a mask. Single-class masks saturate
/// (all 128 or all 1) instead of failing.
pub fn distance_labels(mask: &Raster<u8>) -> Result<LabelMap> {
    let field = signed_distance_transform(mask)?;
    match field.degenerate {
        Some(Degenerate::AllBuilding) => Ok(LabelMap {
            labels: mask.map(|_| DISTANCE_CLASSES as i32),
            mode: LabelMode::Distance,
        }),
        Some(Degenerate::NoBuilding) => Ok(LabelMap {
            labels: mask.map(|_| 1),
            mode: LabelMode::Distance,
        }),
        None => quantize_distance(&field),
    }
}

pub fn encode_labels(mask: &Raster<u8>, mode: LabelMode) -> Result<LabelMap> {
    match mode {
        LabelMode::Distance => distance_labels(mask),
        LabelMode::Binary => binary_labels(mask),
    }
}
