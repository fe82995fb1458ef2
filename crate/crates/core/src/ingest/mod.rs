//! Ground-truth preparation: footprint polygons, NDVI screening, shift
//! alignment and chip datasets.

mod align;
mod chips;

pub use align::{auto_align, shift_mask, Alignment, DEFAULT_MAX_SHIFT};
pub use chips::{
    augment_manifest, extract_chips, load_chip, ChipConfig, ChipManifest, ChipRecord, Polarity, Split,
    MANIFEST_HEADER,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::raster::Raster;
use crate::{Error, Result};

pub const DEFAULT_NDVI_THRESHOLD: f32 = 0.3;

/// One building outline: a closed ring in pixel-edge coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub id: i32,
    pub ring: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FootprintSet {
    footprints: Vec<Footprint>,
}

impl FootprintSet {
    /// Ids must be positive and unique, rings closed with at least three corners.
    pub fn new(footprints: Vec<Footprint>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &footprints {
            if f.id <= 0 {
                return Err(Error::Geometry(format!("footprint id must be positive, got {}", f.id)));
            }
            if !seen.insert(f.id) {
                return Err(Error::Geometry(format!("duplicate footprint id {}", f.id)));
            }
            if f.ring.len() < 4 {
                return Err(Error::Geometry(format!("footprint {} has fewer than 3 distinct vertices", f.id)));
            }
            if f.ring.first() != f.ring.last() {
                return Err(Error::Geometry(format!("footprint {} ring is not closed", f.id)));
            }
        }
        Ok(Self { footprints })
    }

    pub fn footprints(&self) -> &[Footprint] {
        &self.footprints
    }

    pub fn len(&self) -> usize {
        self.footprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.footprints.is_empty()
    }

    pub fn ids(&self) -> Vec<i32> {
        self.footprints.iter().map(|f| f.id).collect()
    }

    /// Parses `id, x1 y1 x2 y2 ...` lines. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::format(format!("footprint line {}: {what}", n + 1));
            let (id, coords) = line.split_once(',').ok_or_else(|| bad("expected `id, x1 y1 ...`"))?;
            let id: i32 = id.trim().parse().map_err(|_| bad("bad id"))?;
            let nums = coords
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad coordinate {t:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            if nums.len() % 2 != 0 {
                return Err(bad("odd number of coordinates"));
            }
            if nums.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite coordinate"));
            }
            out.push(Footprint {
                id,
                ring: nums.chunks(2).map(|c| (c[0], c[1])).collect(),
            });
        }
        Self::new(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for f in &self.footprints {
            let _ = write!(s, "{},", f.id);
            for (x, y) in &f.ring {
                let _ = write!(s, " {x} {y}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            footprints: self
                .footprints
                .iter()
                .map(|f| Footprint {
                    id: f.id,
                    ring: f.ring.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
                })
                .collect(),
        }
    }

    fn retain(&self, keep: impl Fn(i32) -> bool) -> Self {
        Self {
            footprints: self.footprints.iter().filter(|f| keep(f.id)).cloned().collect(),
        }
    }
}

/// Instance-id raster: a pixel takes a polygon's id when its center lies inside
/// the ring (even-odd rule). Later polygons overwrite earlier ones.
pub fn rasterize(set: &FootprintSet, width: usize, height: usize) -> Raster<i32> {
    let mut out = Raster::filled(width, height, 0i32);
    let mut xs = Vec::new();
    for f in &set.footprints {
        let mut filled = 0usize;
        for y in 0..height {
            let cy = y as f64 + 0.5;
            xs.clear();
            for e in f.ring.windows(2) {
                let ((x0, y0), (x1, y1)) = (e[0], e[1]);
                if (y0 > cy) != (y1 > cy) {
                    xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for span in xs.chunks_exact(2) {
                // Pixel x is inside when span[0] <= x + 0.5 < span[1].
                let start = (span[0] - 0.5).ceil().max(0.0);
                let end = (span[1] - 0.5).ceil().min(width as f64);
                let mut x = start;
                while x < end {
                    out.set(x as usize, y, f.id);
                    filled += 1;
                    x += 1.0;
                }
            }
        }
        if filled == 0 {
            warn!("footprint {} covers no pixel centers", f.id);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdviFilter {
    pub kept: FootprintSet,
    pub dropped: Vec<i32>,
    /// Footprints without visible pixels; kept, since there is nothing to judge.
    pub skipped: Vec<i32>,
}

/// Drops footprints whose mean NDVI over their rasterized pixels exceeds
/// `threshold`.
pub fn filter_by_ndvi(set: &FootprintSet, ndvi: &Raster<f32>, threshold: f32) -> Result<NdviFilter> {
    let ids = rasterize(set, ndvi.width(), ndvi.height());
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (&id, &v) in ids.data().iter().zip(ndvi.data()) {
        if id > 0 {
            let e = sums.entry(id).or_default();
            e.0 += v as f64;
            e.1 += 1;
        }
    }
    let mut dropped = Vec::new();
    let mut skipped = Vec::new();
    for id in set.ids() {
        match sums.get(&id) {
            Some(&(s, n)) if s / n as f64 > threshold as f64 => dropped.push(id),
            Some(_) => {}
            None => {
                warn!("footprint {id} has no pixels inside the NDVI raster; skipped");
                skipped.push(id);
            }
        }
    }
    let kept = set.retain(|id| !dropped.contains(&id));
    Ok(NdviFilter { kept, dropped, skipped })
}
