//! Per-pixel class likelihoods and their equal-weight fusion.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{self, Blob};
use crate::labels::{LabelMap, LabelMode};
use crate::raster::{read_raster, write_raster, AnyRaster, ImageFormat, MultibandRaster, Raster};
use crate::{Error, Result};

/// Tolerance on per-pixel probability sums.
pub const STOCHASTIC_TOL: f32 = 1e-5;

const PROB_MAGIC: &[u8; 8] = b"FPPROBS\0";

/// `classes` planes of `height x width` likelihoods, plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Validates shape and that every pixel is a probability vector.
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        let map = Self::from_planes(width, height, classes, data)?;
        map.check_stochastic()?;
        Ok(map)
    }

    /// Shape check only; used for network output, which is stochastic by construction.
    pub fn from_planes(width: usize, height: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if classes == 0 || data.len() != width * height * classes {
            return Err(Error::shape(format!(
                "probability map {width}x{height}x{classes} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn uniform(width: usize, height: usize, classes: usize) -> Self {
        Self {
            width,
            height,
            classes,
            data: vec![1.0 / classes as f32; width * height * classes],
        }
    }

    pub fn check_stochastic(&self) -> Result<()> {
        let n = self.width * self.height;
        for i in 0..n {
            let mut sum = 0.0f64;
            for c in 0..self.classes {
                let v = self.data[c * n + i];
                if !(v >= 0.0) {
                    return Err(Error::argument(format!("negative or NaN probability at pixel {i}")));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL as f64 {
                return Err(Error::argument(format!("pixel {i} probabilities sum to {sum}")));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, class: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[class * n..(class + 1) * n]
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        let n = self.width * self.height;
        let i = y * self.width + x;
        (0..self.classes).map(|c| self.data[c * n + i]).collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape("probability map crop out of bounds"));
        }
        let n = self.width * self.height;
        let mut data = Vec::with_capacity(w * h * self.classes);
        for c in 0..self.classes {
            for y in y0..y0 + h {
                let start = c * n + y * self.width + x0;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            classes: self.classes,
            data,
        })
    }

    /// Copy `src` into this map with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &ProbMap, x0: usize, y0: usize) -> Result<()> {
        if src.classes != self.classes || x0 + src.width > self.width || y0 + src.height > self.height {
            return Err(Error::shape("probability map paste out of bounds"));
        }
        let n = self.width * self.height;
        let m = src.width * src.height;
        for c in 0..self.classes {
            for y in 0..src.height {
                let dst = c * n + (y0 + y) * self.width + x0;
                let s = c * m + y * src.width;
                self.data[dst..dst + src.width].copy_from_slice(&src.data[s..s + src.width]);
            }
        }
        Ok(())
    }

    fn ensure_same_shape(&self, other: &ProbMap) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.classes != other.classes {
            return Err(Error::shape(format!(
                "probability maps differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.classes, other.width, other.height, other.classes
            )));
        }
        Ok(())
    }
}

/// Per-pixel arithmetic mean of two likelihood maps.
pub fn fuse_equal(a: &ProbMap, b: &ProbMap) -> Result<ProbMap> {
    a.ensure_same_shape(b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| (x + y) * 0.5).collect();
    Ok(ProbMap { data, ..*a })
}

/// `weight_a * a + (1 - weight_a) * b`. Equal weights go through [`fuse_equal`].
pub fn fuse_weighted(a: &ProbMap, b: &ProbMap, weight_a: f32) -> Result<ProbMap> {
    if !(0.0..=1.0).contains(&weight_a) {
        return Err(Error::argument(format!("fusion weight {weight_a} outside [0, 1]")));
    }
    if weight_a == 0.5 {
        return fuse_equal(a, b);
    }
    a.ensure_same_shape(b)?;
    let wb = 1.0 - weight_a;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| weight_a * x + wb * y).collect();
    Ok(ProbMap { data, ..*a })
}

/// Most likely class per pixel (1-based); ties go to the smaller class index.
pub fn argmax_classes(p: &ProbMap) -> Raster<i32> {
    let n = p.width * p.height;
    let mut best = p.plane(0).to_vec();
    let mut class = vec![1i32; n];
    for c in 1..p.classes {
        for ((b, cls), &v) in best.iter_mut().zip(class.iter_mut()).zip(p.plane(c)) {
            if v > *b {
                *b = v;
                *cls = c as i32 + 1;
            }
        }
    }
    Raster::new(p.width, p.height, class).expect("argmax dims")
}

pub fn argmax_decision(p: &ProbMap) -> Result<LabelMap> {
    let mode = LabelMode::from_classes(p.classes).ok_or_else(|| {
        Error::argument(format!("no label mode has {} classes (expected 2 or 128)", p.classes))
    })?;
    LabelMap::new(argmax_classes(p), mode)
}

#[derive(Serialize, Deserialize)]
struct ProbHeader {
    width: usize,
    height: usize,
    classes: usize,
}

/// Writes a probability map. Two-class maps become one PFM per class plane plus a
/// text index at `path`; larger maps use the binary plane container.
pub fn write_probmap(p: &ProbMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if p.classes == 2 {
        let mut index = format!("probmap {} {} {}\n", p.classes, p.width, p.height);
        for c in 0..p.classes {
            let plane_path = plane_file(path, c);
            let raster = Raster::new(p.width, p.height, p.plane(c).to_vec())?;
            write_raster(&AnyRaster::F32(MultibandRaster::single(raster)), &plane_path, ImageFormat::Pfm)?;
            index.push_str(plane_path.file_name().and_then(|s| s.to_str()).unwrap_or_default());
            index.push('\n');
        }
        fs::write(path, index)?;
        return Ok(());
    }
    let header = serde_json::to_string(&ProbHeader {
        width: p.width,
        height: p.height,
        classes: p.classes,
    })?;
    let blob = Blob {
        shape: vec![p.classes, p.height, p.width],
        data: p.data.clone(),
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    container::write(&mut out, PROB_MAGIC, &header, &[blob])
}

pub fn read_probmap(path: impl AsRef<Path>) -> Result<ProbMap> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(PROB_MAGIC) {
        let (desc, blobs) = container::read(&mut BufReader::new(&bytes[..]), PROB_MAGIC)?;
        let header: ProbHeader = serde_json::from_str(&desc)?;
        let blob = blobs
            .into_iter()
            .next()
            .ok_or_else(|| Error::format("probability container holds no planes"))?;
        if blob.shape != [header.classes, header.height, header.width] {
            return Err(Error::format("probability container shape does not match its header"));
        }
        return ProbMap::from_planes(header.width, header.height, header.classes, blob.data);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::format("unrecognized probability map file"))?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
    let parse = |s: Option<&&str>| -> Result<usize> {
        s.and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("bad probability index header"))
    };
    if head.first() != Some(&"probmap") {
        return Err(Error::format("bad probability index header"));
    }
    let (classes, width, height) = (parse(head.get(1))?, parse(head.get(2))?, parse(head.get(3))?);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut data = Vec::with_capacity(classes * width * height);
    for _ in 0..classes {
        let name = lines.next().ok_or_else(|| Error::format("probability index lists too few planes"))?;
        let plane = read_raster(dir.join(name.trim()), ImageFormat::Pfm)?.into_f32()?;
        if plane.width() != width || plane.height() != height || plane.band_count() != 1 {
            return Err(Error::format(format!("plane {name} does not match the index header")));
        }
        data.extend_from_slice(plane.band(0).data());
    }
    ProbMap::from_planes(width, height, classes, data)
}

fn plane_file(index: &Path, class: usize) -> PathBuf {
    let stem = index.file_stem().and_then(|s| s.to_str()).unwrap_or("probs");
    index.with_file_name(format!("{stem}.c{}.pfm", class + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(pixels: &[&[f32]]) -> ProbMap {
        let k = pixels[0].len();
        let n = pixels.len();
        let mut data = vec![0.0; n * k];
        for (i, p) in pixels.iter().enumerate() {
            for c in 0..k {
                data[c * n + i] = p[c];
            }
        }
        ProbMap::new(n, 1, k, data).unwrap()
    }

    #[test]
    fn fuse_two_pixels() {
        let a = map(&[&[0.6, 0.4]]);
        let b = map(&[&[0.2, 0.8]]);
        let f = fuse_equal(&a, &b).unwrap();
        let px = f.pixel(0, 0);
        assert!((px[0] - 0.4).abs() < 1e-7 && (px[1] - 0.6).abs() < 1e-7);
        assert_eq!(fuse_equal(&a, &a).unwrap(), a);
    }

    #[test]
    fn fuse_shape_mismatch() {
        let a = map(&[&[0.6, 0.4]]);
        let b = map(&[&[0.6, 0.4], &[0.5, 0.5]]);
        assert!(matches!(fuse_equal(&a, &b), Err(Error::Shape(_))));
        let c = map(&[&[0.2, 0.3, 0.5]]);
        assert!(fuse_equal(&a, &c).is_err());
    }

    #[test]
    fn argmax_and_ties() {
        let p = map(&[&[0.1, 0.9], &[0.5, 0.5]]);
        let labels = argmax_decision(&p).unwrap();
        assert_eq!(labels.raster().data(), &[2, 1]);
        assert_eq!(labels.mode(), LabelMode::Binary);
        assert!(argmax_decision(&map(&[&[0.2, 0.3, 0.5]])).is_err());
    }

    #[test]
    fn validation_rejects_non_stochastic() {
        assert!(ProbMap::new(1, 1, 2, vec![0.7, 0.7]).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(ProbMap::new(2, 1, 2, vec![0.5; 3]).is_err());
    }

    #[test]
    fn weighted_fusion() {
        let a = map(&[&[1.0, 0.0]]);
        let b = map(&[&[0.0, 1.0]]);
        let f = fuse_weighted(&a, &b, 0.25).unwrap();
        assert_eq!(f.pixel(0, 0), vec![0.25, 0.75]);
        assert!(fuse_weighted(&a, &b, 1.5).is_err());
    }

    #[test]
    fn probmap_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let two = ProbMap::new(2, 1, 2, vec![0.25, 1.0, 0.75, 0.0]).unwrap();
        let idx = dir.path().join("p.idx");
        write_probmap(&two, &idx).unwrap();
        assert!(dir.path().join("p.c1.pfm").exists());
        assert_eq!(read_probmap(&idx).unwrap(), two);

        let many = ProbMap::uniform(3, 2, 128);
        let bin = dir.path().join("p.prob");
        write_probmap(&many, &bin).unwrap();
        assert_eq!(read_probmap(&bin).unwrap(), many);
    }

    fn stochastic(n: usize, k: usize) -> impl Strategy<Value = ProbMap> {
        proptest::collection::vec(proptest::collection::vec(0.001f32..1.0, k), n).prop_map(move |rows| {
            let mut data = vec![0.0; n * k];
            for (i, row) in rows.iter().enumerate() {
                let s: f32 = row.iter().sum();
                for c in 0..k {
                    data[c * n + i] = row[c] / s;
                }
            }
            ProbMap::from_planes(n, 1, k, data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn fused_maps_stay_stochastic(a in stochastic(16, 5), b in stochastic(16, 5)) {
            let f = fuse_equal(&a, &b).unwrap();
            prop_assert!(f.check_stochastic().is_ok());
            prop_assert_eq!(&f, &fuse_equal(&b, &a).unwrap());
        }

        #[test]
        fn fused_argmax_is_permutation_equivariant(a in stochastic(8, 4), b in stochastic(8, 4), perm in Just([2usize, 0, 3, 1])) {
            let permute = |m: &ProbMap| {
                let n = m.width() * m.height();
                let mut data = vec![0.0; m.data().len()];
                for c in 0..4 {
                    data[perm[c] * n..(perm[c] + 1) * n].copy_from_slice(m.plane(c));
                }
                ProbMap::from_planes(m.width(), m.height(), 4, data).unwrap()
            };
            let base = argmax_classes(&fuse_equal(&a, &b).unwrap());
            let moved = argmax_classes(&fuse_equal(&permute(&a), &permute(&b)).unwrap());
            let fused = fuse_equal(&a, &b).unwrap();
            for i in 0..8 {
                let px = fused.pixel(i, 0);
                let top = px.iter().cloned().fold(f32::MIN, f32::max);
                // Only compare where the winner is unique; ties follow index order.
                if px.iter().filter(|&&v| v == top).count() == 1 {
                    prop_assert_eq!(moved.data()[i] as usize, perm[base.data()[i] as usize - 1] + 1);
                }
            }
        }
    }
}
