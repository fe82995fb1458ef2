use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{LabelMap, LabelMode};
use crate::raster::{read_image, read_raster, write_image, write_raster, AnyRaster, ImageFormat, MultibandRaster};
use crate::{Error, Result};

pub const MANIFEST_HEADER: &str = "image,label,origin_x,origin_y,size,polarity,split";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::argument(format!("unknown split {s:?}"))),
        }
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipRecord {
    pub image: String,
    pub label: String,
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    pub polarity: Polarity,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChipManifest {
    pub records: Vec<ChipRecord>,
}

impl ChipManifest {
    pub fn new(records: Vec<ChipRecord>) -> Result<Self> {
        let m = Self { records };
        m.chip_size()?;
        Ok(m)
    }

    /// The common chip size, `None` for an empty manifest.
    pub fn chip_size(&self) -> Result<Option<usize>> {
        let first = match self.records.first() {
            Some(r) => r.size,
            None => return Ok(None),
        };
        if let Some(r) = self.records.iter().find(|r| r.size != first) {
            return Err(Error::argument(format!("mixed chip sizes {first} and {}", r.size)));
        }
        Ok(Some(first))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.records.is_empty() {
            w.write_record(MANIFEST_HEADER.split(','))?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != MANIFEST_HEADER {
            return Err(Error::format(format!("manifest header must be `{MANIFEST_HEADER}`")));
        }
        let records = rd.deserialize().collect::<std::result::Result<Vec<ChipRecord>, _>>()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &records {
            for f in [&r.image, &r.label] {
                if !base.join(f).exists() {
                    return Err(Error::argument(format!("manifest entry {f} does not exist")));
                }
            }
        }
        Self::new(records)
    }
}

#[derive(Debug, Clone)]
pub struct ChipConfig {
    pub chip: usize,
    pub count: usize,
    pub seed: u64,
    /// Share of building-free chips; `None` keeps whatever random placement gives.
    pub negative_fraction: Option<f64>,
    pub split: Split,
    /// File name prefix for the written chips.
    pub stem: String,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            chip: 500,
            count: 100,
            seed: 0,
            negative_fraction: None,
            split: Split::Train,
            stem: "chip".into(),
        }
    }
}

/// Cuts `count` random chips from a scene and writes them to `out_dir`.
/// Negative chips (no building pixel) are held to `negative_fraction` by
/// rejection sampling.
pub fn extract_chips(
    image: &MultibandRaster<u8>,
    labels: &LabelMap,
    cfg: &ChipConfig,
    out_dir: impl AsRef<Path>,
) -> Result<ChipManifest> {
    let out_dir = out_dir.as_ref();
    let (w, h) = (image.width(), image.height());
    if labels.width() != w || labels.height() != h {
        return Err(Error::shape("image and labels differ in size"));
    }
    if cfg.chip == 0 || cfg.chip > w || cfg.chip > h {
        return Err(Error::argument(format!("chip size {} does not fit a {w}x{h} image", cfg.chip)));
    }
    if let Some(f) = cfg.negative_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::argument(format!("negative fraction {f} outside [0, 1]")));
        }
    }
    let mask = labels.building_mask();
    let (mut need_neg, mut need_pos) = match cfg.negative_fraction {
        Some(f) => {
            let n = (f * cfg.count as f64).round() as usize;
            (n, cfg.count - n)
        }
        None => (cfg.count, cfg.count),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut origins = Vec::with_capacity(cfg.count);
    let budget = 1000 * cfg.count.max(1) + 10_000;
    let mut attempts = 0;
    while origins.len() < cfg.count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::argument(format!(
                "found only {} of {} chips with the requested polarity mix",
                origins.len(),
                cfg.count
            )));
        }
        let x0 = rng.gen_range(0..=w - cfg.chip);
        let y0 = rng.gen_range(0..=h - cfg.chip);
        let building = (y0..y0 + cfg.chip).any(|y| mask.row(y)[x0..x0 + cfg.chip].iter().any(|&m| m != 0));
        let slot = if building { &mut need_pos } else { &mut need_neg };
        if *slot == 0 {
            continue;
        }
        *slot -= 1;
        let polarity = if building { Polarity::Positive } else { Polarity::Negative };
        origins.push((x0, y0, polarity));
    }

    std::fs::create_dir_all(out_dir)?;
    let ext = if image.band_count() >= 3 { "ppm" } else { "pgm" };
    let mut records = Vec::with_capacity(origins.len());
    for (i, &(x0, y0, polarity)) in origins.iter().enumerate() {
        let image_name = format!("{}_{i:05}.{ext}", cfg.stem);
        let label_name = format!("{}_{i:05}_label.pgm", cfg.stem);
        write_image(&image.crop(x0, y0, cfg.chip, cfg.chip)?, out_dir.join(&image_name))?;
        let lab = labels.crop(x0, y0, cfg.chip, cfg.chip)?;
        let lab = MultibandRaster::single(lab.raster().map(|v| v as u8));
        write_raster(&AnyRaster::U8(lab), out_dir.join(&label_name), ImageFormat::Pgm)?;
        records.push(ChipRecord {
            image: image_name,
            label: label_name,
            origin_x: x0,
            origin_y: y0,
            size: cfg.chip,
            polarity,
            split: cfg.split,
        });
    }
    info!("wrote {} chips after {attempts} draws", records.len());
    ChipManifest::new(records)
}

/// Loads one chip listed in a manifest stored in `base_dir`.
pub fn load_chip(record: &ChipRecord, base_dir: impl AsRef<Path>, mode: LabelMode) -> Result<(MultibandRaster<u8>, LabelMap)> {
    let base = base_dir.as_ref();
    let image = read_image(base.join(&record.image))?;
    let raw = read_raster(base.join(&record.label), ImageFormat::Pgm)?.into_i32()?;
    if raw.band_count() != 1 {
        return Err(Error::format("label chips must have one band"));
    }
    let labels = LabelMap::new(raw.band(0).clone(), mode)?;
    if image.width() != record.size || labels.width() != record.size {
        return Err(Error::shape(format!("chip {} is not {}x{}", record.image, record.size, record.size)));
    }
    Ok((image, labels))
}

/// Appends `extra` to `base`, e.g. hand-picked negatives for retraining.
pub fn augment_manifest(base: &ChipManifest, extra: &ChipManifest) -> Result<ChipManifest> {
    if let (Some(a), Some(b)) = (base.chip_size()?, extra.chip_size()?) {
        if a != b {
            return Err(Error::argument(format!("chip sizes differ: {a} vs {b}")));
        }
    }
    let mut records = base.records.clone();
    records.extend(extra.records.iter().cloned());
    Ok(ChipManifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::encode_labels;
    use crate::raster::Raster;

    fn scene() -> (MultibandRaster<u8>, LabelMap) {
        let mask = Raster::from_fn(60, 40, |x, y| ((10..20).contains(&x) && (5..15).contains(&y)) as u8);
        let bands = (0..4).map(|b| Raster::from_fn(60, 40, |x, y| (x + y + b) as u8)).collect();
        (MultibandRaster::from_bands(bands).unwrap(), encode_labels(&mask, LabelMode::Distance).unwrap())
    }

    fn record(i: usize, size: usize) -> ChipRecord {
        ChipRecord {
            image: format!("c{i}.ppm"),
            label: format!("c{i}_label.pgm"),
            origin_x: 0,
            origin_y: 0,
            size,
            polarity: Polarity::Positive,
            split: Split::Train,
        }
    }

    #[test]
    fn deterministic_and_loadable() {
        let (img, lab) = scene();
        let cfg = ChipConfig { chip: 16, count: 10, seed: 7, ..Default::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = extract_chips(&img, &lab, &cfg, d1.path()).unwrap();
        let b = extract_chips(&img, &lab, &cfg, d2.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        a.write(d1.path().join("manifest.csv")).unwrap();
        let back = ChipManifest::read(d1.path().join("manifest.csv")).unwrap();
        assert_eq!(back, a);
        let r = &back.records[0];
        let (ci, cl) = load_chip(r, d1.path(), LabelMode::Distance).unwrap();
        assert_eq!(ci.band_count(), 4);
        assert_eq!(ci.bands()[0], img.band(0).crop(r.origin_x, r.origin_y, 16, 16).unwrap());
        assert_eq!(cl, lab.crop(r.origin_x, r.origin_y, 16, 16).unwrap());
        let text = std::fs::read_to_string(d1.path().join("manifest.csv")).unwrap();
        assert!(text.starts_with(MANIFEST_HEADER));
    }

    #[test]
    fn polarity_mix() {
        let (img, lab) = scene();
        let dir = tempfile::tempdir().unwrap();
        let all_neg = ChipConfig { chip: 12, count: 8, seed: 1, negative_fraction: Some(1.0), ..Default::default() };
        let m = extract_chips(&img, &lab, &all_neg, dir.path()).unwrap();
        assert!(m.records.iter().all(|r| r.polarity == Polarity::Negative));
        let half = ChipConfig { negative_fraction: Some(0.5), ..all_neg };
        let m = extract_chips(&img, &lab, &half, dir.path()).unwrap();
        assert_eq!(m.records.iter().filter(|r| r.polarity == Polarity::Negative).count(), 4);
    }

    #[test]
    fn full_frame_and_too_small() {
        let (img, lab) = scene();
        let dir = tempfile::tempdir().unwrap();
        let img = img.crop(0, 0, 40, 40).unwrap();
        let lab = lab.crop(0, 0, 40, 40).unwrap();
        let m = extract_chips(&img, &lab, &ChipConfig { chip: 40, count: 2, ..Default::default() }, dir.path()).unwrap();
        assert!(m.records.iter().all(|r| (r.origin_x, r.origin_y) == (0, 0)));
        assert!(extract_chips(&img, &lab, &ChipConfig { chip: 41, count: 1, ..Default::default() }, dir.path()).is_err());
    }

    #[test]
    fn augmenting() {
        let base = ChipManifest::new((0..4000).map(|i| record(i, 500)).collect()).unwrap();
        let extra = ChipManifest::new((0..141).map(|i| record(i, 500)).collect()).unwrap();
        assert_eq!(augment_manifest(&base, &extra).unwrap().len(), 4141);
        assert_eq!(augment_manifest(&base, &ChipManifest::default()).unwrap(), base);
        let odd = ChipManifest::new(vec![record(0, 250)]).unwrap();
        assert!(augment_manifest(&base, &odd).is_err());
    }
}
