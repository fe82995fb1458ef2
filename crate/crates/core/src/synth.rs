//! Synthetic aerial scenes: rectangular roofs over textured ground, rendered in
//! R, G, B and NIR so that both a color and a color-infrared view exist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{Footprint, FootprintSet};
use crate::raster::{MultibandRaster, Raster};
use crate::{Error, Result};

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Closed ring through the corners, in pixel-edge coordinates.
    pub fn ring(&self) -> Vec<(f64, f64)> {
        let (x0, y0, x1, y1) = (self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64);
        vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    }

    fn expanded_overlaps(&self, other: &Rect, margin: usize) -> bool {
        self.x0 < other.x1 + margin && other.x0 < self.x1 + margin && self.y0 < other.y1 + margin && other.y0 < self.y1 + margin
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// Bands R, G, B, NIR.
    pub image: MultibandRaster<u8>,
    pub mask: Raster<u8>,
    /// 0 for background, `i + 1` for `buildings[i]`.
    pub instances: Raster<i32>,
    pub buildings: Vec<Rect>,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub max_buildings: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Minimum number of background pixels between two buildings.
    pub min_gap: usize,
}

impl SceneConfig {
    pub fn chip(size: usize) -> Self {
        Self {
            width: size,
            height: size,
            max_buildings: 6,
            min_side: 6,
            max_side: 18,
            min_gap: 2,
        }
    }
}

impl Scene {
    /// Building outlines with ids matching [`Scene::instances`].
    pub fn footprints(&self) -> FootprintSet {
        let fps = self
            .buildings
            .iter()
            .enumerate()
            .map(|(i, r)| Footprint { id: i as i32 + 1, ring: r.ring() })
            .collect();
        FootprintSet::new(fps).expect("rectangles are valid footprints")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Random,
    Adjacent,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SceneKind::Random),
            "adjacent" => Ok(SceneKind::Adjacent),
            _ => Err(Error::argument(format!("unknown scene kind {s:?}"))),
        }
    }
}

/// Square scene of the given kind from a seed.
pub fn generate_scene(kind: SceneKind, size: usize, seed: u64) -> Result<Scene> {
    if size < 16 {
        return Err(Error::argument("synthetic scenes need at least 16x16 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        SceneKind::Random => {
            let mut cfg = SceneConfig::chip(size);
            cfg.max_buildings = (size * size / 700).max(2);
            random_scene(&cfg, &mut rng)
        }
        SceneKind::Adjacent => adjacent_scene(size, size, &mut rng),
    })
}

/// Scene with randomly placed, non-touching rectangles.
pub fn random_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> Scene {
    let mut rects: Vec<Rect> = Vec::new();
    let target = rng.gen_range(1..=cfg.max_buildings.max(1));
    let max_w = cfg.max_side.min(cfg.width.saturating_sub(2)).max(cfg.min_side);
    let max_h = cfg.max_side.min(cfg.height.saturating_sub(2)).max(cfg.min_side);
    for _ in 0..target * 20 {
        if rects.len() == target {
            break;
        }
        let w = rng.gen_range(cfg.min_side..=max_w);
        let h = rng.gen_range(cfg.min_side..=max_h);
        if w + 2 > cfg.width || h + 2 > cfg.height {
            continue;
        }
        let x0 = rng.gen_range(1..=cfg.width - w - 1);
        let y0 = rng.gen_range(1..=cfg.height - h - 1);
        let r = Rect { x0, y0, x1: x0 + w, y1: y0 + h };
        if rects.iter().all(|o| !r.expanded_overlaps(o, cfg.min_gap)) {
            rects.push(r);
        }
    }
    render(cfg.width, cfg.height, rects, rng)
}

/// Rows of rectangles packed side by side with 1-3 pixel gaps, the hard case for
/// telling neighbouring buildings apart.
pub fn adjacent_scene(width: usize, height: usize, rng: &mut impl Rng) -> Scene {
    let mut rects = Vec::new();
    let mut y = rng.gen_range(2..6);
    while y + 8 < height {
        let h = rng.gen_range(6..12).min(height - 2 - y);
        let mut x = rng.gen_range(2..6);
        loop {
            let w = rng.gen_range(5..12);
            if x + w + 2 > width {
                break;
            }
            rects.push(Rect { x0: x, y0: y, x1: x + w, y1: y + h });
            x += w + rng.gen_range(1..=3);
        }
        y += h + rng.gen_range(4..8);
    }
    render(width, height, rects, rng)
}

/// Smooth noise in roughly [-1, 1] from a bilinearly interpolated coarse grid.
fn value_noise(width: usize, height: usize, cell: usize, rng: &mut impl Rng) -> Vec<f32> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f32 / cell as f32;
        let (iy, ty) = (fy as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / cell as f32;
            let (ix, tx) = (fx as usize, fx.fract());
            let g = |xx: usize, yy: usize| grid[yy * gw + xx];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn render(width: usize, height: usize, buildings: Vec<Rect>, rng: &mut impl Rng) -> Scene {
    let n = width * height;
    let veg = value_noise(width, height, 12, rng);
    let tone = value_noise(width, height, 5, rng);
    let mut planes = vec![vec![0f32; n]; 4];
    for i in 0..n {
        // Blend between bare soil and vegetation.
        let v = (veg[i] * 0.5 + 0.5).clamp(0.0, 1.0);
        let t = tone[i] * 14.0;
        let soil = [120.0, 110.0, 95.0, 125.0];
        let grass = [55.0, 95.0, 50.0, 185.0];
        for b in 0..4 {
            planes[b][i] = soil[b] * (1.0 - v) + grass[b] * v + t + rng.gen_range(-10.0..10.0);
        }
    }

    let mut mask = Raster::filled(width, height, 0u8);
    let mut instances = Raster::filled(width, height, 0i32);
    for (k, r) in buildings.iter().enumerate() {
        let base: f32 = rng.gen_range(150.0..225.0);
        let tint = [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0)];
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let i = y * width + x;
                let edge = x == r.x0 || y == r.y0 || x + 1 == r.x1 || y + 1 == r.y1;
                let shade = if edge { -18.0 } else { 0.0 };
                for b in 0..3 {
                    planes[b][i] = base + tint[b] + shade + rng.gen_range(-8.0..8.0);
                }
                planes[3][i] = 0.55 * base + shade + rng.gen_range(-8.0..8.0);
                mask.set(x, y, 1);
                instances.set(x, y, k as i32 + 1);
            }
        }
        // Cast shadow along the bottom and right edges.
        for y in r.y0 + 1..(r.y1 + 2).min(height) {
            for x in r.x1..(r.x1 + 2).min(width) {
                shadow(&mut planes, y * width + x, &mask);
            }
        }
        for y in r.y1..(r.y1 + 2).min(height) {
            for x in r.x0 + 1..(r.x1 + 2).min(width) {
                shadow(&mut planes, y * width + x, &mask);
            }
        }
    }

    let bands = planes
        .into_iter()
        .map(|p| Raster::new(width, height, p.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()).unwrap())
        .collect();
    Scene {
        image: MultibandRaster::from_bands(bands).expect("four equal bands"),
        mask,
        instances,
        buildings,
    }
}

fn shadow(planes: &mut [Vec<f32>], i: usize, mask: &Raster<u8>) {
    if mask.data()[i] == 0 {
        for p in planes.iter_mut() {
            p[i] *= 0.6;
        }
    }
}

/// The color-infrared view (NIR, G, B) of a four-band scene.
pub fn cir_bands() -> Vec<String> {
    vec!["NIR".into(), "G".into(), "B".into()]
}

pub fn rgb_bands() -> Vec<String> {
    vec!["R".into(), "G".into(), "B".into()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = random_scene(&SceneConfig::chip(64), &mut rng);
            let area: usize = s.buildings.iter().map(Rect::area).sum();
            assert_eq!(s.mask.data().iter().filter(|&&m| m == 1).count(), area);
            assert_eq!(s.image.band_names(), &["R", "G", "B", "NIR"]);
            for (i, a) in s.buildings.iter().enumerate() {
                for b in &s.buildings[i + 1..] {
                    assert!(!a.expanded_overlaps(b, 2));
                }
            }
        }
    }

    #[test]
    fn adjacent_scenes_have_narrow_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = adjacent_scene(64, 64, &mut rng);
        assert!(s.buildings.len() >= 4);
        let gaps: Vec<usize> = s
            .buildings
            .windows(2)
            .filter(|w| w[0].y0 == w[1].y0)
            .map(|w| w[1].x0 - w[0].x1)
            .collect();
        assert!(!gaps.is_empty() && gaps.iter().all(|g| (1..=3).contains(g)));
    }

    #[test]
    fn footprints_rasterize_to_instances() {
        let s = generate_scene(SceneKind::Random, 96, 5).unwrap();
        assert_eq!(crate::ingest::rasterize(&s.footprints(), 96, 96), s.instances);
        assert!(generate_scene(SceneKind::Adjacent, 8, 0).is_err());
    }
}
