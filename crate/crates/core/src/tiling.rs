//! Halo-tiled inference over rasters too large to run in one pass.
//!
//! Each tile is run on its interior plus a halo of context. When the halo
//! covers the network's receptive radius and tile windows sit on the model's
//! alignment grid, the stitched result is bit-identical to whole-image
//! inference.

use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::fusion::{argmax_decision, fuse_equal, ProbMap};
use crate::labels::LabelMap;
use crate::net::Model;
use crate::raster::{MultibandRaster, Sample};
use crate::{Error, Result};

pub const WORKERS_ENV: &str = "FORGE_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    /// Pixels this tile is responsible for.
    pub interior: Rect,
    /// Interior grown by the halo and clamped to the raster.
    pub window: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub halo: usize,
    pub tiles: Vec<Tile>,
}

/// Tiles of `tile` pixels whose interiors (`tile - 2 * halo` wide) partition the raster.
pub fn plan_tiles(width: usize, height: usize, tile: usize, halo: usize) -> Result<TilePlan> {
    if tile <= 2 * halo {
        return Err(Error::argument(format!("tile {tile} must exceed twice the halo {halo}")));
    }
    let step = tile - 2 * halo;
    let spans = |len: usize| -> Vec<(usize, usize)> {
        (0..len.div_ceil(step))
            .map(|i| (i * step, ((i + 1) * step).min(len)))
            .collect()
    };
    let mut tiles = Vec::new();
    for &(y0, y1) in &spans(height) {
        for &(x0, x1) in &spans(width) {
            let wx0 = x0.saturating_sub(halo);
            let wy0 = y0.saturating_sub(halo);
            let wx1 = (x1 + halo).min(width);
            let wy1 = (y1 + halo).min(height);
            tiles.push(Tile {
                interior: Rect { x0, y0, width: x1 - x0, height: y1 - y0 },
                window: Rect { x0: wx0, y0: wy0, width: wx1 - wx0, height: wy1 - wy0 },
            });
        }
    }
    Ok(TilePlan { width, height, tile, halo, tiles })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub workers: usize,
    pub tile: usize,
    /// `None` uses the models' receptive radius.
    pub halo: Option<usize>,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            tile: 512,
            halo: None,
        }
    }
}

impl JobConfig {
    /// Applies `FORGE_WORKERS` if it is set.
    pub fn with_env_override(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            self.workers = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if self.tile == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub pixels: usize,
    pub seconds: f64,
    pub pixels_per_second: f64,
    pub km2_per_minute: f64,
}

impl Throughput {
    pub fn new(pixels: usize, seconds: f64, pixel_size_m: f64) -> Self {
        let secs = seconds.max(1e-9);
        let km2 = pixels as f64 * pixel_size_m * pixel_size_m / 1e6;
        Self {
            pixels,
            seconds,
            pixels_per_second: pixels as f64 / secs,
            km2_per_minute: km2 / (secs / 60.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TiledOutput {
    pub probs: ProbMap,
    pub labels: LabelMap,
    pub plan: TilePlan,
    pub throughput: Throughput,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Runs one model, or two fused with equal weights, over halo-expanded tiles.
pub fn tiled_infer<T: Sample>(cfg: &JobConfig, models: &[Model], image: &MultibandRaster<T>) -> Result<TiledOutput> {
    cfg.validate()?;
    let (first, rest) = match models {
        [a] => (a, None),
        [a, b] => (a, Some(b)),
        _ => return Err(Error::Config(format!("expected one or two models, got {}", models.len()))),
    };
    if let Some(b) = rest {
        if b.classes() != first.classes() {
            return Err(Error::Config(format!(
                "fused models disagree on class count: {} vs {}",
                first.classes(),
                b.classes()
            )));
        }
    }
    let mut align = 1;
    let mut radius = 0;
    for m in models {
        align = align / gcd(align, m.alignment()) * m.alignment();
        radius = radius.max(m.spec().receptive_radius()?);
    }
    let round_up = |v: usize| v.div_ceil(align) * align;
    let halo = match cfg.halo {
        Some(h) => {
            if h < radius {
                warn!("halo {h} is below the receptive radius {radius}; tile seams may differ from whole-image output");
            }
            round_up(h)
        }
        None => round_up(radius),
    };
    let tile = cfg.tile / align * align;
    let plan = plan_tiles(image.width(), image.height(), tile, halo)
        .map_err(|e| Error::Config(format!("tile {} with halo {halo}: {e}", cfg.tile)))?;

    let inputs: Vec<Vec<Vec<f32>>> = models
        .iter()
        .map(|m| m.prepare_input(image).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let (w, h) = (image.width(), image.height());
    let output = Mutex::new(ProbMap::uniform(w, h, first.classes()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        plan.tiles.par_iter().try_for_each(|t| -> Result<()> {
            let win = t.window;
            let mut maps = Vec::with_capacity(models.len());
            for (m, planes) in models.iter().zip(&inputs) {
                let crop: Vec<Vec<f32>> = planes
                    .iter()
                    .map(|p| {
                        let mut out = Vec::with_capacity(win.area());
                        for y in win.y0..win.y0 + win.height {
                            out.extend_from_slice(&p[y * w + win.x0..y * w + win.x0 + win.width]);
                        }
                        out
                    })
                    .collect();
                maps.push(m.infer_planes(&crop, win.width, win.height)?);
            }
            let probs = match maps.as_slice() {
                [a] => a.clone(),
                [a, b] => fuse_equal(a, b)?,
                _ => unreachable!(),
            };
            let i = t.interior;
            let inner = probs.crop(i.x0 - win.x0, i.y0 - win.y0, i.width, i.height)?;
            output.lock().expect("no panics while pasting").paste(&inner, i.x0, i.y0)
        })
    })?;
    let probs = output.into_inner().expect("no panics while pasting");
    let throughput = Throughput::new(w * h, start.elapsed().as_secs_f64(), image.pixel_size_m());
    info!(
        "{} tiles, {:.0} px/s, {:.3} km2/min",
        plan.tiles.len(),
        throughput.pixels_per_second,
        throughput.km2_per_minute
    );
    let labels = argmax_decision(&probs)?;
    Ok(TiledOutput {
        probs,
        labels,
        plan,
        throughput,
    })
}
