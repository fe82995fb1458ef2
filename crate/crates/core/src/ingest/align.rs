use std::cmp::Ordering;

use rayon::prelude::*;

use crate::raster::Raster;
use crate::{Error, Result};

pub const DEFAULT_MAX_SHIFT: usize = 10;

/// Translation that, applied to the footprint mask, best matches the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub dx: i32,
    pub dy: i32,
    /// Intersection over union at the chosen shift.
    pub score: f64,
}

/// Moves a mask by `(dx, dy)`; pixels leaving the frame are dropped.
pub fn shift_mask(mask: &Raster<u8>, dx: i32, dy: i32) -> Raster<u8> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    Raster::from_fn(mask.width(), mask.height(), |x, y| {
        let (sx, sy) = (x as i64 - dx as i64, y as i64 - dy as i64);
        if sx >= 0 && sy >= 0 && sx < w && sy < h {
            (mask.get(sx as usize, sy as usize) != 0) as u8
        } else {
            0
        }
    })
}

/// Exhaustive integer-shift search maximizing IoU between the shifted footprint
/// mask and the reference. Ties go to the shorter shift, then the smaller
/// `(dx, dy)`.
pub fn auto_align(footprint: &Raster<u8>, reference: &Raster<u8>, max_shift: usize) -> Result<Alignment> {
    footprint.ensure_same_dims(reference, "footprint vs reference mask")?;
    let f_total = footprint.data().iter().filter(|&&v| v != 0).count();
    let r_total = reference.data().iter().filter(|&&v| v != 0).count();
    if f_total == 0 || r_total == 0 {
        return Err(Error::UndefinedScore("alignment needs two non-empty masks".into()));
    }
    let (w, h) = (footprint.width() as i64, footprint.height() as i64);
    let m = max_shift as i64;
    let shifts: Vec<(i64, i64)> = (-m..=m).flat_map(|dx| (-m..=m).map(move |dy| (dx, dy))).collect();
    let f = footprint.data();
    let r = reference.data();
    // (dx, dy, intersection, union) per shift.
    let scored: Vec<(i64, i64, u64, u64)> = shifts
        .par_iter()
        .map(|&(dx, dy)| {
            let (mut inter, mut kept) = (0u64, 0u64);
            for y in 0.max(dy)..h.min(h + dy) {
                let fy = y - dy;
                for x in 0.max(dx)..w.min(w + dx) {
                    let fv = f[(fy * w + x - dx) as usize] != 0;
                    if fv {
                        kept += 1;
                        inter += (r[(y * w + x) as usize] != 0) as u64;
                    }
                }
            }
            (dx, dy, inter, kept + r_total as u64 - inter)
        })
        .collect();
    let better = |a: &(i64, i64, u64, u64), b: &(i64, i64, u64, u64)| -> Ordering {
        // Compare a.inter/a.union with b.inter/b.union exactly.
        let lhs = a.2 as u128 * b.3 as u128;
        let rhs = b.2 as u128 * a.3 as u128;
        lhs.cmp(&rhs)
            .then_with(|| (b.0 * b.0 + b.1 * b.1).cmp(&(a.0 * a.0 + a.1 * a.1)))
            .then_with(|| (b.0, b.1).cmp(&(a.0, a.1)))
    };
    let best = scored.iter().copied().max_by(|a, b| better(a, b)).expect("at least the zero shift");
    Ok(Alignment {
        dx: best.0 as i32,
        dy: best.1 as i32,
        score: best.2 as f64 / best.3 as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Raster<u8> {
        let mut m = Raster::filled(w, h, 0u8);
        for _ in 0..4 {
            let (bw, bh) = (rng.gen_range(3..9), rng.gen_range(3..9));
            let (x0, y0) = (rng.gen_range(0..w - bw), rng.gen_range(0..h - bh));
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    m.set(x, y, 1);
                }
            }
        }
        m
    }

    #[test]
    fn recovers_planted_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fp = blobs(&mut rng, 40, 40);
        let reference = shift_mask(&fp, 3, -2);
        let a = auto_align(&fp, &reference, 5).unwrap();
        assert_eq!((a.dx, a.dy), (3, -2));
        assert_eq!(a.score, 1.0);
    }

    #[test]
    fn identity_and_zero_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fp = blobs(&mut rng, 30, 30);
        let a = auto_align(&fp, &fp, 4).unwrap();
        assert_eq!((a.dx, a.dy, a.score), (0, 0, 1.0));
        let other = shift_mask(&fp, 2, 2);
        let z = auto_align(&fp, &other, 0).unwrap();
        assert_eq!((z.dx, z.dy), (0, 0));
        assert!(z.score < 1.0);
    }

    #[test]
    fn ties_prefer_short_shifts() {
        // dx in {-1, 0, 1} all give IoU 1/3.
        let mut m = Raster::filled(9, 9, 0u8);
        m.set(4, 4, 1);
        let mut r = Raster::filled(9, 9, 0u8);
        r.set(4, 4, 1);
        r.set(5, 4, 1);
        r.set(3, 4, 1);
        let a = auto_align(&m, &r, 2).unwrap();
        assert_eq!((a.dx, a.dy), (0, 0));
    }

    #[test]
    fn empty_masks_fail() {
        let e = Raster::filled(4, 4, 0u8);
        let f = Raster::filled(4, 4, 1u8);
        assert!(matches!(auto_align(&e, &f, 1), Err(Error::UndefinedScore(_))));
    }
}
