use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::raster::Raster;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Self::Four),
            "8" => Ok(Self::Eight),
            _ => Err(Error::argument(format!("connectivity must be 4 or 8, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Components {
    /// 0 for background, `1..=count` in first-encounter row-major order.
    pub labels: Raster<i32>,
    /// `areas[i]` is the pixel count of component `i + 1`.
    pub areas: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.areas.len()
    }
}

pub fn connected_components(mask: &Raster<u8>, connectivity: Connectivity) -> Components {
    let (w, h) = mask.dims();
    let src = mask.data();
    let mut labels = vec![0i32; w * h];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if src[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = areas.len() as i32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (connectivity == Connectivity::Four && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if src[j] != 0 && labels[j] == 0 {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    Components {
        labels: Raster::new(w, h, labels).expect("same dims").with_pixel_size(mask.pixel_size_m()).expect("valid pixel size"),
        areas,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub connectivity: Connectivity,
    /// Overlap needed for a match, as a fraction of the ground-truth building's
    /// area. Zero means any shared pixel.
    pub min_overlap: f64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            min_overlap: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    /// Ground-truth ids present in the raster, ascending, with pixel areas.
    pub gt: Vec<(i32, usize)>,
    pub pred_count: usize,
    /// `(gt id, pred id, overlap pixels)`.
    pub pairs: Vec<(i32, i32, usize)>,
}

impl Matching {
    pub fn detected(&self, gt_id: i32) -> bool {
        self.pairs.iter().any(|p| p.0 == gt_id)
    }
}

/// One-to-one matching between predicted components and ground-truth buildings.
///
/// Pairs are first taken greedily by descending overlap (ties: smaller gt id,
/// then smaller pred id). Augmenting paths then add matches wherever a
/// reassignment frees a component for an otherwise missed building, so the
/// number of detections is the largest achievable under the one-to-one rule.
pub fn match_instances(pred: &Raster<i32>, gt: &Raster<i32>, min_overlap: f64) -> Result<Matching> {
    pred.ensure_same_dims(gt, "prediction vs ground-truth instances")?;
    let mut gt_area: BTreeMap<i32, usize> = BTreeMap::new();
    let mut preds: BTreeSet<i32> = BTreeSet::new();
    let mut overlap: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g > 0 {
            *gt_area.entry(g).or_default() += 1;
        }
        if p > 0 {
            preds.insert(p);
        }
        if g > 0 && p > 0 {
            *overlap.entry((g, p)).or_default() += 1;
        }
    }
    let mut candidates: Vec<(i32, i32, usize)> = overlap
        .into_iter()
        .filter(|&((g, _), n)| n > 0 && n as f64 >= min_overlap * gt_area[&g] as f64)
        .map(|((g, p), n)| (g, p, n))
        .collect();
    candidates.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut gt_match: BTreeMap<i32, i32> = BTreeMap::new();
    let mut pred_match: BTreeMap<i32, i32> = BTreeMap::new();
    for &(g, p, _) in &candidates {
        if !gt_match.contains_key(&g) && !pred_match.contains_key(&p) {
            gt_match.insert(g, p);
            pred_match.insert(p, g);
        }
    }

    // Adjacency in candidate order, so repairs prefer large overlaps.
    let mut adj: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
    for &(g, p, _) in &candidates {
        adj.entry(g).or_default().push(p);
    }
    let gts: Vec<i32> = adj.keys().copied().collect();
    for &g in &gts {
        if gt_match.contains_key(&g) {
            continue;
        }
        let mut seen = BTreeSet::new();
        augment(g, &adj, &mut seen, &mut gt_match, &mut pred_match);
    }

    let n_of: BTreeMap<(i32, i32), usize> = candidates.iter().map(|&(g, p, n)| ((g, p), n)).collect();
    Ok(Matching {
        gt: gt_area.into_iter().collect(),
        pred_count: preds.len(),
        pairs: gt_match.into_iter().map(|(g, p)| (g, p, n_of[&(g, p)])).collect(),
    })
}

fn augment(
    g: i32,
    adj: &BTreeMap<i32, Vec<i32>>,
    seen: &mut BTreeSet<i32>,
    gt_match: &mut BTreeMap<i32, i32>,
    pred_match: &mut BTreeMap<i32, i32>,
) -> bool {
    for &p in &adj[&g] {
        if !seen.insert(p) {
            continue;
        }
        let free = match pred_match.get(&p).copied() {
            None => true,
            Some(other) => augment(other, adj, seen, gt_match, pred_match),
        };
        if free {
            gt_match.insert(g, p);
            pred_match.insert(p, g);
            return true;
        }
    }
    false
}

/// Upper edges of the first four size bins, in m². The fifth bin is open.
pub const SIZE_BIN_EDGES_M2: [f64; 4] = [50.0, 150.0, 250.0, 450.0];

/// Zero-based bin of an area; bins are closed on the right.
pub fn size_bin(area_m2: f64) -> usize {
    SIZE_BIN_EDGES_M2.iter().position(|&e| area_m2 <= e).unwrap_or(SIZE_BIN_EDGES_M2.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SizeBins {
    pub gt: [usize; 5],
    pub detected: [usize; 5],
}

pub fn size_bins(areas_m2: &[f64], detected: &[bool]) -> Result<SizeBins> {
    if areas_m2.len() != detected.len() {
        return Err(Error::argument("areas and detection flags differ in length"));
    }
    let mut bins = SizeBins::default();
    for (&a, &d) in areas_m2.iter().zip(detected) {
        if !(a > 0.0) {
            return Err(Error::argument(format!("building area must be positive, got {a}")));
        }
        let b = size_bin(a);
        bins.gt[b] += 1;
        bins.detected[b] += d as usize;
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceReport {
    pub gt_building_count: usize,
    pub predicted_count: usize,
    pub detected_count: usize,
    /// `None` when there are no ground-truth buildings.
    pub detection_rate: Option<f64>,
    pub bins: SizeBins,
}

/// Scores a binary prediction against a ground-truth instance raster
/// (0 background, positive ids per building).
pub fn evaluate_instances(pred: &Raster<u8>, gt_instances: &Raster<i32>, cfg: &InstanceConfig) -> Result<InstanceReport> {
    let comps = connected_components(pred, cfg.connectivity);
    let m = match_instances(&comps.labels, gt_instances, cfg.min_overlap)?;
    let px = gt_instances.pixel_size_m() * gt_instances.pixel_size_m();
    let areas: Vec<f64> = m.gt.iter().map(|&(_, a)| a as f64 * px).collect();
    let flags: Vec<bool> = m.gt.iter().map(|&(g, _)| m.detected(g)).collect();
    let gt_n = m.gt.len();
    Ok(InstanceReport {
        gt_building_count: gt_n,
        predicted_count: comps.count(),
        detected_count: m.pairs.len(),
        detection_rate: (gt_n > 0).then(|| m.pairs.len() as f64 / gt_n as f64),
        bins: size_bins(&areas, &flags)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> Raster<i32> {
        let mut r = Raster::filled(w, h, 0);
        for (k, &(x0, y0, x1, y1)) in rects.iter().enumerate() {
            for y in y0..y1 {
                for x in x0..x1 {
                    r.set(x, y, k as i32 + 1);
                }
            }
        }
        r
    }

    #[test]
    fn components_basic() {
        let m = Raster::from_fn(5, 2, |x, _| (x != 2) as u8);
        let c = connected_components(&m, Connectivity::Eight);
        assert_eq!(c.areas, vec![4, 4]);
        assert_eq!(c.labels.get(0, 0), 1);
        assert_eq!(c.labels.get(4, 1), 2);

        let diag = Raster::from_fn(2, 2, |x, y| (x == y) as u8);
        assert_eq!(connected_components(&diag, Connectivity::Eight).count(), 1);
        assert_eq!(connected_components(&diag, Connectivity::Four).count(), 2);
        assert_eq!(connected_components(&Raster::filled(3, 3, 0u8), Connectivity::Eight).count(), 0);
    }

    #[test]
    fn blob_over_three_buildings_counts_once() {
        let gt = ids(20, 8, &[(1, 1, 5, 6), (7, 1, 11, 6), (13, 1, 17, 6)]);
        let blob = Raster::from_fn(20, 8, |x, y| (x < 19 && y < 7) as u8);
        let r = evaluate_instances(&blob, &gt, &InstanceConfig::default()).unwrap();
        assert_eq!((r.detected_count, r.gt_building_count), (1, 3));
        assert!((r.detection_rate.unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let perfect = gt.map(|v| (v > 0) as u8);
        let r = evaluate_instances(&perfect, &gt, &InstanceConfig::default()).unwrap();
        assert_eq!(r.detected_count, 3);
        assert_eq!(r.detection_rate, Some(1.0));
    }

    #[test]
    fn repair_beats_plain_greedy() {
        // gt 1 overlaps pred 1 heavily and pred 2 slightly; gt 2 only touches pred 1.
        let gt = ids(10, 1, &[(0, 0, 6, 1), (6, 0, 8, 1)]);
        let pred = Raster::new(10, 1, vec![2, 1, 1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
        let m = match_instances(&pred, &gt, 0.0).unwrap();
        assert_eq!(m.pairs.len(), 2);
        assert_eq!(m.pairs, vec![(1, 2, 1), (2, 1, 1)]);
    }

    #[test]
    fn min_overlap_fraction() {
        let gt = ids(10, 1, &[(0, 0, 10, 1)]);
        let pred = Raster::new(10, 1, vec![1, 1, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(match_instances(&pred, &gt, 0.0).unwrap().pairs.len(), 1);
        assert_eq!(match_instances(&pred, &gt, 0.5).unwrap().pairs.len(), 0);
    }

    #[test]
    fn bins() {
        let b: Vec<usize> = [50.0, 51.0, 150.0, 250.0, 450.0, 451.0].iter().map(|&a| size_bin(a)).collect();
        assert_eq!(b, vec![0, 1, 1, 2, 3, 4]);
        let s = size_bins(&[40.0, 100.0, 500.0], &[true, true, true]).unwrap();
        assert_eq!(s.gt, [1, 1, 0, 0, 1]);
        assert_eq!(s.gt, s.detected);
        assert!(size_bins(&[0.0], &[false]).is_err());
    }
}
