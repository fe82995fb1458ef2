use std::collections::{BTreeMap, BTreeSet};

use footprint_core::eval::*;
use footprint_core::raster::Raster;
use proptest::prelude::*;

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = Raster<u8>> {
    proptest::collection::vec(0u8..2, w * h).prop_map(move |d| Raster::new(w, h, d).unwrap())
}

/// Pixel sets of every component, found by repeated breadth-first search.
fn flood_fill_sets(m: &Raster<u8>, eight: bool) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut out = BTreeSet::new();
    for sy in 0..h {
        for sx in 0..w {
            if m.get(sx, sy) == 0 || seen[sy * w + sx] {
                continue;
            }
            let mut set = BTreeSet::new();
            let mut queue = std::collections::VecDeque::from([(sx, sy)]);
            seen[sy * w + sx] = true;
            while let Some((x, y)) = queue.pop_front() {
                set.insert((x, y));
                for (dx, dy) in [(-1i32, -1i32), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                    if !eight && dx != 0 && dy != 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if m.get(nx, ny) == 1 && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            out.insert(set);
        }
    }
    out
}

fn label_sets(labels: &Raster<i32>) -> BTreeSet<BTreeSet<(usize, usize)>> {
    let mut by: BTreeMap<i32, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = labels.get(x, y);
            if l > 0 {
                by.entry(l).or_default().insert((x, y));
            }
        }
    }
    by.into_values().collect()
}

/// Largest number of disjoint (gt, pred) pairs with positive overlap.
fn exhaustive_matching(pred: &Raster<i32>, gt: &Raster<i32>) -> usize {
    let mut edges: BTreeMap<i32, BTreeSet<i32>> = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p > 0 && g > 0 {
            edges.entry(g).or_default().insert(p);
        }
    }
    let gts: Vec<Vec<i32>> = edges.into_values().map(|s| s.into_iter().collect()).collect();
    fn best(gts: &[Vec<i32>], used: &mut Vec<i32>) -> usize {
        let Some((first, rest)) = gts.split_first() else { return 0 };
        let mut top = best(rest, used);
        for &p in first {
            if !used.contains(&p) {
                used.push(p);
                top = top.max(1 + best(rest, used));
                used.pop();
            }
        }
        top
    }
    best(&gts, &mut Vec::new())
}

fn gt_strategy() -> impl Strategy<Value = Raster<i32>> {
    proptest::collection::vec((0usize..6, 0usize..6, 1usize..4, 1usize..4), 1..=3).prop_map(|rects| {
        let mut r = Raster::filled(6, 6, 0i32);
        for (k, (x0, y0, w, h)) in rects.into_iter().enumerate() {
            for y in y0..(y0 + h).min(6) {
                for x in x0..(x0 + w).min(6) {
                    r.set(x, y, k as i32 + 1);
                }
            }
        }
        r
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn components_match_flood_fill(m in mask_strategy(9, 7), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let c = connected_components(&m, conn);
        prop_assert_eq!(label_sets(&c.labels), flood_fill_sets(&m, eight));
        let total: usize = c.areas.iter().sum();
        prop_assert_eq!(total, m.data().iter().filter(|&&v| v == 1).count());
        // Ids appear in first-encounter row-major order.
        let mut next = 1;
        for &l in c.labels.data() {
            if l == next {
                next += 1;
            }
            prop_assert!(l < next);
        }
    }

    #[test]
    fn matching_reaches_exhaustive_optimum(pred in mask_strategy(6, 6), gt in gt_strategy()) {
        let comps = connected_components(&pred, Connectivity::Eight);
        let m = match_instances(&comps.labels, &gt, 0.0).unwrap();
        let oracle = exhaustive_matching(&comps.labels, &gt);
        prop_assert!(m.pairs.len() >= oracle);
        prop_assert!(m.pairs.len() <= m.gt.len().min(comps.count()));
        let preds: BTreeSet<i32> = m.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(preds.len(), m.pairs.len());
    }

    #[test]
    fn detection_ignores_component_ids(pred in mask_strategy(6, 6), gt in gt_strategy(), shift in 1i32..50) {
        let comps = connected_components(&pred, Connectivity::Eight);
        let n = comps.count() as i32;
        // Reverse and offset the ids.
        let relabeled = comps.labels.map(|l| if l == 0 { 0 } else { n - l + 1 + shift });
        let gt_relabeled = gt.map(|g| if g == 0 { 0 } else { 10 * g + shift });
        let a = match_instances(&comps.labels, &gt, 0.0).unwrap().pairs.len();
        let b = match_instances(&relabeled, &gt_relabeled, 0.0).unwrap().pairs.len();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn f_iou_identity(tp in 0u64..1_000_000, fp in 0u64..1_000_000, fn_ in 0u64..1_000_000, tn in 0u64..1_000_000) {
        let m = pixel_metrics(&ConfusionCounts { tp, fp, tn, fn_ });
        if let (Some(f), Some(iou)) = (m.f_score, m.iou) {
            prop_assert!((f - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
        }
        for v in [m.precision, m.recall, m.f_score, m.iou, m.accuracy].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn size_bins_partition(areas in proptest::collection::vec(1.0f64..1000.0, 0..40)) {
        let flags: Vec<bool> = areas.iter().map(|a| *a > 300.0).collect();
        let b = size_bins(&areas, &flags).unwrap();
        prop_assert_eq!(b.gt.iter().sum::<usize>(), areas.len());
        for i in 0..5 {
            prop_assert!(b.detected[i] <= b.gt[i]);
        }
    }
}

#[test]
fn sites_round_trip_through_csv() {
    let gt = Raster::from_fn(20, 20, |x, y| if x < 8 && y < 8 { 1 } else if x > 10 && y > 10 { 2 } else { 0 });
    let pred = Raster::from_fn(20, 20, |x, y| (x < 9 && y < 8) as u8);
    let inputs = vec![
        SiteInput { site: "s1".into(), pred: pred.clone(), gt_instances: gt.clone(), valid: None },
        SiteInput { site: "s2".into(), pred: gt.map(|v| (v > 0) as u8), gt_instances: gt.clone(), valid: None },
    ];
    let reports = evaluate_sites(&inputs, &InstanceConfig::default()).unwrap();
    assert_eq!(reports[0].site, "s1");
    assert_eq!(reports[0].instances.detected_count, 1);
    assert_eq!(reports[1].instances.detection_rate, Some(1.0));
    let summary = aggregate_sites(&reports).unwrap();
    assert_eq!(summary.detected, 3);
    let mut buf = Vec::new();
    write_site_csv(&reports, &mut buf).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), SITE_CSV_COLUMNS.to_vec());
    assert_eq!(rd.records().count(), 2);
    let mut buf = Vec::new();
    write_summary_csv(&summary, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().contains("recall,"));
}
