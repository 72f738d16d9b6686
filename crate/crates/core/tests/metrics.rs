use bridge_core::detector::{Detection, DetectorArch, DetectorModel};
use bridge_core::metrics::{
    average_precision, average_precision_single, export_features, feature_matrix, iou, Scored,
};
use bridge_core::synth::{gen_scene, AppearanceParams, BBox, Domain};
use proptest::prelude::*;

/// Reference scorer. Boxes live on an integer grid, so overlap is counted
/// cell by cell. Every confidence cut-off is scored from scratch and the
/// interpolated precision at each recall step is the best precision of any
/// cut-off reaching at least that recall.
mod oracle {
    use super::*;

    pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let cells = |r: &BBox| {
            let mut v = Vec::new();
            for y in r.y_min as i64..r.y_max as i64 {
                for x in r.x_min as i64..r.x_max as i64 {
                    v.push((x, y));
                }
            }
            v
        };
        let (ca, cb) = (cells(a), cells(b));
        let inter = ca.iter().filter(|c| cb.contains(c)).count();
        let union = ca.len() + cb.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn true_positives(ranked: &[&Scored], gt: &[(usize, BBox)], thr: f64) -> usize {
        let mut taken = vec![false; gt.len()];
        let mut tp = 0;
        for d in ranked {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            for (j, (img, g)) in gt.iter().enumerate() {
                if *img != d.image || taken[j] {
                    continue;
                }
                let o = raster_iou(&d.bbox, g);
                if o >= thr && o > best_iou {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                taken[j] = true;
                tp += 1;
            }
        }
        tp
    }

    pub fn ap(dets: &[Scored], gt: &[(usize, BBox)], thr: f64) -> f64 {
        if gt.is_empty() {
            return if dets.is_empty() { 1.0 } else { 0.0 };
        }
        let mut ranked: Vec<&Scored> = dets.iter().collect();
        ranked.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let g = gt.len() as f64;
        let points: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = true_positives(&ranked[..k], gt, thr) as f64;
                (tp / g, tp / k as f64)
            })
            .collect();
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|r| *r > 0.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut area = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let best = points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max);
            area += (r - prev) * best;
            prev = r;
        }
        area
    }
}

fn grid_box() -> impl Strategy<Value = BBox> {
    (0u32..8, 0u32..8, 1u32..5, 1u32..5, 0usize..2).prop_map(|(x, y, w, h, c)| {
        BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64, c)
    })
}

fn instance() -> impl Strategy<Value = (Vec<Scored>, Vec<(usize, BBox)>)> {
    let gt = prop::collection::vec((0usize..3, grid_box()), 0..=10);
    let dets = prop::collection::vec((0usize..3, grid_box()), 0..=20).prop_flat_map(|d| {
        let n = d.len();
        (Just(d), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    });
    (dets, gt).prop_map(|((d, perm), gt)| {
        let dets = d
            .into_iter()
            .zip(perm)
            .map(|((image, bbox), rank)| Scored {
                image,
                bbox,
                confidence: (rank + 1) as f64 / 32.0,
            })
            .collect();
        (dets, gt)
    })
}

fn single(b: BBox, confidence: f64) -> Detection {
    Detection { bbox: b, confidence }
}

#[test]
fn iou_hand_cases() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0, 0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0, 0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert!((oracle::raster_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0, 0)), 0.0);
}

#[test]
fn hand_computed_pr_cases() {
    let gt = BBox::new(10.0, 10.0, 30.0, 30.0, 0);
    // IoU 0.6: shift a 20x20 box by 5 px, 300 / 500
    let near = BBox::new(10.0, 15.0, 30.0, 35.0, 0);
    assert!((iou(&gt, &near) - 0.6).abs() < 1e-12);
    let far = BBox::new(40.0, 40.0, 60.0, 60.0, 0);
    assert_eq!(average_precision_single(&[single(near, 0.7)], &[gt], 0.5), 1.0);
    let tp_first = [single(gt, 0.9), single(far, 0.8)];
    assert_eq!(average_precision_single(&tp_first, &[gt], 0.5), 1.0);
    let fp_first = [single(far, 0.9), single(gt, 0.8)];
    assert_eq!(average_precision_single(&fp_first, &[gt], 0.5), 0.5);
}

#[test]
fn feature_export_shape_and_determinism() {
    let model = DetectorModel::new(DetectorArch::default(), 3).unwrap();
    let scenes: Vec<_> = (0..10)
        .map(|i| {
            let d = if i % 2 == 0 { Domain::Source } else { Domain::Target };
            gen_scene(i, &AppearanceParams::IDENTITY, d).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_features(&model, &scenes, &a).unwrap();
    export_features(&model, &scenes, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for (row, s) in rows.iter().zip(&scenes) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 4 * 4 * 64 + 1);
        assert_eq!(*cols.last().unwrap(), s.domain.tag());
    }
    let parsed: Vec<f64> = rows[0].split(',').take(1024).map(|v| v.parse().unwrap()).collect();
    assert_eq!(parsed, feature_matrix(&model, &scenes[..1]).unwrap()[0].data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ap_matches_reference_scorer((dets, gt) in instance()) {
        let got = average_precision(&dets, &gt, 0.5);
        let want = oracle::ap(&dets, &gt, 0.5);
        prop_assert!((got - want).abs() <= 1e-9, "got {got}, want {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn iou_symmetric_and_bounded(a in grid_box(), b in grid_box()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - oracle::raster_iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn new_true_positive_never_lowers_ap((dets, gt) in instance(), pick in any::<prop::sample::Index>()) {
        // ground truth no detection can claim, so the copy is a new hit
        let free: Vec<usize> = (0..gt.len())
            .filter(|&j| dets.iter().all(|d| d.image != gt[j].0 || iou(&d.bbox, &gt[j].1) < 0.5))
            .collect();
        prop_assume!(!free.is_empty());
        let (image, bbox) = gt[free[pick.index(free.len())]];
        let base = average_precision(&dets, &gt, 0.5);
        let mut more = dets.clone();
        more.push(Scored { image, bbox, confidence: 2.0 });
        let after = average_precision(&more, &gt, 0.5);
        prop_assert!(after >= base - 1e-12, "{base} -> {after}");
    }

    #[test]
    fn lowest_false_positive_never_raises_ap((dets, gt) in instance()) {
        let base = average_precision(&dets, &gt, 0.5);
        let mut more = dets.clone();
        more.push(Scored { image: 9, bbox: BBox::new(0.0, 0.0, 1.0, 1.0, 0), confidence: 0.0 });
        prop_assert!(average_precision(&more, &gt, 0.5) <= base + 1e-12);
    }
}
