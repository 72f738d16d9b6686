//! IoU, average precision, mAP and feature export.
//!
//! AP uses greedy matching at a fixed IoU threshold followed by all-point
//! interpolation: precision is replaced by its running maximum from the right
//! and integrated over every recall step.

use std::fmt::Write as _;
use std::path::Path;

use bridge_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::detector::{decode_head, DetectorModel, InferenceGraph};
use crate::synth::{BBox, Scene, NUM_CLASSES};
use crate::CoreError;

pub const AP_PROTOCOL: &str = "all-point interpolation, IoU 0.5, greedy matching";
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored box attributed to one image of an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub image: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Result of greedy matching in confidence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Per detection in ranked order: true positive or not.
    pub is_tp: Vec<bool>,
    pub num_gt: usize,
}

/// Rank detections by confidence (stable for ties) and match each to the
/// unmatched ground-truth box of the same image with the highest IoU at or
/// above `threshold`.
pub fn greedy_match(dets: &[Scored], gt: &[(usize, BBox)], threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used = vec![false; gt.len()];
    let is_tp = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, (img, g)) in gt.iter().enumerate() {
                if *img != d.image || used[j] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                true
            } else {
                false
            }
        })
        .collect();
    Matching { is_tp, num_gt: gt.len() }
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(m: &Matching) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    m.is_tp
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            let recall = if m.num_gt == 0 { 0.0 } else { tp as f64 / m.num_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP. Empty ground truth scores 1 without
/// detections and 0 with any.
pub fn average_precision(dets: &[Scored], gt: &[(usize, BBox)], threshold: f64) -> f64 {
    if gt.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(&greedy_match(dets, gt, threshold));
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    for (r, p) in curve {
        rec.push(r);
        prec.push(p);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// Convenience wrapper for a single image.
pub fn average_precision_single(dets: &[crate::detector::Detection], gt: &[BBox], threshold: f64) -> f64 {
    let d: Vec<Scored> = dets
        .iter()
        .map(|d| Scored {
            image: 0,
            bbox: d.bbox,
            confidence: d.confidence,
        })
        .collect();
    let g: Vec<(usize, BBox)> = gt.iter().map(|b| (0, *b)).collect();
    average_precision(&d, &g, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    /// `(recall, precision)` after each ranked detection.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// One entry per class present in the ground truth.
    pub classes: Vec<ClassResult>,
    pub map: f64,
    pub images: usize,
    pub protocol: String,
}

impl EvalResult {
    pub fn ap(&self, class: usize) -> Option<f64> {
        self.classes.iter().find(|c| c.class == class).map(|c| c.ap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            conf_threshold: 0.05,
            nms_iou: 0.5,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Score per-image detection lists against ground truth.
pub fn score(per_image: &[(Vec<crate::detector::Detection>, Vec<BBox>)], iou_threshold: f64) -> EvalResult {
    let mut classes = Vec::new();
    for class in 0..NUM_CLASSES {
        let gt: Vec<(usize, BBox)> = per_image
            .iter()
            .enumerate()
            .flat_map(|(i, (_, g))| g.iter().filter(|b| b.class == class).map(move |b| (i, *b)))
            .collect();
        if gt.is_empty() {
            continue;
        }
        let dets: Vec<Scored> = per_image
            .iter()
            .enumerate()
            .flat_map(|(i, (d, _))| {
                d.iter().filter(|d| d.bbox.class == class).map(move |d| Scored {
                    image: i,
                    bbox: d.bbox,
                    confidence: d.confidence,
                })
            })
            .collect();
        let m = greedy_match(&dets, &gt, iou_threshold);
        let tp = m.is_tp.iter().filter(|t| **t).count();
        classes.push(ClassResult {
            class,
            ap: average_precision(&dets, &gt, iou_threshold),
            num_gt: gt.len(),
            tp,
            fp: m.is_tp.len() - tp,
            missed: gt.len() - tp,
            pr_curve: pr_curve(&m),
        });
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
    };
    EvalResult {
        classes,
        map,
        images: per_image.len(),
        protocol: AP_PROTOCOL.to_string(),
    }
}

/// Run the detector on labeled scenes and score it.
pub fn evaluate(model: &DetectorModel, scenes: &[Scene], settings: &EvalSettings) -> Result<EvalResult, CoreError> {
    let mut ig = InferenceGraph::new(model)?;
    let mut per_image = Vec::with_capacity(scenes.len());
    for s in scenes {
        let head = ig.head(&s.image)?;
        let dets = decode_head(&head, &model.arch, settings.conf_threshold, settings.nms_iou);
        per_image.push((dets, s.boxes.clone()));
    }
    Ok(score(&per_image, settings.iou_threshold))
}

/// Flattened `E(I)` per scene.
pub fn feature_matrix(model: &DetectorModel, scenes: &[Scene]) -> Result<Vec<Tensor>, CoreError> {
    let mut ig = InferenceGraph::new(model)?;
    scenes.iter().map(|s| ig.features(&s.image)).collect()
}

/// CSV with one row per scene: `f0..f{n-1}` then the domain tag.
pub fn features_csv(model: &DetectorModel, scenes: &[Scene]) -> Result<String, CoreError> {
    let feats = feature_matrix(model, scenes)?;
    let width = feats.first().map_or(0, |f| f.len());
    let mut out = String::new();
    for i in 0..width {
        let _ = write!(out, "f{i},");
    }
    out.push_str("domain\n");
    for (f, s) in feats.iter().zip(scenes) {
        for v in f.data() {
            let _ = write!(out, "{v},");
        }
        out.push_str(s.domain.tag());
        out.push('\n');
    }
    Ok(out)
}

pub fn export_features(model: &DetectorModel, scenes: &[Scene], path: &Path) -> Result<(), CoreError> {
    let csv = features_csv(model, scenes)?;
    std::fs::write(path, csv).map_err(|e| CoreError::io(path, e))
}

pub fn centroid(rows: &[Tensor]) -> Result<Vec<f64>, CoreError> {
    let first = rows
        .first()
        .ok_or_else(|| CoreError::Precondition("centroid of an empty set".into()))?;
    let mut c = vec![0.0; first.len()];
    for r in rows {
        if r.len() != c.len() {
            return Err(CoreError::Precondition("feature rows differ in length".into()));
        }
        for (a, b) in c.iter_mut().zip(r.data()) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    Ok(c)
}

/// Euclidean distance between the centroids of two feature clouds.
pub fn centroid_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64, CoreError> {
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Ok(ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Ranks starting at 1; ties share their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| out[k] = r);
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. `None` for fewer than two points or a
/// constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1, 0)
    }

    fn det(bbox: BBox, confidence: f64) -> Detection {
        Detection { bbox, confidence }
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_hit_is_perfect() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let d = b(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&g, &d) - 0.6).abs() < 1e-12);
        assert_eq!(average_precision_single(&[det(d, 0.7)], &[g], 0.5), 1.0);
    }

    #[test]
    fn tp_fp_order() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let miss = b(20.0, 20.0, 30.0, 30.0);
        assert_eq!(average_precision_single(&[det(g, 0.9), det(miss, 0.8)], &[g], 0.5), 1.0);
        assert_eq!(average_precision_single(&[det(miss, 0.9), det(g, 0.8)], &[g], 0.5), 0.5);
    }

    #[test]
    fn empty_ground_truth_convention() {
        assert_eq!(average_precision_single(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision_single(&[det(b(0.0, 0.0, 1.0, 1.0), 0.5)], &[], 0.5), 0.0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let m = greedy_match(
            &[
                Scored { image: 0, bbox: g, confidence: 0.9 },
                Scored { image: 0, bbox: g, confidence: 0.8 },
            ],
            &[(0, g)],
            0.5,
        );
        assert_eq!(m.is_tp, vec![true, false]);
    }

    #[test]
    fn map_skips_absent_classes() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let r = score(&[(vec![det(g, 0.9)], vec![g])], 0.5);
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.ap(1), None);
    }

    #[test]
    fn centroid_distance_of_shifted_clouds() {
        let a = vec![Tensor::new(&[2], vec![0.0, 0.0]), Tensor::new(&[2], vec![2.0, 0.0])];
        let c = vec![Tensor::new(&[2], vec![1.0, 3.0]), Tensor::new(&[2], vec![1.0, 5.0])];
        assert_eq!(centroid_distance(&a, &c).unwrap(), 4.0);
        assert!(centroid(&[]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}
