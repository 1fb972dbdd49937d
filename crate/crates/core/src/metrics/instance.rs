//! Instance-level metrics: average recall of ranked class-agnostic
//! proposals and COCO-style mask mAP.

use crate::error::{Error, Result};
use crate::tensor::ArrD;

/// IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Binary mask IoU via pixel counts.
pub fn mask_iou(a: &ArrD, b: &ArrD) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mask IoU shape mismatch"));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x > 0.5, y > 0.5);
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// One image's worth of proposal recall counts; a mergeable monoid.
#[derive(Clone, Debug, Default)]
pub struct RecallAccumulator {
    /// matched gt count per IoU threshold
    matched: Vec<u64>,
    gt_total: u64,
}

impl RecallAccumulator {
    pub fn new() -> Self {
        RecallAccumulator {
            matched: vec![0; iou_thresholds().len()],
            gt_total: 0,
        }
    }

    /// Greedy best-IoU matching of the top-k ranked proposals to ground
    /// truth, evaluated at every threshold.
    pub fn add_image(&mut self, proposals: &[ArrD], gt: &[ArrD], k: usize) -> Result<()> {
        if self.matched.is_empty() {
            self.matched = vec![0; iou_thresholds().len()];
        }
        self.gt_total += gt.len() as u64;
        if gt.is_empty() || proposals.is_empty() || k == 0 {
            return Ok(());
        }
        let top: Vec<&ArrD> = proposals.iter().take(k).collect();
        // all pairwise IoUs, sorted descending with deterministic tie-break
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, p) in top.iter().enumerate() {
            for (gi, g) in gt.iter().enumerate() {
                let iou = mask_iou(p, g)?;
                if iou > 0.0 {
                    pairs.push((iou, pi, gi));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for (ti, &thr) in iou_thresholds().iter().enumerate() {
            let mut used_p = vec![false; top.len()];
            let mut used_g = vec![false; gt.len()];
            for &(iou, pi, gi) in &pairs {
                if iou < thr {
                    break;
                }
                if !used_p[pi] && !used_g[gi] {
                    used_p[pi] = true;
                    used_g[gi] = true;
                    self.matched[ti] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RecallAccumulator) {
        if self.matched.is_empty() {
            self.matched = vec![0; iou_thresholds().len()];
        }
        if other.matched.is_empty() {
            return;
        }
        for (a, b) in self.matched.iter_mut().zip(other.matched.iter()) {
            *a += b;
        }
        self.gt_total += other.gt_total;
    }

    /// AR x100: recall averaged over the IoU thresholds.
    pub fn result(&self) -> f64 {
        if self.gt_total == 0 {
            return 0.0;
        }
        let recalls: Vec<f64> = self
            .matched
            .iter()
            .map(|&m| m as f64 / self.gt_total as f64)
            .collect();
        100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// AR@k for one image.
pub fn average_recall(proposals: &[ArrD], gt: &[ArrD], k: usize) -> Result<f64> {
    let mut acc = RecallAccumulator::new();
    acc.add_image(proposals, gt, k)?;
    Ok(acc.result())
}

/// One detection for mAP evaluation.
#[derive(Clone, Debug)]
pub struct Detection {
    pub mask: ArrD,
    pub category: usize,
    pub score: f64,
}

/// One ground-truth instance.
#[derive(Clone, Debug)]
pub struct GtInstance {
    pub mask: ArrD,
    pub category: usize,
}

/// COCO-style mask mAP x100: greedy best-IoU matching per category in
/// descending score order, 101-point interpolated precision, averaged over
/// the 10 IoU thresholds and over categories present in the ground truth.
pub fn mask_map(per_image: &[(Vec<Detection>, Vec<GtInstance>)]) -> Result<f64> {
    let thresholds = iou_thresholds();
    // categories with any ground truth
    let mut categories: Vec<usize> = per_image
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|g| g.category))
        .collect();
    categories.sort_unstable();
    categories.dedup();
    if categories.is_empty() {
        return Ok(0.0);
    }
    let mut ap_sum = 0.0;
    let mut ap_n = 0usize;
    for &cat in &categories {
        // flat detection list: (score, image, det index), deterministic order
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        let mut gt_total = 0usize;
        for (img, (ds, gs)) in per_image.iter().enumerate() {
            gt_total += gs.iter().filter(|g| g.category == cat).count();
            for (di, d) in ds.iter().enumerate() {
                if d.category == cat {
                    dets.push((d.score, img, di));
                }
            }
        }
        if gt_total == 0 {
            continue;
        }
        dets.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for &thr in &thresholds {
            // per-image used flags, rebuilt per threshold
            let mut used: Vec<Vec<bool>> = per_image
                .iter()
                .map(|(_, gs)| vec![false; gs.len()])
                .collect();
            let mut tp_flags = Vec::with_capacity(dets.len());
            for &(_, img, di) in &dets {
                let (ds, gs) = &per_image[img];
                let det = &ds[di];
                let mut best_iou = 0.0;
                let mut best_g = None;
                for (gi, g) in gs.iter().enumerate() {
                    if g.category != cat || used[img][gi] {
                        continue;
                    }
                    let iou = mask_iou(&det.mask, &g.mask)?;
                    if iou >= thr && iou > best_iou {
                        best_iou = iou;
                        best_g = Some(gi);
                    }
                }
                match best_g {
                    Some(gi) => {
                        used[img][gi] = true;
                        tp_flags.push(true);
                    }
                    None => tp_flags.push(false),
                }
            }
            ap_sum += interpolated_ap(&tp_flags, gt_total);
            ap_n += 1;
        }
    }
    Ok(100.0 * ap_sum / ap_n as f64)
}

/// 101-point interpolated average precision from ranked TP flags.
fn interpolated_ap(tp_flags: &[bool], gt_total: usize) -> f64 {
    if gt_total == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / gt_total as f64;
        let precision = tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    // precision envelope: max precision at recall >= r
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rc, _)| *rc >= r)
            .map(|(_, pc)| *pc)
            .fold(0.0, f64::max);
        ap += p / 101.0;
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> ArrD {
        let mut m = ArrD::zeros(IxDyn(&[h, w]));
        for y in y0..y1 {
            for x in x0..x1 {
                m[[y, x]] = 1.0;
            }
        }
        m
    }

    #[test]
    fn perfect_proposals_score_hundred() {
        let gt = vec![rect(8, 8, 0, 4, 0, 4), rect(8, 8, 4, 8, 4, 8)];
        let ar = average_recall(&gt.clone(), &gt, 10).unwrap();
        assert_eq!(ar, 100.0);
    }

    #[test]
    fn hopeless_proposals_score_zero() {
        let gt = vec![rect(8, 8, 0, 4, 0, 4)];
        let props = vec![rect(8, 8, 5, 8, 5, 8)];
        let ar = average_recall(&props, &gt, 10).unwrap();
        assert_eq!(ar, 0.0);
    }

    #[test]
    fn iou_point_seven_passes_five_of_ten_thresholds() {
        // gt 10x2 strip, proposal 7x2 inside plus nothing else:
        // iou = 14/20 = 0.7 exactly
        let gt = vec![rect(12, 4, 0, 10, 0, 2)];
        let props = vec![rect(12, 4, 0, 7, 0, 2)];
        let iou = mask_iou(&props[0], &gt[0]).unwrap();
        assert!((iou - 0.7).abs() < 1e-12);
        let ar = average_recall(&props, &gt, 1).unwrap();
        assert!((ar - 50.0).abs() < 1e-9, "ar {ar}");
    }

    #[test]
    fn only_top_k_counts() {
        let gt = vec![rect(8, 8, 0, 4, 0, 4)];
        let props = vec![rect(8, 8, 4, 8, 4, 8), rect(8, 8, 0, 4, 0, 4)];
        assert_eq!(average_recall(&props, &gt, 1).unwrap(), 0.0);
        assert_eq!(average_recall(&props, &gt, 2).unwrap(), 100.0);
    }

    #[test]
    fn recall_accumulator_merges() {
        let gt1 = vec![rect(8, 8, 0, 4, 0, 4)];
        let gt2 = vec![rect(8, 8, 4, 8, 4, 8)];
        let mut a = RecallAccumulator::new();
        a.add_image(&gt1.clone(), &gt1, 5).unwrap();
        let mut b = RecallAccumulator::new();
        b.add_image(&[], &gt2, 5).unwrap();
        a.merge(&b);
        assert_eq!(a.result(), 50.0);
    }

    #[test]
    fn map_perfect_detections() {
        let gt = vec![
            GtInstance {
                mask: rect(8, 8, 0, 4, 0, 4),
                category: 0,
            },
            GtInstance {
                mask: rect(8, 8, 4, 8, 4, 8),
                category: 1,
            },
        ];
        let dets = gt
            .iter()
            .map(|g| Detection {
                mask: g.mask.clone(),
                category: g.category,
                score: 1.0,
            })
            .collect();
        let map = mask_map(&[(dets, gt)]).unwrap();
        assert!((map - 100.0).abs() < 1e-9);
    }

    #[test]
    fn map_no_detections_is_zero() {
        let gt = vec![GtInstance {
            mask: rect(8, 8, 0, 4, 0, 4),
            category: 0,
        }];
        assert_eq!(mask_map(&[(vec![], gt)]).unwrap(), 0.0);
    }

    #[test]
    fn map_spurious_low_score_detection_keeps_ap_hundred() {
        // the correct detection ranks first; the spurious one extends the
        // ranking after full recall is reached, so every threshold the
        // correct one passes still yields AP = 100
        let gt = vec![GtInstance {
            mask: rect(8, 8, 0, 4, 0, 4),
            category: 0,
        }];
        let dets = vec![
            Detection {
                mask: rect(8, 8, 0, 4, 0, 4),
                category: 0,
                score: 0.9,
            },
            Detection {
                mask: rect(8, 8, 5, 8, 5, 8),
                category: 0,
                score: 0.1,
            },
        ];
        let map = mask_map(&[(dets, gt)]).unwrap();
        assert!((map - 100.0).abs() < 1e-9);
    }

    #[test]
    fn map_half_matched_iou() {
        // detection matches at IoU 0.7: passes 5 of 10 thresholds -> 50
        let gt = vec![GtInstance {
            mask: rect(12, 4, 0, 10, 0, 2),
            category: 0,
        }];
        let dets = vec![Detection {
            mask: rect(12, 4, 0, 7, 0, 2),
            category: 0,
            score: 0.8,
        }];
        let map = mask_map(&[(dets, gt)]).unwrap();
        assert!((map - 50.0).abs() < 1e-9);
    }
}
