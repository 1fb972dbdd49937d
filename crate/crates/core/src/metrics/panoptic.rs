//! Panoptic quality: per-category TP/FP/FN accumulation with IoU > 0.5
//! matching, void exclusion per the standard protocol, and the
//! PQ = SQ x RQ decomposition.

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::inference::PanopticMap;
use std::collections::BTreeMap;

/// Per-category raw accumulator; a mergeable monoid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryStats {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl CategoryStats {
    fn merge(&mut self, other: &CategoryStats) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    fn touched(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.iou_sum / den
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.tp as f64 / den
        }
    }
}

/// Dataset-level accumulator keyed by category index.
#[derive(Clone, Debug, Default)]
pub struct PQAccumulator {
    pub per_category: BTreeMap<usize, CategoryStats>,
}

impl PQAccumulator {
    pub fn new() -> Self {
        PQAccumulator::default()
    }

    /// Associative merge; order never changes the result (integer counts,
    /// float iou sums added category-wise).
    pub fn merge(&mut self, other: &PQAccumulator) {
        for (cat, stats) in &other.per_category {
            self.per_category.entry(*cat).or_default().merge(stats);
        }
    }

    fn stats(&mut self, cat: usize) -> &mut CategoryStats {
        self.per_category.entry(cat).or_default()
    }

    /// Match one image's prediction against ground truth and accumulate.
    pub fn add_image(
        &mut self,
        pred: &PanopticMap,
        gt: &PanopticMap,
        vocab: &Vocabulary,
    ) -> Result<()> {
        if pred.segment_ids.shape() != gt.segment_ids.shape() {
            return Err(Error::shape("panoptic maps differ in size"));
        }
        for seg in pred.segments.iter().chain(gt.segments.iter()) {
            if seg.category >= vocab.len() {
                return Err(Error::invalid(format!(
                    "segment category {} outside vocabulary",
                    seg.category
                )));
            }
        }
        // pixel-level intersections, including void (id 0)
        let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (&p, &g) in pred.segment_ids.iter().zip(gt.segment_ids.iter()) {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
        let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
        let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
        for (&(p, g), &c) in &inter {
            *pred_area.entry(p).or_insert(0) += c;
            *gt_area.entry(g).or_insert(0) += c;
        }
        let pred_cat: BTreeMap<u32, usize> =
            pred.segments.iter().map(|s| (s.id, s.category)).collect();
        let gt_cat: BTreeMap<u32, usize> = gt.segments.iter().map(|s| (s.id, s.category)).collect();

        let mut matched_pred: BTreeMap<u32, f64> = BTreeMap::new();
        let mut matched_gt: BTreeMap<u32, u32> = BTreeMap::new();
        for (&(p, g), &c) in &inter {
            if p == 0 || g == 0 {
                continue;
            }
            if pred_cat[&p] != gt_cat[&g] {
                continue;
            }
            // union excludes the prediction's overlap with ground-truth void
            let void_overlap = inter.get(&(p, 0)).copied().unwrap_or(0);
            let union = pred_area[&p] + gt_area[&g] - c - void_overlap;
            if union == 0 {
                continue;
            }
            let iou = c as f64 / union as f64;
            if iou > 0.5 {
                // IoU > 0.5 makes the match unique on both sides
                debug_assert!(!matched_pred.contains_key(&p));
                debug_assert!(!matched_gt.contains_key(&g));
                matched_pred.insert(p, iou);
                matched_gt.insert(g, p);
                let s = self.stats(pred_cat[&p]);
                s.tp += 1;
                s.iou_sum += iou;
            }
        }
        // false positives: unmatched predictions not mostly void
        for seg in &pred.segments {
            if matched_pred.contains_key(&seg.id) {
                continue;
            }
            let area = pred_area.get(&seg.id).copied().unwrap_or(0);
            if area == 0 {
                continue;
            }
            let void_overlap = inter.get(&(seg.id, 0)).copied().unwrap_or(0);
            if void_overlap as f64 / area as f64 > 0.5 {
                continue;
            }
            self.stats(seg.category).fp += 1;
        }
        // false negatives: unmatched ground truth
        for seg in &gt.segments {
            if !matched_gt.contains_key(&seg.id) {
                self.stats(seg.category).fn_ += 1;
            }
        }
        Ok(())
    }

    /// Final scores, reported x100.
    pub fn result(&self, vocab: &Vocabulary) -> PQResult {
        let mut overall = SubsetScores::default();
        let mut things = SubsetScores::default();
        let mut stuff = SubsetScores::default();
        let mut per_category = Vec::new();
        for (&cat, stats) in &self.per_category {
            if !stats.touched() {
                continue;
            }
            overall.add(stats);
            if vocab.is_thing(cat) {
                things.add(stats);
            } else {
                stuff.add(stats);
            }
            per_category.push((cat, stats.clone()));
        }
        PQResult {
            pq: overall.pq(),
            sq: overall.sq(),
            rq: overall.rq(),
            pq_things: things.pq(),
            sq_things: things.sq(),
            rq_things: things.rq(),
            pq_stuff: stuff.pq(),
            sq_stuff: stuff.sq(),
            rq_stuff: stuff.rq(),
            per_category,
        }
    }
}

#[derive(Default)]
struct SubsetScores {
    pq_sum: f64,
    sq_sum: f64,
    rq_sum: f64,
    n: usize,
}

impl SubsetScores {
    fn add(&mut self, s: &CategoryStats) {
        self.pq_sum += s.pq();
        self.sq_sum += s.sq();
        self.rq_sum += s.rq();
        self.n += 1;
    }

    fn pq(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            100.0 * self.pq_sum / self.n as f64
        }
    }

    fn sq(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            100.0 * self.sq_sum / self.n as f64
        }
    }

    fn rq(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            100.0 * self.rq_sum / self.n as f64
        }
    }
}

/// PQ/SQ/RQ overall and split by thing/stuff, all x100, plus raw
/// per-category accumulators.
#[derive(Clone, Debug)]
pub struct PQResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub sq_things: f64,
    pub rq_things: f64,
    pub pq_stuff: f64,
    pub sq_stuff: f64,
    pub rq_stuff: f64,
    pub per_category: Vec<(usize, CategoryStats)>,
}

/// One-shot evaluation of a single image pair.
pub fn panoptic_quality(
    pred: &PanopticMap,
    gt: &PanopticMap,
    vocab: &Vocabulary,
) -> Result<PQResult> {
    let mut acc = PQAccumulator::new();
    acc.add_image(pred, gt, vocab)?;
    Ok(acc.result(vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::SegmentInfo;
    use ndarray::Array2;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec![
            ("square".into(), true),
            ("circle".into(), true),
            ("grass".into(), false),
        ])
        .unwrap()
    }

    fn map_from(ids: Array2<u32>, cats: &[usize], vocab: &Vocabulary) -> PanopticMap {
        let segments = cats
            .iter()
            .enumerate()
            .map(|(i, &c)| SegmentInfo {
                id: i as u32 + 1,
                category: c,
                isthing: vocab.is_thing(c),
                score: 1.0,
            })
            .collect();
        PanopticMap {
            segment_ids: ids,
            segments,
        }
    }

    fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> u32) -> Array2<u32> {
        Array2::from_shape_fn((h, w), |(y, x)| f(y, x))
    }

    #[test]
    fn perfect_match_scores_hundred() {
        let v = vocab();
        let ids = grid(8, 8, |y, _| if y < 4 { 1 } else { 2 });
        let m = map_from(ids, &[0, 2], &v);
        let r = panoptic_quality(&m, &m, &v).unwrap();
        assert_eq!(r.pq, 100.0);
        assert_eq!(r.sq, 100.0);
        assert_eq!(r.rq, 100.0);
        assert_eq!(r.pq_things, 100.0);
        assert_eq!(r.pq_stuff, 100.0);
        for (_, s) in &r.per_category {
            assert_eq!(s.tp, 1);
            assert_eq!(s.fp + s.fn_, 0);
        }
    }

    #[test]
    fn empty_prediction_counts_false_negatives() {
        let v = vocab();
        let gt = map_from(grid(8, 8, |y, _| if y < 4 { 1 } else { 2 }), &[0, 1], &v);
        let pred = PanopticMap::empty(8, 8);
        let r = panoptic_quality(&pred, &gt, &v).unwrap();
        assert_eq!(r.pq, 0.0);
        let total_fn: u64 = r.per_category.iter().map(|(_, s)| s.fn_).sum();
        assert_eq!(total_fn, 2);
    }

    #[test]
    fn hand_case_iou_point_six_with_spurious_segment() {
        // gt: segment 1 (category 0) is a 16 px square, segment 2
        // (category 1) fills the rest — no void, so overflow counts in the
        // union. pred segment 1 covers 12 px of gt-1 plus 4 px outside:
        // IoU = 12 / (16 + 16 - 12) = 0.6. pred segment 2 is spurious.
        let v = vocab();
        let gt_ids = grid(8, 8, |y, x| if y < 4 && x < 4 { 1 } else { 2 });
        let gt = map_from(gt_ids, &[0, 1], &v);
        let pred_ids = grid(8, 8, |y, x| {
            if x < 4 && y < 3 {
                1 // 12 px inside gt segment 1
            } else if y == 4 && x < 4 {
                1 // 4 px outside it
            } else if y >= 6 && x >= 6 {
                2 // spurious, same category
            } else {
                0
            }
        });
        let pred = map_from(pred_ids, &[0, 0], &v);
        let r = panoptic_quality(&pred, &gt, &v).unwrap();
        let s = r
            .per_category
            .iter()
            .find(|(c, _)| *c == 0)
            .map(|(_, s)| s.clone())
            .unwrap();
        assert_eq!(s.tp, 1);
        assert_eq!(s.fp, 1);
        assert_eq!(s.fn_, 0);
        assert!((s.iou_sum - 0.6).abs() < 1e-12);
        // per-category PQ = 0.6 / (1 + 0.5) = 0.4
        assert!((s.pq() - 0.4).abs() < 1e-9);
        assert!((s.pq() - s.sq() * s.rq()).abs() < 1e-9);
    }

    #[test]
    fn pq_decomposes_exactly() {
        let v = vocab();
        let gt = map_from(grid(6, 6, |y, _| (y / 2 + 1) as u32), &[0, 1, 2], &v);
        let pred = map_from(
            grid(6, 6, |y, x| if y < 2 && x < 5 { 1 } else if y >= 4 { 2 } else { 0 }),
            &[0, 2],
            &v,
        );
        let mut acc = PQAccumulator::new();
        acc.add_image(&pred, &gt, &v).unwrap();
        acc.add_image(&gt, &gt, &v).unwrap();
        for (_, s) in &acc.per_category {
            assert!((s.pq() - s.sq() * s.rq()).abs() <= 1e-9);
        }
    }

    #[test]
    fn void_pixels_are_excluded_from_union() {
        let v = vocab();
        // gt: left half segment, right half void
        let gt = map_from(grid(4, 8, |_, x| u32::from(x < 4)), &[0], &v);
        // pred covers the full image with one segment: overlap with void is
        // subtracted from the union, so IoU = 16 / (32 + 16 - 16 - 16) = 1.0
        let pred = map_from(grid(4, 8, |_, _| 1), &[0], &v);
        let r = panoptic_quality(&pred, &gt, &v).unwrap();
        let s = &r.per_category[0].1;
        assert_eq!(s.tp, 1);
        assert!((s.iou_sum - 1.0).abs() < 1e-12);
        assert_eq!(r.pq, 100.0);
    }

    #[test]
    fn mostly_void_prediction_is_not_a_false_positive() {
        let v = vocab();
        let gt = PanopticMap::empty(4, 4); // everything void
        let pred = map_from(grid(4, 4, |y, _| u32::from(y == 0)), &[0], &v);
        let r = panoptic_quality(&pred, &gt, &v).unwrap();
        // the prediction is 100% on void: exempt from FP counting
        assert!(r.per_category.is_empty());
    }

    #[test]
    fn spurious_segment_never_increases_pq() {
        let v = vocab();
        let gt = map_from(grid(8, 8, |y, _| u32::from(y < 4)), &[0], &v);
        let pred1 = map_from(grid(8, 8, |y, _| u32::from(y < 4)), &[0], &v);
        let mut pred2_ids = grid(8, 8, |y, _| u32::from(y < 4));
        for x in 0..4 {
            pred2_ids[[6, x]] = 2;
        }
        let pred2 = map_from(pred2_ids, &[0, 1], &v);
        let r1 = panoptic_quality(&pred1, &gt, &v).unwrap();
        let r2 = panoptic_quality(&pred2, &gt, &v).unwrap();
        assert!(r2.pq <= r1.pq);
    }

    #[test]
    fn merge_is_order_independent() {
        let v = vocab();
        let gt = map_from(grid(6, 6, |y, _| u32::from(y < 3)), &[0], &v);
        let pred = map_from(grid(6, 6, |y, x| u32::from(y < 3 && x < 5)), &[0], &v);
        let mut a = PQAccumulator::new();
        a.add_image(&pred, &gt, &v).unwrap();
        let mut b = PQAccumulator::new();
        b.add_image(&gt, &gt, &v).unwrap();
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab.per_category, ba.per_category);
    }
}
