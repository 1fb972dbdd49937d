//! Mean intersection-over-union for semantic maps.

use crate::error::{Error, Result};
use crate::inference::VOID;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Per-category intersection/union pixel counts over a dataset.
#[derive(Clone, Debug, Default)]
pub struct IoUAccumulator {
    /// category -> (intersection, union, gt pixel count)
    counts: BTreeMap<usize, (u64, u64, u64)>,
}

impl IoUAccumulator {
    pub fn new() -> Self {
        IoUAccumulator::default()
    }

    /// Accumulate one image; pixels with void ground truth are ignored.
    pub fn add_image(&mut self, pred: &Array2<usize>, gt: &Array2<usize>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("semantic maps differ in size"));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == VOID {
                continue;
            }
            let gslot = self.counts.entry(g).or_insert((0, 0, 0));
            gslot.2 += 1;
            if p == g {
                let slot = self.counts.entry(g).or_insert((0, 0, 0));
                slot.0 += 1;
                slot.1 += 1;
            } else {
                let gslot = self.counts.entry(g).or_insert((0, 0, 0));
                gslot.1 += 1;
                if p != VOID {
                    let pslot = self.counts.entry(p).or_insert((0, 0, 0));
                    pslot.1 += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUAccumulator) {
        for (&cat, &(i, u, g)) in &other.counts {
            let slot = self.counts.entry(cat).or_insert((0, 0, 0));
            slot.0 += i;
            slot.1 += u;
            slot.2 += g;
        }
    }

    /// Mean IoU x100 over categories present in the ground truth, plus
    /// per-category IoU x100.
    pub fn result(&self) -> (f64, Vec<(usize, f64)>) {
        let mut per = Vec::new();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&cat, &(inter, union, gt_count)) in &self.counts {
            if gt_count == 0 {
                continue; // predicted-only category: not in the mean
            }
            debug_assert!(inter <= union);
            let iou = if union == 0 {
                0.0
            } else {
                100.0 * inter as f64 / union as f64
            };
            per.push((cat, iou));
            sum += iou;
            n += 1;
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        (mean, per)
    }
}

/// One-shot mIoU of a single image pair.
pub fn mean_iou(pred: &Array2<usize>, gt: &Array2<usize>) -> Result<(f64, Vec<(usize, f64)>)> {
    let mut acc = IoUAccumulator::new();
    acc.add_image(pred, gt)?;
    Ok(acc.result())
}
