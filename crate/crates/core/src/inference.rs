//! Open-vocabulary inference: classify each predicted mask with both the
//! diffusion-path mask embedding and a discriminatively pooled embedding,
//! fuse the two distributions by a weighted geometric mean, and assemble
//! panoptic / semantic / instance outputs.

use crate::classifier::{class_probs, softmax_scores, ProbabilityVector};
use crate::encoders::{l2_normalized, Vocabulary, VocabularyEmbedding};
use crate::error::{Error, Result};
use crate::maskgen::{masked_pool, MaskSet};
use crate::tensor::ArrD;
use ndarray::Array2;

/// Sentinel for unlabeled pixels in semantic maps.
pub const VOID: usize = usize::MAX;

/// Per-mask classification after fusing both paths.
#[derive(Clone, Debug)]
pub struct FusedPrediction {
    pub probs: ProbabilityVector,
    pub category: usize,
    /// max fused probability times mean in-mask sigmoid score.
    pub confidence: f64,
    /// Null-category probability from the diffusion-path classifier.
    pub rejection: f64,
    pub mask_quality: f64,
}

/// Per-pixel segment ids (0 = void) plus per-segment records.
#[derive(Clone, Debug)]
pub struct PanopticMap {
    pub segment_ids: Array2<u32>,
    pub segments: Vec<SegmentInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentInfo {
    pub id: u32,
    pub category: usize,
    pub isthing: bool,
    pub score: f64,
}

impl PanopticMap {
    pub fn empty(h: usize, w: usize) -> Self {
        PanopticMap {
            segment_ids: Array2::zeros((h, w)),
            segments: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.segment_ids.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.segment_ids.shape()[1]
    }

    /// Ids contiguous from 1, each nonzero map id backed by exactly one
    /// segment record and vice versa.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.id as usize != i + 1 {
                return Err(Error::invalid(format!(
                    "segment ids must be contiguous from 1, got {} at slot {i}",
                    seg.id
                )));
            }
            seen.insert(seg.id);
        }
        let mut used = std::collections::BTreeSet::new();
        for &id in self.segment_ids.iter() {
            if id != 0 {
                if !seen.contains(&id) {
                    return Err(Error::invalid(format!("map id {id} has no segment record")));
                }
                used.insert(id);
            }
        }
        for seg in &self.segments {
            if !used.contains(&seg.id) {
                return Err(Error::invalid(format!(
                    "segment {} owns no pixels",
                    seg.id
                )));
            }
        }
        Ok(())
    }

    pub fn area(&self, id: u32) -> usize {
        self.segment_ids.iter().filter(|&&v| v == id).count()
    }
}

/// Assembly and proposal thresholds.
#[derive(Clone, Debug)]
pub struct InferenceConfig {
    pub lambda: f64,
    pub conf_thresh: f64,
    pub reject_thresh: f64,
    pub overlap_keep: f64,
    pub min_area: usize,
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            lambda: 0.65,
            conf_thresh: 0.25,
            reject_thresh: 0.5,
            overlap_keep: 0.8,
            min_area: 16,
            top_k: 100,
        }
    }
}

/// Pool the discriminative image-encoder features under a binarized mask
/// and L2-normalize; zero support falls back to the global mean.
pub fn pool_discriminative_embedding(feature_map: &ArrD, mask: &ArrD) -> Result<Vec<f64>> {
    let pooled = masked_pool(feature_map, mask)?;
    Ok(l2_normalized(&pooled))
}

/// Weighted geometric-mean fusion of two distributions over the same
/// categories; endpoints return the respective input exactly.
pub fn fuse_predictions(
    p_diff: &ProbabilityVector,
    p_disc: &ProbabilityVector,
    lambda: f64,
) -> Result<ProbabilityVector> {
    if p_diff.len() != p_disc.len() {
        return Err(Error::shape("fusion needs equal category counts"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda must lie in [0, 1]"));
    }
    if lambda == 1.0 {
        return Ok(p_diff.clone());
    }
    if lambda == 0.0 {
        return Ok(p_disc.clone());
    }
    let mut fused: Vec<f64> = p_diff
        .probs
        .iter()
        .zip(p_disc.probs.iter())
        .map(|(&a, &b)| a.powf(lambda) * b.powf(1.0 - lambda))
        .collect();
    let z: f64 = fused.iter().sum();
    if z <= 0.0 {
        // degenerate: disjoint supports; fall back to uniform
        let k = fused.len();
        return Ok(ProbabilityVector {
            probs: vec![1.0 / k as f64; k],
        });
    }
    for f in fused.iter_mut() {
        *f /= z;
    }
    Ok(ProbabilityVector { probs: fused })
}

/// Classify every query of a [`MaskSet`]: diffusion-path probabilities with
/// a null rejection score, discriminative mask-pooled probabilities, fused
/// by `lambda`.
pub fn classify_masks(
    masks: &MaskSet,
    vocab_emb: &VocabularyEmbedding,
    null_row: &[f64],
    tau: f64,
    disc_feature_map: &ArrD,
    lambda: f64,
) -> Result<Vec<FusedPrediction>> {
    let n = masks.num_queries();
    let k = vocab_emb.num_categories();
    let d = vocab_emb.dim();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let z: Vec<f64> = masks
            .embeddings
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .copied()
            .collect();
        // diffusion path scores over K categories plus the null row
        let mut scores = Vec::with_capacity(k + 1);
        for ki in 0..k {
            let mut acc = 0.0;
            for c in 0..d {
                acc += z[c] * vocab_emb.matrix[[ki, c]];
            }
            scores.push(acc / tau);
        }
        let mut null_score = 0.0;
        for c in 0..d {
            null_score += z[c] * null_row[c];
        }
        scores.push(null_score / tau);
        let with_null = softmax_scores(&scores);
        let rejection = with_null[k];
        let p_diff = ProbabilityVector {
            probs: softmax_scores(&scores[..k]),
        };
        // discriminative path
        let bin = masks.binary_mask(i);
        let z_disc = pool_discriminative_embedding(disc_feature_map, &bin)?;
        let p_disc = class_probs(&z_disc, vocab_emb, tau);
        let fused = fuse_predictions(&p_diff, &p_disc, lambda)?;
        // mask quality: mean sigmoid over the binarized support
        let logits = masks.mask_logits.index_axis(ndarray::Axis(0), i);
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for (&l, &b) in logits.iter().zip(bin.iter()) {
            if b > 0.5 {
                acc += 1.0 / (1.0 + (-l).exp());
                cnt += 1;
            }
        }
        let mask_quality = if cnt > 0 { acc / cnt as f64 } else { 0.0 };
        let category = fused.argmax();
        let confidence = fused.max_prob() * mask_quality;
        out.push(FusedPrediction {
            probs: fused,
            category,
            confidence,
            rejection,
            mask_quality,
        });
    }
    Ok(out)
}

/// Greedy panoptic assembly: drop rejected/low-confidence queries, claim
/// pixels in confidence order, discard mostly-occluded masks, merge stuff
/// segments of the same category, drop tiny segments, relabel contiguously.
pub fn panoptic_assemble(
    masks: &MaskSet,
    fused: &[FusedPrediction],
    vocab: &Vocabulary,
    cfg: &InferenceConfig,
) -> Result<PanopticMap> {
    let n = masks.num_queries();
    if fused.len() != n {
        return Err(Error::invalid("one fused prediction per query required"));
    }
    let (h, w) = (masks.mask_logits.shape()[1], masks.mask_logits.shape()[2]);
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| fused[i].rejection <= cfg.reject_thresh && fused[i].confidence >= cfg.conf_thresh)
        .collect();
    order.sort_by(|&a, &b| {
        fused[b]
            .confidence
            .partial_cmp(&fused[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut ids = Array2::<u32>::zeros((h, w));
    let mut segments: Vec<SegmentInfo> = Vec::new();
    for &qi in &order {
        let bin = masks.binary_mask(qi);
        let mask_area = bin.iter().filter(|&&v| v > 0.5).count();
        if mask_area == 0 {
            continue;
        }
        let mut claim: Vec<(usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if bin[[y, x]] > 0.5 && ids[[y, x]] == 0 {
                    claim.push((y, x));
                }
            }
        }
        if (claim.len() as f64) < cfg.overlap_keep * mask_area as f64 {
            continue;
        }
        let next_id = segments.len() as u32 + 1;
        for &(y, x) in &claim {
            ids[[y, x]] = next_id;
        }
        segments.push(SegmentInfo {
            id: next_id,
            category: fused[qi].category,
            isthing: vocab.is_thing(fused[qi].category),
            score: fused[qi].confidence,
        });
    }

    // merge stuff segments sharing a category into the first segment
    let mut remap: Vec<u32> = (0..=segments.len() as u32).collect();
    for i in 0..segments.len() {
        if segments[i].isthing {
            continue;
        }
        for j in (i + 1)..segments.len() {
            if !segments[j].isthing
                && segments[j].category == segments[i].category
                && remap[segments[j].id as usize] == segments[j].id
            {
                remap[segments[j].id as usize] = segments[i].id;
                let sj = segments[j].score;
                if sj > segments[i].score {
                    segments[i].score = sj;
                }
            }
        }
    }
    for v in ids.iter_mut() {
        if *v != 0 {
            *v = remap[*v as usize];
        }
    }

    // drop segments below the area floor (or fully merged away / occluded)
    let mut area = vec![0usize; segments.len() + 1];
    for &v in ids.iter() {
        area[v as usize] += 1;
    }
    let keep: Vec<bool> = segments
        .iter()
        .map(|s| remap[s.id as usize] == s.id && area[s.id as usize] >= cfg.min_area)
        .collect();
    let mut final_remap = vec![0u32; segments.len() + 1];
    let mut kept = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if keep[i] {
            let new_id = kept.len() as u32 + 1;
            final_remap[seg.id as usize] = new_id;
            kept.push(SegmentInfo {
                id: new_id,
                ..seg.clone()
            });
        }
    }
    for v in ids.iter_mut() {
        *v = final_remap[*v as usize];
    }
    let map = PanopticMap {
        segment_ids: ids,
        segments: kept,
    };
    map.validate()?;
    Ok(map)
}

/// Collapse a panoptic map to a per-pixel category map; void stays void.
pub fn semantic_from_panoptic(pan: &PanopticMap, vocab: &Vocabulary) -> Result<Array2<usize>> {
    let (h, w) = (pan.height(), pan.width());
    let mut cat_of_id = vec![VOID; pan.segments.len() + 1];
    for seg in &pan.segments {
        if seg.category >= vocab.len() {
            return Err(Error::invalid(format!(
                "segment category {} outside vocabulary of {}",
                seg.category,
                vocab.len()
            )));
        }
        cat_of_id[seg.id as usize] = seg.category;
    }
    let mut out = Array2::<usize>::from_elem((h, w), VOID);
    for y in 0..h {
        for x in 0..w {
            let id = pan.segment_ids[[y, x]];
            if id != 0 {
                out[[y, x]] = cat_of_id[id as usize];
            }
        }
    }
    Ok(out)
}

/// One ranked class-agnostic or class-aware instance proposal.
#[derive(Clone, Debug)]
pub struct InstanceProposal {
    pub mask: ArrD,
    pub category: Option<usize>,
    pub score: f64,
}

/// Ranked thing-category proposals, binarized at sigmoid 0.5. The
/// class-agnostic variant keeps every non-rejected mask and drops labels.
pub fn instance_proposals(
    masks: &MaskSet,
    fused: &[FusedPrediction],
    vocab: &Vocabulary,
    top_k: usize,
    class_agnostic: bool,
) -> Result<Vec<InstanceProposal>> {
    let n = masks.num_queries();
    if top_k > n {
        return Err(Error::invalid(format!("top_k {top_k} exceeds {n} queries")));
    }
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| {
            fused[i].rejection <= 0.5
                && (class_agnostic || vocab.is_thing(fused[i].category))
        })
        .collect();
    order.sort_by(|&a, &b| {
        fused[b]
            .confidence
            .partial_cmp(&fused[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(top_k)
        .map(|i| InstanceProposal {
            mask: masks.binary_mask(i),
            category: (!class_agnostic).then_some(fused[i].category),
            score: fused[i].confidence,
        })
        .collect())
}
