//! Training-target assignment. A ground truth is retired once a prior
//! selected detection matches it; regions that would be positive for a
//! retired instance get the "flipped" label (positive in an earlier
//! iteration, suppressed now) and their own sampling quota.

use rand_chacha::ChaCha8Rng;

use crate::boxes::{iou, BBox};
use crate::detector::AnchorSlot;
use crate::scene::Instance;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiLabel {
    Positive { class_id: usize, gt: usize },
    Flipped,
    Negative,
}

/// Argmax-IoU assignment over all ground truths: above the foreground
/// threshold the RoI is positive for a live instance or flipped for a
/// retired one; below it is negative.
pub fn assign_roi_labels(rois: &[BBox], gts: &[Instance], retired: &[bool], fg_iou: f64) -> Vec<RoiLabel> {
    debug_assert_eq!(gts.len(), retired.len());
    rois.iter()
        .map(|roi| {
            let mut best = None::<(usize, f64)>;
            for (gi, gt) in gts.iter().enumerate() {
                let ov = iou(roi, &gt.bbox);
                if best.map_or(true, |(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
            match best {
                Some((gi, ov)) if ov >= fg_iou => {
                    if retired[gi] {
                        RoiLabel::Flipped
                    } else {
                        RoiLabel::Positive { class_id: gts[gi].class_id, gt: gi }
                    }
                }
                _ => RoiLabel::Negative,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Flipped,
    Negative,
    Excluded,
}

pub const RPN_POS_IOU: f64 = 0.7;
pub const RPN_NEG_IOU: f64 = 0.3;

/// Anchor assignment: positive above the high threshold with a live
/// instance (or as a live instance's best anchor), flipped likewise for
/// retired instances, negative below the low threshold against everything,
/// excluded in between or when crossing the border.
pub fn assign_anchor_labels(
    anchors: &[AnchorSlot],
    gts: &[Instance],
    retired: &[bool],
) -> Vec<AnchorLabel> {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Excluded; n];
    if gts.is_empty() {
        for (i, a) in anchors.iter().enumerate() {
            if a.inside {
                labels[i] = AnchorLabel::Negative;
            }
        }
        return labels;
    }
    let mut max_live = vec![0.0f64; n];
    let mut arg_live = vec![usize::MAX; n];
    let mut max_retired = vec![0.0f64; n];
    let mut best_anchor_of_gt = vec![(usize::MAX, 0.0f64); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        if !a.inside {
            continue;
        }
        for (gi, gt) in gts.iter().enumerate() {
            let ov = iou(&a.bbox, &gt.bbox);
            if retired[gi] {
                if ov > max_retired[i] {
                    max_retired[i] = ov;
                }
            } else if ov > max_live[i] {
                max_live[i] = ov;
                arg_live[i] = gi;
            }
            if ov > best_anchor_of_gt[gi].1 {
                best_anchor_of_gt[gi] = (i, ov);
            }
        }
    }
    for (i, a) in anchors.iter().enumerate() {
        if !a.inside {
            continue;
        }
        labels[i] = if max_live[i] >= RPN_POS_IOU {
            AnchorLabel::Positive { gt: arg_live[i] }
        } else if max_retired[i] >= RPN_POS_IOU {
            AnchorLabel::Flipped
        } else if max_live[i].max(max_retired[i]) < RPN_NEG_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Excluded
        };
    }
    // Each instance claims its best-overlapping anchor even below the
    // threshold, so no instance goes unsupervised.
    for (gi, &(ai, ov)) in best_anchor_of_gt.iter().enumerate() {
        if ai == usize::MAX || ov <= 0.0 {
            continue;
        }
        if matches!(labels[ai], AnchorLabel::Positive { .. }) {
            continue;
        }
        labels[ai] = if retired[gi] {
            AnchorLabel::Flipped
        } else {
            AnchorLabel::Positive { gt: gi }
        };
    }
    labels
}

/// Deterministic sample without replacement via a seeded shuffle.
fn take_random(pool: &[usize], quota: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    if pool.len() <= quota {
        return pool.to_vec();
    }
    let mut v = pool.to_vec();
    v.shuffle(rng);
    v.truncate(quota);
    v
}

/// Stratified sampling honoring a pos:flipped:neg quota. Shortfalls in the
/// positive and flipped strata backfill from negatives. Randomness means
/// the globally best region is not guaranteed to appear in the sample.
pub fn sample_with_quotas(
    pos: &[usize],
    flipped: &[usize],
    neg: &[usize],
    ratios: [usize; 3],
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let denom: usize = ratios.iter().sum();
    if denom == 0 || total == 0 {
        return Vec::new();
    }
    let quota_pos = total * ratios[0] / denom;
    let quota_flip = total * ratios[1] / denom;
    let mut picked = take_random(pos, quota_pos, rng);
    picked.extend(take_random(flipped, quota_flip, rng));
    let quota_neg = total.saturating_sub(picked.len());
    picked.extend(take_random(neg, quota_neg, rng));
    picked
}
