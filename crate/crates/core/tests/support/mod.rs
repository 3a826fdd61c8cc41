//! Brute-force oracles, written independently of the library internals:
//! plain loops, no shared helper code beyond the box type itself.

use smn_core::boxes::BBox;
use smn_core::detector::Detection;
use smn_core::scene::Instance;

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x2 - a.x1).max(0.0) * (a.y2 - a.y1).max(0.0);
    let area_b = (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn lex_lt(a: &BBox, b: &BBox) -> bool {
    (a.x1, a.y1, a.x2, a.y2) < (b.x1, b.y1, b.x2, b.y2)
}

/// O(n^2) greedy suppression, one comparison at a time.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| {
                if lex_lt(&boxes[a], &boxes[b]) {
                    std::cmp::Ordering::Less
                } else if lex_lt(&boxes[b], &boxes[a]) {
                    std::cmp::Ordering::Greater
                } else {
                    a.cmp(&b)
                }
            })
    });
    let mut kept: Vec<usize> = Vec::new();
    for &candidate in &order {
        let mut survives = true;
        for &k in &kept {
            if oracle_iou(&boxes[candidate], &boxes[k]) > threshold {
                survives = false;
                break;
            }
        }
        if survives {
            kept.push(candidate);
        }
    }
    kept
}

/// Enumerate anchors the slow way: every cell, scale, ratio spelled out.
pub fn anchors_oracle(
    feat_h: usize,
    feat_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
    image_w: f64,
    image_h: f64,
) -> Vec<(BBox, bool)> {
    let mut out = Vec::new();
    for row in 0..feat_h {
        for col in 0..feat_w {
            for &scale in scales {
                for &ratio in ratios {
                    let cx = col as f64 * stride + stride / 2.0;
                    let cy = row as f64 * stride + stride / 2.0;
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    let b = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
                    let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= image_w && b.y2 <= image_h;
                    out.push((b, inside));
                }
            }
        }
    }
    out
}

/// Exhaustive single-class average precision at one IoU threshold with
/// 101-point interpolation, recomputing precision at every recall level by
/// direct scan. Detections across all images; each image's ground truths
/// matched greedily in confidence order.
pub fn ap_oracle(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<Instance>],
    class: usize,
    threshold: f64,
    cap: usize,
) -> Option<(f64, f64)> {
    // Cap per image by score (ties: earlier box lexicographically).
    let capped: Vec<Vec<Detection>> = dets_per_image
        .iter()
        .map(|dets| {
            let mut v: Vec<Detection> = dets.clone();
            v.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| {
                        if lex_lt(&a.bbox, &b.bbox) {
                            std::cmp::Ordering::Less
                        } else {
                            std::cmp::Ordering::Greater
                        }
                    })
            });
            v.truncate(cap);
            v
        })
        .collect();

    let n_gt: usize = gts_per_image
        .iter()
        .map(|g| g.iter().filter(|i| i.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }

    // Global confidence order.
    let mut flat: Vec<(usize, Detection)> = Vec::new();
    for (img, dets) in capped.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class_id == class) {
            flat.push((img, *d));
        }
    }
    flat.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then_with(|| {
                if lex_lt(&a.1.bbox, &b.1.bbox) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            })
    });

    let mut taken: Vec<Vec<bool>> = gts_per_image
        .iter()
        .map(|g| vec![false; g.len()])
        .collect();
    let mut tp_flags: Vec<bool> = Vec::new();
    for (img, det) in &flat {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts_per_image[*img].iter().enumerate() {
            if gt.class_id != class || taken[*img][gi] {
                continue;
            }
            let ov = oracle_iou(&det.bbox, &gt.bbox);
            if ov >= threshold && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[*img][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Precision at every prefix, recomputed from scratch.
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    for end in 1..=tp_flags.len() {
        let tp = tp_flags[..end].iter().filter(|&&t| t).count();
        precisions.push(tp as f64 / end as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }

    // 101-point interpolated AP: max precision at any recall >= r.
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut best = 0.0f64;
        for i in 0..recalls.len() {
            if recalls[i] >= r - 1e-12 {
                for p in &precisions[i..] {
                    best = best.max(*p);
                }
                break;
            }
        }
        ap += best;
    }
    ap /= 101.0;
    let recall = tp_flags.iter().filter(|&&t| t).count() as f64 / n_gt as f64;
    Some((ap, recall))
}
