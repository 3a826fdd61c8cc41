//! COCO-style detection evaluation: greedy confidence-descending matching
//! per class and IoU threshold, 101-point interpolated AP, mean max-recall
//! AR under per-image detection caps, and object-size buckets.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, lex_less, BBox};
use crate::config::EvalConfig;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::scene::Instance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar10: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
    /// AR at each configured cap, ascending caps.
    pub ar_by_cap: Vec<(usize, f64)>,
    /// AP at IoU 0.5 per class; NaN-free (classes without ground truth get -1).
    pub per_class_ap50: Vec<f64>,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str =
        "method,protocol,AP,AP-.5,AP-.75,AP-S,AP-M,AP-L,AR-10,AR-S,AR-M,AR-L";

    pub fn csv_row(&self, method: &str, protocol: &str) -> String {
        format!(
            "{method},{protocol},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.ar10, self.ar_s,
            self.ar_m, self.ar_l
        )
    }
}

#[derive(Clone, Copy)]
struct AreaRange {
    lo: f64,
    hi: f64,
}

const ALL_AREAS: AreaRange = AreaRange { lo: 0.0, hi: f64::INFINITY };

/// Per-image detections truncated to the top `cap` by confidence, across
/// classes, with deterministic tie-breaking.
fn cap_detections(dets: &[Detection], cap: usize) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    crate::detector::order_desc(&scores, &boxes)
        .into_iter()
        .take(cap)
        .map(|i| dets[i])
        .collect()
}

struct ClassEval {
    /// (ap, recall) per IoU threshold, or None when the class has no
    /// ground truth in range.
    per_threshold: Vec<Option<(f64, f64)>>,
}

/// Greedy matching for one class under one area range and detection cap,
/// over all images at once.
fn eval_class(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<Instance>],
    class: usize,
    thresholds: &[f64],
    area: AreaRange,
) -> ClassEval {
    // Flatten class detections with their image index, globally rank-ordered.
    let mut flat: Vec<(usize, Detection)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        for d in dets.iter().filter(|d| d.class_id == class) {
            flat.push((img, *d));
        }
    }
    flat.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then_with(|| {
                if lex_less(&a.1.bbox, &b.1.bbox) {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Greater
                }
            })
    });

    let gt_boxes: Vec<Vec<&Instance>> = gts_per_image
        .iter()
        .map(|g| g.iter().filter(|i| i.class_id == class).collect())
        .collect();
    let gt_ignored: Vec<Vec<bool>> = gt_boxes
        .iter()
        .map(|g| {
            g.iter()
                .map(|i| {
                    let a = i.bbox.area();
                    a < area.lo || a >= area.hi
                })
                .collect()
        })
        .collect();
    let n_gt: usize = gt_ignored.iter().map(|v| v.iter().filter(|&&x| !x).count()).sum();

    let per_threshold = thresholds
        .iter()
        .map(|&t| {
            if n_gt == 0 {
                return None;
            }
            let mut matched: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
            // tp/fp flags in rank order; ignored detections get neither.
            let mut flags: Vec<Option<bool>> = Vec::with_capacity(flat.len());
            for (img, det) in &flat {
                let candidates = &gt_boxes[*img];
                let mut best: Option<(usize, f64, bool)> = None;
                for (gi, gt) in candidates.iter().enumerate() {
                    if matched[*img][gi] {
                        continue;
                    }
                    let ov = iou(&det.bbox, &gt.bbox);
                    if ov < t {
                        continue;
                    }
                    let ign = gt_ignored[*img][gi];
                    let better = match best {
                        None => true,
                        // Prefer any non-ignored match over ignored ones,
                        // then the higher overlap.
                        Some((_, bov, bign)) => (!ign && bign) || (ign == bign && ov > bov),
                    };
                    if better {
                        best = Some((gi, ov, ign));
                    }
                }
                match best {
                    Some((gi, _, ign)) => {
                        matched[*img][gi] = true;
                        flags.push(if ign { None } else { Some(true) });
                    }
                    None => {
                        let da = det.bbox.area();
                        if da < area.lo || da >= area.hi {
                            flags.push(None);
                        } else {
                            flags.push(Some(false));
                        }
                    }
                }
            }
            // Precision-recall walk.
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut precisions = Vec::new();
            let mut recalls = Vec::new();
            for f in flags.iter().flatten() {
                if *f {
                    tp += 1;
                } else {
                    fp += 1;
                }
                precisions.push(tp as f64 / (tp + fp) as f64);
                recalls.push(tp as f64 / n_gt as f64);
            }
            // Precision envelope from the right.
            let mut envelope = precisions.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            // 101-point interpolation.
            let mut ap = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let p = recalls
                    .iter()
                    .position(|&rec| rec >= r - 1e-12)
                    .map(|i| envelope[i])
                    .unwrap_or(0.0);
                ap += p;
            }
            ap /= 101.0;
            let recall = tp as f64 / n_gt as f64;
            Some((ap, recall))
        })
        .collect();
    ClassEval { per_threshold }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ap_over(classes: &[ClassEval], threshold_idx: Option<usize>) -> f64 {
    mean(classes.iter().flat_map(|c| {
        c.per_threshold
            .iter()
            .enumerate()
            .filter(move |(i, _)| threshold_idx.map_or(true, |t| *i == t))
            .filter_map(|(_, v)| v.map(|(ap, _)| ap))
    }))
}

fn ar_over(classes: &[ClassEval]) -> f64 {
    mean(
        classes
            .iter()
            .flat_map(|c| c.per_threshold.iter().filter_map(|v| v.map(|(_, r)| r))),
    )
}

/// Evaluate detections against ground truth. Detections are truncated to the
/// configured per-image caps before matching (the N-constrained protocol).
pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<Instance>],
    cfg: &EvalConfig,
    n_classes: usize,
) -> Result<EvalResult> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::Config(format!(
            "{} detection lists vs {} ground-truth lists",
            dets_per_image.len(),
            gts_per_image.len()
        )));
    }
    for dets in dets_per_image {
        if let Some(d) = dets.iter().find(|d| d.class_id >= n_classes) {
            return Err(Error::Config(format!(
                "detection class id {} out of range (classes: {n_classes})",
                d.class_id
            )));
        }
    }
    cfg.validate()?;
    let max_cap = cfg.max_dets.iter().copied().max().unwrap_or(10);
    let capped: Vec<Vec<Detection>> = dets_per_image.iter().map(|d| cap_detections(d, max_cap)).collect();

    let t = &cfg.iou_thresholds;
    let small = AreaRange { lo: 0.0, hi: cfg.size_s_max };
    let medium = AreaRange { lo: cfg.size_s_max, hi: cfg.size_m_max };
    let large = AreaRange { lo: cfg.size_m_max, hi: f64::INFINITY };

    let eval_all = |area: AreaRange, dets: &[Vec<Detection>]| -> Vec<ClassEval> {
        (0..n_classes)
            .map(|c| eval_class(dets, gts_per_image, c, t, area))
            .collect()
    };

    let full = eval_all(ALL_AREAS, &capped);
    let s = eval_all(small, &capped);
    let m = eval_all(medium, &capped);
    let l = eval_all(large, &capped);

    let idx50 = t.iter().position(|&x| (x - 0.5).abs() < 1e-9);
    let idx75 = t.iter().position(|&x| (x - 0.75).abs() < 1e-9);

    let mut ar_by_cap = Vec::new();
    for &cap in &cfg.max_dets {
        let capped_k: Vec<Vec<Detection>> = dets_per_image.iter().map(|d| cap_detections(d, cap)).collect();
        ar_by_cap.push((cap, ar_over(&eval_all(ALL_AREAS, &capped_k))));
    }
    ar_by_cap.sort_by_key(|&(cap, _)| cap);

    let per_class_ap50: Vec<f64> = full
        .iter()
        .map(|c| {
            idx50
                .and_then(|i| c.per_threshold[i])
                .map(|(ap, _)| ap)
                .unwrap_or(-1.0)
        })
        .collect();

    Ok(EvalResult {
        ap: ap_over(&full, None),
        ap50: idx50.map(|i| ap_over(&full, Some(i))).unwrap_or(0.0),
        ap75: idx75.map(|i| ap_over(&full, Some(i))).unwrap_or(0.0),
        ap_s: ap_over(&s, None),
        ap_m: ap_over(&m, None),
        ap_l: ap_over(&l, None),
        ar10: ar_by_cap.last().map(|&(_, r)| r).unwrap_or(0.0),
        ar_s: ar_over(&s),
        ar_m: ar_over(&m),
        ar_l: ar_over(&l),
        ar_by_cap,
        per_class_ap50,
    })
}

/// Run a per-image detector over a dataset (in parallel when enabled) and
/// evaluate the result.
pub fn evaluate_method<F>(
    detect: F,
    dataset: &[crate::scene::SceneRecord],
    cfg: &EvalConfig,
    n_classes: usize,
) -> Result<EvalResult>
where
    F: Fn(&crate::scene::SceneRecord) -> Result<Vec<Detection>> + Sync,
{
    let dets = detect_all(&detect, dataset)?;
    let gts: Vec<Vec<Instance>> = dataset.iter().map(|r| r.instances.clone()).collect();
    evaluate(&dets, &gts, cfg, n_classes)
}

#[cfg(feature = "parallel")]
pub fn detect_all<F>(detect: &F, dataset: &[crate::scene::SceneRecord]) -> Result<Vec<Vec<Detection>>>
where
    F: Fn(&crate::scene::SceneRecord) -> Result<Vec<Detection>> + Sync,
{
    use rayon::prelude::*;
    dataset.par_iter().map(detect).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn detect_all<F>(detect: &F, dataset: &[crate::scene::SceneRecord]) -> Result<Vec<Vec<Detection>>>
where
    F: Fn(&crate::scene::SceneRecord) -> Result<Vec<Detection>> + Sync,
{
    dataset.iter().map(detect).collect()
}
