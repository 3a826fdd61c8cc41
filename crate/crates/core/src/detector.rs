//! Two-stage region-based detector: a small conv backbone, an anchor grid
//! with a proposal head, RoI classification with per-class box regression,
//! and per-class NMS.

use serde::{Deserialize, Serialize};

use crate::boxes::{decode_box, iou, lex_less, BBox};
use crate::config::{DetectorConfig, ProposalMode};
use crate::error::{Error, Result};
use crate::weights::{BoundBase, BoundConv, BoundFc, BoundRpn};
use smn_tensor::{ops, MapBox, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AnchorSlot {
    pub bbox: BBox,
    /// False when the raw anchor crosses the image border; such slots are
    /// excluded from training targets.
    pub inside: bool,
}

/// Deterministic descending order: score, then lexicographically smaller
/// box, then index.
pub fn order_desc(scores: &[f64], boxes: &[BBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                if lex_less(&boxes[a], &boxes[b]) {
                    std::cmp::Ordering::Less
                } else if lex_less(&boxes[b], &boxes[a]) {
                    std::cmp::Ordering::Greater
                } else {
                    a.cmp(&b)
                }
            })
    });
    idx
}

/// Greedy score-descending suppression; returns surviving indices in rank
/// order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let order = order_desc(scores, boxes);
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// One anchor per (cell, scale, ratio), centered on the cell's image-space
/// center. Flat slot order matches the RPN head channel layout.
pub fn build_anchors(
    feat_h: usize,
    feat_w: usize,
    cfg: &DetectorConfig,
    image_w: f64,
    image_h: f64,
) -> Vec<AnchorSlot> {
    let s = cfg.stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * cfg.anchors_per_cell());
    for fy in 0..feat_h {
        for fx in 0..feat_w {
            let cx = fx as f64 * s + s / 2.0;
            let cy = fy as f64 * s + s / 2.0;
            for &scale in &cfg.anchor_scales {
                for &ratio in &cfg.anchor_ratios {
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
                    let inside = bbox.is_inside(image_w, image_h);
                    out.push(AnchorSlot { bbox, inside });
                }
            }
        }
    }
    out
}

/// Image-pixel box to feature-map cell-center coordinates. Zero-area boxes
/// are an error; valid boxes always map to a span of at least half a cell
/// (slivers at the border are widened in place).
pub fn img_to_map(bbox: &BBox, stride: usize, feat_h: usize, feat_w: usize) -> Result<MapBox> {
    if bbox.x2 <= bbox.x1 || bbox.y2 <= bbox.y1 {
        return Err(Error::Numerical(format!("degenerate RoI {bbox:?} has no area")));
    }
    let s = stride as f64;
    let raw = MapBox::new(
        bbox.x1 / s - 0.5,
        bbox.y1 / s - 0.5,
        bbox.x2 / s - 0.5,
        bbox.y2 / s - 0.5,
    );
    let clipped = raw.clip(feat_h, feat_w);
    const MIN_SPAN: f64 = 0.5;
    let widen = |lo: f64, hi: f64, n: usize| -> (f64, f64) {
        if hi - lo >= MIN_SPAN {
            return (lo, hi);
        }
        let half = MIN_SPAN / 2.0;
        let c = (0.5 * (lo + hi)).clamp(half, (n - 1) as f64 - half);
        (c - half, c + half)
    };
    let (x1, x2) = widen(clipped.x1, clipped.x2, feat_w);
    let (y1, y2) = widen(clipped.y1, clipped.y2, feat_h);
    Ok(MapBox::new(x1, y1, x2, y2))
}

fn conv_relu(input: &Var, layer: &BoundConv, stride: usize) -> Result<Var> {
    Ok(ops::relu(&ops::conv2d(input, &layer.w, &layer.b, stride, 1)?))
}

/// Four 3x3 conv+relu blocks, the first two with stride 2.
pub fn backbone_forward(tape: &Tape, image: &Tensor, base: &BoundBase, stride: usize) -> Result<Var> {
    let (h, w, _c) = image.dims3()?;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by stride {stride}"
        )));
    }
    let x = tape.constant(image.clone());
    let x = conv_relu(&x, &base.backbone[0], 2)?;
    let x = conv_relu(&x, &base.backbone[1], 2)?;
    let x = conv_relu(&x, &base.backbone[2], 1)?;
    conv_relu(&x, &base.backbone[3], 1)
}

/// The proposal head: one 3x3 mapping conv and two 1x1 siblings.
/// Returns per-slot objectness logits `[h', w', A]` and deltas `[h', w', 4A]`.
pub fn rpn_forward(feat: &Var, head: &BoundRpn) -> Result<(Var, Var)> {
    let m = ops::relu(&ops::conv2d(feat, &head.map.w, &head.map.b, 1, 1)?);
    let obj = ops::conv2d(&m, &head.obj.w, &head.obj.b, 1, 0)?;
    let reg = ops::conv2d(&m, &head.reg.w, &head.reg.b, 1, 0)?;
    Ok((obj, reg))
}

/// Rank anchors by objectness and keep proposals. NMS mode prunes overlaps
/// then keeps k; non-aggressive mode keeps the top K' untouched.
pub fn propose(
    obj_logits: &Tensor,
    deltas: &Tensor,
    anchors: &[AnchorSlot],
    mode: ProposalMode,
    cfg: &DetectorConfig,
    image_w: f64,
    image_h: f64,
) -> Vec<Roi> {
    let logits = obj_logits.values();
    let d = deltas.values();
    debug_assert_eq!(logits.len(), anchors.len());
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    let mut slot_of = Vec::with_capacity(anchors.len());
    for (i, slot) in anchors.iter().enumerate() {
        let delta = [d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]];
        let bbox = decode_box(&delta, &slot.bbox).clip(image_w, image_h);
        if bbox.area() < 1.0 {
            continue;
        }
        boxes.push(bbox);
        scores.push(smn_tensor::kernels::sigmoid(logits[i]));
        slot_of.push(i);
    }
    let keep: Vec<usize> = match mode {
        ProposalMode::NmsTopK => nms_indices(&boxes, &scores, cfg.rpn_nms_iou)
            .into_iter()
            .take(cfg.proposal_count)
            .collect(),
        ProposalMode::TopKPrime => order_desc(&scores, &boxes)
            .into_iter()
            .take(cfg.proposal_count_na)
            .collect(),
    };
    keep.into_iter()
        .map(|i| Roi { bbox: boxes[i], score: scores[i] })
        .collect()
}

pub struct ClsOutputs {
    /// Features after the second fc layer, `[R, fc_dim]`.
    pub fc7: Var,
    /// `[R, C+1]` class logits, background at index 0.
    pub cls: Var,
    /// `[R, 4C]` per-class box deltas.
    pub reg: Var,
}

fn fc_relu(x: &Var, fc: &BoundFc) -> Result<Var> {
    Ok(ops::relu(&ops::fully_connected(x, &fc.w, &fc.b)?))
}

/// Max RoI pool to a square grid, then two fc layers and the two heads.
pub fn classify_rois(
    feat: &Var,
    rois: &[BBox],
    base: &BoundBase,
    cfg: &DetectorConfig,
) -> Result<ClsOutputs> {
    if rois.is_empty() {
        return Err(Error::Numerical("classify_rois on empty RoI list".into()));
    }
    let (fh, fw, fc) = feat.value().dims3()?;
    let mut map_boxes = Vec::with_capacity(rois.len());
    for r in rois {
        map_boxes.push(img_to_map(r, cfg.stride, fh, fw)?);
    }
    let p = cfg.pool_size;
    let pooled = ops::roi_pool_max_batch(feat, &map_boxes, p, p)?;
    let flat = ops::reshape(&pooled, &[rois.len(), p * p * fc])?;
    let h1 = fc_relu(&flat, &base.fc1)?;
    let fc7 = fc_relu(&h1, &base.fc2)?;
    let cls = ops::fully_connected(&fc7, &base.cls.w, &base.cls.b)?;
    let reg = ops::fully_connected(&fc7, &base.reg.w, &base.reg.b)?;
    Ok(ClsOutputs { fc7, cls, reg })
}

/// Greedy suppression within each class independently; classes never
/// interact. Output is globally re-ranked by score.
pub fn nms_per_class(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::new();
    let max_class = detections.iter().map(|d| d.class_id).max().unwrap_or(0);
    for class in 0..=max_class {
        let members: Vec<&Detection> = detections.iter().filter(|d| d.class_id == class).collect();
        if members.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = members.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = members.iter().map(|d| d.score).collect();
        for i in nms_indices(&boxes, &scores, iou_threshold) {
            out.push(*members[i]);
        }
    }
    let boxes: Vec<BBox> = out.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
    order_desc(&scores, &boxes).into_iter().map(|i| out[i]).collect()
}

/// Decode the class-specific box for one RoI from a flat `[4C]` delta row.
pub fn class_box(reg_row: &[f64], class_id: usize, roi: &BBox, image_w: f64, image_h: f64) -> BBox {
    let d = [
        reg_row[4 * class_id],
        reg_row[4 * class_id + 1],
        reg_row[4 * class_id + 2],
        reg_row[4 * class_id + 3],
    ];
    decode_box(&d, roi).clip(image_w, image_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rng;
    use crate::weights::{BaseWeights, VarRegistry};

    fn toy() -> (RunConfig, BaseWeights) {
        let cfg = RunConfig::toy();
        let mut r = rng::stream(3);
        let w = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut r);
        (cfg, w)
    }

    #[test]
    fn backbone_shape_and_zero_image() {
        let (cfg, w) = toy();
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let img = Tensor::zeros(&[64, 64, 3]);
        let feat = backbone_forward(&tape, &img, &bound, cfg.detector.stride).unwrap();
        assert_eq!(feat.value().shape(), &[16, 16, cfg.detector.backbone_channels[3]]);
        // Zero image with zero biases -> zero feature map.
        assert!(feat.value().values().iter().all(|&v| v == 0.0));

        let bad = Tensor::zeros(&[63, 64, 3]);
        assert!(backbone_forward(&tape, &bad, &bound, cfg.detector.stride).is_err());
    }

    #[test]
    fn anchor_count_and_squareness() {
        let (cfg, _) = toy();
        let anchors = build_anchors(16, 16, &cfg.detector, 64.0, 64.0);
        assert_eq!(anchors.len(), 16 * 16 * 6);

        let mut square_cfg = cfg.detector.clone();
        square_cfg.anchor_ratios = vec![1.0];
        let sq = build_anchors(4, 4, &square_cfg, 64.0, 64.0);
        for a in &sq {
            assert!((a.bbox.width() - a.bbox.height()).abs() < 1e-9);
        }

        // 1x1 map, single scale, ratio 1: one centered square anchor.
        let mut single = cfg.detector.clone();
        single.anchor_scales = vec![8.0];
        single.anchor_ratios = vec![1.0];
        single.stride = 64;
        let one = build_anchors(1, 1, &single, 64.0, 64.0);
        assert_eq!(one.len(), 1);
        let (cx, cy) = one[0].bbox.center();
        assert_eq!((cx, cy), (32.0, 32.0));
    }

    #[test]
    fn rpn_output_covers_every_anchor_slot() {
        let (cfg, w) = toy();
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let img = Tensor::full(&[64, 64, 3], 0.3);
        let feat = backbone_forward(&tape, &img, &bound, cfg.detector.stride).unwrap();
        let (obj, reg_map) = rpn_forward(&feat, &bound.rpn).unwrap();
        let anchors = build_anchors(16, 16, &cfg.detector, 64.0, 64.0);
        assert_eq!(obj.value().len(), anchors.len());
        assert_eq!(reg_map.value().len(), anchors.len() * 4);
    }

    #[test]
    fn propose_modes() {
        let (cfg, _) = toy();
        let anchors = build_anchors(4, 4, &cfg.detector, 64.0, 64.0);
        let k = anchors.len();
        let mut r = rng::stream(7);
        use rand::Rng;
        let logits = Tensor::from_vec(&[k], (0..k).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let deltas = Tensor::zeros(&[k * 4]);
        let na = propose(&logits, &deltas, &anchors, ProposalMode::TopKPrime, &cfg.detector, 64.0, 64.0);
        // Non-aggressive with K' >= anchor count passes everything, sorted.
        assert!(na.len() <= cfg.detector.proposal_count_na);
        for pair in na.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        let nms = propose(&logits, &deltas, &anchors, ProposalMode::NmsTopK, &cfg.detector, 64.0, 64.0);
        assert!(nms.len() <= cfg.detector.proposal_count);
        // Every NMS-mode survivor appears in the non-aggressive list.
        for roi in &nms {
            assert!(na.iter().any(|r| r.bbox == roi.bbox));
        }
    }

    #[test]
    fn per_class_nms_never_crosses_classes() {
        let a = Detection { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), class_id: 0, score: 0.9, iteration: 0 };
        let b = Detection { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), class_id: 1, score: 0.8, iteration: 0 };
        let c = Detection { bbox: BBox::new(1.0, 1.0, 10.0, 10.0), class_id: 0, score: 0.7, iteration: 0 };
        let kept = nms_per_class(&[a, b, c], 0.5);
        // The identical-box pair survives because classes differ; the same-class
        // overlap is suppressed.
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().any(|d| d.class_id == 1));

        let dup = nms_per_class(&[a, a], 0.5);
        assert_eq!(dup.len(), 1);
    }

    #[test]
    fn classification_scores_are_normalized_and_deterministic() {
        let (cfg, w) = toy();
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let mut r = rng::stream(9);
        use rand::Rng;
        let img = Tensor::from_vec(&[64, 64, 3], (0..64 * 64 * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let feat = backbone_forward(&tape, &img, &bound, cfg.detector.stride).unwrap();
        let rois = vec![BBox::new(4.0, 4.0, 28.0, 30.0), BBox::new(10.0, 20.0, 40.0, 44.0), BBox::new(4.0, 4.0, 28.0, 30.0)];
        let out = classify_rois(&feat, &rois, &bound, &cfg.detector).unwrap();
        let probs = ops::softmax_last(&out.cls);
        let c1 = cfg.class_count() + 1;
        for row in probs.value().values().chunks(c1) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // Duplicate RoIs produce identical rows.
        let v = out.cls.value().values();
        assert_eq!(&v[0..c1], &v[2 * c1..3 * c1]);

        let degenerate = vec![BBox::new(5.0, 5.0, 5.0, 9.0)];
        assert!(classify_rois(&feat, &degenerate, &bound, &cfg.detector).is_err());
    }
}
