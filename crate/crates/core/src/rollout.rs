//! Sequential inference: score, select the most confident foreground box,
//! update the memory, repeat. Includes hardmax/softmax emission and the
//! hybrid schedule where plain detector output seeds the memory before the
//! fused loop takes over.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::config::{DedupDesign, Emission, ProposalMode, RolloutConfig, RunConfig};
use crate::context::{context_forward, fuse_head, memory_cls_heads, memory_rpn_heads};
use crate::detector::{
    backbone_forward, build_anchors, class_box, classify_rois, nms_per_class, order_desc, propose,
    rpn_forward, Detection, Roi,
};
use crate::error::{Error, Result};
use crate::memory::{init_memory, memory_update};
use crate::weights::{BaseWeights, BoundBase, BoundSmn, SmnWeights, VarRegistry};
use smn_tensor::{ops, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub selected_box: BBox,
    /// Post-regression box of the argmax foreground class; addresses the memory.
    pub memory_box: BBox,
    /// Full fused class distribution of the selected RoI (background first).
    pub scores: Vec<f64>,
    pub base_logits: Vec<f64>,
    pub memory_logits: Vec<f64>,
    pub fused_logits: Vec<f64>,
    pub emitted: Vec<Detection>,
    pub memory_digest: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub iterations: Vec<IterationRecord>,
    pub detections: Vec<Detection>,
}

impl RolloutTrace {
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for it in &self.iterations {
            serde_json::to_writer(&mut *w, it)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Argmax over RoIs of the max foreground probability, ties broken by
/// score then lexicographically smaller box.
pub fn select_next(probs: &Tensor, rois: &[Roi]) -> Result<(usize, f64)> {
    if rois.is_empty() {
        return Err(Error::Numerical("select_next on empty candidate set".into()));
    }
    let (rows, c1) = probs.dims2()?;
    debug_assert_eq!(rows, rois.len());
    let scores: Vec<f64> = (0..rows)
        .map(|r| {
            probs.values()[r * c1 + 1..(r + 1) * c1]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
    let best = order_desc(&scores, &boxes)[0];
    Ok((best, scores[best]))
}

/// Detections emitted for one selected RoI. Hardmax: the argmax class only;
/// softmax: every foreground class above the emission floor, each with its
/// own class-specific regressed box.
pub fn emit(
    probs_row: &[f64],
    reg_row: &[f64],
    roi: &BBox,
    rcfg: &RolloutConfig,
    iteration: usize,
    image_w: f64,
    image_h: f64,
) -> Vec<Detection> {
    let c1 = probs_row.len();
    match rcfg.emission {
        Emission::Hardmax => {
            let argmax = (0..c1)
                .max_by(|&a, &b| probs_row[a].partial_cmp(&probs_row[b]).unwrap().then(b.cmp(&a)))
                .unwrap();
            if argmax == 0 || probs_row[argmax] < rcfg.select_threshold {
                return Vec::new();
            }
            let class_id = argmax - 1;
            vec![Detection {
                bbox: class_box(reg_row, class_id, roi, image_w, image_h),
                class_id,
                score: probs_row[argmax],
                iteration,
            }]
        }
        Emission::Softmax => (1..c1)
            .filter(|&c| probs_row[c] >= rcfg.softmax_floor)
            .map(|c| Detection {
                bbox: class_box(reg_row, c - 1, roi, image_w, image_h),
                class_id: c - 1,
                score: probs_row[c],
                iteration,
            })
            .collect(),
    }
}

/// The argmax foreground class' regressed box: this is what addresses the
/// memory, regardless of what gets emitted.
pub fn memory_box_for(probs_row: &[f64], reg_row: &[f64], roi: &BBox, image_w: f64, image_h: f64) -> (BBox, usize) {
    let c1 = probs_row.len();
    let best_fg = (1..c1)
        .max_by(|&a, &b| probs_row[a].partial_cmp(&probs_row[b]).unwrap().then(b.cmp(&a)))
        .unwrap();
    let class_id = best_fg - 1;
    (class_box(reg_row, class_id, roi, image_w, image_h), class_id)
}

/// Everything the per-image loop needs that does not change across
/// iterations.
pub struct ImageContext {
    pub tape: Tape,
    pub bound_base: BoundBase,
    pub bound_smn: Option<BoundSmn>,
    pub feat: Var,
    pub base_obj: Var,
    pub base_reg: Var,
    pub anchors: Vec<crate::detector::AnchorSlot>,
    pub image_w: f64,
    pub image_h: f64,
}

pub fn prepare_image(
    cfg: &RunConfig,
    base: &BaseWeights,
    smn: Option<&SmnWeights>,
    image: &Tensor,
) -> Result<ImageContext> {
    let tape = Tape::new();
    let mut reg = VarRegistry::new();
    let bound_base = base.bind(&tape, false, &mut reg);
    let bound_smn = smn.map(|s| s.bind(&tape, false, &mut reg));
    let feat = backbone_forward(&tape, image, &bound_base, cfg.detector.stride)?;
    let (base_obj, base_reg) = rpn_forward(&feat, &bound_base.rpn)?;
    let (fh, fw, _) = feat.value().dims3()?;
    let (h, w, _) = image.dims3()?;
    let anchors = build_anchors(fh, fw, &cfg.detector, w as f64, h as f64);
    Ok(ImageContext {
        tape,
        bound_base,
        bound_smn,
        feat,
        base_obj,
        base_reg,
        anchors,
        image_w: w as f64,
        image_h: h as f64,
    })
}

/// Fused RPN maps for one iteration. `mconv` present means the memory
/// branch contributes; absent reproduces the plain detector bit-for-bit.
pub fn fused_rpn_maps(
    ctx: &ImageContext,
    mconv: Option<&Var>,
    branch: Option<&crate::weights::BoundBranch>,
    iteration: usize,
    design: DedupDesign,
) -> Result<(crate::context::FusedHead, crate::context::FusedHead)> {
    match (mconv, branch) {
        (Some(m), Some(b)) => {
            let (mobj, mreg) = memory_rpn_heads(m, b)?;
            Ok((
                fuse_head(&ctx.base_obj, Some(&mobj), iteration, design)?,
                fuse_head(&ctx.base_reg, Some(&mreg), iteration, design)?,
            ))
        }
        _ => Ok((
            fuse_head(&ctx.base_obj, None, iteration, design)?,
            fuse_head(&ctx.base_reg, None, iteration, design)?,
        )),
    }
}

pub struct FusedClassification {
    pub cls: crate::context::FusedHead,
    pub reg: crate::context::FusedHead,
    pub base_fc7: Var,
}

pub fn fused_classification(
    ctx: &ImageContext,
    mconv: Option<&Var>,
    branch: Option<&crate::weights::BoundBranch>,
    rois: &[BBox],
    iteration: usize,
    design: DedupDesign,
    det: &crate::config::DetectorConfig,
) -> Result<FusedClassification> {
    let base_out = classify_rois(&ctx.feat, rois, &ctx.bound_base, det)?;
    match (mconv, branch) {
        (Some(m), Some(b)) => {
            let mem = memory_cls_heads(m, rois, &base_out.fc7, b, det)?;
            Ok(FusedClassification {
                cls: fuse_head(&base_out.cls, Some(&mem.cls), iteration, design)?,
                reg: fuse_head(&base_out.reg, Some(&mem.reg), iteration, design)?,
                base_fc7: base_out.fc7,
            })
        }
        _ => Ok(FusedClassification {
            cls: fuse_head(&base_out.cls, None, iteration, design)?,
            reg: fuse_head(&base_out.reg, None, iteration, design)?,
            base_fc7: base_out.fc7,
        }),
    }
}

/// One single-shot pass: propose, classify, emit per RoI, per-class NMS.
/// With a context branch the pass is the MLP ablation (context over the
/// base features, fused heads); without one it is the plain detector.
/// Also returns each detection's class distribution so hybrid mode can
/// feed the memory.
pub fn single_pass(
    cfg: &RunConfig,
    ctx: &ImageContext,
    branch: Option<&crate::weights::BoundBranch>,
    emission: Emission,
    proposal_mode: ProposalMode,
) -> Result<Vec<(Detection, Vec<f64>)>> {
    let design = cfg.context.design;
    let mconv = match branch {
        Some(b) => Some(context_forward(&ctx.feat, b)?),
        None => None,
    };
    let (obj, rpn_reg) = fused_rpn_maps(&ctx, mconv.as_ref(), branch, 1, design)?;
    let rois = propose(
        obj.fused.value(),
        rpn_reg.fused.value(),
        &ctx.anchors,
        proposal_mode,
        &cfg.detector,
        ctx.image_w,
        ctx.image_h,
    );
    if rois.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
    let fused = fused_classification(&ctx, mconv.as_ref(), branch, &boxes, 1, design, &cfg.detector)?;
    let probs = ops::softmax_last(&fused.cls.fused);
    let c1 = cfg.class_count() + 1;
    let mut dets: Vec<(Detection, Vec<f64>)> = Vec::new();
    for (r, roi) in boxes.iter().enumerate() {
        let prow = &probs.value().values()[r * c1..(r + 1) * c1];
        let rrow = &fused.reg.fused.value().values()
            [r * 4 * cfg.class_count()..(r + 1) * 4 * cfg.class_count()];
        let emitted: Vec<Detection> = match emission {
            Emission::Hardmax => {
                let argmax = (0..c1)
                    .max_by(|&a, &b| prow[a].partial_cmp(&prow[b]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                if argmax == 0 || prow[argmax] < cfg.eval.score_floor {
                    Vec::new()
                } else {
                    vec![Detection {
                        bbox: class_box(rrow, argmax - 1, roi, ctx.image_w, ctx.image_h),
                        class_id: argmax - 1,
                        score: prow[argmax],
                        iteration: 0,
                    }]
                }
            }
            Emission::Softmax => (1..c1)
                .filter(|&c| prow[c] >= cfg.eval.score_floor)
                .map(|c| Detection {
                    bbox: class_box(rrow, c - 1, roi, ctx.image_w, ctx.image_h),
                    class_id: c - 1,
                    score: prow[c],
                    iteration: 0,
                })
                .collect(),
        };
        for d in emitted {
            dets.push((d, prow.to_vec()));
        }
    }
    // Per-class NMS, then global rank order.
    let all: Vec<Detection> = dets.iter().map(|(d, _)| *d).collect();
    let kept = nms_per_class(&all, cfg.detector.final_nms_iou);
    let mut out_dets = Vec::with_capacity(kept.len());
    for k in kept {
        let idx = dets
            .iter()
            .position(|(d, _)| d == &k)
            .expect("kept detection came from the candidate list");
        out_dets.push((k, dets[idx].1.clone()));
    }
    Ok(out_dets)
}

/// Plain-detector single pass (no context branch).
pub fn base_single_pass(
    cfg: &RunConfig,
    ctx: &ImageContext,
    emission: Emission,
    proposal_mode: ProposalMode,
) -> Result<Vec<(Detection, Vec<f64>)>> {
    single_pass(cfg, ctx, None, emission, proposal_mode)
}

/// Full sequential inference; `n1` plain iterations feed the memory without
/// fused output, then `n2` memory-augmented iterations.
pub fn hybrid_detect(
    cfg: &RunConfig,
    base: &BaseWeights,
    smn: &SmnWeights,
    image: &Tensor,
    rcfg: &RolloutConfig,
) -> Result<RolloutTrace> {
    let ctx = prepare_image(cfg, base, Some(smn), image)?;
    let smn_bound = ctx.bound_smn.as_ref().expect("memory weights bound");
    let (fh, fw, _) = ctx.feat.value().dims3()?;
    let mut memory = init_memory(&smn_bound.prior, fh, fw)?;
    let mut trace = RolloutTrace::default();
    let design = cfg.context.design;
    let c1 = cfg.class_count() + 1;

    // Phase 1: plain detector detections, per-class NMS order, written into
    // the memory without producing fused output.
    if rcfg.n1 > 0 {
        let ranked = base_single_pass(cfg, &ctx, rcfg.emission, rcfg.proposal_mode)?;
        for (det, prow) in ranked.into_iter().take(rcfg.n1) {
            let scores = ctx.tape.constant(Tensor::from_vec(&[c1], prow.clone()).unwrap());
            memory = memory_update(&memory, &det.bbox, &ctx.feat, &scores, smn_bound, cfg.detector.stride)?;
            let iteration = trace.iterations.len();
            trace.iterations.push(IterationRecord {
                iteration,
                selected_box: det.bbox,
                memory_box: det.bbox,
                scores: prow,
                base_logits: Vec::new(),
                memory_logits: Vec::new(),
                fused_logits: Vec::new(),
                emitted: vec![Detection { iteration, ..det }],
                memory_digest: memory.digest(),
            });
        }
    }

    // Phase 2: the fused loop. Iteration 0 without a warm memory is the
    // plain detector bit-for-bit (two-stage design).
    for step in 0..rcfg.n2 {
        let iteration = trace.iterations.len();
        let memory_live = iteration >= 1 || design != DedupDesign::TwoStage;
        let mconv = if memory_live {
            Some(context_forward(&memory.grid, &smn_bound.branch)?)
        } else {
            None
        };
        let _ = step;
        let (obj, rpn_reg) = fused_rpn_maps(&ctx, mconv.as_ref(), Some(&smn_bound.branch), iteration, design)?;
        let rois = propose(
            obj.fused.value(),
            rpn_reg.fused.value(),
            &ctx.anchors,
            rcfg.proposal_mode,
            &cfg.detector,
            ctx.image_w,
            ctx.image_h,
        );
        if rois.is_empty() {
            break;
        }
        let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
        let fused = fused_classification(&ctx, mconv.as_ref(), Some(&smn_bound.branch), &boxes, iteration, design, &cfg.detector)?;
        let probs = ops::softmax_last(&fused.cls.fused);
        let (sel, _) = select_next(probs.value(), &rois)?;
        let prow = probs.value().values()[sel * c1..(sel + 1) * c1].to_vec();
        let rrow =
            fused.reg.fused.value().values()[sel * 4 * cfg.class_count()..(sel + 1) * 4 * cfg.class_count()].to_vec();
        let emitted = emit(&prow, &rrow, &boxes[sel], rcfg, iteration, ctx.image_w, ctx.image_h);
        let (mem_box, _mem_class) = memory_box_for(&prow, &rrow, &boxes[sel], ctx.image_w, ctx.image_h);

        let scores_var = ops::slice_flat(&probs, sel * c1, c1)?;
        memory = memory_update(&memory, &mem_box, &ctx.feat, &scores_var, smn_bound, cfg.detector.stride)?;

        let base_row = fused.cls.base.value().values()[sel * c1..(sel + 1) * c1].to_vec();
        let mem_row = fused
            .cls
            .memory
            .as_ref()
            .map(|m| m.value().values()[sel * c1..(sel + 1) * c1].to_vec())
            .unwrap_or_else(|| vec![0.0; c1]);
        let fused_row = fused.cls.fused.value().values()[sel * c1..(sel + 1) * c1].to_vec();
        trace.iterations.push(IterationRecord {
            iteration,
            selected_box: boxes[sel],
            memory_box: mem_box,
            scores: prow,
            base_logits: base_row,
            memory_logits: mem_row,
            fused_logits: fused_row,
            emitted: emitted.clone(),
            memory_digest: memory.digest(),
        });
        trace.detections.extend(emitted);
    }

    // Phase-1 detections join the final list ahead of phase 2.
    let mut all: Vec<Detection> = trace
        .iterations
        .iter()
        .filter(|r| r.fused_logits.is_empty())
        .flat_map(|r| r.emitted.clone())
        .collect();
    all.extend(trace.detections.drain(..));
    trace.detections = match rcfg.tail_nms_iou {
        Some(iou) => nms_per_class(&all, iou),
        None => all,
    };
    Ok(trace)
}

/// Plain sequential inference: every iteration runs the fused loop.
pub fn detect_sequence(
    cfg: &RunConfig,
    base: &BaseWeights,
    smn: &SmnWeights,
    image: &Tensor,
    rcfg: &RolloutConfig,
) -> Result<RolloutTrace> {
    let mut pure = rcfg.clone();
    pure.n2 += pure.n1;
    pure.n1 = 0;
    hybrid_detect(cfg, base, smn, image, &pure)
}

/// Re-apply the recorded memory updates; the final digest must reproduce.
pub fn replay_memory_digest(
    cfg: &RunConfig,
    base: &BaseWeights,
    smn: &SmnWeights,
    image: &Tensor,
    trace: &RolloutTrace,
) -> Result<String> {
    if let Some(last) = replay_memory_grids(cfg, base, smn, image, trace)?.last() {
        return Ok(last.1.clone());
    }
    // Empty trace: the digest of the initial memory.
    let ctx = prepare_image(cfg, base, Some(smn), image)?;
    let smn_bound = ctx.bound_smn.as_ref().expect("memory weights bound");
    let (fh, fw, _) = ctx.feat.value().dims3()?;
    Ok(init_memory(&smn_bound.prior, fh, fw)?.digest())
}

/// Memory grid after every recorded update, with its digest.
pub fn replay_memory_grids(
    cfg: &RunConfig,
    base: &BaseWeights,
    smn: &SmnWeights,
    image: &Tensor,
    trace: &RolloutTrace,
) -> Result<Vec<(Tensor, String)>> {
    let ctx = prepare_image(cfg, base, Some(smn), image)?;
    let smn_bound = ctx.bound_smn.as_ref().expect("memory weights bound");
    let (fh, fw, _) = ctx.feat.value().dims3()?;
    let mut memory = init_memory(&smn_bound.prior, fh, fw)?;
    let c1 = cfg.class_count() + 1;
    let mut out = Vec::with_capacity(trace.iterations.len());
    for rec in &trace.iterations {
        let scores = ctx.tape.constant(Tensor::from_vec(&[c1], rec.scores.clone()).unwrap());
        memory = memory_update(&memory, &rec.memory_box, &ctx.feat, &scores, smn_bound, cfg.detector.stride)?;
        out.push((memory.grid.value().clone(), memory.digest()));
    }
    Ok(out)
}
