//! Stage-wise training. The base detector trains first with standard joint
//! RPN + classification losses. The memory stage then unrolls the sequential
//! loop, scores every iteration against iteration-aware targets (retired
//! instances flip to suppressed), adds the reconstruction loss, and
//! backpropagates through the whole chain with the base weights frozen.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::boxes::{encode_box, iou, BBox};
use crate::config::{DedupDesign, RunConfig};
use crate::context::{context_forward, reconstruction_heads};
use crate::detector::{backbone_forward, build_anchors, propose, rpn_forward, AnchorSlot, Roi};
use crate::error::{Error, Result};
use crate::memory::{init_memory, memory_update};
use crate::rollout::{fused_classification, fused_rpn_maps, memory_box_for, select_next, ImageContext};
use crate::scene::{Instance, SceneRecord};
use crate::targets::{
    assign_anchor_labels, assign_roi_labels, sample_with_quotas, AnchorLabel, RoiLabel,
};
use crate::weights::{BaseWeights, MlpWeights, NamedParams, SmnWeights, VarRegistry};
use smn_tensor::{ops, Gradients, Tape, Tensor, Var};

const RPN_REG_BETA: f64 = 1.0 / 9.0;
const CLS_REG_BETA: f64 = 1.0;
const FG_IOU: f64 = 0.5;

// ------------------------------------------------------------- optimizer

/// SGD with momentum and global-norm gradient clipping. Velocities are
/// keyed by parameter name so state survives checkpointing.
pub struct Sgd {
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, clip_norm: f64) -> Sgd {
        Sgd { momentum, clip_norm, velocity: BTreeMap::new() }
    }

    /// Momentum update for every registered parameter that received a
    /// gradient; returns the new parameter values.
    pub fn apply(&mut self, lr: f64, registry: &VarRegistry, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut gvecs: Vec<(&str, &Var, Tensor)> = Vec::with_capacity(registry.entries.len());
        let mut sq_norm = 0.0;
        for (name, var) in &registry.entries {
            let g = grads.wrt(var);
            sq_norm += g.values().iter().map(|v| v * v).sum::<f64>();
            gvecs.push((name, var, g));
        }
        let norm = sq_norm.sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let mut updates = BTreeMap::new();
        for (name, var, g) in gvecs {
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut new_vals = var.value().values().to_vec();
            for ((v, g), w) in vel.iter_mut().zip(g.values()).zip(new_vals.iter_mut()) {
                *v = self.momentum * *v + g * scale;
                *w -= lr * *v;
            }
            updates.insert(name.to_string(), Tensor::from_vec(var.value().shape(), new_vals).unwrap());
        }
        updates
    }

    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .map(|(k, v)| (format!("opt.{k}"), Tensor::from_vec(&[v.len().max(1)], if v.is_empty() { vec![0.0] } else { v.clone() }).unwrap()))
            .collect()
    }

    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor>) {
        for (k, v) in entries {
            self.velocity.insert(k.clone(), v.values().to_vec());
        }
    }
}

fn install(updates: &BTreeMap<String, Tensor>, target: &mut dyn NamedParams) {
    target.visit_params(&mut |name, t| {
        if let Some(new) = updates.get(&name) {
            *t = new.clone();
        }
    });
}

// ---------------------------------------------------------------- logging

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub cls: f64,
    pub cls_reg: f64,
    pub recon: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub cls: f64,
    pub cls_reg: f64,
    pub recon: f64,
    pub total: f64,
    pub seconds: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,lr,rpn_cls,rpn_reg,cls,cls_reg,recon,total,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            r.step, r.lr, r.rpn_cls, r.rpn_reg, r.cls, r.cls_reg, r.recon, r.total, r.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn lr_at(cfg: &RunConfig, step: usize) -> f64 {
    if step < cfg.train.lr_drop_step {
        cfg.train.lr
    } else {
        cfg.train.lr_after
    }
}

/// Periodic checkpoint writer used by the training loops.
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub digest: [u8; 32],
    pub prefix: String,
    pub every: usize,
}

impl CheckpointSink {
    fn maybe(&self, step: usize, weights: &mut dyn NamedParams, opt: Option<&Sgd>) -> Result<()> {
        if self.every == 0 || (step + 1) % self.every != 0 {
            return Ok(());
        }
        let mut entries = weights.named();
        if let Some(opt) = opt {
            entries.extend(opt.state_entries());
        }
        let path = self.dir.join(format!("{}_step{:06}.smnc", self.prefix, step + 1));
        crate::checkpoint::save(&path, self.digest, &entries)
    }
}

// ------------------------------------------------------------ loss pieces

fn reg_slot_indices(slot: usize, anchors_per_cell: usize) -> [usize; 4] {
    let cell = slot / anchors_per_cell;
    let a = slot % anchors_per_cell;
    let base = cell * 4 * anchors_per_cell + a * 4;
    [base, base + 1, base + 2, base + 3]
}

/// Objectness BCE on sampled anchor slots plus smooth-L1 on the sampled
/// positives' deltas.
fn rpn_losses(
    tape: &Tape,
    obj: &Var,
    regm: &Var,
    anchors: &[AnchorSlot],
    labels: &[AnchorLabel],
    sampled: &[usize],
    gts: &[Instance],
    anchors_per_cell: usize,
) -> Result<(Var, Var)> {
    let mut targets = Vec::with_capacity(sampled.len());
    for &s in sampled {
        targets.push(match labels[s] {
            AnchorLabel::Positive { .. } => 1.0,
            _ => 0.0,
        });
    }
    let picked = ops::gather_flat(obj, sampled)?;
    let cls = if sampled.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        ops::bce_logits(&picked, &targets)?
    };

    let mut pos_rows: Vec<usize> = Vec::new();
    let mut reg_targets: Vec<f64> = Vec::new();
    let mut reg_indices: Vec<usize> = Vec::new();
    for &s in sampled {
        if let AnchorLabel::Positive { gt } = labels[s] {
            pos_rows.push(s);
            let enc = encode_box(&gts[gt].bbox, &anchors[s].bbox);
            reg_targets.extend_from_slice(&enc);
            reg_indices.extend_from_slice(&reg_slot_indices(s, anchors_per_cell));
        }
    }
    let reg = if pos_rows.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let pred = ops::reshape(&ops::gather_flat(regm, &reg_indices)?, &[pos_rows.len(), 4])?;
        let target = Tensor::from_vec(&[pos_rows.len(), 4], reg_targets).unwrap();
        ops::smooth_l1(&pred, &target, RPN_REG_BETA)?
    };
    Ok((cls, reg))
}

/// Cross-entropy over sampled RoIs (background index 0) plus class-specific
/// smooth-L1 on the positives.
fn cls_losses(
    tape: &Tape,
    cls: &Var,
    regv: &Var,
    boxes: &[BBox],
    labels: &[RoiLabel],
    gts: &[Instance],
    classes: usize,
) -> Result<(Var, Var)> {
    let targets: Vec<Option<usize>> = labels
        .iter()
        .map(|l| match l {
            RoiLabel::Positive { class_id, .. } => Some(class_id + 1),
            RoiLabel::Flipped | RoiLabel::Negative => Some(0),
        })
        .collect();
    let ce = ops::softmax_ce_rows(cls, &targets)?;

    let mut reg_indices = Vec::new();
    let mut reg_targets = Vec::new();
    let mut rows = 0usize;
    for (r, label) in labels.iter().enumerate() {
        if let RoiLabel::Positive { class_id, gt } = label {
            let base = r * 4 * classes + class_id * 4;
            reg_indices.extend_from_slice(&[base, base + 1, base + 2, base + 3]);
            reg_targets.extend_from_slice(&encode_box(&gts[*gt].bbox, &boxes[r]));
            rows += 1;
        }
    }
    let reg = if rows == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let pred = ops::reshape(&ops::gather_flat(regv, &reg_indices)?, &[rows, 4])?;
        let target = Tensor::from_vec(&[rows, 4], reg_targets).unwrap();
        ops::smooth_l1(&pred, &target, CLS_REG_BETA)?
    };
    Ok((ce, reg))
}

fn split_anchor_strata(labels: &[AnchorLabel]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut flip = Vec::new();
    let mut neg = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive { .. } => pos.push(i),
            AnchorLabel::Flipped => flip.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Excluded => {}
        }
    }
    (pos, flip, neg)
}

fn split_roi_strata(labels: &[RoiLabel]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut flip = Vec::new();
    let mut neg = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            RoiLabel::Positive { .. } => pos.push(i),
            RoiLabel::Flipped => flip.push(i),
            RoiLabel::Negative => neg.push(i),
        }
    }
    (pos, flip, neg)
}

fn check_finite(step: usize, breakdown: &LossBreakdown) -> Result<()> {
    if breakdown.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite loss at step {step}: {breakdown:?}"
        )))
    }
}

// ----------------------------------------------------------- base stage

/// One image, one optimizer step of standard two-stage training.
pub fn base_step(
    cfg: &RunConfig,
    record: &SceneRecord,
    weights: &mut BaseWeights,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let mut registry = VarRegistry::new();
    let bound = weights.bind(&tape, true, &mut registry);
    let feat = backbone_forward(&tape, &record.image, &bound, cfg.detector.stride)?;
    let (obj, regm) = rpn_forward(&feat, &bound.rpn)?;
    let (fh, fw, _) = feat.value().dims3()?;
    let (img_h, img_w, _) = record.image.dims3()?;
    let anchors = build_anchors(fh, fw, &cfg.detector, img_w as f64, img_h as f64);
    let gts = &record.instances;
    let retired = vec![false; gts.len()];

    let anchor_labels = assign_anchor_labels(&anchors, gts, &retired);
    let (apos, _aflip, aneg) = split_anchor_strata(&anchor_labels);
    let sampled_anchors = sample_with_quotas(&apos, &[], &aneg, [1, 0, 1], cfg.train.rpn_batch, rng);
    let (rpn_cls, rpn_reg) = rpn_losses(
        &tape, &obj, &regm, &anchors, &anchor_labels, &sampled_anchors, gts,
        cfg.detector.anchors_per_cell(),
    )?;

    let proposals = propose(
        obj.value(), regm.value(), &anchors, crate::config::ProposalMode::NmsTopK,
        &cfg.detector, img_w as f64, img_h as f64,
    );
    let mut candidates: Vec<BBox> = proposals.iter().map(|r| r.bbox).collect();
    candidates.extend(gts.iter().map(|g| g.bbox));
    let roi_labels = assign_roi_labels(&candidates, gts, &retired, FG_IOU);
    let (rpos, _rflip, rneg) = split_roi_strata(&roi_labels);
    let fg_quota = ((cfg.train.roi_batch as f64) * cfg.train.base_fg_frac).round() as usize;
    let bg_quota = cfg.train.roi_batch - fg_quota;
    let sampled = sample_with_quotas(&rpos, &[], &rneg, [fg_quota, 0, bg_quota], cfg.train.roi_batch, rng);
    let boxes: Vec<BBox> = sampled.iter().map(|&i| candidates[i]).collect();
    let labels: Vec<RoiLabel> = sampled.iter().map(|&i| roi_labels[i]).collect();

    let (cls, cls_reg) = if boxes.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let out = crate::detector::classify_rois(&feat, &boxes, &bound, &cfg.detector)?;
        cls_losses(&tape, &out.cls, &out.reg, &boxes, &labels, gts, cfg.class_count())?
    };

    let w = cfg.train.reg_weight;
    let total = ops::add_n(&[
        rpn_cls.clone(),
        ops::scale(&rpn_reg, w),
        cls.clone(),
        ops::scale(&cls_reg, w),
    ])?;
    let breakdown = LossBreakdown {
        rpn_cls: rpn_cls.value().item(),
        rpn_reg: rpn_reg.value().item(),
        cls: cls.value().item(),
        cls_reg: cls_reg.value().item(),
        recon: 0.0,
        total: total.value().item(),
    };
    let grads = tape.backward(&total)?;
    let updates = opt.apply(lr, &registry, &grads);
    install(&updates, weights);
    Ok(breakdown)
}

pub fn train_base(
    cfg: &RunConfig,
    dataset: &[SceneRecord],
    rng: &mut ChaCha8Rng,
    sink: Option<&CheckpointSink>,
) -> Result<(BaseWeights, Vec<LogRow>)> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut weights = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, rng);
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.clip_norm);
    let mut rows = Vec::with_capacity(cfg.train.base_steps);
    let started = Instant::now();
    for step in 0..cfg.train.base_steps {
        let lr = lr_at(cfg, step);
        let idx = rng.gen_range(0..dataset.len());
        let b = base_step(cfg, &dataset[idx], &mut weights, &mut opt, lr, rng)?;
        check_finite(step, &b)?;
        rows.push(LogRow {
            step, lr,
            rpn_cls: b.rpn_cls, rpn_reg: b.rpn_reg, cls: b.cls, cls_reg: b.cls_reg,
            recon: b.recon, total: b.total,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(s) = sink {
            s.maybe(step, &mut weights, Some(&opt))?;
        }
    }
    Ok((weights, rows))
}

// ---------------------------------------------------------- memory stage

/// One image, one optimizer step of unrolled memory training.
#[allow(clippy::too_many_arguments)]
pub fn smn_step(
    cfg: &RunConfig,
    record: &SceneRecord,
    base: &mut BaseWeights,
    smn: &mut SmnWeights,
    n_unroll: usize,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let design = cfg.context.design;
    let base_trainable = design != DedupDesign::TwoStage;
    let tape = Tape::new();
    let mut registry = VarRegistry::new();
    let bound_base = base.bind(&tape, base_trainable, &mut registry);
    let bound_smn = smn.bind(&tape, true, &mut registry);
    let feat = backbone_forward(&tape, &record.image, &bound_base, cfg.detector.stride)?;
    let (base_obj, base_reg) = rpn_forward(&feat, &bound_base.rpn)?;
    let (fh, fw, _) = feat.value().dims3()?;
    let (img_h, img_w, _) = record.image.dims3()?;
    let anchors = build_anchors(fh, fw, &cfg.detector, img_w as f64, img_h as f64);
    let ctx = ImageContext {
        tape: tape.clone(),
        bound_base,
        bound_smn: None,
        feat,
        base_obj,
        base_reg,
        anchors,
        image_w: img_w as f64,
        image_h: img_h as f64,
    };
    let mut memory = init_memory(&bound_smn.prior, fh, fw)?;
    let gts = &record.instances;
    let mut retired = vec![false; gts.len()];
    let mut stored: Vec<Instance> = Vec::new();
    let c1 = cfg.class_count() + 1;

    let mut l_rpn_cls: Vec<Var> = Vec::new();
    let mut l_rpn_reg: Vec<Var> = Vec::new();
    let mut l_cls: Vec<Var> = Vec::new();
    let mut l_cls_reg: Vec<Var> = Vec::new();
    let mut l_recon: Vec<Var> = Vec::new();

    for n in 0..n_unroll {
        let memory_live = n >= 1 || design != DedupDesign::TwoStage;
        let mconv = if memory_live {
            Some(context_forward(&memory.grid, &bound_smn.branch)?)
        } else {
            None
        };
        let (obj_fh, regm_fh) = fused_rpn_maps(&ctx, mconv.as_ref(), Some(&bound_smn.branch), n, design)?;
        let proposals = propose(
            obj_fh.fused.value(), regm_fh.fused.value(), &ctx.anchors,
            cfg.rollout.proposal_mode, &cfg.detector, ctx.image_w, ctx.image_h,
        );
        let mut candidates: Vec<BBox> = proposals.iter().map(|r| r.bbox).collect();
        candidates.extend(gts.iter().map(|g| g.bbox));
        // Boxes already committed to the memory join the pool and are always
        // sampled: the classifier gets supervised exactly where the roll-out
        // acts, including its own false positives.
        let stored_start = candidates.len();
        candidates.extend(stored.iter().map(|s| s.bbox));
        if candidates.is_empty() {
            break;
        }
        let roi_labels = assign_roi_labels(&candidates, gts, &retired, FG_IOU);
        let (rpos, rflip, rneg) = split_roi_strata(&roi_labels);
        let mut sampled = sample_with_quotas(&rpos, &rflip, &rneg, cfg.train.cls_ratio, cfg.train.roi_batch, rng);
        for extra in stored_start..candidates.len() {
            if !sampled.contains(&extra) {
                sampled.push(extra);
            }
        }
        if sampled.is_empty() {
            break;
        }
        let boxes: Vec<BBox> = sampled.iter().map(|&i| candidates[i]).collect();
        let labels: Vec<RoiLabel> = sampled.iter().map(|&i| roi_labels[i]).collect();

        let fused = fused_classification(
            &ctx, mconv.as_ref(), Some(&bound_smn.branch), &boxes, n, design, &cfg.detector,
        )?;
        let probs = ops::softmax_last(&fused.cls.fused);

        let losses_here = n >= 1 || design != DedupDesign::TwoStage;
        if losses_here {
            let (ce, regl) = cls_losses(&tape, &fused.cls.fused, &fused.reg.fused, &boxes, &labels, gts, cfg.class_count())?;
            l_cls.push(ce);
            l_cls_reg.push(regl);

            let anchor_labels = assign_anchor_labels(&ctx.anchors, gts, &retired);
            let (apos, aflip, aneg) = split_anchor_strata(&anchor_labels);
            let sampled_anchors =
                sample_with_quotas(&apos, &aflip, &aneg, cfg.train.rpn_ratio, cfg.train.rpn_batch, rng);
            let (rc, rr) = rpn_losses(
                &tape, &obj_fh.fused, &regm_fh.fused, &ctx.anchors, &anchor_labels,
                &sampled_anchors, gts, cfg.detector.anchors_per_cell(),
            )?;
            l_rpn_cls.push(rc);
            l_rpn_reg.push(rr);

            if design == DedupDesign::JointSkip {
                // Direct base supervision alongside the fused loss.
                let base_out = crate::detector::classify_rois(&ctx.feat, &boxes, &ctx.bound_base, &cfg.detector)?;
                let (bce, breg) = cls_losses(&tape, &base_out.cls, &base_out.reg, &boxes, &labels, gts, cfg.class_count())?;
                l_cls.push(bce);
                l_cls_reg.push(breg);
                let (brc, brr) = rpn_losses(
                    &tape, &ctx.base_obj, &ctx.base_reg, &ctx.anchors, &anchor_labels,
                    &sampled_anchors, gts, cfg.detector.anchors_per_cell(),
                )?;
                l_rpn_cls.push(brc);
                l_rpn_reg.push(brr);
            }

            if let Some(m) = mconv.as_ref() {
                if !stored.is_empty() {
                    let recon = reconstruction_heads(m, &boxes, &bound_smn.branch, &cfg.detector)?;
                    let none_retired = vec![false; stored.len()];
                    let stored_labels = assign_roi_labels(&boxes, &stored, &none_retired, FG_IOU);
                    let targets: Vec<Option<usize>> = stored_labels
                        .iter()
                        .map(|l| match l {
                            RoiLabel::Positive { class_id, .. } => Some(class_id + 1),
                            _ => Some(0),
                        })
                        .collect();
                    l_recon.push(ops::softmax_ce_rows(&recon.cls, &targets)?);

                    let stored_anchor_labels = assign_anchor_labels(&ctx.anchors, &stored, &none_retired);
                    let (spos, _sflip, sneg) = split_anchor_strata(&stored_anchor_labels);
                    let s_anchors = sample_with_quotas(&spos, &[], &sneg, [1, 0, 1], cfg.train.rpn_batch, rng);
                    if !s_anchors.is_empty() {
                        let t: Vec<f64> = s_anchors
                            .iter()
                            .map(|&s| matches!(stored_anchor_labels[s], AnchorLabel::Positive { .. }) as usize as f64)
                            .collect();
                        let picked = ops::gather_flat(&recon.rpn_obj, &s_anchors)?;
                        l_recon.push(ops::bce_logits(&picked, &t)?);
                    }
                }
            }
        }

        // Model-driven selection over the sampled RoIs.
        let rois: Vec<Roi> = boxes.iter().map(|&bbox| Roi { bbox, score: 0.0 }).collect();
        let (sel, _) = select_next(probs.value(), &rois)?;
        let prow = &probs.value().values()[sel * c1..(sel + 1) * c1];
        let rrow = &fused.reg.fused.value().values()
            [sel * 4 * cfg.class_count()..(sel + 1) * 4 * cfg.class_count()];
        let (mem_box, mem_class) = memory_box_for(prow, rrow, &boxes[sel], ctx.image_w, ctx.image_h);

        // Retire the matched instance (hardmax semantics).
        let overall_argmax = (0..c1)
            .max_by(|&a, &b| prow[a].partial_cmp(&prow[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        if overall_argmax > 0 {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if retired[gi] || gt.class_id != mem_class {
                    continue;
                }
                let ov = iou(&mem_box, &gt.bbox);
                if ov >= FG_IOU && best.map_or(true, |(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
            if let Some((gi, _)) = best {
                retired[gi] = true;
            }
            stored.push(Instance { class_id: mem_class, bbox: mem_box });
        }

        let scores_var = ops::slice_flat(&probs, sel * c1, c1)?;
        memory = memory_update(&memory, &mem_box, &ctx.feat, &scores_var, &bound_smn, cfg.detector.stride)?;
    }

    let sum_or_zero = |tape: &Tape, v: &[Var]| -> Result<Var> {
        if v.is_empty() {
            Ok(tape.constant(Tensor::scalar(0.0)))
        } else {
            ops::add_n(v).map_err(Into::into)
        }
    };
    let rpn_cls = sum_or_zero(&tape, &l_rpn_cls)?;
    let rpn_reg = sum_or_zero(&tape, &l_rpn_reg)?;
    let cls = sum_or_zero(&tape, &l_cls)?;
    let cls_reg = sum_or_zero(&tape, &l_cls_reg)?;
    let recon = sum_or_zero(&tape, &l_recon)?;
    let w = cfg.train.reg_weight;
    let total = ops::add_n(&[
        rpn_cls.clone(),
        ops::scale(&rpn_reg, w),
        cls.clone(),
        ops::scale(&cls_reg, w),
        ops::scale(&recon, cfg.train.recon_weight),
    ])?;
    let breakdown = LossBreakdown {
        rpn_cls: rpn_cls.value().item(),
        rpn_reg: rpn_reg.value().item(),
        cls: cls.value().item(),
        cls_reg: cls_reg.value().item(),
        recon: recon.value().item(),
        total: total.value().item(),
    };
    // Nothing supervised (e.g. a one-iteration unroll of the two-stage
    // design): leave every weight untouched.
    if l_rpn_cls.is_empty() && l_cls.is_empty() && l_recon.is_empty() {
        return Ok(breakdown);
    }
    let grads = tape.backward(&total)?;
    let updates = opt.apply(lr, &registry, &grads);
    install(&updates, smn);
    if base_trainable {
        install(&updates, base);
    }
    Ok(breakdown)
}

#[allow(clippy::too_many_arguments)]
pub fn train_smn(
    cfg: &RunConfig,
    dataset: &[SceneRecord],
    base: &mut BaseWeights,
    smn: &mut SmnWeights,
    steps: usize,
    n_unroll: usize,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
    sink: Option<&CheckpointSink>,
    step_offset: usize,
) -> Result<Vec<LogRow>> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(steps);
    let started = Instant::now();
    for local in 0..steps {
        let step = step_offset + local;
        let lr = lr_at(cfg, step);
        let idx = rng.gen_range(0..dataset.len());
        let b = smn_step(cfg, &dataset[idx], base, smn, n_unroll, opt, lr, rng)?;
        check_finite(step, &b)?;
        rows.push(LogRow {
            step, lr,
            rpn_cls: b.rpn_cls, rpn_reg: b.rpn_reg, cls: b.cls, cls_reg: b.cls_reg,
            recon: b.recon, total: b.total,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(s) = sink {
            s.maybe(step, smn, Some(opt))?;
        }
    }
    Ok(rows)
}

/// Bootstrap longer unrolls from shorter ones: each stage continues from the
/// previous stage's weights, optimizer state, and RNG stream.
pub fn curriculum_train(
    cfg: &RunConfig,
    dataset: &[SceneRecord],
    base: &mut BaseWeights,
    schedule: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    sink: Option<&CheckpointSink>,
) -> Result<(SmnWeights, Vec<LogRow>)> {
    let mut smn = SmnWeights::init(&cfg.detector, &cfg.memory, &cfg.context, cfg.class_count(), &cfg.train, rng);
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.clip_norm);
    let mut rows = Vec::new();
    let mut offset = 0usize;
    let mut prev_n = 0usize;
    for &(n, steps) in schedule {
        if n < prev_n {
            return Err(Error::Config("curriculum unrolls must be non-decreasing".into()));
        }
        prev_n = n;
        rows.extend(train_smn(cfg, dataset, base, &mut smn, steps, n, &mut opt, rng, sink, offset)?);
        offset += steps;
    }
    Ok((smn, rows))
}

// ------------------------------------------------------------- MLP stage

/// One step of the parameter-matched ablation: the context stack reads the
/// base features directly (no memory, no sequence) and the same output
/// modules fuse with the frozen base detector.
pub fn mlp_step(
    cfg: &RunConfig,
    record: &SceneRecord,
    base: &BaseWeights,
    mlp: &mut MlpWeights,
    opt: &mut Sgd,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let mut registry = VarRegistry::new();
    let bound_base = base.bind(&tape, false, &mut registry);
    let branch = mlp.bind(&tape, true, &mut registry);
    let feat = backbone_forward(&tape, &record.image, &bound_base, cfg.detector.stride)?;
    let (base_obj, base_reg) = rpn_forward(&feat, &bound_base.rpn)?;
    let (fh, fw, _) = feat.value().dims3()?;
    let (img_h, img_w, _) = record.image.dims3()?;
    let anchors = build_anchors(fh, fw, &cfg.detector, img_w as f64, img_h as f64);
    let ctx = ImageContext {
        tape: tape.clone(),
        bound_base,
        bound_smn: None,
        feat,
        base_obj,
        base_reg,
        anchors,
        image_w: img_w as f64,
        image_h: img_h as f64,
    };
    let mconv = context_forward(&ctx.feat, &branch)?;
    let (obj_fh, regm_fh) = fused_rpn_maps(&ctx, Some(&mconv), Some(&branch), 1, DedupDesign::TwoStage)?;
    let gts = &record.instances;
    let retired = vec![false; gts.len()];

    let anchor_labels = assign_anchor_labels(&ctx.anchors, gts, &retired);
    let (apos, _af, aneg) = split_anchor_strata(&anchor_labels);
    let sampled_anchors = sample_with_quotas(&apos, &[], &aneg, [1, 0, 1], cfg.train.rpn_batch, rng);
    let (rpn_cls, rpn_reg) = rpn_losses(
        &tape, &obj_fh.fused, &regm_fh.fused, &ctx.anchors, &anchor_labels, &sampled_anchors, gts,
        cfg.detector.anchors_per_cell(),
    )?;

    let proposals = propose(
        obj_fh.fused.value(), regm_fh.fused.value(), &ctx.anchors,
        cfg.rollout.proposal_mode, &cfg.detector, ctx.image_w, ctx.image_h,
    );
    let mut candidates: Vec<BBox> = proposals.iter().map(|r| r.bbox).collect();
    candidates.extend(gts.iter().map(|g| g.bbox));
    let roi_labels = assign_roi_labels(&candidates, gts, &retired, FG_IOU);
    let (rpos, _rf, rneg) = split_roi_strata(&roi_labels);
    let fg_quota = ((cfg.train.roi_batch as f64) * cfg.train.base_fg_frac).round() as usize;
    let sampled = sample_with_quotas(&rpos, &[], &rneg, [fg_quota, 0, cfg.train.roi_batch - fg_quota], cfg.train.roi_batch, rng);
    let boxes: Vec<BBox> = sampled.iter().map(|&i| candidates[i]).collect();
    let labels: Vec<RoiLabel> = sampled.iter().map(|&i| roi_labels[i]).collect();

    let (cls, cls_reg) = if boxes.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let fused = fused_classification(&ctx, Some(&mconv), Some(&branch), &boxes, 1, DedupDesign::TwoStage, &cfg.detector)?;
        cls_losses(&tape, &fused.cls.fused, &fused.reg.fused, &boxes, &labels, gts, cfg.class_count())?
    };

    let w = cfg.train.reg_weight;
    let total = ops::add_n(&[
        rpn_cls.clone(),
        ops::scale(&rpn_reg, w),
        cls.clone(),
        ops::scale(&cls_reg, w),
    ])?;
    let breakdown = LossBreakdown {
        rpn_cls: rpn_cls.value().item(),
        rpn_reg: rpn_reg.value().item(),
        cls: cls.value().item(),
        cls_reg: cls_reg.value().item(),
        recon: 0.0,
        total: total.value().item(),
    };
    let grads = tape.backward(&total)?;
    let updates = opt.apply(lr, &registry, &grads);
    install(&updates, mlp);
    Ok(breakdown)
}

pub fn train_mlp(
    cfg: &RunConfig,
    dataset: &[SceneRecord],
    base: &BaseWeights,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(MlpWeights, Vec<LogRow>)> {
    let mut mlp = MlpWeights::init(&cfg.detector, &cfg.context, cfg.class_count(), &cfg.train, rng);
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.clip_norm);
    let mut rows = Vec::with_capacity(steps);
    let started = Instant::now();
    for step in 0..steps {
        let lr = lr_at(cfg, step);
        let idx = rng.gen_range(0..dataset.len());
        let b = mlp_step(cfg, &dataset[idx], base, &mut mlp, &mut opt, lr, rng)?;
        check_finite(step, &b)?;
        rows.push(LogRow {
            step, lr,
            rpn_cls: b.rpn_cls, rpn_reg: b.rpn_reg, cls: b.cls, cls_reg: b.cls_reg,
            recon: b.recon, total: b.total,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((mlp, rows))
}
