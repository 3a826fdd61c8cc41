//! The reasoning ConvNet over the memory plus the memory-side output heads
//! that fuse additively (in logit space) with the base detector. The same
//! branch doubles as the MLP ablation when fed base features instead of
//! memory.

use crate::boxes::BBox;
use crate::config::{DedupDesign, DetectorConfig};
use crate::detector::{img_to_map, rpn_forward};
use crate::error::{Error, Result};
use crate::weights::{BoundBranch, BoundFc};
use smn_tensor::{ops, Var};

/// Five same-padded conv+relu layers: a projection, then residual pairs.
/// With all weights zero the residual pairs pass the projected input
/// through unchanged.
pub fn context_forward(input: &Var, branch: &BoundBranch) -> Result<Var> {
    let conv = |x: &Var, i: usize| -> Result<Var> {
        let l = &branch.context[i];
        Ok(ops::relu(&ops::conv2d(x, &l.w, &l.b, 1, (l.w.shape()[0] - 1) / 2)?))
    };
    let mut x = conv(input, 0)?;
    let mut i = 1;
    while i < branch.context.len() {
        if i + 1 < branch.context.len() {
            let inner = conv(&conv(&x, i)?, i + 1)?;
            x = ops::add(&x, &inner)?;
            i += 2;
        } else {
            x = conv(&x, i)?;
            i += 1;
        }
    }
    Ok(x)
}

/// One head's base/memory/fused logit triple. At iteration 0 of the
/// two-stage design the memory path is absent and `fused` IS `base`.
#[derive(Clone)]
pub struct FusedHead {
    pub base: Var,
    pub memory: Option<Var>,
    pub fused: Var,
}

/// Additive fusion in logit space. The base branch is placed behind a
/// stop-gradient from the second iteration on (two-stage and stop-gradient
/// designs); the joint designs let gradients through everywhere.
pub fn fuse_head(base: &Var, memory: Option<&Var>, iteration: usize, design: DedupDesign) -> Result<FusedHead> {
    let Some(memory) = memory else {
        return Ok(FusedHead { base: base.clone(), memory: None, fused: base.clone() });
    };
    let stop = match design {
        DedupDesign::TwoStage | DedupDesign::StopGradient => iteration >= 1,
        DedupDesign::JointScratch | DedupDesign::JointSkip => false,
    };
    let base_branch = if stop { base.detach() } else { base.clone() };
    let fused = ops::add(&base_branch, memory)?;
    Ok(FusedHead { base: base.clone(), memory: Some(memory.clone()), fused })
}

/// Memory-side classification head: pool the context map over the RoIs,
/// run the two memory fc layers, concatenate with the base fc features,
/// fuse through two more fc layers, then emit logits and deltas.
pub struct MemoryClsOut {
    pub cls: Var,
    pub reg: Var,
}

fn fc_relu(x: &Var, fc: &BoundFc) -> Result<Var> {
    Ok(ops::relu(&ops::fully_connected(x, &fc.w, &fc.b)?))
}

pub fn memory_cls_heads(
    mconv: &Var,
    rois: &[BBox],
    base_fc7: &Var,
    branch: &BoundBranch,
    det: &DetectorConfig,
) -> Result<MemoryClsOut> {
    if rois.is_empty() {
        return Err(Error::Numerical("memory_cls_heads on empty RoI list".into()));
    }
    let (fh, fw, fc) = mconv.value().dims3()?;
    let mut map_boxes = Vec::with_capacity(rois.len());
    for r in rois {
        map_boxes.push(img_to_map(r, det.stride, fh, fw)?);
    }
    let p = det.pool_size;
    let pooled = ops::roi_pool_max_batch(mconv, &map_boxes, p, p)?;
    let flat = ops::reshape(&pooled, &[rois.len(), p * p * fc])?;
    let m1 = fc_relu(&flat, &branch.m_fc1)?;
    let m7 = fc_relu(&m1, &branch.m_fc2)?;
    let joined = ops::concat_last(base_fc7, &m7)?;
    let f1 = fc_relu(&joined, &branch.fuse_fc1)?;
    let f2 = fc_relu(&f1, &branch.fuse_fc2)?;
    Ok(MemoryClsOut {
        cls: ops::fully_connected(&f2, &branch.cls.w, &branch.cls.b)?,
        reg: ops::fully_connected(&f2, &branch.reg.w, &branch.reg.b)?,
    })
}

/// RPN-style memory head over the context map.
pub fn memory_rpn_heads(mconv: &Var, branch: &BoundBranch) -> Result<(Var, Var)> {
    rpn_forward(mconv, &branch.rpn)
}

/// Reconstruction branches: identical head shapes, separate weights,
/// supervised to re-predict only what is already stored in the memory.
pub struct ReconOut {
    pub rpn_obj: Var,
    pub cls: Var,
}

pub fn reconstruction_heads(
    mconv: &Var,
    rois: &[BBox],
    branch: &BoundBranch,
    det: &DetectorConfig,
) -> Result<ReconOut> {
    let (rpn_obj, _rpn_reg) = rpn_forward(mconv, &branch.recon_rpn)?;
    if rois.is_empty() {
        return Err(Error::Numerical("reconstruction_heads on empty RoI list".into()));
    }
    let (fh, fw, fc) = mconv.value().dims3()?;
    let mut map_boxes = Vec::with_capacity(rois.len());
    for r in rois {
        map_boxes.push(img_to_map(r, det.stride, fh, fw)?);
    }
    let p = det.pool_size;
    let pooled = ops::roi_pool_max_batch(mconv, &map_boxes, p, p)?;
    let flat = ops::reshape(&pooled, &[rois.len(), p * p * fc])?;
    let r1 = fc_relu(&flat, &branch.recon_fc1)?;
    let r2 = fc_relu(&r1, &branch.recon_fc2)?;
    Ok(ReconOut {
        rpn_obj,
        cls: ops::fully_connected(&r2, &branch.recon_cls.w, &branch.recon_cls.b)?,
    })
}
