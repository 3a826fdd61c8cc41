//! Method-by-protocol comparison: run the plain detector, the MLP ablation,
//! and the memory network over a dataset under each evaluation protocol and
//! tabulate the results.

use serde::Serialize;

use crate::config::{Emission, ProposalMode, RunConfig};
use crate::detector::Detection;
use crate::error::Result;
use crate::eval::{detect_all, evaluate, EvalResult};
use crate::rollout::{hybrid_detect, prepare_image, single_pass};
use crate::scene::{Instance, SceneRecord};
use crate::weights::{BaseWeights, MlpWeights, SmnWeights, VarRegistry};

#[derive(Clone, Copy)]
pub enum MethodSpec<'a> {
    Baseline { base: &'a BaseWeights },
    Mlp { base: &'a BaseWeights, mlp: &'a MlpWeights },
    Smn { base: &'a BaseWeights, smn: &'a SmnWeights },
}

#[derive(Clone, Debug, Serialize)]
pub struct Protocol {
    pub name: String,
    /// Per-image detection cap (the N in N-constrained evaluation).
    pub cap: usize,
    pub emission: Emission,
    pub proposal_mode: ProposalMode,
    /// Hybrid split for the memory network; single-shot methods ignore it.
    pub n1: usize,
    pub n2: usize,
}

impl Protocol {
    pub fn standard(cfg: &RunConfig, cap: usize) -> Protocol {
        Protocol {
            name: format!("n{cap}"),
            cap,
            emission: cfg.rollout.emission,
            proposal_mode: cfg.rollout.proposal_mode,
            n1: cfg.rollout.n1,
            n2: cfg.rollout.n2,
        }
    }
}

/// Detections of one method on one image under one protocol. The cap is
/// applied later, at evaluation time.
pub fn detect_with(
    cfg: &RunConfig,
    method: MethodSpec,
    protocol: &Protocol,
    record: &SceneRecord,
) -> Result<Vec<Detection>> {
    match method {
        MethodSpec::Baseline { base } => {
            let ctx = prepare_image(cfg, base, None, &record.image)?;
            Ok(single_pass(cfg, &ctx, None, protocol.emission, protocol.proposal_mode)?
                .into_iter()
                .map(|(d, _)| d)
                .collect())
        }
        MethodSpec::Mlp { base, mlp } => {
            let ctx = prepare_image(cfg, base, None, &record.image)?;
            let mut reg = VarRegistry::new();
            let branch = mlp.bind(&ctx.tape, false, &mut reg);
            Ok(single_pass(cfg, &ctx, Some(&branch), protocol.emission, protocol.proposal_mode)?
                .into_iter()
                .map(|(d, _)| d)
                .collect())
        }
        MethodSpec::Smn { base, smn } => {
            let mut rcfg = cfg.rollout.clone();
            rcfg.emission = protocol.emission;
            rcfg.proposal_mode = protocol.proposal_mode;
            rcfg.n1 = protocol.n1;
            rcfg.n2 = protocol.n2;
            Ok(hybrid_detect(cfg, base, smn, &record.image, &rcfg)?.detections)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub method: String,
    pub protocol: String,
    pub result: EvalResult,
}

/// Evaluate one method over the dataset under one protocol.
pub fn evaluate_protocol(
    cfg: &RunConfig,
    method: MethodSpec,
    protocol: &Protocol,
    dataset: &[SceneRecord],
) -> Result<EvalResult> {
    let detect = |rec: &SceneRecord| detect_with(cfg, method, protocol, rec);
    let dets = detect_all(&detect, dataset)?;
    let gts: Vec<Vec<Instance>> = dataset.iter().map(|r| r.instances.clone()).collect();
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.max_dets = if protocol.cap > 1 { vec![1, protocol.cap] } else { vec![1] };
    evaluate(&dets, &gts, &eval_cfg, cfg.class_count())
}

pub fn compare(
    cfg: &RunConfig,
    methods: &[(String, MethodSpec)],
    protocols: &[Protocol],
    dataset: &[SceneRecord],
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for (name, method) in methods {
        for protocol in protocols {
            let result = evaluate_protocol(cfg, *method, protocol, dataset)?;
            rows.push(CompareRow {
                method: name.clone(),
                protocol: protocol.name.clone(),
                result,
            });
        }
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(EvalResult::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.result.csv_row(&row.method, &row.protocol));
        out.push('\n');
    }
    out
}
