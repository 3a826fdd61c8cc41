//! Unified run configuration: one JSON document with a section per
//! subsystem and a profile selector. The `toy` profile is the desk-scale
//! default; `paper-reference` documents the full-scale constants and refuses
//! to execute.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Feature map downscale factor (image pixels per cell).
    pub stride: usize,
    /// Output channels of the four backbone conv blocks.
    pub backbone_channels: Vec<usize>,
    /// Anchor side lengths in pixels (sqrt of anchor area).
    pub anchor_scales: Vec<f64>,
    /// Anchor aspect ratios (height / width).
    pub anchor_ratios: Vec<f64>,
    /// Proposals kept by NMS-mode region selection (k).
    pub proposal_count: usize,
    /// Proposals kept by non-aggressive top-score selection (K').
    pub proposal_count_na: usize,
    pub rpn_nms_iou: f64,
    pub final_nms_iou: f64,
    /// Side of the square classification RoI pool.
    pub pool_size: usize,
    /// Width of the two classification fc layers.
    pub fc_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            stride: 4,
            backbone_channels: vec![16, 32, 32, 32],
            anchor_scales: vec![8.0, 16.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            proposal_count: 64,
            proposal_count_na: 512,
            rpn_nms_iou: 0.7,
            final_nms_iou: 0.3,
            pool_size: 7,
            fc_dim: 64,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Fixed spatial size the learned prior grid is stored at.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Channel depth of each memory cell.
    pub channels: usize,
    /// Nominal patch resolution for reads and writes.
    pub patch: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { grid_h: 8, grid_w: 8, channels: 16, patch: 7 }
    }
}

/// How the memory branch joins the base detector during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupDesign {
    /// Joint training from scratch, memory fused at every iteration.
    JointScratch,
    /// Joint training with direct base supervision added each iteration.
    JointSkip,
    /// Base trained at iteration 0 only; gradient to it stopped afterwards.
    StopGradient,
    /// Base pre-trained and frozen; memory branch absent at iteration 0.
    TwoStage,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub depth: usize,
    pub kernel: usize,
    pub channels: usize,
    pub residual_period: usize,
    /// Width of the memory-branch fc layers.
    pub fc_dim: usize,
    pub design: DedupDesign,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            depth: 5,
            kernel: 3,
            channels: 16,
            residual_period: 2,
            fc_dim: 64,
            design: DedupDesign::TwoStage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emission {
    /// One detection per iteration: the argmax class.
    Hardmax,
    /// One detection per confident foreground class of the selected box.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    /// Class-agnostic NMS then top-k by objectness.
    NmsTopK,
    /// Top-K' by objectness, no NMS.
    TopKPrime,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Plain base-detector iterations that seed the memory (hybrid phase 1).
    pub n1: usize,
    /// Memory-augmented iterations (hybrid phase 2). Total N = n1 + n2.
    pub n2: usize,
    pub emission: Emission,
    /// Foreground probability floor for softmax emission.
    pub softmax_floor: f64,
    /// Foreground probability floor for hardmax emission.
    pub select_threshold: f64,
    /// Optional per-class NMS over the emitted detections.
    pub tail_nms_iou: Option<f64>,
    pub proposal_mode: ProposalMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            n1: 0,
            n2: 8,
            emission: Emission::Softmax,
            softmax_floor: 0.05,
            select_threshold: 0.05,
            tail_nms_iou: None,
            proposal_mode: ProposalMode::TopKPrime,
        }
    }
}

impl RolloutConfig {
    pub fn iterations(&self) -> usize {
        self.n1 + self.n2
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub base_steps: usize,
    pub smn_steps: usize,
    pub lr: f64,
    pub lr_after: f64,
    /// Step at which the learning rate drops to `lr_after`.
    pub lr_drop_step: usize,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Anchors sampled per RPN loss.
    pub rpn_batch: usize,
    /// RoIs sampled per classification loss.
    pub roi_batch: usize,
    /// pos : flipped : neg quota for RPN sampling in the memory stage.
    pub rpn_ratio: [usize; 3],
    /// pos : flipped : neg quota for classification sampling in the memory stage.
    pub cls_ratio: [usize; 3],
    /// Foreground fraction of the roi batch during base training (1:3 -> 0.25).
    pub base_fg_frac: f64,
    /// Unroll length for single-stage memory training.
    pub unroll: usize,
    /// Curriculum stages: (unroll N, steps). Non-decreasing in N.
    pub curriculum: Vec<(usize, usize)>,
    pub recon_weight: f64,
    pub reg_weight: f64,
    pub init_hidden_mult: f64,
    /// Extra shrink on output-head inits so memory logits start near zero.
    pub init_head_mult: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            base_steps: 3000,
            smn_steps: 3000,
            lr: 1e-3,
            lr_after: 1e-4,
            lr_drop_step: 2000,
            momentum: 0.9,
            clip_norm: 10.0,
            rpn_batch: 32,
            roi_batch: 32,
            rpn_ratio: [2, 1, 1],
            cls_ratio: [1, 1, 2],
            base_fg_frac: 0.25,
            unroll: 2,
            curriculum: vec![(2, 2000), (4, 1000)],
            recon_weight: 1.0,
            reg_weight: 1.0,
            init_hidden_mult: 1.0,
            init_head_mult: 0.1,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detection caps for AR metrics; the largest is also the default
    /// N-constrained protocol cap.
    pub max_dets: Vec<usize>,
    /// Area boundaries (px^2): small < s_max <= medium < m_max <= large.
    pub size_s_max: f64,
    pub size_m_max: f64,
    /// Score floor when collecting detections from the single-shot methods.
    pub score_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_dets: vec![1, 10],
            size_s_max: 64.0,
            size_m_max: 256.0,
            score_floor: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t < 1.0 && t > prev) {
                return Err(Error::Config("iou thresholds must be strictly increasing in (0,1)".into()));
            }
            prev = t;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: String,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub memory: MemoryConfig,
    pub context: ContextConfig,
    pub rollout: RolloutConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Free-form documentation of where constants come from.
    pub notes: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "toy".into(),
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            memory: MemoryConfig::default(),
            context: ContextConfig::default(),
            rollout: RolloutConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            notes: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn toy() -> RunConfig {
        RunConfig::default()
    }

    /// Full-scale constants for reference only. Far beyond desk scale, so
    /// execution is refused.
    pub fn paper_reference() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.profile = "paper-reference".into();
        cfg.scene.image_h = 640;
        cfg.scene.image_w = 640;
        cfg.detector = DetectorConfig {
            stride: 16,
            backbone_channels: vec![64, 128, 256, 512],
            anchor_scales: vec![128.0, 256.0, 512.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            proposal_count: 300,
            proposal_count_na: 5000,
            rpn_nms_iou: 0.7,
            final_nms_iou: 0.3,
            pool_size: 7,
            fc_dim: 4096,
        };
        cfg.memory = MemoryConfig { grid_h: 20, grid_w: 20, channels: 256, patch: 14 };
        cfg.context = ContextConfig {
            depth: 5,
            kernel: 3,
            channels: 256,
            residual_period: 2,
            fc_dim: 2048,
            design: DedupDesign::TwoStage,
        };
        cfg.rollout.n1 = 50;
        cfg.rollout.n2 = 10;
        cfg.train.base_steps = 30_000;
        cfg.train.smn_steps = 30_000;
        cfg.train.lr_drop_step = 20_000;
        cfg.train.curriculum = vec![(2, 10_000), (4, 10_000), (10, 10_000)];
        cfg.notes.insert(
            "profile".into(),
            "full-scale reference constants; documentation only, not runnable at desk scale".into(),
        );
        cfg.notes.insert(
            "detector.stride".into(),
            "full scale uses a 1/16 feature stride; the desk profile uses 1/4".into(),
        );
        cfg.notes.insert(
            "detector.proposal_count_na".into(),
            "full scale keeps the top 5000 regions when NMS is switched off; desk profile 512".into(),
        );
        cfg.notes.insert(
            "memory".into(),
            "full scale: 20x20 grid of 256-channel cells, 14x14 patches; desk: 8x8x16, 7x7".into(),
        );
        cfg.notes.insert(
            "train".into(),
            "full scale: 30k steps at 1e-3 dropping to 1e-4 after 20k; desk: 3k / 2k".into(),
        );
        cfg.notes.insert(
            "rollout".into(),
            "full scale hybrid split: 50 plain iterations then 10 memory-augmented ones".into(),
        );
        cfg
    }

    pub fn profile(name: &str) -> Result<RunConfig> {
        match name {
            "toy" => Ok(RunConfig::toy()),
            "paper-reference" => Ok(RunConfig::paper_reference()),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (available: toy, paper-reference)"
            ))),
        }
    }

    pub fn class_count(&self) -> usize {
        self.scene.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.eval.validate()?;
        if self.scene.image_h % self.detector.stride != 0 || self.scene.image_w % self.detector.stride != 0 {
            return Err(Error::Config(format!(
                "image extents {}x{} not divisible by stride {}",
                self.scene.image_h, self.scene.image_w, self.detector.stride
            )));
        }
        if self.detector.backbone_channels.len() != 4 {
            return Err(Error::Config("backbone_channels must list 4 blocks".into()));
        }
        if self.context.depth < self.context.residual_period {
            return Err(Error::Config("context depth < residual period".into()));
        }
        if self.memory.patch < 2 || self.memory.channels == 0 {
            return Err(Error::Config("memory patch must be >= 2 and channels >= 1".into()));
        }
        let mut curriculum_prev = 0;
        for &(n, _) in &self.train.curriculum {
            if n < curriculum_prev {
                return Err(Error::Config("curriculum unroll lengths must be non-decreasing".into()));
            }
            curriculum_prev = n;
        }
        if self.train.rpn_ratio.iter().any(|&r| r == 0) || self.train.cls_ratio.iter().any(|&r| r == 0) {
            return Err(Error::Config("sampling ratios must be positive".into()));
        }
        if self.train.base_steps == 0 || self.train.smn_steps == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        Ok(())
    }

    /// The documentation-only profile never runs.
    pub fn ensure_executable(&self) -> Result<()> {
        self.validate()?;
        if self.profile == "paper-reference" {
            return Err(Error::Config(
                "profile 'paper-reference' documents full-scale constants and refuses to execute; \
                 use --profile toy or a custom config"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("parse failure at line {}, column {}: {e}", e.line(), e.column())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("config file {}", path.display())));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a dotted-path override like `train.base_steps=100`. The value is
    /// parsed as JSON when possible, else taken as a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set wants key=value, got '{assignment}'")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut cursor = &mut doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                let obj = cursor.as_object_mut().ok_or_else(|| {
                    Error::Config(format!("'{}' is not an object", parts[..i].join(".")))
                })?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config field '{path}'")));
                }
                obj.insert(part.to_string(), value);
                break;
            }
            cursor = cursor
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section '{part}' in '{path}'")))?;
        }
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override '{assignment}' produced an invalid config: {e}")))?;
        Ok(())
    }
}
