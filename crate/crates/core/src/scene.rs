//! Deterministic synthetic scene generator: multi-class filled shapes on a
//! noisy gray background, with plantable co-occurrence rules (a dependent
//! class that must appear near its trigger class, optionally rendered at low
//! contrast). Stands in for a real detection dataset at desk scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::rng;
use smn_tensor::Tensor;

const PLACEMENT_RETRIES: usize = 500;
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
}

fn default_contrast() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    /// Relative sampling weight when drawing instance classes.
    pub weight: f64,
    /// Base render contrast in (0, 1]; rule handicaps multiply on top.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Dependent center within [min_dist, max_dist] of a trigger center.
    Near { min_dist: f64, max_dist: f64 },
    /// Dependent center above the trigger center, within max_dist.
    Above { max_dist: f64 },
    /// Dependent box fully inside a trigger box.
    Inside,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextRule {
    pub trigger: usize,
    pub dependent: usize,
    pub relation: Relation,
    /// Contrast multiplier in (0, 1] applied when rendering the dependent.
    pub contrast: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub classes: Vec<ClassSpec>,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Maximum allowed pairwise IoU among ground-truth boxes.
    pub max_overlap_iou: f64,
    /// Std of additive gaussian pixel noise.
    pub noise_std: f64,
    pub rules: Vec<ContextRule>,
    /// Shape side length range in pixels.
    pub size_min: f64,
    pub size_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_h: 64,
            image_w: 64,
            classes: vec![
                ClassSpec { name: "disc".into(), shape: ShapeKind::Circle, color: [0.9, 0.2, 0.2], weight: 1.0, contrast: 1.0 },
                ClassSpec { name: "block".into(), shape: ShapeKind::Square, color: [0.2, 0.4, 0.9], weight: 1.0, contrast: 1.0 },
                ClassSpec { name: "wedge".into(), shape: ShapeKind::Triangle, color: [0.15, 0.8, 0.3], weight: 1.0, contrast: 1.0 },
                ClassSpec { name: "slat".into(), shape: ShapeKind::Bar, color: [0.9, 0.8, 0.1], weight: 1.0, contrast: 1.0 },
            ],
            instances_min: 1,
            instances_max: 4,
            max_overlap_iou: 0.3,
            noise_std: 0.02,
            rules: vec![],
            size_min: 10.0,
            size_max: 24.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("scene needs at least 2 classes".into()));
        }
        if self.instances_min > self.instances_max {
            return Err(Error::Config("instances_min > instances_max".into()));
        }
        if self.size_min < 2.1 {
            return Err(Error::Config("size_min must keep box areas >= 4 px^2".into()));
        }
        for r in &self.rules {
            if r.trigger >= self.classes.len() || r.dependent >= self.classes.len() {
                return Err(Error::Config("rule class id out of range".into()));
            }
            if r.trigger == r.dependent {
                return Err(Error::Config("rule dependent must differ from trigger".into()));
            }
            if !(r.contrast > 0.0 && r.contrast <= 1.0) {
                return Err(Error::Config("rule contrast must be in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct SceneRecord {
    /// H x W x 3, values in [0, 1].
    pub image: Tensor,
    pub instances: Vec<Instance>,
    pub seed: u64,
}

struct Placed {
    class_id: usize,
    bbox: BBox,
    contrast: f64,
}

fn shape_box(rng: &mut ChaCha8Rng, cfg: &SceneConfig, shape: ShapeKind) -> (f64, f64) {
    let side = rng.gen_range(cfg.size_min..=cfg.size_max);
    match shape {
        ShapeKind::Bar => (side * 1.8, side * 0.55),
        _ => (side, side),
    }
}

fn sample_position(rng: &mut ChaCha8Rng, cfg: &SceneConfig, w: f64, h: f64) -> BBox {
    let x1 = rng.gen_range(0.0..(cfg.image_w as f64 - w));
    let y1 = rng.gen_range(0.0..(cfg.image_h as f64 - h));
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn relation_holds(relation: &Relation, dep: &BBox, trig: &BBox) -> bool {
    let (dx, dy) = dep.center();
    let (tx, ty) = trig.center();
    let dist = ((dx - tx).powi(2) + (dy - ty).powi(2)).sqrt();
    match relation {
        Relation::Near { min_dist, max_dist } => dist >= *min_dist && dist <= *max_dist,
        Relation::Above { max_dist } => dy < ty && dist <= *max_dist,
        Relation::Inside => {
            dep.x1 >= trig.x1 && dep.y1 >= trig.y1 && dep.x2 <= trig.x2 && dep.y2 <= trig.y2
        }
    }
}

fn overlap_ok(cfg: &SceneConfig, bbox: &BBox, placed: &[Placed]) -> bool {
    placed.iter().all(|p| iou(&p.bbox, bbox) <= cfg.max_overlap_iou)
}

/// Deterministic generation: the record is a pure function of (config, seed).
pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut r = rng::stream(seed);
    let n = if cfg.instances_max == 0 {
        0
    } else {
        r.gen_range(cfg.instances_min..=cfg.instances_max)
    };

    let weights: Vec<f64> = cfg.classes.iter().map(|c| c.weight).collect();
    let mut class_ids: Vec<usize> = (0..n).map(|_| rng::weighted_choice(&mut r, &weights)).collect();

    // Every dependent needs a trigger in the scene; convert one non-dependent
    // slot (or grow the scene by one) when a trigger is missing.
    for rule in &cfg.rules {
        if class_ids.iter().any(|&c| c == rule.dependent)
            && !class_ids.iter().any(|&c| c == rule.trigger)
        {
            if let Some(slot) = class_ids
                .iter()
                .position(|&c| c != rule.dependent && cfg.rules.iter().all(|q| q.dependent != c))
            {
                class_ids[slot] = rule.trigger;
            } else if class_ids.len() < cfg.instances_max {
                class_ids.push(rule.trigger);
            } else {
                // Give up on the dependent rather than violate the rule.
                if let Some(slot) = class_ids.iter().position(|&c| c == rule.dependent) {
                    class_ids[slot] = rule.trigger;
                }
            }
        }
    }
    // Place triggers before their dependents.
    class_ids.sort_by_key(|&c| cfg.rules.iter().any(|q| q.dependent == c) as usize);

    let mut placed: Vec<Placed> = Vec::with_capacity(class_ids.len());
    for &class_id in &class_ids {
        let rule = cfg.rules.iter().find(|q| q.dependent == class_id);
        let contrast = cfg.classes[class_id].contrast * rule.map_or(1.0, |q| q.contrast);
        let shape = cfg.classes[class_id].shape;
        let mut done = false;
        for _ in 0..PLACEMENT_RETRIES {
            let (w, h) = shape_box(&mut r, cfg, shape);
            let bbox = sample_position(&mut r, cfg, w, h);
            if !overlap_ok(cfg, &bbox, &placed) {
                continue;
            }
            if let Some(rule) = rule {
                let satisfied = placed
                    .iter()
                    .filter(|p| p.class_id == rule.trigger)
                    .any(|p| relation_holds(&rule.relation, &bbox, &p.bbox));
                if !satisfied {
                    continue;
                }
            }
            placed.push(Placed { class_id, bbox, contrast });
            done = true;
            break;
        }
        if !done {
            return Err(Error::Scene(format!(
                "could not place class {} under overlap/rule constraints after {PLACEMENT_RETRIES} retries (seed {seed})",
                cfg.classes[class_id].name
            )));
        }
    }

    let image = render(cfg, &placed, &mut r);
    let instances = placed
        .into_iter()
        .map(|p| Instance { class_id: p.class_id, bbox: p.bbox })
        .collect();
    Ok(SceneRecord { image, instances, seed })
}

fn inside_shape(shape: ShapeKind, bbox: &BBox, px: f64, py: f64) -> bool {
    let (cx, cy) = bbox.center();
    let (hw, hh) = (bbox.width() / 2.0, bbox.height() / 2.0);
    match shape {
        ShapeKind::Circle => {
            let nx = (px - cx) / hw;
            let ny = (py - cy) / hh;
            nx * nx + ny * ny <= 1.0
        }
        ShapeKind::Square | ShapeKind::Bar => {
            px >= bbox.x1 && px <= bbox.x2 && py >= bbox.y1 && py <= bbox.y2
        }
        ShapeKind::Triangle => {
            // Upward triangle: apex at top center, base at the bottom edge.
            if py < bbox.y1 || py > bbox.y2 {
                return false;
            }
            let t = (py - bbox.y1) / bbox.height().max(1e-9);
            (px - cx).abs() <= t * hw
        }
    }
}

fn render(cfg: &SceneConfig, placed: &[Placed], r: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (cfg.image_h, cfg.image_w);
    let mut img = vec![0.0f64; h * w * 3];
    for px in img.chunks_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    for p in placed {
        let color = cfg.classes[p.class_id].color;
        let y0 = p.bbox.y1.floor().max(0.0) as usize;
        let y1 = (p.bbox.y2.ceil() as usize).min(h - 1);
        let x0 = p.bbox.x1.floor().max(0.0) as usize;
        let x1 = (p.bbox.x2.ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inside_shape(cfg.classes[p.class_id].shape, &p.bbox, x as f64 + 0.5, y as f64 + 0.5) {
                    let base = (y * w + x) * 3;
                    for ch in 0..3 {
                        let bg = img[base + ch];
                        img[base + ch] = bg + (color[ch] - bg) * p.contrast;
                    }
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        for v in img.iter_mut() {
            *v = (*v + cfg.noise_std * rng::normal(r)).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[h, w, 3], img).expect("image shape")
}

/// Standalone rule checker: violations of every rule in every record.
pub fn check_rules(cfg: &SceneConfig, record: &SceneRecord) -> Vec<String> {
    let mut violations = Vec::new();
    for (i, inst) in record.instances.iter().enumerate() {
        for rule in cfg.rules.iter().filter(|r| r.dependent == inst.class_id) {
            let ok = record
                .instances
                .iter()
                .filter(|t| t.class_id == rule.trigger)
                .any(|t| relation_holds(&rule.relation, &inst.bbox, &t.bbox));
            if !ok {
                violations.push(format!(
                    "record seed {} instance {i}: {} lacks a {} satisfying its relation",
                    record.seed, cfg.classes[inst.class_id].name, cfg.classes[rule.trigger].name
                ));
            }
        }
    }
    for (i, inst) in record.instances.iter().enumerate() {
        if inst.bbox.area() < 4.0 || !inst.bbox.is_inside(cfg.image_w as f64, cfg.image_h as f64) {
            violations.push(format!("record seed {} instance {i}: bad box", record.seed));
        }
        for other in &record.instances[i + 1..] {
            if iou(&inst.bbox, &other.bbox) > cfg.max_overlap_iou + 1e-9 {
                violations.push(format!("record seed {} instance {i}: overlap policy violated", record.seed));
            }
        }
    }
    violations
}

/// Generate `count` records with per-record seeds `base_seed + index`.
pub fn generate_dataset(cfg: &SceneConfig, base_seed: u64, count: usize) -> Result<Vec<SceneRecord>> {
    let indices: Vec<usize> = (0..count).collect();
    let results: Vec<Result<SceneRecord>> = map_records(&indices, |&i| generate(cfg, base_seed + i as u64));
    results.into_iter().collect()
}

#[cfg(feature = "parallel")]
fn map_records<T: Send, U: Send + Sync, F: Fn(&U) -> T + Send + Sync>(items: &[U], f: F) -> Vec<T> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_records<T: Send, U: Send + Sync, F: Fn(&U) -> T + Send + Sync>(items: &[U], f: F) -> Vec<T> {
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_when_no_instances() {
        let cfg = SceneConfig { instances_min: 0, instances_max: 0, ..Default::default() };
        let rec = generate(&cfg, 5).unwrap();
        assert!(rec.instances.is_empty());
        assert_eq!(rec.image.shape(), &[64, 64, 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate(&cfg, 42).unwrap();
        let b = generate(&cfg, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.instances, b.instances);
        let c = generate(&cfg, 43).unwrap();
        assert!(c.image != a.image || c.instances != a.instances);
    }

    #[test]
    fn boxes_respect_bounds_and_area() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let rec = generate(&cfg, seed).unwrap();
            assert!(check_rules(&cfg, &rec).is_empty());
        }
    }

    #[test]
    fn near_rule_is_always_satisfied() {
        let mut cfg = SceneConfig::default();
        cfg.rules = vec![ContextRule {
            trigger: 0,
            dependent: 1,
            relation: Relation::Near { min_dist: 4.0, max_dist: 20.0 },
            contrast: 0.3,
        }];
        for seed in 0..200 {
            let rec = generate(&cfg, seed).unwrap();
            let violations = check_rules(&cfg, &rec);
            assert!(violations.is_empty(), "{violations:?}");
        }
    }

    #[test]
    fn class_balance_tracks_weights() {
        let cfg = SceneConfig::default();
        let recs = generate_dataset(&cfg, 900, 1000).unwrap();
        let mut counts = vec![0usize; cfg.classes.len()];
        let mut total = 0usize;
        for r in &recs {
            for i in &r.instances {
                counts[i.class_id] += 1;
                total += 1;
            }
        }
        let target = total as f64 / cfg.classes.len() as f64;
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - target).abs() / target;
            assert!(dev < 0.2, "class {c}: {n} vs target {target}");
        }
    }
}
