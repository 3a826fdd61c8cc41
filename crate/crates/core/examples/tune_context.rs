//! Scratch harness for tuning the rule-dataset difficulty. Not part of the
//! deliverable surface; driven by env vars.

use smn_core::config::RunConfig;
use smn_core::methods::{evaluate_protocol, MethodSpec, Protocol};
use smn_core::rng;
use smn_core::scene::{generate_dataset, ClassSpec, ContextRule, Relation, ShapeKind};
use smn_core::trainer::{curriculum_train, train_base, train_mlp};

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let contrast = env_f64("CONTRAST", 0.22);
    let noise = env_f64("NOISE", 0.03);
    let base_steps = env_usize("BASE_STEPS", 1500);
    let smn_steps = env_usize("SMN_STEPS", 1500);
    let seed_salt = env_usize("SEED", 0) as u64;
    let n_train = env_usize("NTRAIN", 2000);
    let size_min = env_f64("SIZE_MIN", 10.0);
    let size_max = env_f64("SIZE_MAX", 18.0);

    let mut cfg = RunConfig::toy();
    // Shadow and drifter share appearance exactly; only the spatial relation
    // to a beacon separates them.
    cfg.scene.classes = vec![
        ClassSpec { name: "beacon".into(), shape: ShapeKind::Circle, color: [0.95, 0.85, 0.1], weight: 1.0, contrast: 1.0 },
        ClassSpec { name: "shadow".into(), shape: ShapeKind::Square, color: [0.05, 0.1, 0.9], weight: env_f64("WSHADOW", 0.7), contrast },
        ClassSpec { name: "drifter".into(), shape: ShapeKind::Square, color: [0.05, 0.1, 0.9], weight: env_f64("WDRIFT", 1.2), contrast },
    ];
    cfg.scene.rules = vec![ContextRule {
        trigger: 0,
        dependent: 1,
        relation: Relation::Near { min_dist: env_f64("DMIN", 8.0), max_dist: env_f64("DMAX", 18.0) },
        contrast: 1.0,
    }];
    cfg.scene.instances_min = 2;
    cfg.scene.instances_max = 4;
    cfg.scene.noise_std = noise;
    cfg.scene.size_min = size_min;
    cfg.scene.size_max = size_max;
    cfg.detector.proposal_count_na = 192;
    cfg.train.seed = 100 + seed_salt;
    cfg.train.base_steps = base_steps;
    cfg.train.lr_drop_step = base_steps * 4 / 5;
    cfg.train.curriculum = match std::env::var("CURRICULUM").ok().as_deref() {
        Some(spec) => spec
            .split(';')
            .map(|stage| {
                let (n, s) = stage.split_once(':').unwrap();
                (n.parse().unwrap(), s.parse().unwrap())
            })
            .collect(),
        None => vec![(2, smn_steps)],
    };
    cfg.train.smn_steps = smn_steps;
    cfg.rollout.n1 = env_usize("N1", 0);
    cfg.rollout.n2 = env_usize("N2", 8);
    if let Ok(floor) = std::env::var("FLOOR") {
        cfg.rollout.softmax_floor = floor.parse().unwrap();
    }

    let t0 = std::time::Instant::now();
    let train = generate_dataset(&cfg.scene, 20_000 + seed_salt * 1000, n_train).unwrap();
    let heldout = generate_dataset(&cfg.scene, 80_000 + seed_salt * 1000, 200).unwrap();
    println!("datasets in {:.0}s", t0.elapsed().as_secs_f64());

    let mut r = rng::stream(cfg.train.seed);
    let t = std::time::Instant::now();
    let (mut base, _) = train_base(&cfg, &train, &mut r, None).unwrap();
    println!("base trained in {:.0}s", t.elapsed().as_secs_f64());
    let t = std::time::Instant::now();
    let (smn, _) = curriculum_train(&cfg, &train, &mut base, &cfg.train.curriculum.clone(), &mut r, None).unwrap();
    println!("smn trained in {:.0}s", t.elapsed().as_secs_f64());
    let t = std::time::Instant::now();
    let (mlp, _) = train_mlp(&cfg, &train, &base, cfg.train.smn_steps, &mut r).unwrap();
    println!("mlp trained in {:.0}s", t.elapsed().as_secs_f64());

    let protocol = Protocol::standard(&cfg, 10);
    let t = std::time::Instant::now();
    let rb = evaluate_protocol(&cfg, MethodSpec::Baseline { base: &base }, &protocol, &heldout).unwrap();
    let rm = evaluate_protocol(&cfg, MethodSpec::Mlp { base: &base, mlp: &mlp }, &protocol, &heldout).unwrap();
    let rs = evaluate_protocol(&cfg, MethodSpec::Smn { base: &base, smn: &smn }, &protocol, &heldout).unwrap();
    println!("evals in {:.0}s", t.elapsed().as_secs_f64());

    if std::env::var("SWEEP").is_ok() {
        for n2 in [4usize, 6, 8, 10] {
            for tail in [None, Some(0.5)] {
                let mut c2 = cfg.clone();
                c2.rollout.n1 = 0;
                c2.rollout.n2 = n2;
                c2.rollout.tail_nms_iou = tail;
                let p2 = Protocol::standard(&c2, 10);
                let r2 = evaluate_protocol(&c2, MethodSpec::Smn { base: &base, smn: &smn }, &p2, &heldout).unwrap();
                println!(
                    "[sweep] n2={n2} tail={tail:?}: shadow AP50 {:.3}, overall AP50 {:.3}, AR10 {:.3}",
                    r2.per_class_ap50[1], r2.ap50, r2.ar10
                );
            }
        }
    }

    // Shadow-class recall diagnostic: fraction of shadow instances covered
    // by any emitted detection (IoU >= 0.5), and emitted score stats.
    for (name, spec) in [
        ("baseline", MethodSpec::Baseline { base: &base }),
        ("mlp", MethodSpec::Mlp { base: &base, mlp: &mlp }),
        ("smn", MethodSpec::Smn { base: &base, smn: &smn }),
    ] {
        let mut covered = 0usize;
        let mut total = 0usize;
        let mut shadow_dets = 0usize;
        let mut score_sum = 0.0;
        for rec in heldout.iter().take(100) {
            let dets = smn_core::methods::detect_with(&cfg, spec, &protocol, rec).unwrap();
            for inst in rec.instances.iter().filter(|i| i.class_id == 1) {
                total += 1;
                if dets.iter().any(|d| d.class_id == 1 && smn_core::boxes::iou(&d.bbox, &inst.bbox) >= 0.5) {
                    covered += 1;
                }
            }
            for d in dets.iter().filter(|d| d.class_id == 1) {
                shadow_dets += 1;
                score_sum += d.score;
            }
        }
        println!(
            "[diag {name}] shadow coverage {covered}/{total}, {shadow_dets} shadow dets, mean score {:.3}",
            score_sum / shadow_dets.max(1) as f64
        );
    }
    println!(
        "contrast={contrast} noise={noise} steps={base_steps}/{smn_steps} seed={seed_salt}\n\
         shadow AP50: baseline {:.3} | mlp {:.3} | smn {:.3}  (smn-mlp gap {:+.3})\n\
         overall AP50: baseline {:.3} | mlp {:.3} | smn {:.3}\n\
         AR10:         baseline {:.3} | mlp {:.3} | smn {:.3}",
        rb.per_class_ap50[1], rm.per_class_ap50[1], rs.per_class_ap50[1],
        rs.per_class_ap50[1] - rm.per_class_ap50[1],
        rb.ap50, rm.ap50, rs.ap50,
        rb.ar10, rm.ar10, rs.ar10,
    );
}
