//! Training-loop behavior: overfit sanity, determinism, gradient isolation,
//! and curriculum resumption consistency.

use smn_core::config::RunConfig;
use smn_core::rng;
use smn_core::scene::generate_dataset;
use smn_core::trainer::{curriculum_train, smn_step, train_base, train_smn, Sgd};
use smn_core::weights::{NamedParams, SmnWeights};

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.scene.instances_min = 1;
    cfg.scene.instances_max = 2;
    cfg.detector.proposal_count_na = 128;
    cfg.train.base_steps = 120;
    cfg.train.lr_drop_step = 100;
    cfg
}

#[test]
fn base_overfits_a_fixed_batch() {
    let cfg = small_cfg();
    let dataset = generate_dataset(&cfg.scene, 100, 8).unwrap();
    let mut r = rng::stream(cfg.train.seed);
    let t0 = std::time::Instant::now();
    let (_w, rows) = train_base(&cfg, &dataset, &mut r, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "base training: {} steps in {dt:.1}s ({:.1} steps/s)",
        rows.len(),
        rows.len() as f64 / dt
    );
    let first: f64 = rows[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let last: f64 = rows[rows.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    println!("loss first10={first:.4} last10={last:.4}");
    assert!(last < first, "loss must drop on a fixed batch: {first} -> {last}");
}

#[test]
fn base_training_is_deterministic_and_zero_lr_is_identity() {
    let mut cfg = small_cfg();
    cfg.train.base_steps = 25;
    let dataset = generate_dataset(&cfg.scene, 200, 4).unwrap();

    let (mut w1, rows1) = train_base(&cfg, &dataset, &mut rng::stream(7), None).unwrap();
    let (mut w2, rows2) = train_base(&cfg, &dataset, &mut rng::stream(7), None).unwrap();
    assert_eq!(w1.checksum(), w2.checksum());
    let t1: Vec<f64> = rows1.iter().map(|r| r.total).collect();
    let t2: Vec<f64> = rows2.iter().map(|r| r.total).collect();
    assert_eq!(t1, t2, "loss curves must be identical under a fixed seed");

    let mut zero = cfg.clone();
    zero.train.lr = 0.0;
    zero.train.lr_after = 0.0;
    let mut r = rng::stream(9);
    let mut init = smn_core::weights::BaseWeights::init(&zero.detector, zero.class_count(), &zero.train, &mut r);
    let before = init.checksum();
    let mut opt = Sgd::new(zero.train.momentum, zero.train.clip_norm);
    for _ in 0..5 {
        smn_core::trainer::base_step(&zero, &dataset[0], &mut init, &mut opt, 0.0, &mut r).unwrap();
    }
    assert_eq!(init.checksum(), before, "zero learning rate must leave weights unchanged");
}

#[test]
fn smn_stage_never_touches_base_weights() {
    let mut cfg = small_cfg();
    cfg.train.base_steps = 30;
    let dataset = generate_dataset(&cfg.scene, 300, 4).unwrap();
    let mut r = rng::stream(11);
    let (mut base, _) = train_base(&cfg, &dataset, &mut r, None).unwrap();
    let frozen = base.checksum();

    let mut smn = SmnWeights::init(&cfg.detector, &cfg.memory, &cfg.context, cfg.class_count(), &cfg.train, &mut r);
    let before_smn = smn.checksum();
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.clip_norm);
    let t0 = std::time::Instant::now();
    let steps = 40;
    train_smn(&cfg, &dataset, &mut base, &mut smn, steps, 2, &mut opt, &mut r, None, 0).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("smn training: {steps} steps (N=2) in {dt:.1}s ({:.1} steps/s)", steps as f64 / dt);
    assert_eq!(base.checksum(), frozen, "base weights must stay byte-identical");
    assert_ne!(smn.checksum(), before_smn, "memory weights must move");
}

#[test]
fn single_iteration_unroll_leaves_weights_unchanged() {
    let cfg = small_cfg();
    let dataset = generate_dataset(&cfg.scene, 400, 2).unwrap();
    let mut r = rng::stream(13);
    let mut base = smn_core::weights::BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut r);
    let mut smn = SmnWeights::init(&cfg.detector, &cfg.memory, &cfg.context, cfg.class_count(), &cfg.train, &mut r);
    let before = smn.checksum();
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.clip_norm);
    let b = smn_step(&cfg, &dataset[0], &mut base, &mut smn, 1, &mut opt, 1e-3, &mut r).unwrap();
    assert_eq!(b.total, 0.0, "one two-stage iteration has nothing to supervise");
    assert_eq!(smn.checksum(), before);
}

#[test]
fn curriculum_resumption_is_consistent() {
    let mut cfg = small_cfg();
    cfg.train.base_steps = 20;
    let dataset = generate_dataset(&cfg.scene, 500, 4).unwrap();
    let mut r = rng::stream(17);
    let (mut base, _) = train_base(&cfg, &dataset, &mut r, None).unwrap();

    let (mut a, _) = curriculum_train(&cfg, &dataset, &mut base, &[(2, 6), (2, 6)], &mut rng::stream(23), None).unwrap();
    let (mut b, _) = curriculum_train(&cfg, &dataset, &mut base, &[(2, 12)], &mut rng::stream(23), None).unwrap();
    assert_eq!(a.checksum(), b.checksum(), "split schedule must equal the merged one");

    // Bootstrapping a longer unroll from a shorter one must run.
    let (_c, rows) = curriculum_train(&cfg, &dataset, &mut base, &[(2, 4), (3, 4)], &mut rng::stream(29), None).unwrap();
    assert_eq!(rows.len(), 8);
}

#[test]
fn dedup_supervision_reduces_the_loss() {
    let mut cfg = small_cfg();
    cfg.train.base_steps = 60;
    // Single-class scenes so the only thing to learn at iteration 1 is
    // suppression of the already-detected instance.
    cfg.scene.classes[1].weight = 0.0;
    cfg.scene.classes[2].weight = 0.0;
    cfg.scene.classes[3].weight = 0.0;
    cfg.scene.instances_min = 1;
    cfg.scene.instances_max = 1;
    let dataset = generate_dataset(&cfg.scene, 600, 6).unwrap();
    let mut r = rng::stream(31);
    let (mut base, _) = train_base(&cfg, &dataset, &mut r, None).unwrap();
    let mut smn = SmnWeights::init(&cfg.detector, &cfg.memory, &cfg.context, cfg.class_count(), &cfg.train, &mut r);
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.clip_norm);
    let rows = train_smn(&cfg, &dataset, &mut base, &mut smn, 300, 2, &mut opt, &mut r, None, 0).unwrap();
    let window = 50;
    let avg = |lo: usize| -> f64 {
        rows[lo..lo + window].iter().map(|r| r.cls).sum::<f64>() / window as f64
    };
    let first = avg(0);
    let last = avg(rows.len() - window);
    println!("dedup cls loss: first50={first:.4} last50={last:.4}");
    assert!(
        last < first,
        "classification (de-dup) loss must fall: {first:.4} -> {last:.4}"
    );
}
