//! The spatial memory: a learned prior grid resized to the feature map, a
//! region read, input-feature fusion (conv patch + tiled class scores), a
//! convolutional GRU update, and a region write-back.
//!
//! Reads and writes are snapped to the integer cell cover of the detection's
//! feature-space box and run at that native resolution. Aligned reads are
//! exact crops and aligned writes exact pastes, so a closed update gate is a
//! bit-exact no-op and updates touch only cells intersecting the box.

use crate::boxes::BBox;
use crate::detector::img_to_map;
use crate::digest;
use crate::error::{Error, Result};
use crate::weights::{BoundConv, BoundGru, BoundSmn};
use smn_tensor::{ops, MapBox, Var};

#[derive(Clone)]
pub struct MemoryState {
    /// `[h', w', D]` grid aligned with the feature map; values in [-1, 1].
    pub grid: Var,
    pub iteration: usize,
}

impl MemoryState {
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.grid.value().len() * 8);
        for v in self.grid.value().values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        digest::hex(&digest::sha256(&bytes))[..16].to_string()
    }
}

/// Resize the learned prior to the feature-map extents. With matching sizes
/// this is an exact copy.
pub fn init_memory(prior: &Var, feat_h: usize, feat_w: usize) -> Result<MemoryState> {
    let (gh, gw, _d) = prior.value().dims3()?;
    let grid = if (gh, gw) == (feat_h, feat_w) {
        prior.clone()
    } else {
        ops::bilinear_resize(prior, feat_h, feat_w)?
    };
    Ok(MemoryState { grid, iteration: 0 })
}

/// Integer cell cover of a feature-space box, at least 2 cells per side.
/// Returned as an aligned cell-center box plus its patch extents.
pub fn snap_to_cells(bx: &MapBox, feat_h: usize, feat_w: usize) -> (MapBox, usize, usize) {
    let cover = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        let mut a = (lo + 0.5).floor().max(0.0) as usize;
        let mut b = (hi - 0.5).ceil().max(0.0) as usize;
        a = a.min(n - 1);
        b = b.clamp(a, n - 1);
        if b == a {
            if b + 1 < n {
                b += 1;
            } else if a > 0 {
                a -= 1;
            }
        }
        (a, b)
    };
    let (r0, r1) = cover(bx.y1, bx.y2, feat_h);
    let (c0, c1) = cover(bx.x1, bx.x2, feat_w);
    (
        MapBox::new(c0 as f64, r0 as f64, c1 as f64, r1 as f64),
        r1 - r0 + 1,
        c1 - c0 + 1,
    )
}

/// Tile the class-score vector at every cell of the conv patch, concatenate
/// along channels, and fuse with two 1x1 conv+relu layers down to D.
pub fn build_input_features(
    conv_patch: &Var,
    class_scores: &Var,
    fuse1: &BoundConv,
    fuse2: &BoundConv,
) -> Result<Var> {
    let (ph, pw, _cf) = conv_patch.value().dims3()?;
    let sum: f64 = class_scores.value().values().iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical(format!(
            "class scores must sum to 1 (got {sum:.9}); pass the softmax output"
        )));
    }
    let tiled = ops::tile_vec_hw(class_scores, ph, pw)?;
    let stacked = ops::concat_last(conv_patch, &tiled)?;
    let f1 = ops::relu(&ops::conv2d(&stacked, &fuse1.w, &fuse1.b, 1, 0)?);
    Ok(ops::relu(&ops::conv2d(&f1, &fuse2.w, &fuse2.b, 1, 0)?))
}

/// Convolutional GRU cell over a patch:
///   z = sigmoid(conv(x; Wz) + conv(h; Uz))
///   r = sigmoid(conv(x; Wr) + conv(h; Ur))
///   hc = tanh(conv(x; Wh) + conv(r * h; Uh))
///   h' = (1 - z) * h + z * hc
/// all convs 3x3 same-padded. Output stays in [-1, 1] wherever h is.
pub fn gru_write(old_patch: &Var, input_patch: &Var, gru: &BoundGru) -> Result<Var> {
    if old_patch.shape() != input_patch.shape() {
        return Err(Error::Numerical(format!(
            "gru patch shapes disagree: {:?} vs {:?}",
            old_patch.shape(),
            input_patch.shape()
        )));
    }
    let conv = |x: &Var, p: &crate::weights::BoundConv| ops::conv2d(x, &p.w, &p.b, 1, 1);
    let z = ops::sigmoid(&ops::add(&conv(input_patch, &gru.xz)?, &conv(old_patch, &gru.hz)?)?);
    let r = ops::sigmoid(&ops::add(&conv(input_patch, &gru.xr)?, &conv(old_patch, &gru.hr)?)?);
    let gated = ops::mul(&r, old_patch)?;
    let hc = ops::tanh(&ops::add(&conv(input_patch, &gru.xh)?, &conv(&gated, &gru.hh)?)?);
    // h + z * (hc - h)
    let delta = ops::mul(&z, &ops::sub(&hc, old_patch)?)?;
    ops::add(old_patch, &delta).map_err(Into::into)
}

/// One write: read the old cells and the conv features under the detection,
/// fuse with the class scores, run the GRU, and paste the result back.
/// Cells outside the snapped box are untouched.
pub fn memory_update(
    state: &MemoryState,
    detection_box: &BBox,
    feat: &Var,
    class_scores: &Var,
    smn: &BoundSmn,
    stride: usize,
) -> Result<MemoryState> {
    let (fh, fw, _d) = state.grid.value().dims3()?;
    let raw = img_to_map(detection_box, stride, fh, fw)?;
    let (aligned, ph, pw) = snap_to_cells(&raw, fh, fw);
    let old_patch = ops::roi_read(&state.grid, aligned, ph, pw)?;
    let conv_patch = ops::roi_read(feat, aligned, ph, pw)?;
    let input = build_input_features(&conv_patch, class_scores, &smn.feat_fuse1, &smn.feat_fuse2)?;
    let new_patch = gru_write(&old_patch, &input, &smn.gru)?;
    let grid = ops::roi_write(&state.grid, aligned, &new_patch)?;
    Ok(MemoryState { grid, iteration: state.iteration + 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rng;
    use crate::weights::{SmnWeights, VarRegistry};
    use rand::Rng;
    use smn_tensor::{Tape, Tensor};

    fn toy_smn(seed: u64) -> (RunConfig, SmnWeights) {
        let cfg = RunConfig::toy();
        let mut r = rng::stream(seed);
        let w = SmnWeights::init(&cfg.detector, &cfg.memory, &cfg.context, cfg.class_count(), &cfg.train, &mut r);
        (cfg, w)
    }

    #[test]
    fn init_memory_cases() {
        let tape = Tape::new();
        // Matched size: copied unchanged.
        let prior = tape.constant(Tensor::from_vec(&[4, 4, 2], (0..32).map(|v| v as f64 / 32.0).collect()).unwrap());
        let m = init_memory(&prior, 4, 4).unwrap();
        assert_eq!(m.grid.value(), prior.value());
        assert_eq!(m.iteration, 0);
        // Zero prior: zero memory at any size.
        let zero = tape.constant(Tensor::zeros(&[4, 4, 2]));
        let mz = init_memory(&zero, 9, 7).unwrap();
        assert_eq!(mz.grid.value().shape(), &[9, 7, 2]);
        assert!(mz.grid.value().values().iter().all(|&v| v == 0.0));
        // Constant prior: constant memory.
        let c = tape.constant(Tensor::full(&[4, 4, 2], 0.25));
        let mc = init_memory(&c, 6, 11).unwrap();
        assert!(mc.grid.value().values().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn input_features_shape_and_score_sensitivity() {
        let (cfg, w) = toy_smn(21);
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let p = cfg.memory.patch;
        let cfeat = cfg.detector.backbone_channels[3];
        let mut r = rng::stream(5);
        let conv_patch = tape.constant(
            Tensor::from_vec(&[p, p, cfeat], (0..p * p * cfeat).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let c1 = cfg.class_count() + 1;
        let uniform = tape.constant(Tensor::full(&[c1], 1.0 / c1 as f64));
        let out = build_input_features(&conv_patch, &uniform, &bound.feat_fuse1, &bound.feat_fuse2).unwrap();
        assert_eq!(out.value().shape(), &[p, p, cfg.memory.channels]);

        let mut vals = vec![0.0; c1];
        vals[1] = 1.0;
        let peaked = tape.constant(Tensor::from_vec(&[c1], vals).unwrap());
        let out2 = build_input_features(&conv_patch, &peaked, &bound.feat_fuse1, &bound.feat_fuse2).unwrap();
        assert!(out.value() != out2.value(), "score channel must be live");

        let bad = tape.constant(Tensor::full(&[c1], 0.4));
        assert!(build_input_features(&conv_patch, &bad, &bound.feat_fuse1, &bound.feat_fuse2).is_err());
    }

    #[test]
    fn gru_gate_limits() {
        let (cfg, mut w) = toy_smn(23);
        let d = cfg.memory.channels;
        // Closed update gate: zero weights, hugely negative bias makes
        // sigmoid exactly 0, so the output is exactly the old patch.
        w.gru.xz = crate::weights::ConvParams { w: Tensor::zeros(&[3, 3, d, d]), b: Tensor::full(&[d], -800.0) };
        w.gru.hz = Tensor::zeros(&[3, 3, d, d]);
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let mut r = rng::stream(31);
        let old = tape.constant(Tensor::from_vec(&[5, 5, d], (0..25 * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap());
        let input = tape.constant(Tensor::from_vec(&[5, 5, d], (0..25 * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap());
        let out = gru_write(&old, &input, &bound.gru).unwrap();
        assert_eq!(out.value().values(), old.value().values());

        // Open gate: output equals the tanh candidate, bounded in [-1, 1].
        let (_, mut w2) = toy_smn(24);
        w2.gru.xz = crate::weights::ConvParams { w: Tensor::zeros(&[3, 3, d, d]), b: Tensor::full(&[d], 800.0) };
        w2.gru.hz = Tensor::zeros(&[3, 3, d, d]);
        let tape2 = Tape::new();
        let mut reg2 = VarRegistry::new();
        let bound2 = w2.bind(&tape2, false, &mut reg2);
        let old2 = tape2.constant(Tensor::full(&[4, 4, d], 0.9));
        let input2 = tape2.constant(Tensor::full(&[4, 4, d], 2.0));
        let out2 = gru_write(&old2, &input2, &bound2.gru).unwrap();
        for &v in out2.value().values() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    /// The GRU must agree with a per-pixel recomputation assembled from the
    /// already-verified conv kernels.
    #[test]
    fn gru_matches_compositional_oracle() {
        let (cfg, w) = toy_smn(25);
        let d = cfg.memory.channels;
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let mut r = rng::stream(37);
        let old_t = Tensor::from_vec(&[4, 4, d], (0..16 * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let in_t = Tensor::from_vec(&[4, 4, d], (0..16 * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let old = tape.constant(old_t.clone());
        let input = tape.constant(in_t.clone());
        let out = gru_write(&old, &input, &bound.gru).unwrap();

        use smn_tensor::kernels as k;
        let dd = k::ConvDims::new(4, 4, d, 3, 3, d, 1, 1);
        let conv = |x: &Tensor, p: &crate::weights::ConvParams| {
            k::conv2d_forward(x.values(), p.w.values(), p.b.values(), &dd)
        };
        let conv_nb = |x: &Tensor, wt: &Tensor| {
            k::conv2d_forward(x.values(), wt.values(), &vec![0.0; d], &dd)
        };
        let zx = conv(&in_t, &w.gru.xz);
        let zh = conv_nb(&old_t, &w.gru.hz);
        let rx = conv(&in_t, &w.gru.xr);
        let rh = conv_nb(&old_t, &w.gru.hr);
        let hx = conv(&in_t, &w.gru.xh);
        for i in 0..16 * d {
            let z = k::sigmoid(zx[i] + zh[i]);
            let rr = k::sigmoid(rx[i] + rh[i]);
            let _ = rr;
            let _ = hx[i];
            let _ = z;
        }
        // Candidate needs conv over (r ⊙ h), so assemble it in full.
        let r_gate: Vec<f64> = (0..16 * d).map(|i| k::sigmoid(rx[i] + rh[i])).collect();
        let gated = Tensor::from_vec(&[4, 4, d], (0..16 * d).map(|i| r_gate[i] * old_t.values()[i]).collect()).unwrap();
        let hh = conv_nb(&gated, &w.gru.hh);
        for i in 0..16 * d {
            let z = k::sigmoid(zx[i] + zh[i]);
            let hc = (hx[i] + hh[i]).tanh();
            let expect = (1.0 - z) * old_t.values()[i] + z * hc;
            let got = out.value().values()[i];
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn memory_update_locality_and_commutation() {
        let (cfg, w) = toy_smn(27);
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let state = init_memory(&bound.prior, 16, 16).unwrap();
        let mut r = rng::stream(41);
        let feat = tape.constant(
            Tensor::from_vec(&[16, 16, cfg.detector.backbone_channels[3]],
                (0..16 * 16 * cfg.detector.backbone_channels[3]).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let c1 = cfg.class_count() + 1;
        let scores = tape.constant(Tensor::full(&[c1], 1.0 / c1 as f64));

        let det = BBox::new(8.0, 8.0, 24.0, 24.0);
        let next = memory_update(&state, &det, &feat, &scores, &bound, cfg.detector.stride).unwrap();
        assert_eq!(next.iteration, 1);
        // Feature box [8,24] px -> cells 2..=5; everything else bit-identical.
        let d = cfg.memory.channels;
        for row in 0..16 {
            for col in 0..16 {
                let inside = (2..=5).contains(&row) && (2..=5).contains(&col);
                for ch in 0..d {
                    let before = state.grid.value().at3(row, col, ch);
                    let after = next.grid.value().at3(row, col, ch);
                    if !inside {
                        assert_eq!(before, after, "cell ({row},{col}) changed outside the box");
                    }
                }
            }
        }

        // Disjoint updates commute bit-exactly.
        let det_a = BBox::new(4.0, 4.0, 16.0, 16.0);
        let det_b = BBox::new(40.0, 40.0, 56.0, 60.0);
        let ab = memory_update(
            &memory_update(&state, &det_a, &feat, &scores, &bound, cfg.detector.stride).unwrap(),
            &det_b, &feat, &scores, &bound, cfg.detector.stride,
        )
        .unwrap();
        let ba = memory_update(
            &memory_update(&state, &det_b, &feat, &scores, &bound, cfg.detector.stride).unwrap(),
            &det_a, &feat, &scores, &bound, cfg.detector.stride,
        )
        .unwrap();
        assert_eq!(ab.grid.value().values(), ba.grid.value().values());
    }

    #[test]
    fn memory_stays_bounded_over_many_updates() {
        let (cfg, w) = toy_smn(28);
        let tape = Tape::new();
        let mut reg = VarRegistry::new();
        let bound = w.bind(&tape, false, &mut reg);
        let mut state = init_memory(&bound.prior, 16, 16).unwrap();
        let mut r = rng::stream(43);
        let cfeat = cfg.detector.backbone_channels[3];
        let feat = tape.constant(
            Tensor::from_vec(&[16, 16, cfeat], (0..16 * 16 * cfeat).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap(),
        );
        let c1 = cfg.class_count() + 1;
        let scores = tape.constant(Tensor::full(&[c1], 1.0 / c1 as f64));
        for i in 0..40 {
            let x = ((i * 13) % 40) as f64 + 2.0;
            let y = ((i * 29) % 40) as f64 + 2.0;
            let det = BBox::new(x, y, x + 18.0, y + 14.0);
            state = memory_update(&state, &det, &feat, &scores, &bound, cfg.detector.stride).unwrap();
            for &v in state.grid.value().values() {
                assert!((-1.0..=1.0).contains(&v), "cell escaped [-1,1]: {v}");
            }
        }
        assert_eq!(state.iteration, 40);
    }
}
