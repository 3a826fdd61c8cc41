//! The full gradient verification suite: every differentiable op plus the
//! composite paths the sequential model depends on (input fusion through the
//! GRU into the reverse-RoI write, a multi-step memory chain, and the fused
//! heads behind a stop-gradient). Shared by the `gradcheck` command and the
//! acceptance tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::memory::{build_input_features, gru_write};
use crate::rng;
use crate::weights::{BoundConv, BoundGru};
use smn_tensor::{grad_check, ops, MapBox, Tensor, Var};

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    /// Maximum relative error across all seeds and input elements.
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_pair(w: &Var, b: &Var) -> BoundConv {
    BoundConv { w: w.clone(), b: b.clone() }
}

/// Max of a closure over seeds.
fn over_seeds(seeds: u64, mut f: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream(0xB00 + seed);
        worst = worst.max(f(&mut r)?);
    }
    Ok(worst)
}

pub fn run_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();

    out.push(SuiteEntry {
        name: "conv2d",
        max_rel_err: over_seeds(seeds, |r| {
            let inputs = [rand_tensor(r, &[4, 5, 2]), rand_tensor(r, &[3, 3, 2, 2]), rand_tensor(r, &[2])];
            Ok(grad_check(
                |_, v| Ok(ops::sum_all(&ops::tanh(&ops::conv2d(&v[0], &v[1], &v[2], 1, 1)?))),
                &inputs,
                EPSILON,
            )?)
        })?,
    });

    out.push(SuiteEntry {
        name: "fully_connected",
        max_rel_err: over_seeds(seeds, |r| {
            let inputs = [rand_tensor(r, &[3, 5]), rand_tensor(r, &[5, 4]), rand_tensor(r, &[4])];
            Ok(grad_check(
                |_, v| Ok(ops::sum_all(&ops::sigmoid(&ops::fully_connected(&v[0], &v[1], &v[2])?))),
                &inputs,
                EPSILON,
            )?)
        })?,
    });

    for (name, kind) in [
        ("activation_relu", ops::Activation::Relu),
        ("activation_sigmoid", ops::Activation::Sigmoid),
        ("activation_tanh", ops::Activation::Tanh),
        ("activation_softmax", ops::Activation::SoftmaxLast),
    ] {
        out.push(SuiteEntry {
            name,
            max_rel_err: over_seeds(seeds, |r| {
                // Keep relu inputs away from its kink.
                let x = rand_tensor(r, &[3, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
                let probe = rand_tensor(r, &[3, 4]);
                Ok(grad_check(
                    |tape, v| {
                        let y = ops::activation(&v[0], kind);
                        Ok(ops::sum_all(&ops::mul(&y, &tape.constant(probe.clone()))?))
                    },
                    &[x],
                    EPSILON,
                )?)
            })?,
        });
    }

    out.push(SuiteEntry {
        name: "bilinear_resize",
        max_rel_err: over_seeds(seeds, |r| {
            let x = rand_tensor(r, &[4, 5, 2]);
            let probe = rand_tensor(r, &[7, 3, 2]);
            Ok(grad_check(
                |tape, v| {
                    let y = ops::bilinear_resize(&v[0], 7, 3)?;
                    Ok(ops::sum_all(&ops::mul(&y, &tape.constant(probe.clone()))?))
                },
                &[x],
                EPSILON,
            )?)
        })?,
    });

    out.push(SuiteEntry {
        name: "roi_read",
        max_rel_err: over_seeds(seeds, |r| {
            let m = rand_tensor(r, &[5, 5, 2]);
            let probe = rand_tensor(r, &[3, 4, 2]);
            let bx = MapBox::new(0.4 + r.gen_range(0.0..0.5), 0.3, 3.6, 3.9);
            Ok(grad_check(
                |tape, v| {
                    let y = ops::roi_read(&v[0], bx, 3, 4)?;
                    Ok(ops::sum_all(&ops::mul(&y, &tape.constant(probe.clone()))?))
                },
                &[m],
                EPSILON,
            )?)
        })?,
    });

    out.push(SuiteEntry {
        name: "roi_write",
        max_rel_err: over_seeds(seeds, |r| {
            let m = rand_tensor(r, &[5, 5, 2]);
            let p = rand_tensor(r, &[3, 3, 2]);
            let probe = rand_tensor(r, &[5, 5, 2]);
            let bx = MapBox::new(0.7, 1.2, 3.4, 3.8);
            Ok(grad_check(
                |tape, v| {
                    let y = ops::roi_write(&v[0], bx, &v[1])?;
                    Ok(ops::sum_all(&ops::mul(&y, &tape.constant(probe.clone()))?))
                },
                &[m, p],
                EPSILON,
            )?)
        })?,
    });

    out.push(SuiteEntry {
        name: "roi_pool_max",
        max_rel_err: over_seeds(seeds, |r| {
            // Distinct, well-separated values keep the argmax stable.
            let mut vals: Vec<f64> = (0..72).map(|i| i as f64 * 0.04).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(r);
            let m = Tensor::from_vec(&[6, 6, 2], vals).unwrap();
            let probe = rand_tensor(r, &[2, 2, 2, 2]);
            let boxes = [MapBox::new(0.5, 0.5, 3.4, 3.2), MapBox::new(2.1, 1.3, 5.0, 4.6)];
            Ok(grad_check(
                |tape, v| {
                    let y = ops::roi_pool_max_batch(&v[0], &boxes, 2, 2)?;
                    Ok(ops::sum_all(&ops::mul(&y, &tape.constant(probe.clone()))?))
                },
                &[m],
                EPSILON,
            )?)
        })?,
    });

    out.push(SuiteEntry {
        name: "losses",
        max_rel_err: over_seeds(seeds, |r| {
            let logits = rand_tensor(r, &[4, 3]);
            let e1 = grad_check(
                |_, v| ops::softmax_ce_rows(&v[0], &[Some(0), Some(2), None, Some(1)]),
                &[logits],
                EPSILON,
            )?;
            let obj = rand_tensor(r, &[6]);
            let t: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            let e2 = grad_check(|_, v| ops::bce_logits(&v[0], &t), &[obj], EPSILON)?;
            let pred = rand_tensor(r, &[3, 4]);
            let target = pred.map(|v| v + if v > 0.0 { 2.0 } else { 0.4 });
            let e3 = grad_check(|_, v| ops::smooth_l1(&v[0], &target, 1.0), &[pred], EPSILON)?;
            Ok(e1.max(e2).max(e3))
        })?,
    });

    // Toy backbone block: two strided conv+relu stages.
    out.push(SuiteEntry {
        name: "backbone_block",
        max_rel_err: over_seeds(seeds, |r| {
            let img = rand_tensor(r, &[8, 8, 2]);
            let w1 = rand_tensor(r, &[3, 3, 2, 3]);
            let b1 = rand_tensor(r, &[3]);
            let w2 = rand_tensor(r, &[3, 3, 3, 3]);
            let b2 = rand_tensor(r, &[3]);
            Ok(grad_check(
                |_, v| {
                    let x = ops::tanh(&ops::conv2d(&v[0], &v[1], &v[2], 2, 1)?);
                    let y = ops::tanh(&ops::conv2d(&x, &v[3], &v[4], 2, 1)?);
                    Ok(ops::sum_all(&y))
                },
                &[img, w1, b1, w2, b2],
                EPSILON,
            )?)
        })?,
    });

    // Composite: class scores tiled into the conv patch, fused, written
    // through the GRU, scattered back into the memory.
    let d = 3usize;
    let cfeat = 2usize;
    let c1 = 3usize;
    let fusion_graph = |v: &[Var], steps: usize| -> smn_tensor::Result<Var> {
        let mem0 = &v[0];
        let feat = &v[1];
        let fuse1 = conv_pair(&v[2], &v[3]);
        let fuse2 = conv_pair(&v[4], &v[5]);
        let zero_b = v[0].tape().constant(Tensor::zeros(&[d]));
        let gru = BoundGru {
            xz: conv_pair(&v[6], &v[7]),
            hz: BoundConv { w: v[8].clone(), b: zero_b.clone() },
            xr: conv_pair(&v[9], &v[10]),
            hr: BoundConv { w: v[11].clone(), b: zero_b.clone() },
            xh: conv_pair(&v[12], &v[13]),
            hh: BoundConv { w: v[14].clone(), b: zero_b },
        };
        let boxes = [
            MapBox::new(1.0, 1.0, 3.0, 3.0),
            MapBox::new(2.0, 0.0, 4.0, 2.0),
            MapBox::new(0.0, 2.0, 2.0, 4.0),
        ];
        let mut mem = mem0.clone();
        for (step, bx) in boxes.iter().take(steps).enumerate() {
            let logits = ops::slice_flat(&v[15], step * c1, c1)?;
            let scores = ops::softmax_last(&logits);
            let old = ops::roi_read(&mem, *bx, 3, 3)?;
            let patch = ops::roi_read(feat, *bx, 3, 3)?;
            let x = build_input_features(&patch, &scores, &fuse1, &fuse2)
                .map_err(|_| smn_tensor::TensorError::NonFinite("fusion"))?;
            let h = gru_write(&old, &x, &gru).map_err(|_| smn_tensor::TensorError::NonFinite("gru"))?;
            mem = ops::roi_write(&mem, *bx, &h)?;
        }
        Ok(mem)
    };
    let fusion_inputs = |r: &mut ChaCha8Rng, steps: usize| -> Vec<Tensor> {
        vec![
            rand_tensor(r, &[5, 5, d]).map(|v| v * 0.8),
            rand_tensor(r, &[5, 5, cfeat]),
            rand_tensor(r, &[1, 1, cfeat + c1, d]),
            rand_tensor(r, &[d]),
            rand_tensor(r, &[1, 1, d, d]),
            rand_tensor(r, &[d]),
            rand_tensor(r, &[3, 3, d, d]),
            rand_tensor(r, &[d]),
            rand_tensor(r, &[3, 3, d, d]),
            rand_tensor(r, &[3, 3, d, d]),
            rand_tensor(r, &[d]),
            rand_tensor(r, &[3, 3, d, d]),
            rand_tensor(r, &[3, 3, d, d]),
            rand_tensor(r, &[d]),
            rand_tensor(r, &[3, 3, d, d]),
            rand_tensor(r, &[steps, c1]).reshape(&[steps * c1]).unwrap(),
        ]
    };

    out.push(SuiteEntry {
        name: "input_fusion_gru_write",
        max_rel_err: over_seeds(seeds, |r| {
            let probe = rand_tensor(r, &[5, 5, d]);
            let inputs = fusion_inputs(r, 1);
            Ok(grad_check(
                |tape, v| {
                    let mem = fusion_graph(v, 1)?;
                    Ok(ops::sum_all(&ops::mul(&mem, &tape.constant(probe.clone()))?))
                },
                &inputs,
                EPSILON,
            )?)
        })?,
    });

    out.push(SuiteEntry {
        name: "bptt_3_step_chain",
        max_rel_err: over_seeds(seeds, |r| {
            let probe = rand_tensor(r, &[5, 5, d]);
            let inputs = fusion_inputs(r, 3);
            Ok(grad_check(
                |tape, v| {
                    let mem = fusion_graph(v, 3)?;
                    Ok(ops::sum_all(&ops::mul(&mem, &tape.constant(probe.clone()))?))
                },
                &inputs,
                EPSILON,
            )?)
        })?,
    });

    // Fused heads with the base branch behind a stop-gradient: the checked
    // inputs are the memory branch only (the base branch's gradient is
    // exactly zero by construction, which finite differences cannot see).
    out.push(SuiteEntry {
        name: "fused_heads_stop_gradient",
        max_rel_err: over_seeds(seeds, |r| {
            let base_w = rand_tensor(r, &[4, 3]);
            let base_b = rand_tensor(r, &[3]);
            let x = rand_tensor(r, &[2, 4]);
            let mem_w = rand_tensor(r, &[4, 3]);
            let mem_b = rand_tensor(r, &[3]);
            Ok(grad_check(
                |tape, v| {
                    let xv = tape.constant(x.clone());
                    let base_logits =
                        ops::fully_connected(&xv, &tape.constant(base_w.clone()), &tape.constant(base_b.clone()))?;
                    let mem_logits = ops::fully_connected(&xv, &v[0], &v[1])?;
                    let fused = ops::add(&base_logits.detach(), &mem_logits)?;
                    ops::softmax_ce_rows(&fused, &[Some(1), Some(0)])
                },
                &[mem_w, mem_b],
                EPSILON,
            )?)
        })?,
    });

    Ok(out)
}
