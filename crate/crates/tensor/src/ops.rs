//! Differentiable operators. Each op validates shapes, runs the forward
//! kernel, and records a backward closure onto the tape of its inputs.
//! The operator set is exactly what the detection pipeline needs; there is
//! no general broadcasting.

use crate::error::{Result, TensorError};
use crate::kernels as k;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax over the last axis; every slice sums to one.
    SoftmaxLast,
}

fn out_tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    let t = Tensor::from_parts(shape, data);
    debug_assert!(t.is_finite(), "non-finite values out of a forward op");
    t
}

// ----------------------------------------------------------------- conv2d

pub fn conv2d(input: &Var, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Result<Var> {
    input.same_tape(weight)?;
    input.same_tape(bias)?;
    let (h, w, cin) = input.value().dims3()?;
    let (kh, kw, wcin, cout) = weight.value().dims4()?;
    if wcin != cin {
        return Err(TensorError::shape(
            "conv2d",
            format!("input channels {cin} != weight input channels {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::shape("conv2d", format!("kernel must be odd, got {kh}x{kw}")));
    }
    if bias.value().dims1()? != cout {
        return Err(TensorError::shape(
            "conv2d",
            format!("bias length {} != output channels {cout}", bias.value().len()),
        ));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"),
        ));
    }
    let dims = k::ConvDims::new(h, w, cin, kh, kw, cout, stride, pad);
    let out = k::conv2d_forward(input.value().values(), weight.value().values(), bias.value().values(), &dims);
    let value = out_tensor(vec![dims.oh, dims.ow, cout], out);

    let tape = input.tape().clone();
    let requires = input.requires() || weight.requires() || bias.requires();
    let (in_id, wt_id, b_id) = (input.id, weight.id, bias.id);
    let (in_val, wt_val) = (input.value().clone(), weight.value().clone());
    let id = tape.record(
        value.clone(),
        requires,
        Box::new(move |g, sink| {
            let dims = k::ConvDims::new(h, w, cin, kh, kw, cout, stride, pad);
            sink.accum(in_id, |buf| {
                let gi = k::conv2d_backward_input(g, wt_val.values(), &dims);
                for (b, v) in buf.iter_mut().zip(gi) {
                    *b += v;
                }
            });
            sink.accum(wt_id, |buf| {
                let gw = k::conv2d_backward_weight(in_val.values(), g, &dims);
                for (b, v) in buf.iter_mut().zip(gw) {
                    *b += v;
                }
            });
            sink.accum(b_id, |buf| {
                let gb = k::conv2d_backward_bias(g, cout);
                for (b, v) in buf.iter_mut().zip(gb) {
                    *b += v;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

// ------------------------------------------------------- fully connected

/// Affine map over the last axis: `[.., din] x [din, dout] + bias`.
pub fn fully_connected(input: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    input.same_tape(weight)?;
    input.same_tape(bias)?;
    let (din, dout) = weight.value().dims2()?;
    let in_shape = input.value().shape();
    let last = *in_shape.last().unwrap();
    if last != din {
        return Err(TensorError::shape(
            "fully_connected",
            format!("input last extent {last} != weight rows {din}"),
        ));
    }
    if bias.value().dims1()? != dout {
        return Err(TensorError::shape(
            "fully_connected",
            format!("bias length {} != weight cols {dout}", bias.value().len()),
        ));
    }
    let rows = input.value().len() / din;
    let out = k::matmul_bias_forward(input.value().values(), weight.value().values(), bias.value().values(), rows, din, dout);
    let mut out_shape = in_shape.to_vec();
    *out_shape.last_mut().unwrap() = dout;
    let value = out_tensor(out_shape, out);

    let tape = input.tape().clone();
    let requires = input.requires() || weight.requires() || bias.requires();
    let (in_id, wt_id, b_id) = (input.id, weight.id, bias.id);
    let (in_val, wt_val) = (input.value().clone(), weight.value().clone());
    let id = tape.record(
        value.clone(),
        requires,
        Box::new(move |g, sink| {
            sink.accum(in_id, |buf| {
                let gi = k::matmul_backward_input(g, wt_val.values(), rows, din, dout);
                for (b, v) in buf.iter_mut().zip(gi) {
                    *b += v;
                }
            });
            sink.accum(wt_id, |buf| {
                let gw = k::matmul_backward_weight(in_val.values(), g, rows, din, dout);
                for (b, v) in buf.iter_mut().zip(gw) {
                    *b += v;
                }
            });
            sink.accum(b_id, |buf| {
                let gb = k::matmul_backward_bias(g, rows, dout);
                for (b, v) in buf.iter_mut().zip(gb) {
                    *b += v;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

// ------------------------------------------------------------ activations

pub fn activation(input: &Var, kind: Activation) -> Var {
    match kind {
        Activation::Relu => relu(input),
        Activation::Sigmoid => sigmoid(input),
        Activation::Tanh => tanh(input),
        Activation::SoftmaxLast => softmax_last(input),
    }
}

pub fn relu(input: &Var) -> Var {
    let value = out_tensor(
        input.shape().to_vec(),
        input.value().values().iter().map(|&v| v.max(0.0)).collect(),
    );
    let tape = input.tape().clone();
    let in_id = input.id;
    let in_val = input.value().clone();
    let id = tape.record(
        value.clone(),
        input.requires(),
        Box::new(move |g, sink| {
            sink.accum(in_id, |buf| {
                for ((b, &gv), &x) in buf.iter_mut().zip(g).zip(in_val.values()) {
                    if x > 0.0 {
                        *b += gv;
                    }
                }
            });
        }),
    );
    Var { tape, id, value }
}

pub fn sigmoid(input: &Var) -> Var {
    let value = out_tensor(
        input.shape().to_vec(),
        input.value().values().iter().map(|&v| k::sigmoid(v)).collect(),
    );
    let tape = input.tape().clone();
    let in_id = input.id;
    let out_val = value.clone();
    let id = tape.record(
        value.clone(),
        input.requires(),
        Box::new(move |g, sink| {
            sink.accum(in_id, |buf| {
                for ((b, &gv), &s) in buf.iter_mut().zip(g).zip(out_val.values()) {
                    *b += gv * s * (1.0 - s);
                }
            });
        }),
    );
    Var { tape, id, value }
}

pub fn tanh(input: &Var) -> Var {
    let value = out_tensor(
        input.shape().to_vec(),
        input.value().values().iter().map(|&v| v.tanh()).collect(),
    );
    let tape = input.tape().clone();
    let in_id = input.id;
    let out_val = value.clone();
    let id = tape.record(
        value.clone(),
        input.requires(),
        Box::new(move |g, sink| {
            sink.accum(in_id, |buf| {
                for ((b, &gv), &t) in buf.iter_mut().zip(g).zip(out_val.values()) {
                    *b += gv * (1.0 - t * t);
                }
            });
        }),
    );
    Var { tape, id, value }
}

pub fn softmax_last(input: &Var) -> Var {
    let slice = *input.shape().last().unwrap();
    let value = out_tensor(input.shape().to_vec(), k::softmax_last(input.value().values(), slice));
    let tape = input.tape().clone();
    let in_id = input.id;
    let out_val = value.clone();
    let id = tape.record(
        value.clone(),
        input.requires(),
        Box::new(move |g, sink| {
            sink.accum(in_id, |buf| {
                for ((b, gv), s) in buf
                    .chunks_mut(slice)
                    .zip(g.chunks(slice))
                    .zip(out_val.values().chunks(slice))
                {
                    let dot: f64 = gv.iter().zip(s).map(|(a, b)| a * b).sum();
                    for ((bv, &gvv), &sv) in b.iter_mut().zip(gv).zip(s) {
                        *bv += sv * (gvv - dot);
                    }
                }
            });
        }),
    );
    Var { tape, id, value }
}

// -------------------------------------------------------------- elementwise

fn check_same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    a.same_tape(b)?;
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    check_same_shape("add", a, b)?;
    let value = out_tensor(
        a.shape().to_vec(),
        a.value().values().iter().zip(b.value().values()).map(|(x, y)| x + y).collect(),
    );
    let tape = a.tape().clone();
    let (a_id, b_id) = (a.id, b.id);
    let id = tape.record(
        value.clone(),
        a.requires() || b.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for (bv, &gv) in buf.iter_mut().zip(g) {
                    *bv += gv;
                }
            });
            sink.accum(b_id, |buf| {
                for (bv, &gv) in buf.iter_mut().zip(g) {
                    *bv += gv;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    add(a, &scale(b, -1.0))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    check_same_shape("mul", a, b)?;
    let value = out_tensor(
        a.shape().to_vec(),
        a.value().values().iter().zip(b.value().values()).map(|(x, y)| x * y).collect(),
    );
    let tape = a.tape().clone();
    let (a_id, b_id) = (a.id, b.id);
    let (a_val, b_val) = (a.value().clone(), b.value().clone());
    let id = tape.record(
        value.clone(),
        a.requires() || b.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for ((bv, &gv), &y) in buf.iter_mut().zip(g).zip(b_val.values()) {
                    *bv += gv * y;
                }
            });
            sink.accum(b_id, |buf| {
                for ((bv, &gv), &x) in buf.iter_mut().zip(g).zip(a_val.values()) {
                    *bv += gv * x;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

pub fn scale(a: &Var, factor: f64) -> Var {
    let value = out_tensor(
        a.shape().to_vec(),
        a.value().values().iter().map(|&v| v * factor).collect(),
    );
    let tape = a.tape().clone();
    let a_id = a.id;
    let id = tape.record(
        value.clone(),
        a.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for (bv, &gv) in buf.iter_mut().zip(g) {
                    *bv += gv * factor;
                }
            });
        }),
    );
    Var { tape, id, value }
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    let value = out_tensor(
        a.shape().to_vec(),
        a.value().values().iter().map(|&v| v + c).collect(),
    );
    let tape = a.tape().clone();
    let a_id = a.id;
    let id = tape.record(
        value.clone(),
        a.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for (bv, &gv) in buf.iter_mut().zip(g) {
                    *bv += gv;
                }
            });
        }),
    );
    Var { tape, id, value }
}

/// Elementwise sum of any number of same-shape vars.
pub fn add_n(vars: &[Var]) -> Result<Var> {
    let first = vars.first().ok_or(TensorError::Empty("add_n"))?;
    let mut data = first.value().values().to_vec();
    for v in &vars[1..] {
        check_same_shape("add_n", first, v)?;
        for (d, &x) in data.iter_mut().zip(v.value().values()) {
            *d += x;
        }
    }
    let value = out_tensor(first.shape().to_vec(), data);
    let tape = first.tape().clone();
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let requires = vars.iter().any(|v| v.requires());
    let id = tape.record(
        value.clone(),
        requires,
        Box::new(move |g, sink| {
            for &pid in &ids {
                sink.accum(pid, |buf| {
                    for (bv, &gv) in buf.iter_mut().zip(g) {
                        *bv += gv;
                    }
                });
            }
        }),
    );
    Ok(Var { tape, id, value })
}

// ---------------------------------------------------------- shape plumbing

pub fn reshape(a: &Var, shape: &[usize]) -> Result<Var> {
    let value = a.value().reshape(shape)?;
    let tape = a.tape().clone();
    let a_id = a.id;
    let id = tape.record(
        value.clone(),
        a.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for (bv, &gv) in buf.iter_mut().zip(g) {
                    *bv += gv;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Concatenate along the last axis; leading extents must agree.
pub fn concat_last(a: &Var, b: &Var) -> Result<Var> {
    a.same_tape(b)?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(TensorError::shape(
            "concat_last",
            format!("{sa:?} vs {sb:?}"),
        ));
    }
    let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
    let lead = a.value().len() / ca;
    let mut data = Vec::with_capacity(lead * (ca + cb));
    for i in 0..lead {
        data.extend_from_slice(&a.value().values()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.value().values()[i * cb..(i + 1) * cb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let value = out_tensor(shape, data);
    let tape = a.tape().clone();
    let (a_id, b_id) = (a.id, b.id);
    let id = tape.record(
        value.clone(),
        a.requires() || b.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for i in 0..lead {
                    for (bv, &gv) in buf[i * ca..(i + 1) * ca].iter_mut().zip(&g[i * (ca + cb)..i * (ca + cb) + ca]) {
                        *bv += gv;
                    }
                }
            });
            sink.accum(b_id, |buf| {
                for i in 0..lead {
                    for (bv, &gv) in buf[i * cb..(i + 1) * cb]
                        .iter_mut()
                        .zip(&g[i * (ca + cb) + ca..(i + 1) * (ca + cb)])
                    {
                        *bv += gv;
                    }
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Tile a vector at every cell of an `h x w` grid: `[c] -> [h, w, c]`.
pub fn tile_vec_hw(v: &Var, h: usize, w: usize) -> Result<Var> {
    let c = v.value().dims1()?;
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        data.extend_from_slice(v.value().values());
    }
    let value = out_tensor(vec![h, w, c], data);
    let tape = v.tape().clone();
    let v_id = v.id;
    let id = tape.record(
        value.clone(),
        v.requires(),
        Box::new(move |g, sink| {
            sink.accum(v_id, |buf| {
                for cell in g.chunks(c) {
                    for (bv, &gv) in buf.iter_mut().zip(cell) {
                        *bv += gv;
                    }
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Gather arbitrary flat indices into a vector.
pub fn gather_flat(a: &Var, indices: &[usize]) -> Result<Var> {
    let n = a.value().len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(TensorError::shape(
            "gather_flat",
            format!("index {bad} out of range for {n} elements"),
        ));
    }
    let data: Vec<f64> = indices.iter().map(|&i| a.value().values()[i]).collect();
    let value = out_tensor(vec![indices.len().max(1)], if indices.is_empty() { vec![0.0] } else { data });
    let tape = a.tape().clone();
    let a_id = a.id;
    let idx: Vec<usize> = indices.to_vec();
    let id = tape.record(
        value.clone(),
        a.requires() && !idx.is_empty(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for (&i, &gv) in idx.iter().zip(g) {
                    buf[i] += gv;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Contiguous flat slice `[start, start+len)` viewed as a vector.
pub fn slice_flat(a: &Var, start: usize, len: usize) -> Result<Var> {
    if start + len > a.value().len() || len == 0 {
        return Err(TensorError::shape(
            "slice_flat",
            format!("[{start}, {}) out of range for {} elements", start + len, a.value().len()),
        ));
    }
    let data = a.value().values()[start..start + len].to_vec();
    let value = out_tensor(vec![len], data);
    let tape = a.tape().clone();
    let a_id = a.id;
    let id = tape.record(
        value.clone(),
        a.requires(),
        Box::new(move |g, sink| {
            sink.accum(a_id, |buf| {
                for (bv, &gv) in buf[start..start + len].iter_mut().zip(g) {
                    *bv += gv;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

// ------------------------------------------------------------- reductions

pub fn sum_all(a: &Var) -> Var {
    let s: f64 = a.value().values().iter().sum();
    let value = out_tensor(vec![1], vec![s]);
    let tape = a.tape().clone();
    let a_id = a.id;
    let id = tape.record(
        value.clone(),
        a.requires(),
        Box::new(move |g, sink| {
            let gv = g[0];
            sink.accum(a_id, |buf| {
                for bv in buf.iter_mut() {
                    *bv += gv;
                }
            });
        }),
    );
    Var { tape, id, value }
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.value().len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

// -------------------------------------------------------------- resampling

pub fn bilinear_resize(input: &Var, oh: usize, ow: usize) -> Result<Var> {
    let (h, w, c) = input.value().dims3()?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::shape("bilinear_resize", "output extents must be >= 1".to_string()));
    }
    let out = k::bilinear_resize_forward(input.value().values(), h, w, c, oh, ow);
    let value = out_tensor(vec![oh, ow, c], out);
    let tape = input.tape().clone();
    let in_id = input.id;
    let id = tape.record(
        value.clone(),
        input.requires(),
        Box::new(move |g, sink| {
            sink.accum(in_id, |buf| {
                let gi = k::bilinear_resize_backward(g, h, w, c, oh, ow);
                for (bv, v) in buf.iter_mut().zip(gi) {
                    *bv += v;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Axis-aligned box in cell-center coordinates, corners inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl MapBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> MapBox {
        MapBox { x1, y1, x2, y2 }
    }

    fn validate(&self, op: &'static str) -> Result<[f64; 4]> {
        let ok = self.x2 > self.x1 && self.y2 > self.y1;
        if !ok || !(self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite()) {
            return Err(TensorError::DegenerateBox {
                op,
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok([self.x1, self.y1, self.x2, self.y2])
    }

    pub fn clip(&self, h: usize, w: usize) -> MapBox {
        MapBox {
            x1: self.x1.clamp(0.0, (w - 1) as f64),
            y1: self.y1.clamp(0.0, (h - 1) as f64),
            x2: self.x2.clamp(0.0, (w - 1) as f64),
            y2: self.y2.clamp(0.0, (h - 1) as f64),
        }
    }
}

/// Bilinear crop-and-resize of the box region; average-style, no max.
/// Differentiable w.r.t. the map only.
pub fn roi_read(map: &Var, bx: MapBox, oh: usize, ow: usize) -> Result<Var> {
    let (h, w, c) = map.value().dims3()?;
    let b = bx.validate("roi_read")?;
    let out = k::roi_read_forward(map.value().values(), h, w, c, b, oh, ow);
    let value = out_tensor(vec![oh, ow, c], out);
    let tape = map.tape().clone();
    let map_id = map.id;
    let id = tape.record(
        value.clone(),
        map.requires(),
        Box::new(move |g, sink| {
            sink.accum(map_id, |buf| {
                let gm = k::roi_read_backward(g, h, w, c, b, oh, ow);
                for (bv, v) in buf.iter_mut().zip(gm) {
                    *bv += v;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Weight-normalized adjoint of `roi_read`: the patch is scattered back into
/// the box with bilinear weights; touched cells are replaced, others kept.
pub fn roi_write(map: &Var, bx: MapBox, patch: &Var) -> Result<Var> {
    map.same_tape(patch)?;
    let (h, w, c) = map.value().dims3()?;
    let (ph, pw, pc) = patch.value().dims3()?;
    if pc != c {
        return Err(TensorError::shape(
            "roi_write",
            format!("patch channels {pc} != map channels {c}"),
        ));
    }
    let b = bx.validate("roi_write")?;
    let out = k::roi_write_forward(map.value().values(), h, w, c, b, patch.value().values(), ph, pw);
    let value = out_tensor(vec![h, w, c], out);
    let wsum = k::roi_write_weights(h, w, b, ph, pw);
    let tape = map.tape().clone();
    let (map_id, patch_id) = (map.id, patch.id);
    let id = tape.record(
        value.clone(),
        map.requires() || patch.requires(),
        Box::new(move |g, sink| {
            sink.accum(map_id, |buf| {
                let gm = k::roi_write_backward_map(g, &wsum, c);
                for (bv, v) in buf.iter_mut().zip(gm) {
                    *bv += v;
                }
            });
            sink.accum(patch_id, |buf| {
                let gp = k::roi_write_backward_patch(g, &wsum, h, w, c, b, ph, pw);
                for (bv, v) in buf.iter_mut().zip(gp) {
                    *bv += v;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Classic max RoI pool over the integer cells covered by each box.
/// One tape node for the whole batch.
pub fn roi_pool_max_batch(map: &Var, boxes: &[MapBox], oh: usize, ow: usize) -> Result<Var> {
    if boxes.is_empty() {
        return Err(TensorError::Empty("roi_pool_max_batch"));
    }
    let (h, w, c) = map.value().dims3()?;
    let mut validated = Vec::with_capacity(boxes.len());
    for bx in boxes {
        validated.push(bx.validate("roi_pool_max")?);
    }
    let per = oh * ow * c;
    let map_vals = map.value().values();
    let results = crate::par::map_indexed(validated.len(), |i| {
        k::roi_pool_max_forward(map_vals, h, w, c, validated[i], oh, ow)
    });
    let mut data = Vec::with_capacity(validated.len() * per);
    let mut args = Vec::with_capacity(validated.len() * per);
    for (vals, arg) in results {
        data.extend_from_slice(&vals);
        args.extend_from_slice(&arg);
    }
    let value = out_tensor(vec![boxes.len(), oh, ow, c], data);
    let tape = map.tape().clone();
    let map_id = map.id;
    let map_len = map.value().len();
    let id = tape.record(
        value.clone(),
        map.requires(),
        Box::new(move |g, sink| {
            sink.accum(map_id, |buf| {
                let gm = k::roi_pool_max_backward(g, &args, map_len);
                for (bv, v) in buf.iter_mut().zip(gm) {
                    *bv += v;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

pub fn roi_pool_max(map: &Var, bx: MapBox, oh: usize, ow: usize) -> Result<Var> {
    let pooled = roi_pool_max_batch(map, std::slice::from_ref(&bx), oh, ow)?;
    reshape(&pooled, &[oh, ow, pooled.shape()[3]])
}

// ------------------------------------------------------------------ losses

/// Mean softmax cross-entropy over rows with a target class; rows with
/// `None` are ignored. Returns an exact zero constant when nothing counts.
pub fn softmax_ce_rows(logits: &Var, targets: &[Option<usize>]) -> Result<Var> {
    let (rows, k_cls) = logits.value().dims2()?;
    if targets.len() != rows {
        return Err(TensorError::shape(
            "softmax_ce_rows",
            format!("{} targets for {rows} rows", targets.len()),
        ));
    }
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Ok(logits.tape().constant(Tensor::scalar(0.0)));
    }
    let x = logits.value().values();
    let mut loss = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        debug_assert!(*t < k_cls);
        let row = &x[r * k_cls..(r + 1) * k_cls];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[*t];
    }
    loss /= n as f64;
    let value = out_tensor(vec![1], vec![loss]);
    let tape = logits.tape().clone();
    let l_id = logits.id;
    let l_val = logits.value().clone();
    let targets: Vec<Option<usize>> = targets.to_vec();
    let id = tape.record(
        value.clone(),
        logits.requires(),
        Box::new(move |g, sink| {
            let up = g[0] / n as f64;
            sink.accum(l_id, |buf| {
                let x = l_val.values();
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = &x[r * k_cls..(r + 1) * k_cls];
                    let sm = k::softmax_last(row, k_cls);
                    for (j, bv) in buf[r * k_cls..(r + 1) * k_cls].iter_mut().enumerate() {
                        let ind = if j == *t { 1.0 } else { 0.0 };
                        *bv += up * (sm[j] - ind);
                    }
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Mean binary cross-entropy with logits over a flat vector of slots.
pub fn bce_logits(logits: &Var, targets: &[f64]) -> Result<Var> {
    let n = logits.value().len();
    if targets.len() != n {
        return Err(TensorError::shape(
            "bce_logits",
            format!("{} targets for {n} logits", targets.len()),
        ));
    }
    let x = logits.value().values();
    let mut loss = 0.0;
    for (&xi, &t) in x.iter().zip(targets) {
        loss += xi.max(0.0) - xi * t + (1.0 + (-xi.abs()).exp()).ln();
    }
    loss /= n as f64;
    let value = out_tensor(vec![1], vec![loss]);
    let tape = logits.tape().clone();
    let l_id = logits.id;
    let l_val = logits.value().clone();
    let targets = targets.to_vec();
    let id = tape.record(
        value.clone(),
        logits.requires(),
        Box::new(move |g, sink| {
            let up = g[0] / n as f64;
            sink.accum(l_id, |buf| {
                for ((bv, &xi), &t) in buf.iter_mut().zip(l_val.values()).zip(&targets) {
                    *bv += up * (k::sigmoid(xi) - t);
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

/// Smooth-L1 (Huber) regression loss, mean over rows, summed over the row
/// coordinates. Targets are plain values, not tape nodes.
pub fn smooth_l1(pred: &Var, target: &Tensor, beta: f64) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(TensorError::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let rows = pred.shape()[0] as f64;
    let mut loss = 0.0;
    for (&p, &t) in pred.value().values().iter().zip(target.values()) {
        let d = (p - t).abs();
        loss += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
    }
    loss /= rows;
    let value = out_tensor(vec![1], vec![loss]);
    let tape = pred.tape().clone();
    let p_id = pred.id;
    let p_val = pred.value().clone();
    let t_val = target.clone();
    let id = tape.record(
        value.clone(),
        pred.requires(),
        Box::new(move |g, sink| {
            let up = g[0] / rows;
            sink.accum(p_id, |buf| {
                for ((bv, &p), &t) in buf.iter_mut().zip(p_val.values()).zip(t_val.values()) {
                    let d = p - t;
                    let slope = if d.abs() < beta { d / beta } else { d.signum() };
                    *bv += up * slope;
                }
            });
        }),
    );
    Ok(Var { tape, id, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn t3(h: usize, w: usize, c: usize, vals: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[h, w, c], vals).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(sigmoid(&x).value().item(), 0.5);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[5], vec![2.5; 5]).unwrap());
        let s = softmax_last(&x);
        for &v in s.value().values() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_and_zero_input() {
        let tape = Tape::new();
        let img = tape.constant(t3(3, 3, 1, (0..9).map(|v| v as f64).collect()));
        let w = tape.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = conv2d(&img, &w, &b, 1, 0).unwrap();
        assert_eq!(y.value().values(), img.value().values());

        let zero = tape.constant(t3(4, 4, 2, vec![0.0; 32]));
        let w2 = tape.constant(Tensor::from_vec(&[3, 3, 2, 3], vec![0.7; 54]).unwrap());
        let b2 = tape.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.25]).unwrap());
        let y2 = conv2d(&zero, &w2, &b2, 1, 1).unwrap();
        for px in y2.value().values().chunks(3) {
            assert_eq!(px, &[1.0, -2.0, 0.25]);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let tape = Tape::new();
        let img = tape.constant(t3(3, 3, 2, vec![0.0; 18]));
        let w = tape.constant(Tensor::from_vec(&[3, 3, 3, 1], vec![0.0; 27]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let err = conv2d(&img, &w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn fully_connected_identity_and_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let eye = tape.constant(
            Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let zero_b = tape.constant(Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
        let y = fully_connected(&x, &eye, &zero_b).unwrap();
        assert_eq!(y.value().values(), x.value().values());

        let zero_w = tape.constant(Tensor::from_vec(&[3, 2], vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2], vec![4.0, 5.0]).unwrap());
        let y2 = fully_connected(&x, &zero_w, &b).unwrap();
        assert_eq!(y2.value().values(), &[4.0, 5.0]);
    }

    #[test]
    fn bilinear_resize_matches_direct_formula() {
        let tape = Tape::new();
        let x = tape.constant(t3(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]));
        let y = bilinear_resize(&x, 3, 3).unwrap();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, e) in y.value().values().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // Same-size resize is the identity.
        let same = bilinear_resize(&x, 2, 2).unwrap();
        assert_eq!(same.value().values(), x.value().values());
        // Constant input stays constant.
        let c = tape.constant(t3(3, 4, 2, vec![0.7; 24]));
        let yc = bilinear_resize(&c, 7, 5).unwrap();
        assert!(yc.value().values().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn roi_read_rejects_degenerate_box() {
        let tape = Tape::new();
        let m = tape.constant(t3(4, 4, 1, vec![0.0; 16]));
        let err = roi_read(&m, MapBox::new(1.0, 1.0, 1.0, 2.0), 2, 2).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateBox { .. }));
    }

    #[test]
    fn roi_read_whole_constant_map() {
        let tape = Tape::new();
        let m = tape.constant(t3(4, 4, 2, vec![0.3; 32]));
        let p = roi_read(&m, MapBox::new(0.0, 0.0, 3.0, 3.0), 5, 3).unwrap();
        assert!(p.value().values().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn roi_write_zero_patch_into_zero_map() {
        let tape = Tape::new();
        let m = tape.constant(t3(4, 4, 1, vec![0.0; 16]));
        let p = tape.constant(t3(2, 2, 1, vec![0.0; 4]));
        let out = roi_write(&m, MapBox::new(0.7, 0.7, 2.3, 2.3), &p).unwrap();
        assert!(out.value().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_and_slice_roundtrip() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = gather_flat(&x, &[3, 0]).unwrap();
        assert_eq!(g.value().values(), &[4.0, 1.0]);
        let s = slice_flat(&x, 1, 2).unwrap();
        assert_eq!(s.value().values(), &[2.0, 3.0]);
        let loss = sum_all(&add(&sum_all(&g), &sum_all(&s)).unwrap());
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).values(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ce_loss_ignores_unlabeled_rows() {
        let tape = Tape::new();
        let logits = tape.var(Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap());
        let all_ignored = softmax_ce_rows(&logits, &[None, None]).unwrap();
        assert_eq!(all_ignored.value().item(), 0.0);
        let l = softmax_ce_rows(&logits, &[Some(1), None]).unwrap();
        assert!((l.value().item() - 3f64.ln()).abs() < 1e-12);
    }
}
