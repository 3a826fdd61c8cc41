//! Forward and backward compute kernels. These are plain functions over flat
//! slices; `ops` wraps them onto the tape. Layout is row-major channels-last:
//! a feature map is `[H, W, C]`, a conv weight is `[kh, kw, Cin, Cout]`, a
//! fully-connected weight is `[Din, Dout]`.

use crate::par;

// ---------------------------------------------------------------- conv2d

pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(h: usize, w: usize, cin: usize, kh: usize, kw: usize, cout: usize, stride: usize, pad: usize) -> ConvDims {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvDims { h, w, cin, kh, kw, cout, stride, pad, oh, ow }
    }
}

/// Cross-correlation. Parallel over output rows; per-pixel accumulation order
/// is fixed, so the result does not depend on the thread count.
pub fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.oh * d.ow * d.cout];
    let row = d.ow * d.cout;
    par::for_each_chunk_mut(&mut out, row, |oy, out_row| {
        for ox in 0..d.ow {
            let acc = &mut out_row[ox * d.cout..(ox + 1) * d.cout];
            acc.copy_from_slice(bias);
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * d.w + ix as usize) * d.cin;
                    let wt_base = ((ky * d.kw + kx) * d.cin) * d.cout;
                    for ci in 0..d.cin {
                        let a = input[in_base + ci];
                        let wrow = &weight[wt_base + ci * d.cout..wt_base + (ci + 1) * d.cout];
                        for (o, wv) in acc.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient w.r.t. the input, gathered per input pixel (deterministic).
pub fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut grad_in = vec![0.0; d.h * d.w * d.cin];
    let row = d.w * d.cin;
    par::for_each_chunk_mut(&mut grad_in, row, |iy, gin_row| {
        for ix in 0..d.w {
            let gin = &mut gin_row[ix * d.cin..(ix + 1) * d.cin];
            for ky in 0..d.kh {
                let oy_num = iy as isize + d.pad as isize - ky as isize;
                if oy_num < 0 || oy_num % d.stride as isize != 0 {
                    continue;
                }
                let oy = (oy_num / d.stride as isize) as usize;
                if oy >= d.oh {
                    continue;
                }
                for kx in 0..d.kw {
                    let ox_num = ix as isize + d.pad as isize - kx as isize;
                    if ox_num < 0 || ox_num % d.stride as isize != 0 {
                        continue;
                    }
                    let ox = (ox_num / d.stride as isize) as usize;
                    if ox >= d.ow {
                        continue;
                    }
                    let go = &grad_out[(oy * d.ow + ox) * d.cout..(oy * d.ow + ox + 1) * d.cout];
                    let wt_base = ((ky * d.kw + kx) * d.cin) * d.cout;
                    for (ci, g) in gin.iter_mut().enumerate() {
                        let wrow = &weight[wt_base + ci * d.cout..wt_base + (ci + 1) * d.cout];
                        let mut s = 0.0;
                        for (wv, gv) in wrow.iter().zip(go) {
                            s += wv * gv;
                        }
                        *g += s;
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradient w.r.t. the weight. Parallel over kernel taps; each tap owns a
/// disjoint `[cin, cout]` slice of the result.
pub fn conv2d_backward_weight(input: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut grad_w = vec![0.0; d.kh * d.kw * d.cin * d.cout];
    let tap = d.cin * d.cout;
    par::for_each_chunk_mut(&mut grad_w, tap, |tap_idx, gw| {
        let ky = tap_idx / d.kw;
        let kx = tap_idx % d.kw;
        for oy in 0..d.oh {
            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
            if iy < 0 || iy >= d.h as isize {
                continue;
            }
            for ox in 0..d.ow {
                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                if ix < 0 || ix >= d.w as isize {
                    continue;
                }
                let in_base = ((iy as usize) * d.w + ix as usize) * d.cin;
                let go = &grad_out[(oy * d.ow + ox) * d.cout..(oy * d.ow + ox + 1) * d.cout];
                for ci in 0..d.cin {
                    let a = input[in_base + ci];
                    let grow = &mut gw[ci * d.cout..(ci + 1) * d.cout];
                    for (g, gv) in grow.iter_mut().zip(go) {
                        *g += a * gv;
                    }
                }
            }
        }
    });
    grad_w
}

pub fn conv2d_backward_bias(grad_out: &[f64], cout: usize) -> Vec<f64> {
    let mut grad_b = vec![0.0; cout];
    for px in grad_out.chunks_exact(cout) {
        for (g, v) in grad_b.iter_mut().zip(px) {
            *g += v;
        }
    }
    grad_b
}

// ------------------------------------------------------ fully connected

/// `[rows, din] x [din, dout] + bias`. Parallel over rows.
pub fn matmul_bias_forward(input: &[f64], weight: &[f64], bias: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    par::for_each_chunk_mut(&mut out, dout, |r, acc| {
        acc.copy_from_slice(bias);
        let in_row = &input[r * din..(r + 1) * din];
        for (i, &a) in in_row.iter().enumerate() {
            let wrow = &weight[i * dout..(i + 1) * dout];
            for (o, wv) in acc.iter_mut().zip(wrow) {
                *o += a * wv;
            }
        }
    });
    out
}

pub fn matmul_backward_input(grad_out: &[f64], weight: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; rows * din];
    par::for_each_chunk_mut(&mut grad_in, din, |r, gin| {
        let go = &grad_out[r * dout..(r + 1) * dout];
        for (i, g) in gin.iter_mut().enumerate() {
            let wrow = &weight[i * dout..(i + 1) * dout];
            let mut s = 0.0;
            for (wv, gv) in wrow.iter().zip(go) {
                s += wv * gv;
            }
            *g = s;
        }
    });
    grad_in
}

pub fn matmul_backward_weight(input: &[f64], grad_out: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut grad_w = vec![0.0; din * dout];
    par::for_each_chunk_mut(&mut grad_w, dout, |i, gw| {
        for r in 0..rows {
            let a = input[r * din + i];
            if a == 0.0 {
                continue;
            }
            let go = &grad_out[r * dout..(r + 1) * dout];
            for (g, gv) in gw.iter_mut().zip(go) {
                *g += a * gv;
            }
        }
    });
    grad_w
}

pub fn matmul_backward_bias(grad_out: &[f64], rows: usize, dout: usize) -> Vec<f64> {
    let mut grad_b = vec![0.0; dout];
    for r in 0..rows {
        for (g, v) in grad_b.iter_mut().zip(&grad_out[r * dout..(r + 1) * dout]) {
            *g += v;
        }
    }
    grad_b
}

// ---------------------------------------------------------- activations

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the last axis, one slice at a time, numerically stable.
pub fn softmax_last(input: &[f64], slice_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (o, s) in out.chunks_mut(slice_len).zip(input.chunks(slice_len)) {
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (ov, &v) in o.iter_mut().zip(s) {
            *ov = (v - m).exp();
            z += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= z;
        }
    }
    out
}

// ------------------------------------------------- bilinear interpolation

/// Align-corners sample positions: `n` samples spanning `[lo, hi]` in
/// cell-center coordinates. A single sample sits at the midpoint.
pub fn sample_positions(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        let step = (hi - lo) / (n - 1) as f64;
        (0..n).map(|i| lo + step * i as f64).collect()
    }
}

/// The two neighbor cells and the weight of the upper one, clamped to `[0, n-1]`.
fn neighbors(p: f64, n: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (n - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, p - lo as f64)
}

/// Bilinear sample of `map[H, W, C]` at fractional cell-center position.
pub fn bilinear_gather(map: &[f64], h: usize, w: usize, c: usize, sy: f64, sx: f64, out: &mut [f64]) {
    let (y0, y1, fy) = neighbors(sy, h);
    let (x0, x1, fx) = neighbors(sx, w);
    let w00 = (1.0 - fy) * (1.0 - fx);
    let w01 = (1.0 - fy) * fx;
    let w10 = fy * (1.0 - fx);
    let w11 = fy * fx;
    let b00 = (y0 * w + x0) * c;
    let b01 = (y0 * w + x1) * c;
    let b10 = (y1 * w + x0) * c;
    let b11 = (y1 * w + x1) * c;
    for ch in 0..c {
        out[ch] = w00 * map[b00 + ch] + w01 * map[b01 + ch] + w10 * map[b10 + ch] + w11 * map[b11 + ch];
    }
}

/// Scatter `vals` into `acc` with the same bilinear weights as the gather,
/// and record the weight mass into `wsum` (one entry per cell) when given.
pub fn bilinear_scatter(
    acc: &mut [f64],
    wsum: Option<&mut [f64]>,
    h: usize,
    w: usize,
    c: usize,
    sy: f64,
    sx: f64,
    vals: &[f64],
) {
    let (y0, y1, fy) = neighbors(sy, h);
    let (x0, x1, fx) = neighbors(sx, w);
    let cells = [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ];
    for &(cell, wt) in &cells {
        if wt == 0.0 {
            continue;
        }
        let base = cell * c;
        for ch in 0..c {
            acc[base + ch] += wt * vals[ch];
        }
    }
    if let Some(ws) = wsum {
        for &(cell, wt) in &cells {
            ws[cell] += wt;
        }
    }
}

pub fn bilinear_resize_forward(input: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys = sample_positions(0.0, (h - 1) as f64, oh);
    let xs = sample_positions(0.0, (w - 1) as f64, ow);
    let mut out = vec![0.0; oh * ow * c];
    let row = ow * c;
    par::for_each_chunk_mut(&mut out, row, |i, out_row| {
        for (j, &sx) in xs.iter().enumerate() {
            bilinear_gather(input, h, w, c, ys[i], sx, &mut out_row[j * c..(j + 1) * c]);
        }
    });
    out
}

pub fn bilinear_resize_backward(grad_out: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys = sample_positions(0.0, (h - 1) as f64, oh);
    let xs = sample_positions(0.0, (w - 1) as f64, ow);
    let mut grad_in = vec![0.0; h * w * c];
    for (i, &sy) in ys.iter().enumerate() {
        for (j, &sx) in xs.iter().enumerate() {
            let g = &grad_out[(i * ow + j) * c..(i * ow + j + 1) * c];
            bilinear_scatter(&mut grad_in, None, h, w, c, sy, sx, g);
        }
    }
    grad_in
}

// ----------------------------------------------------------- RoI kernels

/// Crop-and-resize: `ph x pw` bilinear samples spanning the box (inclusive
/// cell-center corners).
pub fn roi_read_forward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    bx: [f64; 4],
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let ys = sample_positions(bx[1], bx[3], ph);
    let xs = sample_positions(bx[0], bx[2], pw);
    let mut out = vec![0.0; ph * pw * c];
    for (i, &sy) in ys.iter().enumerate() {
        for (j, &sx) in xs.iter().enumerate() {
            bilinear_gather(map, h, w, c, sy, sx, &mut out[(i * pw + j) * c..(i * pw + j + 1) * c]);
        }
    }
    out
}

pub fn roi_read_backward(
    grad_out: &[f64],
    h: usize,
    w: usize,
    c: usize,
    bx: [f64; 4],
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let ys = sample_positions(bx[1], bx[3], ph);
    let xs = sample_positions(bx[0], bx[2], pw);
    let mut grad_map = vec![0.0; h * w * c];
    for (i, &sy) in ys.iter().enumerate() {
        for (j, &sx) in xs.iter().enumerate() {
            let g = &grad_out[(i * pw + j) * c..(i * pw + j + 1) * c];
            bilinear_scatter(&mut grad_map, None, h, w, c, sy, sx, g);
        }
    }
    grad_map
}

/// Weight sums the write touches; cells with zero mass keep the old value.
pub fn roi_write_weights(h: usize, w: usize, bx: [f64; 4], ph: usize, pw: usize) -> Vec<f64> {
    let ys = sample_positions(bx[1], bx[3], ph);
    let xs = sample_positions(bx[0], bx[2], pw);
    let mut wsum = vec![0.0; h * w];
    let one = [0.0];
    let mut sink = vec![0.0; h * w];
    for &sy in &ys {
        for &sx in &xs {
            bilinear_scatter(&mut sink, Some(&mut wsum), h, w, 1, sy, sx, &one);
        }
    }
    wsum
}

/// Adjoint scatter of `roi_read`, normalized per destination cell. Touched
/// cells are replaced by the weighted patch average; untouched cells pass
/// through unchanged.
pub fn roi_write_forward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    bx: [f64; 4],
    patch: &[f64],
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let ys = sample_positions(bx[1], bx[3], ph);
    let xs = sample_positions(bx[0], bx[2], pw);
    let mut acc = vec![0.0; h * w * c];
    let mut wsum = vec![0.0; h * w];
    for (i, &sy) in ys.iter().enumerate() {
        for (j, &sx) in xs.iter().enumerate() {
            let p = &patch[(i * pw + j) * c..(i * pw + j + 1) * c];
            bilinear_scatter(&mut acc, Some(&mut wsum), h, w, c, sy, sx, p);
        }
    }
    let mut out = map.to_vec();
    for cell in 0..h * w {
        if wsum[cell] > 0.0 {
            let base = cell * c;
            for ch in 0..c {
                out[base + ch] = acc[base + ch] / wsum[cell];
            }
        }
    }
    out
}

/// Backward of `roi_write` w.r.t. the patch: each sample receives the
/// normalized share of the gradient at the cells it touched.
pub fn roi_write_backward_patch(
    grad_out: &[f64],
    wsum: &[f64],
    h: usize,
    w: usize,
    c: usize,
    bx: [f64; 4],
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let ys = sample_positions(bx[1], bx[3], ph);
    let xs = sample_positions(bx[0], bx[2], pw);
    let mut grad_patch = vec![0.0; ph * pw * c];
    for (i, &sy) in ys.iter().enumerate() {
        for (j, &sx) in xs.iter().enumerate() {
            let (y0, y1, fy) = neighbors(sy, h);
            let (x0, x1, fx) = neighbors(sx, w);
            let cells = [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ];
            let gp = &mut grad_patch[(i * pw + j) * c..(i * pw + j + 1) * c];
            for &(cell, wt) in &cells {
                if wt == 0.0 || wsum[cell] == 0.0 {
                    continue;
                }
                let share = wt / wsum[cell];
                let base = cell * c;
                for ch in 0..c {
                    gp[ch] += share * grad_out[base + ch];
                }
            }
        }
    }
    grad_patch
}

/// Backward of `roi_write` w.r.t. the map: pass-through outside the written
/// support, zero where cells were replaced.
pub fn roi_write_backward_map(grad_out: &[f64], wsum: &[f64], c: usize) -> Vec<f64> {
    let mut grad_map = grad_out.to_vec();
    for (cell, &ws) in wsum.iter().enumerate() {
        if ws > 0.0 {
            for g in &mut grad_map[cell * c..(cell + 1) * c] {
                *g = 0.0;
            }
        }
    }
    grad_map
}

// ------------------------------------------------------------ max RoI pool

/// Max pool over an integer cell grid covering the box. Returns pooled values
/// and the argmax cell index per output element (first maximum wins).
pub fn roi_pool_max_forward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    bx: [f64; 4],
    ph: usize,
    pw: usize,
) -> (Vec<f64>, Vec<usize>) {
    let r0 = (bx[1].floor().max(0.0) as usize).min(h - 1);
    let r1 = (bx[3].ceil().max(0.0) as usize).min(h - 1);
    let c0 = (bx[0].floor().max(0.0) as usize).min(w - 1);
    let c1 = (bx[2].ceil().max(0.0) as usize).min(w - 1);
    let nr = r1 - r0 + 1;
    let nc = c1 - c0 + 1;
    let mut out = vec![0.0; ph * pw * c];
    let mut arg = vec![0usize; ph * pw * c];
    for i in 0..ph {
        let rr0 = r0 + i * nr / ph;
        let rr1 = r0 + (((i + 1) * nr + ph - 1) / ph).max(i * nr / ph + 1) - 1;
        for j in 0..pw {
            let cc0 = c0 + j * nc / pw;
            let cc1 = c0 + (((j + 1) * nc + pw - 1) / pw).max(j * nc / pw + 1) - 1;
            let obase = (i * pw + j) * c;
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for r in rr0..=rr1.min(r1) {
                    for cc in cc0..=cc1.min(c1) {
                        let idx = (r * w + cc) * c + ch;
                        if map[idx] > best {
                            best = map[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[obase + ch] = best;
                arg[obase + ch] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn roi_pool_max_backward(grad_out: &[f64], arg: &[usize], map_len: usize) -> Vec<f64> {
    let mut grad_map = vec![0.0; map_len];
    for (g, &idx) in grad_out.iter().zip(arg) {
        grad_map[idx] += g;
    }
    grad_map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_saturates_exactly() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 identity weight leaves the input unchanged.
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let d = ConvDims::new(3, 3, 1, 1, 1, 1, 1, 0);
        let out = conv2d_forward(&input, &[1.0], &[0.0], &d);
        assert_eq!(out, input);
    }

    #[test]
    fn roi_read_aligned_is_copy() {
        // 4x4 map, single channel, box [1,1,2,2] read at 2x2.
        let map: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = roi_read_forward(&map, 4, 4, 1, [1.0, 1.0, 2.0, 2.0], 2, 2);
        assert_eq!(out, vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn roi_write_aligned_round_trip() {
        let map = vec![0.0; 16];
        let patch = vec![1.0, 2.0, 3.0, 4.0];
        let written = roi_write_forward(&map, 4, 4, 1, [1.0, 1.0, 2.0, 2.0], &patch, 2, 2);
        let back = roi_read_forward(&written, 4, 4, 1, [1.0, 1.0, 2.0, 2.0], 2, 2);
        assert_eq!(back, patch);
        // Cells outside the box untouched.
        assert_eq!(written[0], 0.0);
        assert_eq!(written[15], 0.0);
    }
}
