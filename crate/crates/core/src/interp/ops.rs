//! Forward and backward kernels for every terminal.

use super::params::ParamSet;
use super::program::Instr;
use super::tensor::{gemm, permute_axes, Mat, Tensor};
use crate::shape::{matmul_transposes, Mode};
use crate::terminal::Terminal;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Per-instruction state kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub enum Aux {
    #[default]
    None,
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Cols(Vec<f64>),
}

fn full_perm(order: &[u8]) -> Vec<usize> {
    std::iter::once(0).chain(order.iter().map(|&o| o as usize)).collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn split_axis(x: &Tensor, axis: usize, sizes: &[usize]) -> Vec<Tensor> {
    let outer: usize = x.dims[..axis].iter().product();
    let inner: usize = x.dims[axis + 1..].iter().product();
    let n = x.dims[axis];
    let mut start = 0;
    sizes
        .iter()
        .map(|&sz| {
            let mut dims = x.dims.clone();
            dims[axis] = sz;
            let mut data = Vec::with_capacity(outer * sz * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&x.data[base..base + sz * inner]);
            }
            start += sz;
            Tensor { dims, data }
        })
        .collect()
}

fn concat_axis(xs: &[&Tensor], axis: usize) -> Tensor {
    let mut dims = xs[0].dims.clone();
    dims[axis] = xs.iter().map(|t| t.dims[axis]).sum();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for t in xs {
            let chunk = t.dims[axis] * inner;
            data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor { dims, data }
}

fn add_bias_rows(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column-mode dense map: `x` is `(rows, fan_in)`, weight `(fan_in, d)`.
pub(super) fn dense_rows(x: &[f64], rows: usize, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (fan_in, d) = (w.dims[0], w.dims[1]);
    let mut out = vec![0.0; rows * d];
    gemm(1.0, Mat::new(x, rows, fan_in), Mat::new(&w.data, fan_in, d), 0.0, &mut out, rows, d);
    add_bias_rows(&mut out, &bias.data);
    out
}

/// Backward of [`dense_rows`]; accumulates into `gw`, `gb` and returns the input gradient.
pub(super) fn dense_rows_back(x: &[f64], rows: usize, w: &Tensor, g: &[f64], gw: &mut Tensor, gb: &mut Tensor) -> Vec<f64> {
    let (fan_in, d) = (w.dims[0], w.dims[1]);
    let mut dx = vec![0.0; rows * fan_in];
    gemm(1.0, Mat::new(g, rows, d), Mat::new(&w.data, fan_in, d).tr(), 0.0, &mut dx, rows, fan_in);
    gemm(1.0, Mat::new(x, rows, fan_in).tr(), Mat::new(g, rows, d), 1.0, &mut gw.data, fan_in, d);
    for row in g.chunks(d) {
        for (b, v) in gb.data.iter_mut().zip(row) {
            *b += v;
        }
    }
    dx
}

fn conv1d_geometry(ins: &Instr) -> (usize, usize, usize, usize, usize, usize) {
    let Terminal::Conv1d { k, s, p, .. } = ins.op else { unreachable!() };
    let (len, ch) = (ins.in_state.shape[0], ins.in_state.shape[1]);
    (len, ch, k as usize, s as usize, p as usize, ins.out_state.shape[0])
}

fn conv1d_cols(x: &Tensor, ins: &Instr) -> Vec<f64> {
    let (len, ch, k, s, p, lout) = conv1d_geometry(ins);
    let batch = x.batch();
    let width = ch * k;
    let mut cols = vec![0.0; batch * lout * width];
    for b in 0..batch {
        for i in 0..lout {
            let row = &mut cols[(b * lout + i) * width..(b * lout + i + 1) * width];
            for j in 0..k {
                let t = (i * s + j) as isize - p as isize;
                if t < 0 || t as usize >= len {
                    continue;
                }
                let src = &x.data[(b * len + t as usize) * ch..(b * len + t as usize + 1) * ch];
                for c in 0..ch {
                    row[c * k + j] = src[c];
                }
            }
        }
    }
    cols
}

fn conv1d_fold(dcols: &[f64], batch: usize, ins: &Instr) -> Vec<f64> {
    let (len, ch, k, s, p, lout) = conv1d_geometry(ins);
    let width = ch * k;
    let mut dx = vec![0.0; batch * len * ch];
    for b in 0..batch {
        for i in 0..lout {
            let row = &dcols[(b * lout + i) * width..(b * lout + i + 1) * width];
            for j in 0..k {
                let t = (i * s + j) as isize - p as isize;
                if t < 0 || t as usize >= len {
                    continue;
                }
                let dst = &mut dx[(b * len + t as usize) * ch..(b * len + t as usize + 1) * ch];
                for c in 0..ch {
                    dst[c] += row[c * k + j];
                }
            }
        }
    }
    dx
}

/// Calls `f(col_index, src_index)` for every in-bounds patch element of a batch row.
fn im2col_walk(ins: &Instr, mut f: impl FnMut(usize, usize)) {
    let Terminal::Im2col { k, s, p } = ins.op else { unreachable!() };
    let (k, s, p) = (k as usize, s as usize, p as isize);
    let (c, h, w) = (ins.in_state.shape[0], ins.in_state.shape[1], ins.in_state.shape[2]);
    let pending = ins.out_state.pending_im.expect("im2col leaves a pending target");
    let (hout, wout) = (pending.h_out, pending.w_out);
    let width = c * k * k;
    for i in 0..hout {
        for j in 0..wout {
            let row = (i * wout + j) * width;
            for ch in 0..c {
                for ki in 0..k {
                    let y = (i * s + ki) as isize - p;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for kj in 0..k {
                        let x = (j * s + kj) as isize - p;
                        if x < 0 || x as usize >= w {
                            continue;
                        }
                        f(row + ch * k * k + ki * k + kj, (ch * h + y as usize) * w + x as usize);
                    }
                }
            }
        }
    }
}

fn norm_im_forward(x: &Tensor, set: &mut ParamSet, train: bool) -> (Tensor, Aux) {
    let (batch, c) = (x.dims[0], x.dims[1]);
    let hw: usize = x.dims[2..].iter().product();
    let n = (batch * hw) as f64;
    let (gamma, beta) = (&set.values[0].data, &set.values[1].data);
    let mut y = x.zeros_like();
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let idx = |b: usize, t: usize| (b * c + ch) * hw + t;
        let (mean, var) = if train {
            let mut sum = 0.0;
            for b in 0..batch {
                for t in 0..hw {
                    sum += x.data[idx(b, t)];
                }
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for b in 0..batch {
                for t in 0..hw {
                    sq += (x.data[idx(b, t)] - mean).powi(2);
                }
            }
            let var = sq / n;
            let unbiased = if n > 1.0 { sq / (n - 1.0) } else { var };
            let rm = &mut set.buffers[0].data[ch];
            *rm = (1.0 - NORM_MOMENTUM) * *rm + NORM_MOMENTUM * mean;
            let rv = &mut set.buffers[1].data[ch];
            *rv = (1.0 - NORM_MOMENTUM) * *rv + NORM_MOMENTUM * unbiased;
            (mean, var)
        } else {
            (set.buffers[0].data[ch], set.buffers[1].data[ch])
        };
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = is;
        for b in 0..batch {
            for t in 0..hw {
                let i = idx(b, t);
                xhat[i] = (x.data[i] - mean) * is;
                y.data[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    let aux = if train { Aux::Norm { xhat, inv_std } } else { Aux::None };
    (y, aux)
}

fn norm_im_backward(g: &Tensor, set: &ParamSet, aux: &Aux, pg: &mut [Tensor]) -> Tensor {
    let Aux::Norm { xhat, inv_std } = aux else { unreachable!("train cache") };
    let (batch, c) = (g.dims[0], g.dims[1]);
    let hw: usize = g.dims[2..].iter().product();
    let n = (batch * hw) as f64;
    let gamma = &set.values[0].data;
    let mut dx = g.zeros_like();
    for ch in 0..c {
        let idx = |b: usize, t: usize| (b * c + ch) * hw + t;
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..batch {
            for t in 0..hw {
                let i = idx(b, t);
                sum_g += g.data[i];
                sum_gx += g.data[i] * xhat[i];
            }
        }
        pg[0].data[ch] += sum_gx;
        pg[1].data[ch] += sum_g;
        let k = gamma[ch] * inv_std[ch] / n;
        for b in 0..batch {
            for t in 0..hw {
                let i = idx(b, t);
                dx.data[i] = k * (n * g.data[i] - sum_g - xhat[i] * sum_gx);
            }
        }
    }
    dx
}

fn norm_col_forward(x: &Tensor, set: &ParamSet, train: bool) -> (Tensor, Aux) {
    let d = *x.dims.last().unwrap();
    let (gamma, beta) = (&set.values[0].data, &set.values[1].data);
    let mut y = x.zeros_like();
    let mut xhat = vec![0.0; x.numel()];
    let rows = x.numel() / d;
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[r] = is;
        for t in 0..d {
            let xh = (row[t] - mean) * is;
            xhat[r * d + t] = xh;
            y.data[r * d + t] = gamma[t] * xh + beta[t];
        }
    }
    let aux = if train { Aux::Norm { xhat, inv_std } } else { Aux::None };
    (y, aux)
}

fn norm_col_backward(g: &Tensor, set: &ParamSet, aux: &Aux, pg: &mut [Tensor]) -> Tensor {
    let Aux::Norm { xhat, inv_std } = aux else { unreachable!("train cache") };
    let d = *g.dims.last().unwrap();
    let gamma = &set.values[0].data;
    let mut dx = g.zeros_like();
    let n = d as f64;
    for (r, &is) in inv_std.iter().enumerate() {
        let (mut sum_gh, mut sum_ghx) = (0.0, 0.0);
        for t in 0..d {
            let i = r * d + t;
            pg[0].data[t] += g.data[i] * xhat[i];
            pg[1].data[t] += g.data[i];
            let gh = g.data[i] * gamma[t];
            sum_gh += gh;
            sum_ghx += gh * xhat[i];
        }
        for t in 0..d {
            let i = r * d + t;
            dx.data[i] = is / n * (n * g.data[i] * gamma[t] - sum_gh - xhat[i] * sum_ghx);
        }
    }
    dx
}

fn matmul_parts(x: &Tensor, y: &Tensor, scaled: bool) -> (bool, f64, usize, usize, usize) {
    let transposed = matmul_transposes(&x.dims[1..], &y.dims[1..]);
    let alpha = if scaled { 1.0 / (*y.dims.last().unwrap() as f64).sqrt() } else { 1.0 };
    let (a, k) = (x.dims[1], x.dims[2]);
    let c = if transposed { y.dims[1] } else { y.dims[2] };
    (transposed, alpha, a, k, c)
}

fn with_dims(dims: &[usize], batch: usize, data: Vec<f64>) -> Tensor {
    let mut full = vec![batch];
    full.extend_from_slice(dims);
    Tensor::from_vec(&full, data)
}

/// Runs one instruction.
/// Applies a shape-preserving unary op to `y` in place. Returns false for other ops.
pub(super) fn elementwise_in_place(op: &Terminal, y: &mut Tensor, params: Option<&ParamSet>) -> bool {
    match op {
        Terminal::Relu => {
            for v in &mut y.data {
                if *v < 0.0 {
                    *v *= LEAKY_SLOPE;
                }
            }
        }
        Terminal::Softmax => {
            let d = *y.dims.last().unwrap();
            for row in y.data.chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                let inv = 1.0 / s;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        Terminal::PosEnc => {
            let p = &params.expect("pos-enc parameters").values[0];
            for row in y.data.chunks_mut(p.numel()) {
                for (v, e) in row.iter_mut().zip(&p.data) {
                    *v += e;
                }
            }
        }
        _ => return false,
    }
    true
}

pub fn forward(ins: &Instr, xs: &[&Tensor], params: Option<&mut ParamSet>, train: bool) -> (Vec<Tensor>, Aux) {
    let x = xs[0];
    let batch = x.batch();
    let one = |t: Tensor| (vec![t], Aux::None);
    match ins.op {
        Terminal::Identity => one(x.clone()),
        Terminal::Relu | Terminal::Softmax | Terminal::PosEnc => {
            let mut y = x.clone();
            elementwise_in_place(&ins.op, &mut y, params.as_deref());
            one(y)
        }
        Terminal::Norm => {
            let set = params.expect("norm parameters");
            let (y, aux) = match ins.in_state.mode {
                Mode::Im => norm_im_forward(x, set, train),
                Mode::Col => norm_col_forward(x, set, train),
            };
            (vec![y], aux)
        }
        Terminal::Linear { d } => {
            let set = params.expect("linear parameters");
            let (w, bias) = (&set.values[0], &set.values[1]);
            let d = d as usize;
            let out = match ins.in_state.mode {
                Mode::Col => dense_rows(&x.data, x.numel() / w.dims[0], w, bias),
                Mode::Im => {
                    let c = x.dims[1];
                    let hw = x.row_len() / c;
                    let mut out = vec![0.0; batch * d * hw];
                    for b in 0..batch {
                        let xb = &x.data[b * c * hw..(b + 1) * c * hw];
                        let ob = &mut out[b * d * hw..(b + 1) * d * hw];
                        gemm(1.0, Mat::new(&w.data, c, d).tr(), Mat::new(xb, c, hw), 0.0, ob, d, hw);
                        for (j, row) in ob.chunks_mut(hw).enumerate() {
                            for v in row {
                                *v += bias.data[j];
                            }
                        }
                    }
                    out
                }
            };
            one(with_dims(&ins.out_state.shape, batch, out))
        }
        Terminal::Conv1d { .. } => {
            let set = params.expect("conv1d parameters");
            let cols = conv1d_cols(x, ins);
            let lout = ins.out_state.shape[0];
            let out = dense_rows(&cols, batch * lout, &set.values[0], &set.values[1]);
            let aux = if train { Aux::Cols(cols) } else { Aux::None };
            (vec![with_dims(&ins.out_state.shape, batch, out)], aux)
        }
        Terminal::Im2col { .. } => {
            let row_out: usize = ins.out_state.shape.iter().product();
            let row_in = x.row_len();
            let mut out = vec![0.0; batch * row_out];
            for b in 0..batch {
                let (src, dst) = (&x.data[b * row_in..(b + 1) * row_in], &mut out[b * row_out..(b + 1) * row_out]);
                im2col_walk(ins, |o, i| dst[o] = src[i]);
            }
            one(with_dims(&ins.out_state.shape, batch, out))
        }
        Terminal::Col2im => {
            let t = permute_axes(x, &[0, 2, 1]);
            one(with_dims(&ins.out_state.shape, batch, t.data))
        }
        Terminal::Permute { order } => one(permute_axes(x, &full_perm(order.as_slice()))),
        Terminal::Clone { b } => (vec![x.clone(); b as usize], Aux::None),
        Terminal::Group { dim, b } => {
            let axis = dim as usize;
            let part = x.dims[axis] / b as usize;
            (split_axis(x, axis, &vec![part; b as usize]), Aux::None)
        }
        Terminal::Add => {
            let mut y = x.clone();
            for t in &xs[1..] {
                y.add_assign(t);
            }
            one(y)
        }
        Terminal::Concat { dim, .. } => one(concat_axis(xs, dim as usize)),
        Terminal::Matmul { scaled } => {
            let y = xs[1];
            let (transposed, alpha, a, k, c) = matmul_parts(x, y, scaled);
            let mut out = vec![0.0; batch * a * c];
            let ylen = y.row_len();
            for b in 0..batch {
                let xb = Mat::new(&x.data[b * a * k..(b + 1) * a * k], a, k);
                let yb = &y.data[b * ylen..(b + 1) * ylen];
                let ym = if transposed { Mat::new(yb, c, k).tr() } else { Mat::new(yb, k, c) };
                gemm(alpha, xb, ym, 0.0, &mut out[b * a * c..(b + 1) * a * c], a, c);
            }
            one(with_dims(&[a, c], batch, out))
        }
    }
}

/// Input gradients of one instruction; parameter gradients accumulate into `pg`.
pub fn backward(
    ins: &Instr,
    xs: &[&Tensor],
    ys: &[&Tensor],
    aux: &Aux,
    gs: &[Tensor],
    params: Option<&ParamSet>,
    pg: Option<&mut Vec<Tensor>>,
) -> Vec<Tensor> {
    let x = xs[0];
    let g = &gs[0];
    let batch = x.batch();
    match ins.op {
        Terminal::Identity => vec![g.clone()],
        Terminal::Relu => {
            let mut dx = g.clone();
            for (d, v) in dx.data.iter_mut().zip(&x.data) {
                if *v < 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            }
            vec![dx]
        }
        Terminal::Softmax => {
            let y = ys[0];
            let d = *y.dims.last().unwrap();
            let mut dx = g.clone();
            for (drow, yrow) in dx.data.chunks_mut(d).zip(y.data.chunks(d)) {
                let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (dv, yv) in drow.iter_mut().zip(yrow) {
                    *dv = yv * (*dv - dot);
                }
            }
            vec![dx]
        }
        Terminal::PosEnc => {
            let pg = pg.expect("pos-enc gradients");
            let n = pg[0].numel();
            for row in g.data.chunks(n) {
                for (a, v) in pg[0].data.iter_mut().zip(row) {
                    *a += v;
                }
            }
            vec![g.clone()]
        }
        Terminal::Norm => {
            let (set, pg) = (params.expect("norm parameters"), pg.expect("norm gradients"));
            vec![match ins.in_state.mode {
                Mode::Im => norm_im_backward(g, set, aux, pg),
                Mode::Col => norm_col_backward(g, set, aux, pg),
            }]
        }
        Terminal::Linear { d } => {
            let (set, pg) = (params.expect("linear parameters"), pg.expect("linear gradients"));
            let w = &set.values[0];
            let d = d as usize;
            let (gw, gb) = pg.split_at_mut(1);
            let dx = match ins.in_state.mode {
                Mode::Col => dense_rows_back(&x.data, x.numel() / w.dims[0], w, &g.data, &mut gw[0], &mut gb[0]),
                Mode::Im => {
                    let c = x.dims[1];
                    let hw = x.row_len() / c;
                    let mut dx = vec![0.0; x.numel()];
                    for b in 0..batch {
                        let xb = &x.data[b * c * hw..(b + 1) * c * hw];
                        let gbm = &g.data[b * d * hw..(b + 1) * d * hw];
                        gemm(1.0, Mat::new(&w.data, c, d), Mat::new(gbm, d, hw), 0.0, &mut dx[b * c * hw..(b + 1) * c * hw], c, hw);
                        gemm(1.0, Mat::new(xb, c, hw), Mat::new(gbm, d, hw).tr(), 1.0, &mut gw[0].data, c, d);
                        for (j, row) in gbm.chunks(hw).enumerate() {
                            gb[0].data[j] += row.iter().sum::<f64>();
                        }
                    }
                    dx
                }
            };
            vec![Tensor::from_vec(&x.dims, dx)]
        }
        Terminal::Conv1d { .. } => {
            let (set, pg) = (params.expect("conv1d parameters"), pg.expect("conv1d gradients"));
            let Aux::Cols(cols) = aux else { unreachable!("train cache") };
            let lout = ins.out_state.shape[0];
            let (gw, gb) = pg.split_at_mut(1);
            let dcols = dense_rows_back(cols, batch * lout, &set.values[0], &g.data, &mut gw[0], &mut gb[0]);
            vec![Tensor::from_vec(&x.dims, conv1d_fold(&dcols, batch, ins))]
        }
        Terminal::Im2col { .. } => {
            let mut dx = x.zeros_like();
            let (row_in, row_out) = (x.row_len(), g.row_len());
            for b in 0..batch {
                let (src, dst) = (&g.data[b * row_out..(b + 1) * row_out], &mut dx.data[b * row_in..(b + 1) * row_in]);
                im2col_walk(ins, |o, i| dst[i] += src[o]);
            }
            vec![dx]
        }
        Terminal::Col2im => {
            let (l, d) = (x.dims[1], x.dims[2]);
            let g3 = Tensor { dims: vec![batch, d, l], data: g.data.clone() };
            vec![permute_axes(&g3, &[0, 2, 1])]
        }
        Terminal::Permute { order } => vec![permute_axes(g, &inverse(&full_perm(order.as_slice())))],
        Terminal::Clone { .. } => {
            let mut dx = g.clone();
            for t in &gs[1..] {
                dx.add_assign(t);
            }
            vec![dx]
        }
        Terminal::Group { dim, .. } => {
            let refs: Vec<&Tensor> = gs.iter().collect();
            vec![concat_axis(&refs, dim as usize)]
        }
        Terminal::Add => vec![g.clone(); xs.len()],
        Terminal::Concat { dim, .. } => {
            let axis = dim as usize;
            let sizes: Vec<usize> = xs.iter().map(|t| t.dims[axis]).collect();
            split_axis(g, axis, &sizes)
        }
        Terminal::Matmul { scaled } => {
            let y = xs[1];
            let (transposed, alpha, a, k, c) = matmul_parts(x, y, scaled);
            let ylen = y.row_len();
            let mut dx = x.zeros_like();
            let mut dy = y.zeros_like();
            for b in 0..batch {
                let xb = &x.data[b * a * k..(b + 1) * a * k];
                let yb = &y.data[b * ylen..(b + 1) * ylen];
                let gb = Mat::new(&g.data[b * a * c..(b + 1) * a * c], a, c);
                let dxb = &mut dx.data[b * a * k..(b + 1) * a * k];
                let dyb = &mut dy.data[b * ylen..(b + 1) * ylen];
                if transposed {
                    // z = x y^T: dx = g y, dy = g^T x
                    gemm(alpha, gb, Mat::new(yb, c, k), 0.0, dxb, a, k);
                    gemm(alpha, gb.tr(), Mat::new(xb, a, k), 0.0, dyb, c, k);
                } else {
                    gemm(alpha, gb, Mat::new(yb, k, c).tr(), 0.0, dxb, a, k);
                    gemm(alpha, Mat::new(xb, a, k).tr(), gb, 0.0, dyb, k, c);
                }
            }
            vec![dx, dy]
        }
    }
}
