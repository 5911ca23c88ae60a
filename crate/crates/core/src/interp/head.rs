use super::ops::{dense_rows, dense_rows_back};
use super::params::ParamSet;
use super::tensor::{permute_axes, Tensor};
use crate::tree::Head;

/// What the head needs for its backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    feature_dims: Vec<usize>,
    /// Rows fed to the head's linear map.
    rows: Tensor,
}

/// Bounds of output cell `i` of an adaptive average pool from `n` to `m` cells.
fn window(i: usize, n: usize, m: usize) -> (usize, usize) {
    (i * n / m, ((i + 1) * n).div_ceil(m))
}

/// Area resampling of `(B, C, H, W)` to `(B, C, ht, wt)`.
fn area_pool(x: &Tensor, ht: usize, wt: usize) -> Tensor {
    let (b, c, h, w) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let mut out = Tensor::zeros(&[b, c, ht, wt]);
    for bc in 0..b * c {
        let src = &x.data[bc * h * w..(bc + 1) * h * w];
        for i in 0..ht {
            let (h0, h1) = window(i, h, ht);
            for j in 0..wt {
                let (w0, w1) = window(j, w, wt);
                let mut s = 0.0;
                for y in h0..h1 {
                    s += src[y * w + w0..y * w + w1].iter().sum::<f64>();
                }
                out.data[(bc * ht + i) * wt + j] = s / ((h1 - h0) * (w1 - w0)) as f64;
            }
        }
    }
    out
}

fn area_pool_back(g: &Tensor, dims: &[usize]) -> Tensor {
    let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let (ht, wt) = (g.dims[2], g.dims[3]);
    let mut dx = Tensor::zeros(dims);
    for bc in 0..b * c {
        for i in 0..ht {
            let (h0, h1) = window(i, h, ht);
            for j in 0..wt {
                let (w0, w1) = window(j, w, wt);
                let share = g.data[(bc * ht + i) * wt + j] / ((h1 - h0) * (w1 - w0)) as f64;
                for y in h0..h1 {
                    for v in &mut dx.data[bc * h * w + y * w + w0..bc * h * w + y * w + w1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

/// Features as an image batch `(B, C, H, W)`; Col features `(B, S, D)` become one channel.
fn as_image(x: &Tensor) -> Tensor {
    match x.dims.len() {
        4 => x.clone(),
        _ => Tensor { dims: vec![x.dims[0], 1, x.dims[1], x.dims[2]], data: x.data.clone() },
    }
}

/// Maps backbone features to predictions.
pub fn apply_head(features: &Tensor, params: &ParamSet, head: &Head) -> (Tensor, HeadCache) {
    let (w, bias) = (&params.values[0], &params.values[1]);
    let b = features.batch();
    match *head {
        Head::Classification { classes } => {
            // Im: mean over (H, W); Col: mean over S
            let rows = match features.dims.len() {
                4 => {
                    let (c, hw) = (features.dims[1], features.dims[2] * features.dims[3]);
                    let data = features.data.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
                    Tensor::from_vec(&[b, c], data)
                }
                _ => {
                    let (s, d) = (features.dims[1], features.dims[2]);
                    let mut data = vec![0.0; b * d];
                    for bi in 0..b {
                        for si in 0..s {
                            let row = &features.data[(bi * s + si) * d..(bi * s + si + 1) * d];
                            for (a, v) in data[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                                *a += v / s as f64;
                            }
                        }
                    }
                    Tensor::from_vec(&[b, d], data)
                }
            };
            let out = dense_rows(&rows.data, b, w, bias);
            (Tensor::from_vec(&[b, classes], out), HeadCache { feature_dims: features.dims.clone(), rows })
        }
        Head::Dense { channels, height, width } => {
            let pooled = area_pool(&as_image(features), height, width);
            let c = pooled.dims[1];
            let rows = permute_axes(&pooled, &[0, 2, 3, 1]);
            let out = dense_rows(&rows.data, b * height * width, w, bias);
            let out = Tensor::from_vec(&[b, height, width, channels], out);
            let cache = HeadCache { feature_dims: features.dims.clone(), rows: Tensor { dims: vec![b * height * width, c], data: rows.data } };
            (permute_axes(&out, &[0, 3, 1, 2]), cache)
        }
    }
}

/// Gradient with respect to the features; head parameter gradients accumulate into `pg`.
pub fn head_backward(cache: &HeadCache, params: &ParamSet, head: &Head, g: &Tensor, pg: &mut [Tensor]) -> Tensor {
    let w = &params.values[0];
    let (gw, gb) = pg.split_at_mut(1);
    let fd = &cache.feature_dims;
    let b = fd[0];
    match *head {
        Head::Classification { .. } => {
            let drows = dense_rows_back(&cache.rows.data, b, w, &g.data, &mut gw[0], &mut gb[0]);
            let mut dx = Tensor::zeros(fd);
            match fd.len() {
                4 => {
                    let hw = fd[2] * fd[3];
                    for (chunk, d) in dx.data.chunks_mut(hw).zip(&drows) {
                        chunk.fill(d / hw as f64);
                    }
                }
                _ => {
                    let (s, d) = (fd[1], fd[2]);
                    for bi in 0..b {
                        for si in 0..s {
                            for k in 0..d {
                                dx.data[(bi * s + si) * d + k] = drows[bi * d + k] / s as f64;
                            }
                        }
                    }
                }
            }
            dx
        }
        Head::Dense { height, width, .. } => {
            let grows = permute_axes(g, &[0, 2, 3, 1]);
            let drows = dense_rows_back(&cache.rows.data, b * height * width, w, &grows.data, &mut gw[0], &mut gb[0]);
            let c = cache.rows.dims[1];
            let dpooled = permute_axes(&Tensor::from_vec(&[b, height, width, c], drows), &[0, 3, 1, 2]);
            let img_dims = if fd.len() == 4 { fd.clone() } else { vec![b, 1, fd[1], fd[2]] };
            let dimg = area_pool_back(&dpooled, &img_dims);
            Tensor { dims: fd.clone(), data: dimg.data }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_pool_windows() {
        // 4 -> 2 halves, 2 -> 4 replicates, 3 -> 2 overlaps the middle cell
        assert_eq!((window(0, 4, 2), window(1, 4, 2)), ((0, 2), (2, 4)));
        assert_eq!(window(3, 2, 4), (1, 2));
        assert_eq!((window(0, 3, 2), window(1, 3, 2)), ((0, 2), (1, 3)));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(area_pool(&x, 1, 1).data, vec![2.5]);
        assert_eq!(area_pool(&x, 4, 4).data[..4], [1.0, 1.0, 2.0, 2.0]);
    }
}
