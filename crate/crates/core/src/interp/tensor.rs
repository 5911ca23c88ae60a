use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense row-major array with a leading batch dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { dims: dims.to_vec(), data: vec![0.0; dims.iter().product()] }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        Self { dims: dims.to_vec(), data: vec![v; dims.iter().product()] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "data length does not match dims {dims:?}");
        Self { dims: dims.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Elements per batch entry.
    pub fn row_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `start..end` of the batch.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let r = self.row_len();
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Tensor { dims, data: self.data[start * r..end * r].to_vec() }
    }

    /// Batch rows picked by index.
    pub fn gather_batch(&self, idx: &[usize]) -> Tensor {
        let r = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * r);
        for &i in idx {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Tensor { dims, data }
    }
}

/// A stored matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub t: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, t: false }
    }

    pub fn tr(self) -> Self {
        Self { t: !self.t, ..self }
    }

    fn view(&self) -> ArrayView2<'a, f64> {
        let v = ArrayView2::from_shape((self.rows, self.cols), self.data).expect("matrix shape");
        if self.t {
            v.reversed_axes()
        } else {
            v
        }
    }
}

/// `c = alpha * a * b + beta * c`, where `c` is `m x n` row-major.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64], m: usize, n: usize) {
    let av = a.view();
    let bv = b.view();
    debug_assert_eq!(av.dim().0, m);
    debug_assert_eq!(bv.dim().1, n);
    debug_assert_eq!(av.dim().1, bv.dim().0);
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("output shape");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

/// Reorders axes: output axis `i` is input axis `perm[i]` (0-indexed, batch included).
pub(crate) fn permute_axes(x: &Tensor, perm: &[usize]) -> Tensor {
    let rank = x.dims.len();
    let out_dims: Vec<usize> = perm.iter().map(|&p| x.dims[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * x.dims[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data[offset]);
        // odometer increment over output indices
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor { dims: out_dims, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(1.0, Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), 0.0, &mut c, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(1.0, Mat::new(&a, 2, 2), Mat::new(&b, 2, 2).tr(), 0.0, &mut c, 2, 2);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(1.0, Mat::new(&a, 2, 2).tr(), Mat::new(&b, 2, 2), 1.0, &mut c, 2, 2);
        assert_eq!(c, [17.0 + 26.0, 23.0 + 30.0, 39.0 + 38.0, 53.0 + 44.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect());
        let y = permute_axes(&x, &[0, 2, 1]);
        assert_eq!(y.dims, vec![2, 4, 3]);
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..3 {
                    assert_eq!(y.data[b * 12 + i * 3 + j], x.data[b * 12 + j * 4 + i]);
                }
            }
        }
        let back = permute_axes(&y, &[0, 2, 1]);
        assert_eq!(back, x);
    }
}
