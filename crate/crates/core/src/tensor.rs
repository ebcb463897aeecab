//! Dense row-major 2-D tensors in `f64` and the differentiable operations the
//! fusion pipeline is built from.
//!
//! Every forward op has a matching `*_backward` that maps an upstream gradient
//! to gradients of its inputs. The pipeline in [`crate::model`] chains them in
//! reverse over its fixed topology.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols], grad: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut t = Self::zeros(rows, cols);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, grad: vec![0.0; data.len()], data })
    }

    /// Builds from nested rows; panics on ragged input (test and literal use).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data).expect("consistent shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value]).expect("1x1")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the rectangular block `rows × cols` starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Tensor {
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&self.row(r0 + r)[c0..c0 + cols]);
        }
        out
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::dim("vstack", self.shape(), other.shape()));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.rows + other.rows, self.cols, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::dim("add", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::from_vec(self.rows, self.cols, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|x| x * factor).collect();
        Tensor::from_vec(self.rows, self.cols, data).expect("same shape")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    /// Column sums as a `1 × cols` tensor.
    pub fn col_sums(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Mean over rows as a `1 × cols` tensor.
    pub fn mean_rows(&self) -> Tensor {
        self.col_sums().scale(1.0 / self.rows as f64)
    }
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.data[i * m + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &ai) in ar.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(br) {
                *o += ai * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of `a · b` given the upstream gradient `g`: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    if g.shape() != (a.rows, b.cols) {
        return Err(Error::dim("matmul_backward", (a.rows, b.cols), g.shape()));
    }
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

/// Adds a `1 × cols` row vector to every row of `x`.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(Error::dim("add_row", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out.grad.fill(0.0);
    Ok(out)
}

/// Softmax of each row of `x / scale`, with max subtraction.
pub fn row_softmax(x: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("softmax scale must be positive, got {scale}")));
    }
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        softmax_into(x.row(r), scale, out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], scale: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / scale).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Gradient w.r.t. the softmax input given its output `y` and upstream `g`.
pub fn row_softmax_backward(y: &Tensor, g: &Tensor, scale: f64) -> Tensor {
    debug_assert_eq!(y.shape(), g.shape());
    let mut out = Tensor::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yr = y.row(r);
        let gr = g.row(r);
        let inner = dot(yr, gr);
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner) / scale;
        }
    }
    out
}

/// Intermediates kept by [`layer_norm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
    }
    if gamma.shape() != (1, x.cols) {
        return Err(Error::dim("layer_norm gamma", x.shape(), gamma.shape()));
    }
    if beta.shape() != (1, x.cols) {
        return Err(Error::dim("layer_norm beta", x.shape(), beta.shape()));
    }
    let n = x.cols as f64;
    let mut normalized = Tensor::zeros(x.rows, x.cols);
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for c in 0..x.cols {
            let xh = (row[c] - mean) * istd;
            normalized.data[r * x.cols + c] = xh;
            out.data[r * x.cols + c] = gamma.data[c] * xh + beta.data[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (rows, cols) = g.shape();
    let n = cols as f64;
    let mut dx = Tensor::zeros(rows, cols);
    let mut dgamma = Tensor::zeros(1, cols);
    let mut dbeta = Tensor::zeros(1, cols);
    let mut gxh = vec![0.0; cols];
    for r in 0..rows {
        let xh = cache.normalized.row(r);
        let gr = g.row(r);
        for c in 0..cols {
            gxh[c] = gr[c] * gamma.data[c];
            dgamma.data[c] += gr[c] * xh[c];
            dbeta.data[c] += gr[c];
        }
        let sum_g: f64 = gxh.iter().sum();
        let sum_gx: f64 = dot(&gxh, xh);
        let istd = cache.inv_std[r];
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = istd / n * (n * gxh[c] - sum_g - xh[c] * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::from_vec(x.rows, x.cols, data).expect("same shape")
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Gradient w.r.t. the GELU input `x` given upstream `g`.
pub fn gelu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x.data.iter().zip(&g.data).map(|(&xv, &gv)| gv * gelu_derivative(xv)).collect();
    Tensor::from_vec(x.rows, x.cols, data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central difference of `f` w.r.t. every entry of `x`.
    fn numeric(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += h;
                let mut m = x.clone();
                m.data[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).fold(0.0, f64::max)
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap().data, m.data);
    }

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data, vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(5, 3, &mut rng);
        let b = random(3, 4, &mut rng);
        let w = random(5, 4, &mut rng);
        // loss = sum(w ⊙ (a b))
        let loss = |a: &Tensor, b: &Tensor| dot(&matmul(a, b).unwrap().data, &w.data);
        let (ga, gb) = matmul_backward(&a, &b, &w).unwrap();
        assert!(max_rel_err(&ga.data, &numeric(&a, |x| loss(x, &b))) < 1e-6);
        assert!(max_rel_err(&gb.data, &numeric(&b, |x| loss(&a, x))) < 1e-6);
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(4, 3, &mut rng);
        let b = random(5, 3, &mut rng);
        let direct = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap().data, direct.data);
        let c = random(4, 2, &mut rng);
        let direct = matmul(&a.transpose(), &c).unwrap();
        for (x, y) in matmul_tn(&a, &c).unwrap().data.iter().zip(&direct.data) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_cases() {
        let y = row_softmax(&Tensor::from_rows(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(y.data, vec![0.5, 0.5]);
        let y = row_softmax(&Tensor::from_rows(&[&[7.0, 7.0, 7.0]]), 1.0).unwrap();
        for v in y.data {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let y = row_softmax(&Tensor::from_rows(&[&[1000.0, 0.0]]), 1.0).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data[0], 1.0);
        assert!(y.data[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nonpositive_scale() {
        let x = Tensor::zeros(1, 2);
        assert!(matches!(row_softmax(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(row_softmax(&x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(3, 6, &mut rng).scale(3.0);
        let w = random(3, 6, &mut rng);
        let scale = 2.0_f64.sqrt();
        let y = row_softmax(&x, scale).unwrap();
        let g = row_softmax_backward(&y, &w, scale);
        let num = numeric(&x, |x| dot(&row_softmax(x, scale).unwrap().data, &w.data));
        assert!(max_rel_err(&g.data, &num) < 1e-6);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(1, 3, 1.0);
        let zeros = Tensor::zeros(1, 3);
        let (y, _) = layer_norm(&Tensor::from_rows(&[&[1.0, 1.0, 1.0]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 0.0]);

        let ones = Tensor::filled(1, 2, 1.0);
        let zeros = Tensor::zeros(1, 2);
        let (y, _) = layer_norm(&Tensor::from_rows(&[&[1.0, -1.0]]), &ones, &zeros, 1e-12).unwrap();
        assert_abs_diff_eq!(y.data[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(y.data[1], -1.0, epsilon = 1e-10);

        assert!(matches!(layer_norm(&Tensor::zeros(1, 2), &ones, &zeros, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(4, 7, &mut rng).scale(5.0);
        let (y, _) = layer_norm(&x, &Tensor::filled(1, 7, 1.0), &Tensor::zeros(1, 7), 1e-12).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(3, 5, &mut rng).scale(2.0);
        let gamma = random(1, 5, &mut rng);
        let beta = random(1, 5, &mut rng);
        let w = random(3, 5, &mut rng);
        let f =
            |x: &Tensor, gm: &Tensor, bt: &Tensor| dot(&layer_norm(x, gm, bt, LAYER_NORM_EPS).unwrap().0.data, &w.data);
        let (_, cache) = layer_norm(&x, &gamma, &beta, LAYER_NORM_EPS).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gamma, &w);
        assert!(max_rel_err(&dx.data, &numeric(&x, |v| f(v, &gamma, &beta))) < 1e-6);
        assert!(max_rel_err(&dg.data, &numeric(&gamma, |v| f(&x, v, &beta))) < 1e-6);
        assert!(max_rel_err(&db.data, &numeric(&beta, |v| f(&x, &gamma, v))) < 1e-6);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(2, 6, &mut rng).scale(3.0);
        let w = random(2, 6, &mut rng);
        let g = gelu_backward(&x, &w);
        assert!(max_rel_err(&g.data, &numeric(&x, |v| dot(&gelu(v).data, &w.data))) < 1e-6);
    }

    #[test]
    fn block_and_vstack() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0]]);
        let s = a.vstack(&b).unwrap();
        assert_eq!(s.shape(), (3, 2));
        assert_eq!(s.block(1, 0, 2, 1).data, vec![3.0, 5.0]);
        assert!(a.vstack(&Tensor::zeros(1, 3)).is_err());
    }
}
