//! Forward and backward passes for the dense primitives.
//!
//! Backward functions accumulate into caller-provided gradient buffers
//! (`+=`), so one buffer can collect contributions from several uses of the
//! same tensor.

use super::Tensor;
use crate::error::{Error, Result};

/// Whether an operand enters a product as-is or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

fn op_shape(t: &Tensor, tr: Trans) -> (usize, usize) {
    match tr {
        Trans::No => (t.rows(), t.cols()),
        Trans::Yes => (t.cols(), t.rows()),
    }
}

fn op_strides(t: &Tensor, tr: Trans) -> (isize, isize) {
    let c = t.cols() as isize;
    match tr {
        Trans::No => (c, 1),
        Trans::Yes => (1, c),
    }
}

/// `c = beta * c + alpha * op(a) · op(b)`.
/// Borrowed strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Strided<'a> {
    /// Column block `[col, col + width)` of `t`.
    pub fn columns(t: &'a Tensor, col: usize, width: usize) -> Self {
        assert!(col + width <= t.cols(), "column block out of range");
        Self {
            data: t.data(),
            offset: col,
            rows: t.rows(),
            cols: width,
            rs: t.cols(),
            cs: 1,
        }
    }

    /// First `rows` rows of this view.
    pub fn top(self, rows: usize) -> Self {
        assert!(rows <= self.rows, "row range out of bounds");
        Self { rows, ..self }
    }

    /// Rows `[start, end)` of this view.
    pub fn row_range(self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Self {
            offset: self.offset + start * self.rs,
            rows: end - start,
            ..self
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows.max(1) - 1) * self.rs + (self.cols.max(1) - 1) * self.cs
    }
}

/// `c = alpha · a · b + beta · c` on strided views; `c` is described by
/// `(offset, rows, cols, rs, cs)` into `c_data`. Panics on shape or bounds
/// violations.
pub(crate) fn gemm_strided(
    alpha: f64,
    a: Strided,
    b: Strided,
    beta: f64,
    c_data: &mut [f64],
    c: (usize, usize, usize, usize, usize),
) {
    let (c_off, m, n, c_rs, c_cs) = c;
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (m, n), "output shape differs");
    if m == 0 || n == 0 {
        return;
    }
    let c_last = c_off + (m - 1) * c_rs + (n - 1) * c_cs;
    assert!(c_last < c_data.len(), "output view out of bounds");
    if a.cols == 0 {
        for i in 0..m {
            for j in 0..n {
                c_data[c_off + i * c_rs + j * c_cs] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len() && b.last_index() < b.data.len(), "input view out of bounds");
    // SAFETY: every index the kernel touches is at most the `last_index` of
    // its view, checked above; `c_data` is a unique borrow so it cannot alias
    // the shared inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            a.cols,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c_data.as_mut_ptr().add(c_off),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

pub fn gemm(
    alpha: f64,
    a: &Tensor,
    ta: Trans,
    b: &Tensor,
    tb: Trans,
    beta: f64,
    c: &mut Tensor,
) -> Result<()> {
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: (m, k),
            right: (k2, n),
        });
    }
    if c.shape() != (m, n) {
        return Err(Error::ShapeMismatch {
            op: "matmul output",
            left: (m, n),
            right: c.shape(),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.scale_assign(beta);
        return Ok(());
    }
    let (rsa, csa) = op_strides(a, ta);
    let (rsb, csb) = op_strides(b, tb);
    let rsc = n as isize;
    // SAFETY: shapes and strides were validated above; every index reached by
    // the kernel lies inside the three buffers, and `c` does not alias `a`/`b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.data_mut().as_mut_ptr(),
            rsc,
            1,
        );
    }
    Ok(())
}

fn product(a: &Tensor, ta: Trans, b: &Tensor, tb: Trans) -> Result<Tensor> {
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Tensor::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c)?;
    Ok(c)
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    product(a, Trans::No, b, Trans::No)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    product(a, Trans::No, b, Trans::Yes)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    product(a, Trans::Yes, b, Trans::No)
}

/// Backward of `c = a · b`: `da += dc · bᵀ`, `db += aᵀ · dc`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    dc: &Tensor,
    da: Option<&mut Tensor>,
    db: Option<&mut Tensor>,
) -> Result<()> {
    if let Some(da) = da {
        gemm(1.0, dc, Trans::No, b, Trans::Yes, 1.0, da)?;
    }
    if let Some(db) = db {
        gemm(1.0, a, Trans::Yes, dc, Trans::No, 1.0, db)?;
    }
    Ok(())
}

/// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is excluded
/// and receives exactly zero weight.
pub fn softmax_rows(x: &Tensor, causal: bool) -> Result<Tensor> {
    if causal && x.rows() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "causal softmax (square required)",
            left: x.shape(),
            right: (x.rows(), x.rows()),
        });
    }
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let visible = if causal { i + 1 } else { x.cols() };
        softmax_in_place(&x.row(i)[..visible], &mut out.row_mut(i)[..visible]);
    }
    Ok(out)
}

/// Stabilized softmax of `src` written into `dst` (same length).
#[inline]
pub fn softmax_in_place(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    let inv = 1.0 / total;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

/// Backward of row softmax given its output `y`:
/// `dx_ij = y_ij (dy_ij − Σ_k y_ik dy_ik)`. Masked entries have `y = 0` and
/// therefore zero gradient.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.ensure_same_shape(dy, "softmax backward")?;
    let mut dx = Tensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    Ok(dx)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved state of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalized input before the affine transform.
    pub xhat: Tensor,
    /// Per-row `1 / sqrt(var + eps)`.
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalization followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("layer norm eps must be > 0, got {eps}")));
    }
    let d = x.cols();
    for (name, t) in [("gain", gain), ("bias", bias)] {
        if t.shape() != (1, d) {
            return Err(Error::ShapeMismatch {
                op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                left: (1, d),
                right: t.shape(),
            });
        }
    }
    let mut xhat = Tensor::zeros(x.rows(), d);
    let mut out = Tensor::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gain.data()[j] * xh[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Backward of [`layer_norm`]; returns `dx` and accumulates into `dgain` and
/// `dbias` when given.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
    dgain: Option<&mut Tensor>,
    dbias: Option<&mut Tensor>,
) -> Tensor {
    let (n, d) = dy.shape();
    if let Some(dg) = dgain {
        for i in 0..n {
            for ((g, &y), &h) in dg.data_mut().iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
                *g += y * h;
            }
        }
    }
    if let Some(db) = dbias {
        for i in 0..n {
            for (b, &y) in db.data_mut().iter_mut().zip(dy.row(i)) {
                *b += y;
            }
        }
    }
    let mut dx = Tensor::zeros(n, d);
    let g = gain.data();
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dxhat[j] = dy.get(i, j) * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Backward of `y = tanh(x)` from its output: `dx = dy ⊙ (1 − y²)`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= 1.0 - v * v;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(rows: usize, cols: usize, rng: &mut Xoshiro256PlusPlus) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_x_is_x() {
        let x = Tensor::from_rows(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn one_by_two_times_two_by_one() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(4, 5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 5)"), "{msg}");
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let a = random(4, 6, &mut rng);
        let b = random(5, 6, &mut rng);
        let nt = matmul_nt(&a, &b).unwrap();
        let explicit = matmul(&a, &b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let c = random(4, 3, &mut rng);
        let tn = matmul_tn(&a, &c).unwrap();
        let explicit = matmul(&a.transpose(), &c).unwrap();
        for (x, y) in tn.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let w = random(5, 3, &mut rng);
        // f(a) = Σ w ⊙ (a b)
        let err_a = grad_check(
            |a: &Tensor| {
                let c = matmul(a, &b).unwrap();
                let val = c.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
                let mut da = Tensor::zeros(5, 7);
                matmul_backward(a, &b, &w, Some(&mut da), None).unwrap();
                (val, da)
            },
            &a,
            1e-6,
        )
        .unwrap();
        let err_b = grad_check(
            |b: &Tensor| {
                let c = matmul(&a, b).unwrap();
                let val = c.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
                let mut db = Tensor::zeros(7, 3);
                matmul_backward(&a, b, &w, None, Some(&mut db)).unwrap();
                (val, db)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err_a < 1e-6, "{err_a}");
        assert!(err_b < 1e-6, "{err_b}");
    }

    #[test]
    fn matmul_is_associative_on_well_conditioned_triples() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..10 {
            let mut a = random(8, 8, &mut rng);
            let mut b = random(8, 8, &mut rng);
            let mut c = random(8, 8, &mut rng);
            // diagonally dominant → well conditioned
            for m in [&mut a, &mut b, &mut c] {
                for i in 0..8 {
                    let v = m.get(i, i);
                    m.set(i, i, v + 4.0);
                }
            }
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm();
            assert!(rel < 1e-9, "{rel}");
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let y = softmax_rows(&Tensor::zeros(1, 3), false).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_softmax_first_row_and_zeros_above_diagonal() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let x = random(5, 5, &mut rng);
        let y = softmax_rows(&x, true).unwrap();
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_eq!(y.get(i, j), 0.0);
            }
            assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_rejects_non_square() {
        assert!(softmax_rows(&Tensor::zeros(2, 3), true).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = Tensor::from_rows(&[&[1000.0, 1001.0, 999.0]]);
        let y = softmax_rows(&x, false).unwrap();
        assert!(y.is_finite());
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let x = random(4, 4, &mut rng);
        let w = random(4, 4, &mut rng);
        for causal in [false, true] {
            let err = grad_check(
                |x: &Tensor| {
                    let y = softmax_rows(x, causal).unwrap();
                    let val = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                    (val, softmax_rows_backward(&y, &w).unwrap())
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "causal={causal}: {err}");
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let x = Tensor::filled(2, 4, 3.7);
        let (y, _) = layer_norm(&x, &Tensor::filled(1, 4, 1.0), &Tensor::zeros(1, 4), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_normalized_row_is_fixed_point() {
        let x = Tensor::from_rows(&[&[1.0, -1.0]]);
        let (y, _) = layer_norm(&x, &Tensor::filled(1, 2, 1.0), &Tensor::zeros(1, 2), 1e-15).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-12 && (y.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_non_positive_eps() {
        let g = Tensor::filled(1, 2, 1.0);
        let b = Tensor::zeros(1, 2);
        assert!(layer_norm(&Tensor::zeros(1, 2), &g, &b, 0.0).is_err());
        assert!(layer_norm(&Tensor::zeros(1, 2), &g, &b, -1.0).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        let x = random(6, 8, &mut rng);
        let (_, cache) = layer_norm(&x, &Tensor::filled(1, 8, 1.0), &Tensor::zeros(1, 8), 1e-5).unwrap();
        for i in 0..6 {
            let r = cache.xhat.row(i);
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            // eps shrinks the variance slightly below one
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
        // with a negligible eps the post-normalization variance is 1 to 1e-6
        let (_, cache) = layer_norm(&x, &Tensor::filled(1, 8, 1.0), &Tensor::zeros(1, 8), 1e-12).unwrap();
        for i in 0..6 {
            let r = cache.xhat.row(i);
            let var = r.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let x = random(3, 8, &mut rng);
        let g = random(1, 8, &mut rng);
        let b = random(1, 8, &mut rng);
        let w = random(3, 8, &mut rng);
        let weighted = |y: &Tensor| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let err_x = grad_check(
            |x: &Tensor| {
                let (y, cache) = layer_norm(x, &g, &b, 1e-5).unwrap();
                (weighted(&y), layer_norm_backward(&cache, &g, &w, None, None))
            },
            &x,
            1e-6,
        )
        .unwrap();
        let err_g = grad_check(
            |g: &Tensor| {
                let (y, cache) = layer_norm(&x, g, &b, 1e-5).unwrap();
                let mut dg = Tensor::zeros(1, 8);
                layer_norm_backward(&cache, g, &w, Some(&mut dg), None);
                (weighted(&y), dg)
            },
            &g,
            1e-6,
        )
        .unwrap();
        let err_b = grad_check(
            |b: &Tensor| {
                let (y, cache) = layer_norm(&x, &g, b, 1e-5).unwrap();
                let mut db = Tensor::zeros(1, 8);
                layer_norm_backward(&cache, &g, &w, None, Some(&mut db));
                (weighted(&y), db)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err_x < 1e-5 && err_g < 1e-5 && err_b < 1e-5, "{err_x} {err_g} {err_b}");
    }

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let x = random(3, 5, &mut rng);
        let w = random(3, 5, &mut rng);
        let err = grad_check(
            |x: &Tensor| {
                let y = tanh(x);
                let val = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                (val, tanh_backward(&y, &w))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
