use crate::numerics::Tensor;

/// Singular values in descending order (SVD oracle, independent of the
/// kernel under test).
pub fn singular_values(t: &Tensor) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}
