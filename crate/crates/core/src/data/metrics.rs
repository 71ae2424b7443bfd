use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l2_face: f64,
    pub l2_lip: f64,
    pub lip_max: f64,
}

/// Per-frame, per-vertex Euclidean distances for the unmasked frames.
fn distances(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<Vec<Vec<f64>>> {
    pred.ensure_same_shape(gt, "metric")?;
    if !pred.cols().is_multiple_of(3) {
        return Err(Error::invalid(format!(
            "vertex width {} is not a multiple of 3",
            pred.cols()
        )));
    }
    if mask.len() != pred.rows() {
        return Err(Error::invalid(format!(
            "mask length {} does not match {} frames",
            mask.len(),
            pred.rows()
        )));
    }
    let frames: Vec<Vec<f64>> = (0..pred.rows())
        .filter(|&t| !mask[t])
        .map(|t| {
            pred.row(t)
                .chunks_exact(3)
                .zip(gt.row(t).chunks_exact(3))
                .map(|(p, g)| {
                    p.iter()
                        .zip(g)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::invalid("every frame is masked; metric undefined"));
    }
    Ok(frames)
}

fn check_ids(ids: &[usize], n_vertices: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::invalid("lip vertex set is empty"));
    }
    if let Some(&bad) = ids.iter().find(|&&v| v >= n_vertices) {
        return Err(Error::invalid(format!("lip vertex {bad} outside [0, {n_vertices})")));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Mean per-vertex distance over unmasked frames and all vertices.
pub fn l2_face(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<f64> {
    let d = distances(pred, gt, mask)?;
    Ok(mean(d.iter().flatten().copied()))
}

/// Mean per-vertex distance over unmasked frames and the lip vertices.
pub fn l2_lip(pred: &Tensor, gt: &Tensor, mask: &[bool], lip_ids: &[usize]) -> Result<f64> {
    let d = distances(pred, gt, mask)?;
    check_ids(lip_ids, pred.cols() / 3)?;
    Ok(mean(d.iter().flat_map(|f| lip_ids.iter().map(move |&v| f[v]))))
}

/// Mean over unmasked frames of the largest lip-vertex distance.
pub fn lip_max(pred: &Tensor, gt: &Tensor, mask: &[bool], lip_ids: &[usize]) -> Result<f64> {
    let d = distances(pred, gt, mask)?;
    check_ids(lip_ids, pred.cols() / 3)?;
    Ok(mean(
        d.iter()
            .map(|f| lip_ids.iter().map(|&v| f[v]).fold(f64::NEG_INFINITY, f64::max)),
    ))
}

pub fn evaluate(pred: &Tensor, gt: &Tensor, mask: &[bool], lip_ids: &[usize]) -> Result<Metrics> {
    Ok(Metrics {
        l2_face: l2_face(pred, gt, mask)?,
        l2_lip: l2_lip(pred, gt, mask, lip_ids)?,
        lip_max: lip_max(pred, gt, mask, lip_ids)?,
    })
}

/// Frame-weighted mean of metrics computed on separate sequences; matches
/// evaluating the concatenation.
pub fn weighted_mean(parts: &[(Metrics, usize)]) -> Metrics {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let w = |f: fn(&Metrics) -> f64| {
        parts.iter().map(|(m, n)| f(m) * *n as f64).sum::<f64>() / total.max(1) as f64
    };
    Metrics {
        l2_face: w(|m| m.l2_face),
        l2_lip: w(|m| m.l2_lip),
        lip_max: w(|m| m.lip_max),
    }
}
