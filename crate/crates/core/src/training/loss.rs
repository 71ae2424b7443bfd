use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_vel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_vel: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda_rec", self.lambda_rec), ("lambda_vel", self.lambda_vel)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a finite value ≥ 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean squared vertex error.
    pub rec: f64,
    /// Mean squared error of first-order frame differences.
    pub vel: f64,
    pub total: f64,
}

fn check(pred: &Tensor, gt: &Tensor) -> Result<()> {
    pred.ensure_same_shape(gt, "loss")?;
    if pred.rows() == 0 {
        return Err(Error::invalid("loss needs at least one frame"));
    }
    Ok(())
}

pub fn loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<LossParts> {
    Ok(loss_and_grad(pred, gt, cfg)?.0)
}

/// Loss value and its gradient with respect to `pred`.
pub fn loss_and_grad(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<(LossParts, Tensor)> {
    check(pred, gt)?;
    let (t_len, d) = pred.shape();
    let mut grad = Tensor::zeros(t_len, d);

    let n_rec = (t_len * d) as f64;
    let mut rec = 0.0;
    for ((g, p), y) in grad.data_mut().iter_mut().zip(pred.data()).zip(gt.data()) {
        let e = p - y;
        rec += e * e;
        *g = 2.0 * cfg.lambda_rec * e / n_rec;
    }
    rec /= n_rec;

    let mut vel = 0.0;
    if t_len > 1 {
        let n_vel = ((t_len - 1) * d) as f64;
        for t in 1..t_len {
            for c in 0..d {
                let e = (pred.get(t, c) - pred.get(t - 1, c)) - (gt.get(t, c) - gt.get(t - 1, c));
                vel += e * e;
                let g = 2.0 * cfg.lambda_vel * e / n_vel;
                grad.data_mut()[t * d + c] += g;
                grad.data_mut()[(t - 1) * d + c] -= g;
            }
        }
        vel /= n_vel;
    }
    let parts = LossParts {
        rec,
        vel,
        total: cfg.lambda_rec * rec + cfg.lambda_vel * vel,
    };
    Ok((parts, grad))
}
