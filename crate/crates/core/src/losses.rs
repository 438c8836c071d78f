//! Training objective: weighted sum of off-diagonal binary cross-entropy on
//! the adjacency, the eigendecomposition-free Laplacian loss, and squared
//! error on the group count.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use trackgroup_nd::{Tape, Tensor, Var};

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::nn::tensor_from_matrix;
use crate::tracks::TrackId;

pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 5e-4,
            lambda2: 0.1,
            lambda3: 5e-4,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.alpha, self.beta];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

fn off_diagonal_mask(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Mean binary cross-entropy over off-diagonal entries; 0 for `n = 1`.
/// Predictions are clamped to `[1e-9, 1 - 1e-9]`.
pub fn bce_loss(t: &mut Tape, pred: Var, target: &DMatrix<f64>) -> Result<Var> {
    let n = target.nrows();
    if t.shape(pred) != [n, n] {
        return Err(Error::Input(format!("prediction {:?} vs target {n}x{n}", t.shape(pred))));
    }
    if n < 2 {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let p = t.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = t.log(p);
    let q = t.scale(p, -1.0);
    let q = t.add_scalar(q, 1.0);
    let log_q = t.log(q);
    let pos = t.constant(Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { target[(i, j)] }));
    let neg = t.constant(Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 - target[(i, j)] }));
    let a = t.mul(log_p, pos)?;
    let b = t.mul(log_q, neg)?;
    let s = t.add(a, b)?;
    let s = t.sum(s);
    Ok(t.scale(s, -1.0 / (n * (n - 1)) as f64))
}

/// `diag(row sums) - A` of `a` with its diagonal zeroed.
pub fn laplacian(t: &mut Tape, a: Var) -> Result<Var> {
    let n = t.shape(a)[0];
    let mask = t.constant(off_diagonal_mask(n));
    let a0 = t.mul(a, mask)?;
    let deg = t.sum_cols(a0);
    let d = t.diag(deg)?;
    Ok(t.sub(d, a0)?)
}

/// Unit indicator vectors of the groups as columns of an `n x k` matrix, rows
/// in `ids` order.
pub fn gt_zero_eigenvectors(groups: &Partition, ids: &[TrackId]) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(ids.len(), groups.len());
    for (c, g) in groups.groups().iter().enumerate() {
        let w = 1.0 / (g.len() as f64).sqrt();
        for (r, id) in ids.iter().enumerate() {
            if g.contains(id) {
                e[(r, c)] = w;
            }
        }
    }
    e
}

/// Both terms of the eigen loss, each `1 x 1`: `sum_c ||L e_c||^2` and
/// `alpha * exp(-beta * ||L||_F^2 / n)`, the penalty scaled by the mean squared
/// row norm so that it does not fade as scenes grow.
pub fn eigen_loss_terms(t: &mut Tape, lap: Var, e: &DMatrix<f64>, alpha: f64, beta: f64) -> Result<(Var, Var)> {
    let n = t.shape(lap)[0];
    let ev = t.constant(tensor_from_matrix(e));
    let le = t.matmul(lap, ev)?;
    let le = t.square(le);
    let null = t.sum(le);
    let scaled = t.scale(lap, 1.0 / (n as f64).sqrt());
    let sq = t.square(scaled);
    let tr = t.sum(sq);
    let tr = t.scale(tr, -beta);
    let penalty = t.exp(tr);
    let penalty = t.scale(penalty, alpha);
    Ok((null, penalty))
}

pub fn eigen_loss(t: &mut Tape, lap: Var, e: &DMatrix<f64>, alpha: f64, beta: f64) -> Result<Var> {
    let (a, b) = eigen_loss_terms(t, lap, e, alpha, beta)?;
    Ok(t.add(a, b)?)
}

/// `(pred - target)^2`.
pub fn cardinality_loss(t: &mut Tape, pred: Var, target: usize) -> Var {
    let d = t.add_scalar(pred, -(target as f64));
    t.square(d)
}

/// Scalar values of the loss parts for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub eigen: f64,
    pub cardinality: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.bce, self.eigen, self.cardinality, self.total].iter().all(|v| v.is_finite())
    }

    pub fn add_assign_scaled(&mut self, other: &LossParts, w: f64) {
        self.bce += w * other.bce;
        self.eigen += w * other.eigen;
        self.cardinality += w * other.cardinality;
        self.total += w * other.total;
    }
}

pub fn weighted_total(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * parts.bce + cfg.lambda2 * parts.eigen + cfg.lambda3 * parts.cardinality
}

/// Full objective for one scene on the tape.
pub fn total_loss(
    t: &mut Tape,
    adjacency: Var,
    cardinality: Var,
    groups: &Partition,
    ids: &[TrackId],
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let target = groups.adjacency(ids);
    let bce = bce_loss(t, adjacency, &target)?;
    let lap = laplacian(t, adjacency)?;
    let eig = eigen_loss(t, lap, &gt_zero_eigenvectors(groups, ids), cfg.alpha, cfg.beta)?;
    let mse = cardinality_loss(t, cardinality, groups.len());
    let a = t.scale(bce, cfg.lambda1);
    let b = t.scale(eig, cfg.lambda2);
    let c = t.scale(mse, cfg.lambda3);
    let total = t.add(a, b)?;
    let total = t.add(total, c)?;
    let parts = LossParts {
        bce: t.value(bce).item(),
        eigen: t.value(eig).item(),
        cardinality: t.value(mse).item(),
        total: t.value(total).item(),
    };
    Ok((total, parts))
}
