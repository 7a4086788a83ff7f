//! Branch losses: MSE for full-reference scores, CDF-based earth mover's
//! distance for five-level distributions, and their unweighted sum.

use crate::autodiff::{Graph, Var};
use crate::error::{IqaError, Result};
use crate::nr_head::{QualityDistribution, NUM_LEVELS};

/// Row-sum tolerance accepted by [`emd_loss`].
pub const EMD_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Fr,
    Nr,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub branch: Branch,
}

pub fn mse_loss(pred: &[f64], label: &[f64]) -> Result<LossValue> {
    if pred.is_empty() || pred.len() != label.len() {
        return Err(IqaError::validation(format!(
            "mse needs equal non-empty batches, got {} and {}",
            pred.len(),
            label.len()
        )));
    }
    let sum: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok(LossValue {
        value: sum / pred.len() as f64,
        branch: Branch::Fr,
    })
}

/// Earth mover's distance `((1/5) sum_k |CDF_p(k) - CDF_q(k)|^r)^(1/r)`,
/// averaged over the batch.
pub fn emd_loss(p: &[[f64; NUM_LEVELS]], q: &[[f64; NUM_LEVELS]], r: f64) -> Result<LossValue> {
    if p.is_empty() || p.len() != q.len() {
        return Err(IqaError::validation(format!(
            "emd needs equal non-empty batches, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    if r <= 0.0 {
        return Err(IqaError::validation(format!(
            "emd exponent {r} must be positive"
        )));
    }
    for row in p.iter().chain(q) {
        QualityDistribution::with_tolerance(*row, EMD_SUM_TOLERANCE)?;
    }
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
        for k in 0..NUM_LEVELS {
            ca += a[k];
            cb += b[k];
            acc += (ca - cb).abs().powf(r);
        }
        total += (acc / NUM_LEVELS as f64).powf(1.0 / r);
    }
    Ok(LossValue {
        value: total / p.len() as f64,
        branch: Branch::Nr,
    })
}

pub fn joint_loss(fr: LossValue, nr: LossValue) -> Result<LossValue> {
    if fr.branch != Branch::Fr || nr.branch != Branch::Nr {
        return Err(IqaError::validation(format!(
            "joint loss needs (fr, nr) terms, got ({:?}, {:?})",
            fr.branch, nr.branch
        )));
    }
    Ok(LossValue {
        value: fr.value + nr.value,
        branch: Branch::Joint,
    })
}

/// Squared error of a `1 x 1` prediction against a fixed label.
pub fn squared_error_graph(g: &mut Graph, pred: Var, label: f64) -> Var {
    let diff = g.add_scalar(pred, -label);
    g.mul(diff, diff)
}

/// Per-sample `r = 2` EMD of a `1 x 5` prediction against a fixed target.
pub fn emd_graph(g: &mut Graph, probs: Var, target: &QualityDistribution) -> Var {
    let cdf_p = g.cumsum_cols(probs);
    let mut cdf_q = target.to_row();
    let mut acc = 0.0;
    for v in cdf_q.iter_mut() {
        acc += *v;
        *v = acc;
    }
    let cdf_q = g.constant(cdf_q);
    let diff = g.sub(cdf_p, cdf_q);
    let sq = g.mul(diff, diff);
    let mean = g.mean_cols(sq);
    g.sqrt(mean)
}
