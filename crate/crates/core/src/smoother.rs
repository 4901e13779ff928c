//! Rauch–Tung–Striebel backward recursion over a completed filter pass.
//!
//! With a linear Gaussian transition the same recursion applies whether the
//! forward pass was a Kalman or a Bellman filter.

use nalgebra::DVector;

use crate::error::{dim_mismatch, Error, Result};
use crate::filter::{FilterOutput, FilterStep};
use crate::linalg::{PdMatrix, SymMatrix};
use crate::model::StateTransition;

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherStep {
    pub t: usize,
    pub x_smooth: DVector<f64>,
    /// Positive semi-definite; not necessarily invertible.
    pub p_smooth: SymMatrix,
}

/// One backward step.
///
/// `G = P_{t|t}·Tᵀ·P_{t+1|t}⁻¹` (obtained from a solve against the factored
/// prediction), then
/// `x̂_{t|n} = x̂_{t|t} + G(x̂_{t+1|n} − x̂_{t+1|t})` and
/// `P_{t|n} = P_{t|t} − G(P_{t+1|t} − P_{t+1|n})Gᵀ`.
pub fn rts_step(
    filt: &FilterStep,
    next_x_pred: &DVector<f64>,
    next_p_pred: &PdMatrix,
    next_smooth: &SmootherStep,
    trans: &StateTransition,
) -> Result<SmootherStep> {
    let d = trans.state_dim();
    if filt.x_filt.len() != d || next_x_pred.len() != d || next_p_pred.dim() != d || next_smooth.x_smooth.len() != d {
        return Err(dim_mismatch("smoother state dimension", d, (filt.x_filt.len(), next_x_pred.len())));
    }
    let p_filt = filt.p_filt.matrix();
    // P_{t+1|t} Gᵀ = T P_{t|t}
    let gain = next_p_pred.solve(&(trans.t() * p_filt))?.transpose();
    let x_smooth = &filt.x_filt + &gain * (&next_smooth.x_smooth - next_x_pred);
    let shrink = next_p_pred.matrix() - next_smooth.p_smooth.matrix();
    let p_smooth = SymMatrix::new(p_filt - &gain * shrink * gain.transpose())?;
    Ok(SmootherStep {
        t: filt.t,
        x_smooth,
        p_smooth,
    })
}

/// Smoothed means and uncertainties for `t = 1..n`, initialized at `t = n`
/// from the filtered quantities.
pub fn run_smoother(filt: &FilterOutput, trans: &StateTransition) -> Result<Vec<SmootherStep>> {
    let last = filt.steps.last().ok_or(Error::EmptyFilterOutput)?;
    let mut out = Vec::with_capacity(filt.steps.len());
    out.push(SmootherStep {
        t: last.t,
        x_smooth: last.x_filt.clone(),
        p_smooth: last.p_filt.sym().clone(),
    });
    for pair in filt.steps.windows(2).rev() {
        let (cur, next) = (&pair[0], &pair[1]);
        let next_smooth = out.last().expect("seeded with the final step");
        let step = rts_step(cur, &next.x_pred, &next.p_pred, next_smooth, trans).map_err(|e| e.at(cur.t))?;
        out.push(step);
    }
    out.reverse();
    Ok(out)
}
