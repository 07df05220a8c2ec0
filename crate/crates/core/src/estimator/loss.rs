//! Negative log-likelihood losses and their gradients.
//!
//! Per time step, with prior `N(μ, diag(l))`, `R = H diag(l) Hᵀ + C_w`,
//! `e = y - Hμ`, `K = diag(l) Hᵀ R⁻¹`:
//!
//! * unsupervised: `-log N(y; Hμ, R)`
//! * supervised:   `-log N(x; μ + K e, diag(l) - K R Kᵀ)`
//!
//! Gradients with respect to `(μ, l)` are closed form; writing `B = I - K H`,
//! a perturbation `dl` moves the posterior covariance by `B diag(dl) Bᵀ` and
//! the posterior mean by `diag(dl) Bᵀ Hᵀ R⁻¹ e` (after the chain through `R`).
//! The network gradient then follows from [`crate::prior_net::Tape`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::posterior::innovation_cov;
use crate::error::{Error, Result};
use crate::measurement::MeasModel;
use crate::prior_net::{forward_priors, forward_with_tape, PriorGrad, PriorNetParams, PriorOutput};
use crate::trajectory::Trajectory;

/// One training sequence; `states` is present for labelled items.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a> {
    pub measurements: &'a Trajectory,
    pub states: Option<&'a Trajectory>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct StepLoss {
    pub unsup: f64,
    pub sup: f64,
}

/// Loss terms at one step plus the gradient on the prior when `grad` is given.
pub(crate) fn step_loss(
    prior: &PriorOutput,
    y: &[f64],
    x: Option<&[f64]>,
    model: &MeasModel,
    grad: Option<&mut PriorGrad>,
) -> Result<StepLoss> {
    let h = &model.h;
    let (n, m) = h.shape();
    let mu = DVector::from_row_slice(&prior.mean);
    let l = &prior.diag_cov;

    let r = innovation_cov(l, model);
    let chol = r
        .clone()
        .cholesky()
        .ok_or(Error::Singular("innovation covariance"))?;
    let log_det_r: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let r_inv = chol.inverse();
    let e = DVector::from_row_slice(y) - h * &mu;
    let v = &r_inv * &e;
    let unsup = 0.5 * (n as f64 * (2.0 * PI).ln() + log_det_r + e.dot(&v));

    let want_grad = grad.is_some();
    let mut d_mu = DVector::<f64>::zeros(m);
    let mut d_l = vec![0.0; m];
    if want_grad {
        d_mu -= h.transpose() * &v;
        let g_r = (&r_inv - &v * v.transpose()) * 0.5;
        let hgh = h.transpose() * g_r * h;
        for (i, dl) in d_l.iter_mut().enumerate() {
            *dl += hgh[(i, i)];
        }
    }

    let mut sup = 0.0;
    if let Some(x) = x {
        let l_mat = DMatrix::from_diagonal(&DVector::from_row_slice(l));
        let gain = &l_mat * h.transpose() * &r_inv;
        let post_mean = &mu + &gain * &e;
        let p = &l_mat - &gain * &r * gain.transpose();
        let p = (&p + p.transpose()) * 0.5;
        let p_chol = p
            .clone()
            .cholesky()
            .ok_or(Error::NotPsd { min_eigenvalue: f64::NAN })?;
        let log_det_p: f64 = p_chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let p_inv = p_chol.inverse();
        let d = DVector::from_row_slice(x) - post_mean;
        let w = &p_inv * &d;
        sup = 0.5 * (m as f64 * (2.0 * PI).ln() + log_det_p + d.dot(&w));

        if want_grad {
            let b = DMatrix::<f64>::identity(m, m) - &gain * h;
            let g_a = -&w;
            let g_p = (&p_inv - &w * w.transpose()) * 0.5;
            let bt_ga = b.transpose() * &g_a;
            d_mu += &bt_ga;
            let btgb = b.transpose() * g_p * &b;
            let hv = h.transpose() * &v;
            for i in 0..m {
                d_l[i] += btgb[(i, i)] + bt_ga[i] * hv[i];
            }
        }
    }

    if let Some(g) = grad {
        g.mean.copy_from_slice(d_mu.as_slice());
        g.diag_cov.copy_from_slice(&d_l);
    }
    Ok(StepLoss { unsup, sup })
}

fn check_lengths(seq: &SeqRef<'_>) -> Result<()> {
    if let Some(x) = seq.states {
        if x.len() != seq.measurements.len() {
            return Err(Error::Dimension(format!(
                "{} states paired with {} measurements",
                x.len(),
                seq.measurements.len()
            )));
        }
    }
    Ok(())
}

/// `-Σ_t log p(y_t | y_{1:t-1})`, constants included.
pub fn unsup_loss(params: &PriorNetParams, ys: &Trajectory, model: &MeasModel) -> Result<f64> {
    let priors = forward_priors(params, ys);
    let mut total = 0.0;
    for (t, prior) in priors.iter().enumerate() {
        total += step_loss(prior, ys.row(t), None, model, None)?.unsup;
    }
    Ok(total)
}

/// `-Σ_t log p(x_t | y_{1:t})`, constants included.
pub fn sup_loss(params: &PriorNetParams, xs: &Trajectory, ys: &Trajectory, model: &MeasModel) -> Result<f64> {
    check_lengths(&SeqRef {
        measurements: ys,
        states: Some(xs),
    })?;
    let priors = forward_priors(params, ys);
    let mut total = 0.0;
    for (t, prior) in priors.iter().enumerate() {
        total += step_loss(prior, ys.row(t), Some(xs.row(t)), model, None)?.sup;
    }
    Ok(total)
}

/// Value of the semi-supervised objective on one sequence.
pub fn sequence_loss(params: &PriorNetParams, seq: SeqRef<'_>, model: &MeasModel) -> Result<f64> {
    check_lengths(&seq)?;
    let priors = forward_priors(params, seq.measurements);
    let mut total = 0.0;
    for (t, prior) in priors.iter().enumerate() {
        let s = step_loss(prior, seq.measurements.row(t), seq.states.map(|x| x.row(t)), model, None)?;
        total += s.unsup + s.sup;
    }
    Ok(total)
}

/// Supervised loss over the labelled items plus unsupervised loss over all items.
pub fn total_loss(params: &PriorNetParams, batch: &[SeqRef<'_>], model: &MeasModel) -> Result<f64> {
    batch.iter().map(|s| sequence_loss(params, *s, model)).sum()
}

/// Loss and parameter gradient for one sequence.
pub fn sequence_loss_and_grad(
    params: &PriorNetParams,
    seq: SeqRef<'_>,
    model: &MeasModel,
) -> Result<(f64, PriorNetParams)> {
    check_lengths(&seq)?;
    let (priors, tape) = forward_with_tape(params, seq.measurements);
    let m = params.dims().output;
    let mut upstream = vec![PriorGrad::zeros(m); priors.len()];
    let mut total = 0.0;
    for (t, (prior, up)) in priors.iter().zip(upstream.iter_mut()).enumerate() {
        let s = step_loss(
            prior,
            seq.measurements.row(t),
            seq.states.map(|x| x.row(t)),
            model,
            Some(up),
        )?;
        total += s.unsup + s.sup;
    }
    Ok((total, tape.backward(params, &upstream)))
}

/// Loss and gradient summed over a batch, reduced in batch order.
pub fn batch_loss_and_grad(
    params: &PriorNetParams,
    batch: &[SeqRef<'_>],
    model: &MeasModel,
) -> Result<(f64, PriorNetParams)> {
    use rayon::prelude::*;
    let parts: Vec<Result<(f64, PriorNetParams)>> = batch
        .par_iter()
        .map(|s| sequence_loss_and_grad(params, *s, model))
        .collect();
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for part in parts {
        let (l, g) = part?;
        total += l;
        grad.add_assign(&g);
    }
    Ok((total, grad))
}
