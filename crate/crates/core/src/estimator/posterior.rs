use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measurement::MeasModel;
use crate::numerics::{psd_repair, GaussianBelief};
use crate::prior_net::PriorOutput;

/// Gain, innovation and innovation covariance of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTerms {
    pub gain: DMatrix<f64>,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
}

fn check_dims(prior: &PriorOutput, y: &[f64], model: &MeasModel) -> Result<()> {
    let (n, m) = model.h.shape();
    if prior.mean.len() != m || prior.diag_cov.len() != m || y.len() != n {
        return Err(Error::Dimension(format!(
            "prior dim {} / measurement dim {} against H {n}x{m}",
            prior.mean.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `H diag(l) Hᵀ + C_w`.
pub(crate) fn innovation_cov(diag_cov: &[f64], model: &MeasModel) -> DMatrix<f64> {
    let h = &model.h;
    let mut hl = h.clone();
    for (j, l) in diag_cov.iter().enumerate() {
        hl.column_mut(j).scale_mut(*l);
    }
    &hl * h.transpose() + &model.c_w
}

/// Closed-form Gaussian posterior of `x_t` given the prior and `y_t`.
pub fn posterior_update(
    prior: &PriorOutput,
    y: &[f64],
    model: &MeasModel,
) -> Result<(GaussianBelief, PosteriorTerms)> {
    check_dims(prior, y, model)?;
    let h = &model.h;
    let mean = DVector::from_row_slice(&prior.mean);
    let l = DMatrix::from_diagonal(&DVector::from_row_slice(&prior.diag_cov));

    let r = innovation_cov(&prior.diag_cov, model);
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or(Error::Singular("innovation covariance"))?
        .inverse();
    let innovation = DVector::from_row_slice(y) - h * &mean;
    let gain = &l * h.transpose() * &r_inv;

    let post_mean = &mean + &gain * &innovation;
    let post_cov = psd_repair(&(&l - &gain * &r * gain.transpose()))?;
    let belief = GaussianBelief::new(post_mean, post_cov)?;
    Ok((
        belief,
        PosteriorTerms {
            gain,
            innovation,
            innovation_cov: r,
        },
    ))
}

/// Predictive belief over `y_t`: `N(H m, C_w + H L Hᵀ)`.
pub fn predictive_belief(prior: &PriorOutput, model: &MeasModel) -> Result<GaussianBelief> {
    let m = DVector::from_row_slice(&prior.mean);
    if m.len() != model.state_dim() || prior.diag_cov.len() != model.state_dim() {
        return Err(Error::Dimension("prior does not match H".into()));
    }
    let cov = innovation_cov(&prior.diag_cov, model);
    GaussianBelief::new(&model.h * m, (&cov + cov.transpose()) * 0.5)
}

/// `log p(y_t | y_{1:t-1})` under the predictive belief.
pub fn predictive_loglik(prior: &PriorOutput, y: &[f64], model: &MeasModel) -> Result<f64> {
    check_dims(prior, y, model)?;
    let n = y.len();
    let r = innovation_cov(&prior.diag_cov, model);
    let chol = r.cholesky().ok_or(Error::Singular("predictive covariance"))?;
    let resid = DVector::from_row_slice(y) - &model.h * DVector::from_row_slice(&prior.mean);
    let w = chol
        .l_dirty()
        .solve_lower_triangular(&resid)
        .ok_or(Error::Singular("predictive covariance"))?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + log_det + w.norm_squared()))
}
