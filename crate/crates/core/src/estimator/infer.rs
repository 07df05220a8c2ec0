use super::posterior::{posterior_update, predictive_belief};
use crate::error::{Error, Result};
use crate::measurement::MeasModel;
use crate::numerics::GaussianBelief;
use crate::prior_net::{forward_priors, PriorNetParams, PriorOutput};
use crate::trajectory::Trajectory;

/// Per-step beliefs produced by a causal filtering sweep.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub posteriors: Vec<GaussianBelief>,
    /// One-step-ahead belief over `y_t` given `y_{1:t-1}`; empty for filters
    /// that do not produce one.
    pub predictive: Vec<GaussianBelief>,
    /// Priors over `x_t`, kept for diagnostics.
    pub priors: Vec<GaussianBelief>,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriors.is_empty()
    }

    /// Posterior means as a trajectory.
    pub fn means(&self) -> Trajectory {
        let dim = self.posteriors.first().map_or(0, |b| b.dim());
        let mut out = Trajectory::with_capacity(dim.max(1), self.len());
        for b in &self.posteriors {
            out.push(b.mean().as_slice());
        }
        out
    }

    /// Posterior marginal standard deviations.
    pub fn std_devs(&self) -> Trajectory {
        let dim = self.posteriors.first().map_or(0, |b| b.dim());
        let mut out = Trajectory::with_capacity(dim.max(1), self.len());
        for b in &self.posteriors {
            let s: Vec<f64> = b.variances().iter().map(|v| v.max(0.0).sqrt()).collect();
            out.push(&s);
        }
        out
    }

    /// Means of the predictive measurement beliefs.
    pub fn predicted_measurements(&self) -> Option<Trajectory> {
        let dim = self.predictive.first()?.dim();
        let mut out = Trajectory::with_capacity(dim, self.predictive.len());
        for b in &self.predictive {
            out.push(b.mean().as_slice());
        }
        Some(out)
    }
}

fn prior_belief(p: &PriorOutput) -> Result<GaussianBelief> {
    GaussianBelief::diagonal(nalgebra::DVector::from_row_slice(&p.mean), &p.diag_cov)
}

/// Causal sweep: network priors followed by the closed-form update at every step.
pub fn infer(params: &PriorNetParams, ys: &Trajectory, model: &MeasModel) -> Result<FilterOutput> {
    if ys.dim() != model.meas_dim() || params.dims().input != model.meas_dim() {
        return Err(Error::Dimension(format!(
            "measurements of dim {} against network input {} and H with {} rows",
            ys.dim(),
            params.dims().input,
            model.meas_dim()
        )));
    }
    let priors = forward_priors(params, ys);
    let mut out = FilterOutput {
        posteriors: Vec::with_capacity(priors.len()),
        predictive: Vec::with_capacity(priors.len()),
        priors: Vec::with_capacity(priors.len()),
    };
    for (t, prior) in priors.iter().enumerate() {
        let (post, _) = posterior_update(prior, ys.row(t), model)?;
        out.posteriors.push(post);
        out.predictive.push(predictive_belief(prior, model)?);
        out.priors.push(prior_belief(prior)?);
    }
    Ok(out)
}
