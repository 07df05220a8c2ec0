//! Model-driven extended and unscented Kalman filters.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{decimated_index, transition, SsmSpec};
use crate::error::{Error, Result};
use crate::estimator::FilterOutput;
use crate::measurement::MeasModel;
use crate::numerics::{psd_factor, psd_repair, GaussianBelief, SeededRng};
use crate::trajectory::Trajectory;

/// Known state transition used by the model-driven filters.
///
/// `apply(t, x)` maps the state at kept sample `t` to sample `t + 1`.
pub trait Transition {
    fn apply(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn noise_cov(&self, t: usize) -> DMatrix<f64>;
}

impl Transition for SsmSpec {
    /// Composes the raw steps between two kept samples; process noise is taken
    /// as the raw covariance times the number of raw steps.
    fn apply(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = x.clone();
        for _ in 0..raw_steps_between(self, t) {
            x = transition(self, x.as_slice())?;
        }
        Ok(x)
    }

    fn noise_cov(&self, t: usize) -> DMatrix<f64> {
        &self.process_noise_cov * raw_steps_between(self, t) as f64
    }
}

fn raw_steps_between(spec: &SsmSpec, t: usize) -> usize {
    decimated_index(t + 1, spec.decimation_factor) - decimated_index(t, spec.decimation_factor)
}

/// `x_{t+1} = F x_t + e_t`, `e_t ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSsm {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl Transition for LinearSsm {
    fn apply(&self, _t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.f * x)
    }

    fn noise_cov(&self, _t: usize) -> DMatrix<f64> {
        self.q.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

/// Unscented-transform weights for dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaWeights {
    pub lambda: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl UkfConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("UKF alpha {} outside (0, 1]", self.alpha)));
        }
        if dim as f64 + self.kappa <= 0.0 {
            return Err(Error::InvalidArgument("UKF needs dim + kappa > 0".into()));
        }
        Ok(())
    }

    pub fn weights(&self, dim: usize) -> SigmaWeights {
        let l = dim as f64;
        let lambda = self.alpha * self.alpha * (l + self.kappa) - l;
        let wi = 1.0 / (2.0 * (l + lambda));
        let mut mean = vec![wi; 2 * dim + 1];
        let mut cov = mean.clone();
        mean[0] = lambda / (l + lambda);
        cov[0] = mean[0] + 1.0 - self.alpha * self.alpha + self.beta;
        SigmaWeights { lambda, mean, cov }
    }
}

fn check_inputs(ys: &Trajectory, model: &MeasModel, x0: &GaussianBelief) -> Result<()> {
    if ys.dim() != model.meas_dim() || x0.dim() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "measurements of dim {}, H {}x{}, initial belief of dim {}",
            ys.dim(),
            model.meas_dim(),
            model.state_dim(),
            x0.dim()
        )));
    }
    Ok(())
}

/// Linear measurement update; Joseph form, symmetrized and repaired.
fn measurement_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &[f64],
    model: &MeasModel,
) -> Result<(GaussianBelief, GaussianBelief)> {
    let h = &model.h;
    let r = h * cov * h.transpose() + &model.c_w;
    let r = (&r + r.transpose()) * 0.5;
    if cov.iter().all(|v| *v == 0.0) {
        // A certain belief ignores the measurement.
        return Ok((
            GaussianBelief::new(mean.clone(), cov.clone())?,
            GaussianBelief::new(h * mean, r)?,
        ));
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or(Error::Singular("innovation covariance"))?
        .inverse();
    let pred_y = h * mean;
    let gain = cov * h.transpose() * r_inv;
    let post_mean = mean + &gain * (DVector::from_row_slice(y) - &pred_y);
    let b = DMatrix::identity(cov.nrows(), cov.nrows()) - &gain * h;
    let post_cov = psd_repair(&(&b * cov * b.transpose() + &gain * &model.c_w * gain.transpose()))?;
    Ok((GaussianBelief::new(post_mean, post_cov)?, GaussianBelief::new(pred_y, r)?))
}

/// Drive a filter whose prediction step is `predict(t, posterior_t) -> prior_{t+1}`.
fn run_filter(
    ys: &Trajectory,
    model: &MeasModel,
    x0: &GaussianBelief,
    mut predict: impl FnMut(usize, &GaussianBelief) -> Result<(DVector<f64>, DMatrix<f64>)>,
) -> Result<FilterOutput> {
    check_inputs(ys, model, x0)?;
    let len = ys.len();
    let mut out = FilterOutput {
        posteriors: Vec::with_capacity(len),
        predictive: Vec::with_capacity(len),
        priors: Vec::with_capacity(len),
    };
    let mut mean = x0.mean().clone();
    let mut cov = x0.cov().clone();
    for t in 0..len {
        let (post, pred) = measurement_update(&mean, &cov, ys.row(t), model)?;
        out.priors.push(GaussianBelief::new(mean, cov)?);
        if t + 1 < len {
            let (m, c) = predict(t, &post)?;
            mean = m;
            cov = c;
        } else {
            mean = DVector::zeros(0);
            cov = DMatrix::zeros(0, 0);
        }
        out.posteriors.push(post);
        out.predictive.push(pred);
    }
    Ok(out)
}

/// Central-difference Jacobian of `f(t, ·)` at `x`, step `1e-6 · max(1, |x_i|)`.
pub fn fd_jacobian<T: Transition + ?Sized>(f: &T, t: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = x.len();
    let mut jac = DMatrix::zeros(m, m);
    for i in 0..m {
        let h = 1e-6 * x[i].abs().max(1.0);
        let mut plus = x.clone();
        plus[i] += h;
        let mut minus = x.clone();
        minus[i] -= h;
        let col = (f.apply(t, &plus)? - f.apply(t, &minus)?) / (2.0 * h);
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// Extended Kalman filter. `x0` is the prior belief for the first sample.
pub fn ekf<T: Transition + ?Sized>(
    ys: &Trajectory,
    transition: &T,
    model: &MeasModel,
    x0: &GaussianBelief,
) -> Result<FilterOutput> {
    run_filter(ys, model, x0, |t, post| {
        let jac = fd_jacobian(transition, t, post.mean())?;
        let mean = transition.apply(t, post.mean())?;
        let cov = &jac * post.cov() * jac.transpose() + transition.noise_cov(t);
        Ok((mean, (&cov + cov.transpose()) * 0.5))
    })
}

/// Unscented Kalman filter. The measurement map is linear, so the update is
/// the exact Gaussian one; sigma points are used for the prediction step.
pub fn ukf<T: Transition + ?Sized>(
    ys: &Trajectory,
    transition: &T,
    model: &MeasModel,
    x0: &GaussianBelief,
    cfg: &UkfConfig,
) -> Result<FilterOutput> {
    let dim = x0.dim();
    cfg.validate(dim)?;
    let w = cfg.weights(dim);
    run_filter(ys, model, x0, |t, post| {
        let root = psd_factor(&(post.cov() * (dim as f64 + w.lambda)))?;
        let centre = transition.apply(t, post.mean())?;
        // Propagated offsets from the centre point keep the large, opposite-signed
        // weights of small-alpha transforms from cancelling catastrophically.
        let mut offsets = Vec::with_capacity(2 * dim);
        for sign in [1.0, -1.0] {
            for i in 0..dim {
                let point = post.mean() + root.column(i) * sign;
                offsets.push(transition.apply(t, &point)? - &centre);
            }
        }
        let mut shift = DVector::zeros(dim);
        for (k, d) in offsets.iter().enumerate() {
            shift += d * w.mean[k + 1];
        }
        let mut cov = &shift * shift.transpose() * w.cov[0];
        for (k, d) in offsets.iter().enumerate() {
            let e = d - &shift;
            cov += &e * e.transpose() * w.cov[k + 1];
        }
        cov += transition.noise_cov(t);
        Ok((centre + shift, (&cov + cov.transpose()) * 0.5))
    })
}

/// Filter initial belief: true first state plus `N(0, I)`, covariance `I`.
pub fn perturbed_truth_prior(x1: &[f64], rng: &mut SeededRng) -> Result<GaussianBelief> {
    let mut noise = vec![0.0; x1.len()];
    rng.fill_standard_normal(&mut noise);
    let mean = DVector::from_iterator(x1.len(), x1.iter().zip(&noise).map(|(a, b)| a + b));
    GaussianBelief::isotropic(mean, 1.0)
}

/// Filter initial belief without access to the truth: `N(0, 10 I)`.
pub fn uninformed_prior(dim: usize) -> Result<GaussianBelief> {
    GaussianBelief::isotropic(DVector::zeros(dim), 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, System};
    use crate::measurement::{builtin_h, measure, BuiltinH};

    /// Textbook Kalman filter with explicit inverses.
    fn kf_oracle(
        ys: &Trajectory,
        f: &DMatrix<f64>,
        q: &DMatrix<f64>,
        h: &DMatrix<f64>,
        r: &DMatrix<f64>,
        m0: &DVector<f64>,
        p0: &DMatrix<f64>,
    ) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let mut m = m0.clone();
        let mut p = p0.clone();
        let mut out = Vec::new();
        for t in 0..ys.len() {
            let s = h * &p * h.transpose() + r;
            let k = &p * h.transpose() * s.try_inverse().unwrap();
            let mu = &m + &k * (ys.vector(t) - h * &m);
            let pu = &p - &k * h * &p;
            out.push((mu.clone(), pu.clone()));
            m = f * mu;
            p = f * pu * f.transpose() + q;
        }
        out
    }

    fn linear_case() -> (LinearSsm, MeasModel, Trajectory, GaussianBelief) {
        let f = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.05, 0.95, 0.02, 0.0, 0.03, 0.85]);
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.1, 0.05, 0.2]));
        let ssm = LinearSsm { f, q };
        let model = MeasModel::isotropic(builtin_h(BuiltinH::DenseRandom2x3), 0.3).unwrap();
        let mut rng = SeededRng::new(3);
        let mut x = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let mut ys = Trajectory::new(2);
        let mut e = [0.0; 3];
        let mut w = [0.0; 2];
        for _ in 0..100 {
            rng.fill_standard_normal(&mut w);
            let y = &model.h * &x + DVector::from_row_slice(&w) * 0.3f64.sqrt();
            ys.push(y.as_slice());
            rng.fill_standard_normal(&mut e);
            x = &ssm.f * x + DVector::from_row_slice(&[e[0] * 0.1f64.sqrt(), e[1] * 0.05f64.sqrt(), e[2] * 0.2f64.sqrt()]);
        }
        let x0 = GaussianBelief::new(DVector::from_row_slice(&[0.5, -1.0, 0.0]), DMatrix::identity(3, 3) * 2.0).unwrap();
        (ssm, model, ys, x0)
    }

    #[test]
    fn linear_system_reduces_to_kalman_filter() {
        let (ssm, model, ys, x0) = linear_case();
        let oracle = kf_oracle(&ys, &ssm.f, &ssm.q, &model.h, &model.c_w, x0.mean(), x0.cov());
        let e = ekf(&ys, &ssm, &model, &x0).unwrap();
        let u = ukf(&ys, &ssm, &model, &x0, &UkfConfig::default()).unwrap();
        for (t, (m, p)) in oracle.iter().enumerate() {
            for out in [&e, &u] {
                assert!((out.posteriors[t].mean() - m).amax() < 1e-8, "t={t}");
                assert!((out.posteriors[t].cov() - p).amax() < 1e-8, "t={t}");
            }
        }
    }

    #[test]
    fn sigma_weights_sum_to_one() {
        for (alpha, beta, kappa) in [(1e-3, 2.0, 0.0), (0.5, 2.0, 1.0), (1.0, 0.0, 3.0), (0.1, 1.0, -1.0)] {
            let w = UkfConfig { alpha, beta, kappa }.weights(3);
            assert!((w.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(UkfConfig { alpha: 0.0, ..UkfConfig::default() }.validate(3).is_err());
    }

    #[test]
    fn noiseless_model_tracks_truth() {
        let spec = SsmSpec::noiseless(System::Lorenz63);
        let states = simulate(&spec, Some(&[1.0, 2.0, 20.0]), 50, 0).unwrap();
        let model = MeasModel::isotropic(builtin_h(BuiltinH::DenseRandom2x3), 0.0).unwrap();
        let ys = measure(&states, &model, 1).unwrap().measurements;
        let x0 = GaussianBelief::isotropic(DVector::from_row_slice(states.states.row(0)), 0.0).unwrap();
        for out in [
            ekf(&ys, &spec, &model, &x0).unwrap(),
            ukf(&ys, &spec, &model, &x0, &UkfConfig::default()).unwrap(),
        ] {
            for t in 0..50 {
                let err = (out.posteriors[t].mean() - states.states.vector(t)).amax();
                assert!(err < 1e-6, "t={t} err={err}");
            }
        }
    }

    #[test]
    fn decimated_transition_composes_raw_steps() {
        let spec = SsmSpec::noiseless(System::Rossler);
        let states = simulate(&spec, Some(&[1.0, 1.0, 1.0]), 6, 0).unwrap();
        for t in 0..5 {
            let next = spec.apply(t, &states.states.vector(t)).unwrap();
            assert!((next - states.states.vector(t + 1)).amax() < 1e-12);
        }
    }

    #[test]
    fn covariances_stay_psd_on_lorenz() {
        let spec = SsmSpec::new(System::Lorenz63, 0.05);
        let states = simulate(&spec, None, 200, 4).unwrap();
        let model = MeasModel::isotropic(builtin_h(BuiltinH::DenseRandom2x3), 1.0).unwrap();
        let ys = measure(&states, &model, 5).unwrap().measurements;
        let x0 = perturbed_truth_prior(states.states.row(0), &mut SeededRng::new(6)).unwrap();
        for out in [
            ekf(&ys, &spec, &model, &x0).unwrap(),
            ukf(&ys, &spec, &model, &x0, &UkfConfig::default()).unwrap(),
        ] {
            for b in &out.posteriors {
                assert!(b.cov().clone().symmetric_eigenvalues().min() >= -1e-10);
            }
        }
    }
}
