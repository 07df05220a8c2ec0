use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::rng::SeededRng;
use crate::error::{Error, Result};

/// Eigenvalues below this (after symmetrization) are a hard error.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Mean and covariance of a multivariate normal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    diagonal: bool,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "belief mean has dim {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian belief"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[(i, j)], cov[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            mean,
            cov,
            diagonal: false,
        })
    }

    /// Belief with a diagonal covariance given by `variances`.
    pub fn diagonal(mean: DVector<f64>, variances: &[f64]) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Dimension(format!(
                "mean has dim {} but {} variances given",
                mean.len(),
                variances.len()
            )));
        }
        if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "variances must be finite and non-negative".into(),
            ));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian belief"));
        }
        let cov = DMatrix::from_diagonal(&DVector::from_row_slice(variances));
        Ok(Self {
            mean,
            cov,
            diagonal: true,
        })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, &vec![variance; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }
}

/// Symmetrize and clamp tiny negative eigenvalues to zero.
///
/// Eigenvalues in `[-1e-8, 0)` are set to zero; anything lower is an error.
pub fn psd_repair(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    // Positive definite matrices need no eigen-decomposition.
    if sym.clone().cholesky().is_some() {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    if min >= 0.0 {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok((&rebuilt + rebuilt.transpose()) * 0.5)
}

/// Exact conditioning of `x ~ N(mean_x, cov_x)` on `y = H x + w`, `w ~ N(0, C_w)`.
///
/// Builds the joint covariance of `(x, y)` explicitly and conditions through
/// its blocks with an LU solve. Kept deliberately separate from the
/// gain-based update in the estimator so the two can check each other.
pub fn gaussian_condition(
    mean_x: &DVector<f64>,
    cov_x: &DMatrix<f64>,
    h: &DMatrix<f64>,
    c_w: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let m = mean_x.len();
    let n = y.len();
    if cov_x.shape() != (m, m) || h.shape() != (n, m) || c_w.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "conditioning shapes: mean {m}, cov {:?}, H {:?}, C_w {:?}, y {n}",
            cov_x.shape(),
            h.shape(),
            c_w.shape()
        )));
    }

    let mut joint = DMatrix::<f64>::zeros(m + n, m + n);
    joint.view_mut((0, 0), (m, m)).copy_from(cov_x);
    let cross = cov_x * h.transpose();
    joint.view_mut((0, m), (m, n)).copy_from(&cross);
    joint.view_mut((m, 0), (n, m)).copy_from(&cross.transpose());
    let yy = h * cov_x * h.transpose() + c_w;
    joint.view_mut((m, m), (n, n)).copy_from(&yy);

    let mut joint_mean = DVector::<f64>::zeros(m + n);
    joint_mean.rows_mut(0, m).copy_from(mean_x);
    joint_mean.rows_mut(m, n).copy_from(&(h * mean_x));

    let s_xx = joint.view((0, 0), (m, m)).into_owned();
    let s_xy = joint.view((0, m), (m, n)).into_owned();
    let s_yx = joint.view((m, 0), (n, m)).into_owned();
    let s_yy = joint.view((m, m), (n, n)).into_owned();

    let lu = s_yy.lu();
    let resid = y - joint_mean.rows(m, n);
    let alpha = lu
        .solve(&resid)
        .ok_or(Error::Singular("innovation covariance"))?;
    let beta = lu
        .solve(&s_yx)
        .ok_or(Error::Singular("innovation covariance"))?;

    let mean = joint_mean.rows(0, m) + &s_xy * alpha;
    let cov = psd_repair(&(s_xx - &s_xy * beta))?;
    GaussianBelief::new(mean, cov)
}

/// `log N(x; mean, cov)`.
pub fn gaussian_log_density(x: &DVector<f64>, belief: &GaussianBelief) -> Result<f64> {
    let d = belief.dim();
    if x.len() != d {
        return Err(Error::Dimension(format!(
            "point has dim {} but belief has dim {d}",
            x.len()
        )));
    }
    let chol = belief
        .cov()
        .clone()
        .cholesky()
        .ok_or(Error::NotPsd { min_eigenvalue: f64::NAN })?;
    let diff = x - belief.mean();
    let whitened = chol
        .l_dirty()
        .solve_lower_triangular(&diff)
        .ok_or(Error::Singular("covariance"))?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(-0.5 * (d as f64 * (2.0 * PI).ln() + log_det + whitened.norm_squared()))
}

/// One draw from `belief`. Consumes exactly `dim` standard normals.
pub fn sample_gaussian(rng: &mut SeededRng, belief: &GaussianBelief) -> Result<DVector<f64>> {
    let d = belief.dim();
    let mut z = DVector::<f64>::zeros(d);
    rng.fill_standard_normal(z.as_mut_slice());
    if belief.is_diagonal() {
        let mut out = belief.mean().clone();
        for i in 0..d {
            let sd = belief.cov()[(i, i)].sqrt();
            out[i] += sd * z[i];
        }
        return Ok(out);
    }
    let factor = psd_factor(belief.cov())?;
    Ok(belief.mean() + factor * z)
}

/// A matrix `S` with `S Sᵀ = cov`, valid for singular PSD input.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = cov.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_psd(rng: &mut SeededRng, d: usize) -> DMatrix<f64> {
        let mut a = DMatrix::<f64>::zeros(d, d);
        rng.fill_standard_normal(a.as_mut_slice());
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn equal_covariances_average() {
        let post = gaussian_condition(
            &DVector::zeros(3),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            &DVector::from_row_slice(&[2.0, 0.0, -2.0]),
        )
        .unwrap();
        let expected_mean = DVector::from_row_slice(&[1.0, 0.0, -1.0]);
        assert!((post.mean() - expected_mean).norm() < 1e-14);
        assert!((post.cov() - DMatrix::identity(3, 3) * 0.5).norm() < 1e-14);
    }

    #[test]
    fn noiseless_limit_recovers_measurement() {
        let y = DVector::from_row_slice(&[3.5, -1.25, 0.75]);
        let post = gaussian_condition(
            &DVector::from_row_slice(&[1.0, 2.0, 3.0]),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            &(DMatrix::identity(3, 3) * 1e-12),
            &y,
        )
        .unwrap();
        assert!((post.mean() - y).amax() < 1e-6);
    }

    #[test]
    fn conditioned_covariance_is_psd() {
        let mut rng = SeededRng::new(3);
        for _ in 0..200 {
            let cov = random_psd(&mut rng, 3);
            let mut h = DMatrix::<f64>::zeros(2, 3);
            rng.fill_standard_normal(h.as_mut_slice());
            let c_w = random_psd(&mut rng, 2);
            let mut y = DVector::<f64>::zeros(2);
            rng.fill_standard_normal(y.as_mut_slice());
            let post = gaussian_condition(&DVector::zeros(3), &cov, &h, &c_w, &y).unwrap();
            let eig = SymmetricEigen::new(post.cov().clone());
            assert!(eig.eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn singular_innovation_is_reported() {
        let r = gaussian_condition(
            &DVector::zeros(2),
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 2),
            &DVector::zeros(2),
        );
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn log_density_closed_forms() {
        let d = 4;
        let b = GaussianBelief::isotropic(DVector::from_element(d, 1.5), 1.0).unwrap();
        let v = gaussian_log_density(b.mean(), &b).unwrap();
        assert!((v + 0.5 * d as f64 * (2.0 * PI).ln()).abs() < 1e-14);

        let b = GaussianBelief::diagonal(DVector::zeros(1), &[2.0]).unwrap();
        let v = gaussian_log_density(&DVector::zeros(1), &b).unwrap();
        assert!((v + 0.5 * (4.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_density_matches_explicit_inverse() {
        let mut rng = SeededRng::new(11);
        let cov = random_psd(&mut rng, 3);
        let mut mean = DVector::<f64>::zeros(3);
        rng.fill_standard_normal(mean.as_mut_slice());
        let mut x = DVector::<f64>::zeros(3);
        rng.fill_standard_normal(x.as_mut_slice());
        let b = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();

        let inv = cov.clone().try_inverse().unwrap();
        let diff = &x - &mean;
        let quad = (diff.transpose() * inv * &diff)[(0, 0)];
        let expected = -0.5 * (3.0 * (2.0 * PI).ln() + cov.determinant().ln() + quad);
        assert!((gaussian_log_density(&x, &b).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn log_density_rejects_singular_cov() {
        let b = GaussianBelief::diagonal(DVector::zeros(2), &[1.0, 0.0]).unwrap();
        assert!(gaussian_log_density(&DVector::zeros(2), &b).is_err());
    }

    #[test]
    fn zero_covariance_sample_is_mean() {
        let mean = DVector::from_row_slice(&[0.3, -7.0, 1e6]);
        let b = GaussianBelief::new(mean.clone(), DMatrix::zeros(3, 3)).unwrap();
        let mut rng = SeededRng::new(5);
        assert_eq!(sample_gaussian(&mut rng, &b).unwrap(), mean);
        let b = GaussianBelief::diagonal(mean.clone(), &[0.0; 3]).unwrap();
        assert_eq!(sample_gaussian(&mut rng, &b).unwrap(), mean);
    }

    #[test]
    fn sampling_is_deterministic() {
        let b = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3) * 2.0).unwrap();
        let a = sample_gaussian(&mut SeededRng::new(42), &b).unwrap();
        let c = sample_gaussian(&mut SeededRng::new(42), &b).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn standard_normal_sample_mean() {
        let b = GaussianBelief::isotropic(DVector::zeros(3), 1.0).unwrap();
        let mut rng = SeededRng::new(1234);
        let draws = 100_000;
        let mut sum = DVector::<f64>::zeros(3);
        for _ in 0..draws {
            sum += sample_gaussian(&mut rng, &b).unwrap();
        }
        let mean = sum / draws as f64;
        assert!(mean.amax() < 0.02, "sample mean {mean}");
    }

    #[test]
    fn full_covariance_sample_moments() {
        let mut rng = SeededRng::new(9);
        let cov = random_psd(&mut rng, 3);
        let mean = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let b = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let draws = 100_000;
        let mut s1 = DVector::<f64>::zeros(3);
        let mut s2 = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..draws {
            let x = sample_gaussian(&mut rng, &b).unwrap() - &mean;
            s2 += &x * x.transpose();
            s1 += x;
        }
        let emp_cov = s2 / draws as f64;
        let rel = (emp_cov - &cov).amax() / cov.amax();
        assert!(rel < 0.03, "relative covariance error {rel}");
        assert!((s1 / draws as f64).amax() < 0.05 * cov.amax().sqrt());
    }

    #[test]
    fn repair_clamps_small_negative_eigenvalues() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]) / 2f64.sqrt();
        let tiny = v.clone() * DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, -1e-9])) * v.transpose();
        let fixed = psd_repair(&tiny).unwrap();
        let eig = SymmetricEigen::new(fixed);
        assert!(eig.eigenvalues.min() >= 0.0);

        let bad = v.clone() * DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, -1e-3])) * v.transpose();
        assert!(matches!(psd_repair(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn log_density_translation_invariant() {
        let mut rng = SeededRng::new(77);
        let cov = random_psd(&mut rng, 3);
        let mean = DVector::from_row_slice(&[0.1, 0.2, 0.3]);
        let x = DVector::from_row_slice(&[1.0, -1.0, 2.0]);
        let shift = DVector::from_row_slice(&[10.0, -4.0, 3.0]);
        let a = gaussian_log_density(&x, &GaussianBelief::new(mean.clone(), cov.clone()).unwrap()).unwrap();
        let b = gaussian_log_density(&(&x + &shift), &GaussianBelief::new(mean + shift, cov).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
