//! Linear measurement model `y_t = H x_t + w_t`, `w_t ~ N(0, C_w)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::StateTrajectory;
use crate::error::{Error, Result};
use crate::numerics::{psd_factor, SeededRng};
use crate::trajectory::Trajectory;

/// The three measurement matrices used in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinH {
    /// Fixed draw of a 2x3 matrix with i.i.d. N(0, 1) entries.
    DenseRandom2x3,
    /// Observes the second and third state coordinates.
    Partial23,
    /// Observes only the first state coordinate.
    Extreme1,
}

impl BuiltinH {
    pub fn name(self) -> &'static str {
        match self {
            BuiltinH::DenseRandom2x3 => "dense",
            BuiltinH::Partial23 => "partial",
            BuiltinH::Extreme1 => "extreme",
        }
    }

    pub fn matrix(self) -> DMatrix<f64> {
        builtin_h(self)
    }
}

impl fmt::Display for BuiltinH {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuiltinH {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" | "dense2x3" | "denserandom2x3" => Ok(BuiltinH::DenseRandom2x3),
            "partial" | "partial23" => Ok(BuiltinH::Partial23),
            "extreme" | "extreme1" => Ok(BuiltinH::Extreme1),
            other => Err(Error::InvalidArgument(format!("unknown H matrix '{other}'"))),
        }
    }
}

pub fn builtin_h(name: BuiltinH) -> DMatrix<f64> {
    match name {
        BuiltinH::DenseRandom2x3 => DMatrix::from_row_slice(
            2,
            3,
            &[0.37992, 0.34099, 1.04317, 0.98070, -0.70477, 2.17908],
        ),
        BuiltinH::Partial23 => DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        BuiltinH::Extreme1 => DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasModel {
    pub h: DMatrix<f64>,
    pub c_w: DMatrix<f64>,
}

impl MeasModel {
    pub fn new(h: DMatrix<f64>, c_w: DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        if c_w.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "C_w is {:?} but H has {n} rows",
                c_w.shape()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measurement matrix"));
        }
        psd_factor(&c_w)?;
        Ok(Self { h, c_w })
    }

    /// `C_w = sigma_w2 · I_n`.
    pub fn isotropic(h: DMatrix<f64>, sigma_w2: f64) -> Result<Self> {
        if !(sigma_w2 >= 0.0 && sigma_w2.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid sigma_w^2 {sigma_w2}")));
        }
        let n = h.nrows();
        Self::new(h, DMatrix::identity(n, n) * sigma_w2)
    }

    pub fn meas_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    /// Mean measurement-noise variance, `tr(C_w) / n`.
    pub fn sigma_w2(&self) -> f64 {
        self.c_w.trace() / self.meas_dim() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasTrajectory {
    pub measurements: Trajectory,
    pub seed: u64,
}

impl MeasTrajectory {
    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }
}

/// Draw `y_t = H x_t + w_t` for every state, noise from `seed`.
pub fn measure(states: &StateTrajectory, model: &MeasModel, seed: u64) -> Result<MeasTrajectory> {
    let (n, m) = model.h.shape();
    if states.states.dim() != m {
        return Err(Error::Dimension(format!(
            "H expects state dim {m}, trajectory has {}",
            states.states.dim()
        )));
    }
    let factor = psd_factor(&model.c_w)?;
    let mut rng = SeededRng::new(seed);
    let mut out = Trajectory::with_capacity(n, states.len());
    let mut z = DVector::<f64>::zeros(n);
    for x in states.states.rows() {
        let x = DVector::from_row_slice(x);
        rng.fill_standard_normal(z.as_mut_slice());
        let y = &model.h * x + &factor * &z;
        out.push(y.as_slice());
    }
    Ok(MeasTrajectory {
        measurements: out,
        seed,
    })
}

/// Centered sample second moment of `H x_t` over one trajectory.
pub fn signal_power(states: &Trajectory, h: &DMatrix<f64>) -> Result<f64> {
    if states.dim() != h.ncols() {
        return Err(Error::Dimension(format!(
            "H expects state dim {}, trajectory has {}",
            h.ncols(),
            states.dim()
        )));
    }
    if states.is_empty() {
        return Err(Error::Calibration("empty trajectory".into()));
    }
    let hx: Vec<DVector<f64>> = states
        .rows()
        .map(|x| h * DVector::from_row_slice(x))
        .collect();
    let len = hx.len() as f64;
    let mean = hx.iter().fold(DVector::zeros(h.nrows()), |acc, v| acc + v) / len;
    Ok(hx.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / len)
}

fn mean_log_power(states: &[StateTrajectory], h: &DMatrix<f64>) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Calibration("no trajectories given".into()));
    }
    let n = h.nrows() as f64;
    let mut acc = 0.0;
    for s in states {
        let p = signal_power(&s.states, h)?;
        if !(p > 0.0) {
            return Err(Error::Calibration(
                "measurement signal H x_t is constant (zero variance)".into(),
            ));
        }
        acc += 10.0 * (p / n).log10();
    }
    Ok(acc / states.len() as f64)
}

/// Empirical signal-to-measurement-noise ratio in dB, averaged per trajectory.
pub fn smnr_db(states: &[StateTrajectory], h: &DMatrix<f64>, sigma_w2: f64) -> Result<f64> {
    if !(sigma_w2 > 0.0) {
        return Err(Error::InvalidArgument("sigma_w^2 must be positive".into()));
    }
    Ok(mean_log_power(states, h)? - 10.0 * sigma_w2.log10())
}

/// `sigma_w^2` for which [`smnr_db`] on `states` equals `target_smnr_db`.
pub fn calibrate_sigma_w(states: &[StateTrajectory], h: &DMatrix<f64>, target_smnr_db: f64) -> Result<f64> {
    if !target_smnr_db.is_finite() {
        return Err(Error::Calibration("target SMNR must be finite".into()));
    }
    let level = mean_log_power(states, h)?;
    Ok(10f64.powf((level - target_smnr_db) / 10.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, SsmSpec, System};

    fn traj(rows: &[[f64; 3]]) -> StateTrajectory {
        StateTrajectory {
            states: Trajectory::from_rows(3, rows.iter().map(|r| r.as_slice())).unwrap(),
            seed: 0,
            raw_samples: rows.len(),
        }
    }

    #[test]
    fn builtin_matrices() {
        let d = builtin_h(BuiltinH::DenseRandom2x3);
        assert_eq!(d.shape(), (2, 3));
        assert_eq!(d[(1, 1)], -0.70477);
        assert_eq!(d[(1, 2)], 2.17908);
        assert_eq!(builtin_h(BuiltinH::Partial23), DMatrix::from_row_slice(2, 3, &[0., 1., 0., 0., 0., 1.]));
        assert_eq!(builtin_h(BuiltinH::Extreme1), DMatrix::from_row_slice(1, 3, &[1., 0., 0.]));
        assert_eq!("partial".parse::<BuiltinH>().unwrap(), BuiltinH::Partial23);
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let s = traj(&[[1.0, 2.0, 3.0], [-4.0, 5.0, 0.5]]);
        let model = MeasModel::isotropic(builtin_h(BuiltinH::DenseRandom2x3), 0.0).unwrap();
        let y = measure(&s, &model, 1).unwrap();
        for t in 0..2 {
            let expected = &model.h * s.states.vector(t);
            assert_eq!(y.measurements.row(t), expected.as_slice());
        }
    }

    #[test]
    fn selector_row_picks_first_coordinate() {
        let s = traj(&[[7.0, 2.0, 3.0]]);
        let model = MeasModel::isotropic(builtin_h(BuiltinH::Extreme1), 0.0).unwrap();
        assert_eq!(measure(&s, &model, 3).unwrap().measurements.row(0), &[7.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let s = traj(&[[1.0, 2.0, 3.0]]);
        let model = MeasModel::isotropic(DMatrix::identity(2, 2), 1.0).unwrap();
        assert!(matches!(measure(&s, &model, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn noise_covariance_monte_carlo() {
        let rows = vec![[0.0; 3]; 100_000];
        let s = traj(&rows);
        let c_w = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let model = MeasModel::new(builtin_h(BuiltinH::Partial23), c_w.clone()).unwrap();
        let y = measure(&s, &model, 17).unwrap();
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for r in y.measurements.rows() {
            let v = DVector::from_row_slice(r);
            cov += &v * v.transpose();
        }
        cov /= rows.len() as f64;
        for (a, b) in cov.iter().zip(c_w.iter()) {
            assert!((a - b).abs() <= 0.03 * b.abs().max(0.6), "{a} vs {b}");
        }
    }

    #[test]
    fn calibration_fixture_zero_db() {
        // Frozen 10-step trajectory; H = Partial23 selects (x2, x3).
        let rows: Vec<[f64; 3]> = (0..10)
            .map(|t| {
                let t = t as f64;
                [0.5 * t, (0.7 * t).sin() * 3.0, 1.0 + 0.25 * t * t]
            })
            .collect();
        let s = traj(&rows);
        let h = builtin_h(BuiltinH::Partial23);

        // Hand computation of the centered second moment.
        let n = rows.len() as f64;
        let m2 = rows.iter().map(|r| r[1]).sum::<f64>() / n;
        let m3 = rows.iter().map(|r| r[2]).sum::<f64>() / n;
        let total: f64 = rows
            .iter()
            .map(|r| (r[1] - m2).powi(2) + (r[2] - m3).powi(2))
            .sum();
        let expected = total / (2.0 * n);

        let sw = calibrate_sigma_w(std::slice::from_ref(&s), &h, 0.0).unwrap();
        assert!((sw - expected).abs() < 1e-12 * expected);
        let smnr = smnr_db(std::slice::from_ref(&s), &h, expected).unwrap();
        assert!(smnr.abs() < 1e-9);
        let smnr10 = smnr_db(std::slice::from_ref(&s), &h, expected / 10.0).unwrap();
        assert!((smnr10 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn plus_ten_db_divides_by_ten() {
        let spec = SsmSpec::new(System::Lorenz63, 0.1);
        let states: Vec<_> = (0..3).map(|i| simulate(&spec, None, 100, i).unwrap()).collect();
        let h = builtin_h(BuiltinH::DenseRandom2x3);
        let a = calibrate_sigma_w(&states, &h, 5.0).unwrap();
        let b = calibrate_sigma_w(&states, &h, 15.0).unwrap();
        assert!((a / b - 10.0).abs() < 1e-10);
    }

    #[test]
    fn constant_signal_is_rejected() {
        let s = traj(&[[1.0, 2.0, 3.0]; 5]);
        let h = builtin_h(BuiltinH::Partial23);
        assert!(matches!(
            calibrate_sigma_w(&[s], &h, 10.0),
            Err(Error::Calibration(_))
        ));
    }
}
