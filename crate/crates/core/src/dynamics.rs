//! Discretized chaotic state-space models.
//!
//! Each system evolves as `x_{t+1} = F(x_t) x_t + e_t` where
//! `F(x) = exp(A(x) Δ)` is approximated by a truncated Taylor series and
//! `e_t ~ N(0, C_e)`. Systems integrated with a finer step than the
//! reference 0.02 s are decimated back to the reference resolution.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{taylor_matrix_exp, GaussianBelief, SeededRng};
use crate::trajectory::Trajectory;

pub const STATE_DIM: usize = 3;

/// Below this, the Rössler drift term `0.2 / x3` is treated as undefined.
pub const ROSSLER_GUARD: f64 = 1e-6;
pub const DEFAULT_ROSSLER_EPSILON: f64 = 1e-5;
pub const DEFAULT_TAYLOR_ORDER: usize = 5;
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Length of the noiseless pilot run used by [`calibrate_process_noise`].
pub const PILOT_LENGTH: usize = 1000;

/// Sampling interval that every system is decimated back to.
pub const REFERENCE_STEP: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Lorenz63,
    Chen,
    Rossler,
}

impl System {
    pub const ALL: [System; 3] = [System::Lorenz63, System::Chen, System::Rossler];

    pub fn name(self) -> &'static str {
        match self {
            System::Lorenz63 => "lorenz",
            System::Chen => "chen",
            System::Rossler => "rossler",
        }
    }

    pub fn default_step_size(self) -> f64 {
        match self {
            System::Lorenz63 => 0.02,
            System::Chen => 0.002,
            System::Rossler => 0.008,
        }
    }

    /// Continuous-time drift matrix `A(x)`.
    pub fn drift_generator(self, x: &[f64]) -> Result<DMatrix<f64>> {
        let a = match self {
            System::Lorenz63 => [
                -10.0, 10.0, 0.0, //
                28.0, -1.0, -x[0], //
                0.0, x[0], -8.0 / 3.0,
            ],
            System::Chen => [
                -35.0, 35.0, 0.0, //
                -7.0, 28.0, -x[0], //
                0.0, x[0], -3.0,
            ],
            System::Rossler => {
                if x[2].abs() < ROSSLER_GUARD {
                    return Err(Error::SingularState { x3: x[2] });
                }
                [
                    0.0, -1.0, -1.0, //
                    1.0, 0.2, 0.0, //
                    0.0, 0.0, 0.2 / x[2] + (x[0] - 5.7),
                ]
            }
        };
        Ok(DMatrix::from_row_slice(3, 3, &a))
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lorenz" | "lorenz63" | "lorenz-63" => Ok(System::Lorenz63),
            "chen" => Ok(System::Chen),
            "rossler" | "rössler" => Ok(System::Rossler),
            other => Err(Error::InvalidArgument(format!("unknown system '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmSpec {
    pub system: System,
    pub step_size: f64,
    pub taylor_order: usize,
    pub process_noise_cov: DMatrix<f64>,
    pub rossler_epsilon: Option<f64>,
    /// Raw steps per kept sample; 1 means no decimation.
    pub decimation_factor: f64,
}

impl SsmSpec {
    /// Default step size and decimation for `system`, with isotropic process
    /// noise `sigma_e2` (Rössler keeps `ε` on the third coordinate).
    pub fn new(system: System, sigma_e2: f64) -> Self {
        let step_size = system.default_step_size();
        let rossler_epsilon = (system == System::Rossler).then_some(DEFAULT_ROSSLER_EPSILON);
        let mut spec = Self {
            system,
            step_size,
            taylor_order: DEFAULT_TAYLOR_ORDER,
            process_noise_cov: DMatrix::zeros(3, 3),
            rossler_epsilon,
            decimation_factor: REFERENCE_STEP / step_size,
        };
        spec.set_sigma_e2(sigma_e2);
        spec
    }

    pub fn noiseless(system: System) -> Self {
        let mut spec = Self::new(system, 0.0);
        spec.process_noise_cov = DMatrix::zeros(3, 3);
        spec
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_decimation(mut self, factor: f64) -> Self {
        self.decimation_factor = factor;
        self
    }

    pub fn set_sigma_e2(&mut self, sigma_e2: f64) {
        let mut diag = [sigma_e2; 3];
        if let Some(eps) = self.rossler_epsilon {
            diag[2] = eps;
        }
        self.process_noise_cov = DMatrix::from_diagonal(&DVector::from_row_slice(&diag));
    }

    pub fn sigma_e2(&self) -> f64 {
        self.process_noise_cov[(0, 0)]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step size must be non-negative".into()));
        }
        if self.taylor_order == 0 {
            return Err(Error::InvalidArgument("Taylor order must be positive".into()));
        }
        if !(self.decimation_factor >= 1.0 && self.decimation_factor.is_finite()) {
            return Err(Error::InvalidArgument("decimation factor must be >= 1".into()));
        }
        if self.process_noise_cov.shape() != (3, 3) {
            return Err(Error::Dimension("process noise covariance must be 3x3".into()));
        }
        match (self.system, self.rossler_epsilon) {
            (System::Rossler, Some(e)) if e > 0.0 => {}
            (System::Rossler, _) => {
                return Err(Error::InvalidArgument("Rössler needs a positive epsilon".into()))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "epsilon only applies to the Rössler system".into(),
                ))
            }
            _ => {}
        }
        crate::numerics::psd_factor(&self.process_noise_cov)?;
        Ok(())
    }

    fn noise_belief(&self) -> Result<GaussianBelief> {
        let cov = &self.process_noise_cov;
        let off_diagonal_zero = (0..3).all(|i| (0..3).all(|j| i == j || cov[(i, j)] == 0.0));
        if off_diagonal_zero {
            let v: Vec<f64> = cov.diagonal().iter().copied().collect();
            GaussianBelief::diagonal(DVector::zeros(3), &v)
        } else {
            GaussianBelief::new(DVector::zeros(3), cov.clone())
        }
    }

    fn is_noiseless(&self) -> bool {
        self.process_noise_cov.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub states: Trajectory,
    pub seed: u64,
    /// Raw integration samples generated before decimation (initial state included).
    pub raw_samples: usize,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `F(x) = exp(A(x) Δ)` truncated at the configured Taylor order.
pub fn drift_matrix(spec: &SsmSpec, x: &[f64]) -> Result<DMatrix<f64>> {
    let a = spec.system.drift_generator(x)? * spec.step_size;
    taylor_matrix_exp(&a, spec.taylor_order)
}

/// Deterministic part of the transition, `F(x) x`.
pub fn transition(spec: &SsmSpec, x: &[f64]) -> Result<DVector<f64>> {
    let f = drift_matrix(spec, x)?;
    Ok(f * DVector::from_row_slice(x))
}

/// One transition; the process-noise draw is skipped when `rng` is `None`.
pub fn step(spec: &SsmSpec, x: &[f64], rng: Option<&mut SeededRng>) -> Result<DVector<f64>> {
    if x.len() != STATE_DIM {
        return Err(Error::Dimension(format!("state has dim {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    let mut next = transition(spec, x)?;
    if let Some(rng) = rng {
        let noise = crate::numerics::sample_gaussian(rng, &spec.noise_belief()?)?;
        next += noise;
    }
    Ok(next)
}

/// `(1,1,1)` plus a standard-normal perturbation drawn from `rng`.
///
/// For Rössler the third coordinate is reflected to stay on the positive side
/// of the singular plane `x3 = 0`.
pub fn default_initial_state(system: System, rng: &mut SeededRng) -> [f64; 3] {
    let mut x = [1.0; 3];
    for v in x.iter_mut() {
        *v += rng.standard_normal();
    }
    if system == System::Rossler {
        x[2] = x[2].abs().max(1e-3);
    }
    x
}

/// Number of raw samples needed to produce `len` kept samples.
pub fn raw_sample_count(len: usize, factor: f64) -> usize {
    if factor == 1.0 {
        len
    } else {
        (len as f64 * factor).ceil() as usize
    }
}

/// Raw index kept for output sample `k`.
pub fn decimated_index(k: usize, factor: f64) -> usize {
    if factor == 1.0 {
        k
    } else {
        (k as f64 * factor).round() as usize
    }
}

/// Simulate `len` samples. The initial state (when `x0` is `None`) and all
/// process noise come from `seed`.
pub fn simulate(spec: &SsmSpec, x0: Option<&[f64]>, len: usize, seed: u64) -> Result<StateTrajectory> {
    if len == 0 {
        return Err(Error::InvalidArgument("trajectory length must be >= 1".into()));
    }
    spec.validate()?;
    let mut rng = SeededRng::new(seed);
    let init = match x0 {
        Some(x) if x.len() == STATE_DIM => [x[0], x[1], x[2]],
        Some(x) => return Err(Error::Dimension(format!("initial state has dim {}", x.len()))),
        None => default_initial_state(spec.system, &mut rng),
    };

    let factor = spec.decimation_factor;
    let raw = raw_sample_count(len, factor);
    let noiseless = spec.is_noiseless();
    let noise = spec.noise_belief()?;

    let mut out = Trajectory::with_capacity(STATE_DIM, len);
    let mut next_keep = 0usize;
    let mut x = DVector::from_row_slice(&init);
    for r in 0..raw {
        if r > 0 {
            let mut nx = transition(spec, x.as_slice())?;
            if !noiseless {
                nx += crate::numerics::sample_gaussian(&mut rng, &noise)?;
            }
            if nx.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::Divergence { step: r });
            }
            x = nx;
        }
        if out.len() < len && decimated_index(next_keep, factor) == r {
            out.push(x.as_slice());
            next_keep += 1;
        }
    }
    debug_assert_eq!(out.len(), len);
    Ok(StateTrajectory {
        states: out,
        seed,
        raw_samples: raw,
    })
}

/// Mean per-coordinate power of the noiseless increment `F(x)x - x` over a
/// pilot run of [`PILOT_LENGTH`] raw steps.
pub fn pilot_drift_power(spec: &SsmSpec, seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut x = default_initial_state(spec.system, &mut rng).to_vec();
    let mut acc = 0.0;
    for step in 0..PILOT_LENGTH {
        let nx = transition(spec, &x)?;
        if nx.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Divergence { step });
        }
        acc += nx
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        x = nx.as_slice().to_vec();
    }
    Ok(acc / (PILOT_LENGTH * STATE_DIM) as f64)
}

/// Process-noise variance sitting `target_db` relative to the drift power.
pub fn calibrate_process_noise(spec: &SsmSpec, target_db: f64, seed: u64) -> Result<f64> {
    if !target_db.is_finite() {
        return Err(Error::Calibration("target dB must be finite".into()));
    }
    let power = pilot_drift_power(spec, seed)?;
    if power <= 0.0 || !power.is_finite() {
        return Err(Error::Calibration(format!(
            "pilot trajectory has degenerate increment power {power}"
        )));
    }
    Ok(power * 10f64.powf(target_db / 10.0))
}
