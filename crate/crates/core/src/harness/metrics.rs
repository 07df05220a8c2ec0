use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Floor reported for a perfect estimate.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// `10 log10(Σ_t ‖x_t - x̂_t‖² / Σ_t ‖x_t‖²)` for one trajectory, floored.
pub fn trajectory_nmse_db(truth: &Trajectory, estimate: &Trajectory) -> Result<f64> {
    if truth.dim() != estimate.dim() || truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "truth {}x{} against estimate {}x{}",
            truth.len(),
            truth.dim(),
            estimate.len(),
            estimate.dim()
        )));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (x, e) in truth.as_flat().iter().zip(estimate.as_flat()) {
        err += (x - e) * (x - e);
        energy += x * x;
    }
    if energy == 0.0 {
        return Err(Error::InvalidArgument("NMSE undefined for an all-zero truth trajectory".into()));
    }
    let db = 10.0 * (err / energy).log10();
    Ok(if db.is_finite() { db.max(NMSE_FLOOR_DB) } else { NMSE_FLOOR_DB })
}

/// Per-trajectory NMSE in dB.
pub fn nmse_db_each(truth: &[&Trajectory], estimates: &[&Trajectory]) -> Result<Vec<f64>> {
    if truth.len() != estimates.len() || truth.is_empty() {
        return Err(Error::Dimension(format!(
            "{} truth trajectories against {} estimates",
            truth.len(),
            estimates.len()
        )));
    }
    truth
        .iter()
        .zip(estimates)
        .map(|(x, e)| trajectory_nmse_db(x, e))
        .collect()
}

/// Average over trajectories of the per-trajectory NMSE in dB.
pub fn nmse_db(truth: &[&Trajectory], estimates: &[&Trajectory]) -> Result<f64> {
    let each = nmse_db_each(truth, estimates)?;
    Ok(each.iter().sum::<f64>() / each.len() as f64)
}

/// Mean and standard error of a sample.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Keep coordinate `j` of every row.
pub fn coordinate(traj: &Trajectory, j: usize) -> Trajectory {
    Trajectory::from_flat(1, traj.component(j)).expect("one column")
}
