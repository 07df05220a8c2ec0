use serde::Serialize;

use crate::dataset::SemiDataset;
use crate::measurement::MeasModel;
use crate::prior_net::PriorNetParams;

/// Parameter count against the number of scalar constraints the data supply.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DofReport {
    pub n_params: usize,
    pub meas_dim: usize,
    pub state_dim: usize,
    pub n_items: usize,
    pub n_labelled: usize,
    /// `n Σ_i T_i` over all items.
    pub measurement_constraints: usize,
    /// `m Σ_{i labelled} T_i`.
    pub state_constraints: usize,
    pub total_constraints: usize,
    pub constraints_per_param: f64,
    pub state_share: f64,
}

impl DofReport {
    pub fn from_counts(
        n_params: usize,
        meas_dim: usize,
        state_dim: usize,
        lengths: &[usize],
        labelled: &[usize],
    ) -> Self {
        let measurement_constraints = meas_dim * lengths.iter().sum::<usize>();
        let state_constraints = state_dim * labelled.iter().sum::<usize>();
        let total = measurement_constraints + state_constraints;
        Self {
            n_params,
            meas_dim,
            state_dim,
            n_items: lengths.len(),
            n_labelled: labelled.len(),
            measurement_constraints,
            state_constraints,
            total_constraints: total,
            constraints_per_param: total as f64 / n_params.max(1) as f64,
            state_share: if total == 0 { 0.0 } else { state_constraints as f64 / total as f64 },
        }
    }
}

pub fn dof_report(semi: &SemiDataset, params: &PriorNetParams, model: &MeasModel) -> DofReport {
    let lengths: Vec<usize> = semi.items().iter().map(|(_, s)| s.measurements.len()).collect();
    let labelled: Vec<usize> = semi.labelled.items.iter().map(|p| p.states.len()).collect();
    DofReport::from_counts(params.len(), model.meas_dim(), model.state_dim(), &lengths, &labelled)
}
