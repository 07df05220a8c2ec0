//! Recurrent parameterization of the Gaussian prior `p(x_t | y_{1:t-1})`.
//!
//! A single-layer GRU consumes the measurement history. Its hidden state
//! `z_{t-1}` feeds a shared ReLU layer, then two ReLU branches: one ends in a
//! linear map to the prior mean, the other in a softplus giving the diagonal
//! prior covariance. The prior for `t = 1` comes from the zero initial state.
//!
//! GRU convention (reset gate applied to the hidden state before the
//! candidate's recurrent matrix):
//!
//! ```text
//! r  = σ(W_ir y + b_ir + W_hr z + b_hr)
//! u  = σ(W_iu y + b_iu + W_hu z + b_hu)
//! c  = tanh(W_ic y + b_ic + W_hc (r ⊙ z) + b_hc)
//! z' = (1 - u) ⊙ z + u ⊙ c
//! ```
//!
//! Gradients are exact reverse-mode (backpropagation through time).

use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;
use crate::trajectory::Trajectory;

pub const DEFAULT_HIDDEN: usize = 30;
pub const DEFAULT_SHARED: usize = 30;
pub const DEFAULT_HEAD: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    /// Measurement dimension n.
    pub input: usize,
    /// GRU hidden size.
    pub hidden: usize,
    /// Shared head layer width.
    pub shared: usize,
    /// Per-branch hidden layer width.
    pub head: usize,
    /// State dimension m.
    pub output: usize,
}

impl NetDims {
    pub fn new(meas_dim: usize, state_dim: usize) -> Self {
        Self {
            input: meas_dim,
            hidden: DEFAULT_HIDDEN,
            shared: DEFAULT_SHARED,
            head: DEFAULT_HEAD,
            output: state_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    ResetIn,
    ResetHid,
    ResetInBias,
    ResetHidBias,
    UpdateIn,
    UpdateHid,
    UpdateInBias,
    UpdateHidBias,
    CandIn,
    CandHid,
    CandInBias,
    CandHidBias,
    Shared,
    SharedBias,
    MeanHidden,
    MeanHiddenBias,
    MeanOut,
    MeanOutBias,
    CovHidden,
    CovHiddenBias,
    CovOut,
    CovOutBias,
}

impl Group {
    pub const ALL: [Group; 22] = [
        Group::ResetIn,
        Group::ResetHid,
        Group::ResetInBias,
        Group::ResetHidBias,
        Group::UpdateIn,
        Group::UpdateHid,
        Group::UpdateInBias,
        Group::UpdateHidBias,
        Group::CandIn,
        Group::CandHid,
        Group::CandInBias,
        Group::CandHidBias,
        Group::Shared,
        Group::SharedBias,
        Group::MeanHidden,
        Group::MeanHiddenBias,
        Group::MeanOut,
        Group::MeanOutBias,
        Group::CovHidden,
        Group::CovHiddenBias,
        Group::CovOut,
        Group::CovOutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ResetIn => "gru.reset.w_in",
            Group::ResetHid => "gru.reset.w_hid",
            Group::ResetInBias => "gru.reset.b_in",
            Group::ResetHidBias => "gru.reset.b_hid",
            Group::UpdateIn => "gru.update.w_in",
            Group::UpdateHid => "gru.update.w_hid",
            Group::UpdateInBias => "gru.update.b_in",
            Group::UpdateHidBias => "gru.update.b_hid",
            Group::CandIn => "gru.cand.w_in",
            Group::CandHid => "gru.cand.w_hid",
            Group::CandInBias => "gru.cand.b_in",
            Group::CandHidBias => "gru.cand.b_hid",
            Group::Shared => "head.shared.w",
            Group::SharedBias => "head.shared.b",
            Group::MeanHidden => "head.mean.w1",
            Group::MeanHiddenBias => "head.mean.b1",
            Group::MeanOut => "head.mean.w2",
            Group::MeanOutBias => "head.mean.b2",
            Group::CovHidden => "head.cov.w1",
            Group::CovHiddenBias => "head.cov.b1",
            Group::CovOut => "head.cov.w2",
            Group::CovOutBias => "head.cov.b2",
        }
    }

    /// `(rows, cols)`; biases are `(rows, 1)`.
    pub fn shape(self, d: &NetDims) -> (usize, usize) {
        let (h, n, s, k, m) = (d.hidden, d.input, d.shared, d.head, d.output);
        match self {
            Group::ResetIn | Group::UpdateIn | Group::CandIn => (h, n),
            Group::ResetHid | Group::UpdateHid | Group::CandHid => (h, h),
            Group::ResetInBias
            | Group::ResetHidBias
            | Group::UpdateInBias
            | Group::UpdateHidBias
            | Group::CandInBias
            | Group::CandHidBias => (h, 1),
            Group::Shared => (s, h),
            Group::SharedBias => (s, 1),
            Group::MeanHidden | Group::CovHidden => (k, s),
            Group::MeanHiddenBias | Group::CovHiddenBias => (k, 1),
            Group::MeanOut | Group::CovOut => (m, k),
            Group::MeanOutBias | Group::CovOutBias => (m, 1),
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Group::ResetInBias
                | Group::ResetHidBias
                | Group::UpdateInBias
                | Group::UpdateHidBias
                | Group::CandInBias
                | Group::CandHidBias
                | Group::SharedBias
                | Group::MeanHiddenBias
                | Group::MeanOutBias
                | Group::CovHiddenBias
                | Group::CovOutBias
        )
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// All learnable weights in one flat buffer, grouped per [`Group`].
///
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorNetParams {
    dims: NetDims,
    offsets: [usize; 23],
    values: Vec<f64>,
}

impl PriorNetParams {
    pub fn zeros(dims: NetDims) -> Self {
        let mut offsets = [0usize; 23];
        for (i, g) in Group::ALL.iter().enumerate() {
            let (r, c) = g.shape(&dims);
            offsets[i + 1] = offsets[i] + r * c;
        }
        Self {
            dims,
            values: vec![0.0; offsets[22]],
            offsets,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: NetDims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = SeededRng::new(seed);
        for g in Group::ALL {
            if g.is_bias() {
                continue;
            }
            let bound = 1.0 / (g.shape(&dims).1 as f64).sqrt();
            for v in p.group_mut(g) {
                *v = rng.uniform(-bound, bound);
            }
        }
        p
    }

    pub fn from_values(dims: NetDims, values: Vec<f64>) -> crate::Result<Self> {
        let mut p = Self::zeros(dims);
        if values.len() != p.values.len() {
            return Err(crate::Error::Dimension(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn group(&self, g: Group) -> &[f64] {
        let i = g.index();
        &self.values[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        let i = g.index();
        &mut self.values[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Group and offset within the group for a flat index.
    pub fn locate(&self, flat: usize) -> (Group, usize) {
        let i = self.offsets.partition_point(|&o| o <= flat) - 1;
        (Group::ALL[i], flat - self.offsets[i])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub z: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            z: vec![0.0; hidden],
        }
    }
}

/// Prior mean and diagonal prior covariance for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorOutput {
    pub mean: Vec<f64>,
    pub diag_cov: Vec<f64>,
}

/// Upstream gradient of a scalar loss with respect to one [`PriorOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrad {
    pub mean: Vec<f64>,
    pub diag_cov: Vec<f64>,
}

impl PriorGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            diag_cov: vec![0.0; dim],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `out = W x + b` with row-major `W` of shape `(out.len(), x.len())`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W x`.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `gw += d xᵀ`.
fn outer_acc(gw: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, di) in d.iter().enumerate() {
        if *di == 0.0 {
            continue;
        }
        for (g, xj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *g += di * xj;
        }
    }
}

/// `dx += Wᵀ d`.
fn transpose_acc(w: &[f64], d: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (i, di) in d.iter().enumerate() {
        if *di == 0.0 {
            continue;
        }
        for (o, wij) in dx.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += di * wij;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
struct CellCache {
    z_prev: Vec<f64>,
    y: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    c: Vec<f64>,
    rz: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    z: Vec<f64>,
    shared: Vec<f64>,
    mean_hidden: Vec<f64>,
    cov_hidden: Vec<f64>,
    cov_pre: Vec<f64>,
}

fn cell_forward(p: &PriorNetParams, z_prev: &[f64], y: &[f64]) -> CellCache {
    let h = p.dims.hidden;
    let gate = |w_in: Group, b_in: Group, w_hid: Group, b_hid: Group| {
        let mut pre = vec![0.0; h];
        affine(p.group(w_in), p.group(b_in), y, &mut pre);
        add_into(&mut pre, p.group(b_hid));
        matvec_acc(p.group(w_hid), z_prev, &mut pre);
        pre.iter().map(|v| sigmoid(*v)).collect::<Vec<f64>>()
    };
    let r = gate(Group::ResetIn, Group::ResetInBias, Group::ResetHid, Group::ResetHidBias);
    let u = gate(Group::UpdateIn, Group::UpdateInBias, Group::UpdateHid, Group::UpdateHidBias);
    let rz: Vec<f64> = r.iter().zip(z_prev).map(|(a, b)| a * b).collect();
    let mut pre_c = vec![0.0; h];
    affine(p.group(Group::CandIn), p.group(Group::CandInBias), y, &mut pre_c);
    add_into(&mut pre_c, p.group(Group::CandHidBias));
    matvec_acc(p.group(Group::CandHid), &rz, &mut pre_c);
    let c = pre_c.iter().map(|v| v.tanh()).collect();
    CellCache {
        z_prev: z_prev.to_vec(),
        y: y.to_vec(),
        r,
        u,
        c,
        rz,
    }
}

impl CellCache {
    fn output(&self) -> Vec<f64> {
        self.z_prev
            .iter()
            .zip(&self.u)
            .zip(&self.c)
            .map(|((z, u), c)| (1.0 - u) * z + u * c)
            .collect()
    }
}

fn heads_forward(p: &PriorNetParams, z: &[f64]) -> (PriorOutput, HeadCache) {
    let d = &p.dims;
    let relu = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.max(0.0));

    let mut shared = vec![0.0; d.shared];
    affine(p.group(Group::Shared), p.group(Group::SharedBias), z, &mut shared);
    relu(&mut shared);

    let mut mean_hidden = vec![0.0; d.head];
    affine(p.group(Group::MeanHidden), p.group(Group::MeanHiddenBias), &shared, &mut mean_hidden);
    relu(&mut mean_hidden);
    let mut mean = vec![0.0; d.output];
    affine(p.group(Group::MeanOut), p.group(Group::MeanOutBias), &mean_hidden, &mut mean);

    let mut cov_hidden = vec![0.0; d.head];
    affine(p.group(Group::CovHidden), p.group(Group::CovHiddenBias), &shared, &mut cov_hidden);
    relu(&mut cov_hidden);
    let mut cov_pre = vec![0.0; d.output];
    affine(p.group(Group::CovOut), p.group(Group::CovOutBias), &cov_hidden, &mut cov_pre);
    let diag_cov = cov_pre.iter().map(|v| softplus(*v)).collect();

    (
        PriorOutput { mean, diag_cov },
        HeadCache {
            z: z.to_vec(),
            shared,
            mean_hidden,
            cov_hidden,
            cov_pre,
        },
    )
}

/// One GRU update `z_prev -> z` consuming measurement `y`.
pub fn cell_step(params: &PriorNetParams, z_prev: &HiddenState, y: &[f64]) -> HiddenState {
    HiddenState {
        z: cell_forward(params, &z_prev.z, y).output(),
    }
}

/// Map a hidden state to the prior mean and diagonal covariance.
pub fn heads(params: &PriorNetParams, z: &HiddenState) -> PriorOutput {
    heads_forward(params, &z.z).0
}

/// Intermediate values of a forward pass, kept for [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    cells: Vec<CellCache>,
    heads: Vec<HeadCache>,
}

/// Priors for `t = 1..=T`; the prior at `t` only sees `y_{1:t-1}`.
pub fn forward_priors(params: &PriorNetParams, ys: &Trajectory) -> Vec<PriorOutput> {
    forward_with_tape(params, ys).0
}

pub fn forward_with_tape(params: &PriorNetParams, ys: &Trajectory) -> (Vec<PriorOutput>, Tape) {
    let len = ys.len();
    let mut outputs = Vec::with_capacity(len);
    let mut tape = Tape {
        cells: Vec::with_capacity(len.saturating_sub(1)),
        heads: Vec::with_capacity(len),
    };
    let mut z = vec![0.0; params.dims.hidden];
    for t in 0..len {
        if t > 0 {
            let cell = cell_forward(params, &z, ys.row(t - 1));
            z = cell.output();
            tape.cells.push(cell);
        }
        let (out, cache) = heads_forward(params, &z);
        outputs.push(out);
        tape.heads.push(cache);
    }
    (outputs, tape)
}

impl Tape {
    /// Gradient of `Σ_t <upstream_t, output_t>` with respect to every parameter.
    pub fn backward(&self, params: &PriorNetParams, upstream: &[PriorGrad]) -> PriorNetParams {
        let mut grad = params.zeros_like();
        self.backward_into(params, upstream, &mut grad);
        grad
    }

    /// As [`Tape::backward`] but accumulating into `grad`.
    pub fn backward_into(&self, params: &PriorNetParams, upstream: &[PriorGrad], grad: &mut PriorNetParams) {
        assert_eq!(upstream.len(), self.heads.len(), "one upstream gradient per time step");
        let h = params.dims.hidden;
        let mut dz = vec![0.0; h];
        for k in (0..self.heads.len()).rev() {
            head_backward(params, &self.heads[k], &upstream[k], grad, &mut dz);
            if k > 0 {
                dz = cell_backward(params, &self.cells[k - 1], &dz, grad);
            }
        }
    }
}

/// Gradient of `Σ_t <upstream_t, output_t>`, recomputing the forward pass.
pub fn backward(params: &PriorNetParams, ys: &Trajectory, upstream: &[PriorGrad]) -> PriorNetParams {
    let (_, tape) = forward_with_tape(params, ys);
    tape.backward(params, upstream)
}

fn head_backward(p: &PriorNetParams, cache: &HeadCache, up: &PriorGrad, g: &mut PriorNetParams, dz: &mut [f64]) {
    let d = p.dims;
    let mut d_shared = vec![0.0; d.shared];

    // Mean branch.
    outer_acc(g.group_mut(Group::MeanOut), &up.mean, &cache.mean_hidden);
    add_into(g.group_mut(Group::MeanOutBias), &up.mean);
    let mut d_mh = vec![0.0; d.head];
    transpose_acc(p.group(Group::MeanOut), &up.mean, &mut d_mh);
    for (v, a) in d_mh.iter_mut().zip(&cache.mean_hidden) {
        if *a <= 0.0 {
            *v = 0.0;
        }
    }
    outer_acc(g.group_mut(Group::MeanHidden), &d_mh, &cache.shared);
    add_into(g.group_mut(Group::MeanHiddenBias), &d_mh);
    transpose_acc(p.group(Group::MeanHidden), &d_mh, &mut d_shared);

    // Covariance branch; softplus' = sigmoid.
    let d_pre: Vec<f64> = up
        .diag_cov
        .iter()
        .zip(&cache.cov_pre)
        .map(|(u, x)| u * sigmoid(*x))
        .collect();
    outer_acc(g.group_mut(Group::CovOut), &d_pre, &cache.cov_hidden);
    add_into(g.group_mut(Group::CovOutBias), &d_pre);
    let mut d_ch = vec![0.0; d.head];
    transpose_acc(p.group(Group::CovOut), &d_pre, &mut d_ch);
    for (v, a) in d_ch.iter_mut().zip(&cache.cov_hidden) {
        if *a <= 0.0 {
            *v = 0.0;
        }
    }
    outer_acc(g.group_mut(Group::CovHidden), &d_ch, &cache.shared);
    add_into(g.group_mut(Group::CovHiddenBias), &d_ch);
    transpose_acc(p.group(Group::CovHidden), &d_ch, &mut d_shared);

    // Shared layer.
    for (v, a) in d_shared.iter_mut().zip(&cache.shared) {
        if *a <= 0.0 {
            *v = 0.0;
        }
    }
    outer_acc(g.group_mut(Group::Shared), &d_shared, &cache.z);
    add_into(g.group_mut(Group::SharedBias), &d_shared);
    transpose_acc(p.group(Group::Shared), &d_shared, dz);
}

/// Backpropagate `dz_out` through one cell; returns the gradient on `z_prev`.
fn cell_backward(p: &PriorNetParams, c: &CellCache, dz_out: &[f64], g: &mut PriorNetParams) -> Vec<f64> {
    let h = p.dims.hidden;
    let mut dz_prev: Vec<f64> = dz_out.iter().zip(&c.u).map(|(d, u)| d * (1.0 - u)).collect();

    let d_pre_c: Vec<f64> = (0..h)
        .map(|i| dz_out[i] * c.u[i] * (1.0 - c.c[i] * c.c[i]))
        .collect();
    let d_pre_u: Vec<f64> = (0..h)
        .map(|i| dz_out[i] * (c.c[i] - c.z_prev[i]) * c.u[i] * (1.0 - c.u[i]))
        .collect();

    outer_acc(g.group_mut(Group::CandIn), &d_pre_c, &c.y);
    outer_acc(g.group_mut(Group::CandHid), &d_pre_c, &c.rz);
    add_into(g.group_mut(Group::CandInBias), &d_pre_c);
    add_into(g.group_mut(Group::CandHidBias), &d_pre_c);
    let mut d_rz = vec![0.0; h];
    transpose_acc(p.group(Group::CandHid), &d_pre_c, &mut d_rz);
    let d_pre_r: Vec<f64> = (0..h)
        .map(|i| d_rz[i] * c.z_prev[i] * c.r[i] * (1.0 - c.r[i]))
        .collect();
    for i in 0..h {
        dz_prev[i] += d_rz[i] * c.r[i];
    }

    outer_acc(g.group_mut(Group::UpdateIn), &d_pre_u, &c.y);
    outer_acc(g.group_mut(Group::UpdateHid), &d_pre_u, &c.z_prev);
    add_into(g.group_mut(Group::UpdateInBias), &d_pre_u);
    add_into(g.group_mut(Group::UpdateHidBias), &d_pre_u);
    transpose_acc(p.group(Group::UpdateHid), &d_pre_u, &mut dz_prev);

    outer_acc(g.group_mut(Group::ResetIn), &d_pre_r, &c.y);
    outer_acc(g.group_mut(Group::ResetHid), &d_pre_r, &c.z_prev);
    add_into(g.group_mut(Group::ResetInBias), &d_pre_r);
    add_into(g.group_mut(Group::ResetHidBias), &d_pre_r);
    transpose_acc(p.group(Group::ResetHid), &d_pre_r, &mut dz_prev);

    dz_prev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> NetDims {
        NetDims {
            input: 2,
            hidden: 5,
            shared: 4,
            head: 6,
            output: 3,
        }
    }

    fn random_ys(len: usize, seed: u64) -> Trajectory {
        let mut rng = SeededRng::new(seed);
        let mut t = Trajectory::new(2);
        for _ in 0..len {
            t.push(&[rng.standard_normal(), rng.standard_normal()]);
        }
        t
    }

    /// Biases are zero after init; give them values so every path is exercised.
    fn randomized(dims: NetDims, seed: u64) -> PriorNetParams {
        let mut p = PriorNetParams::init(dims, seed);
        let mut rng = SeededRng::new(seed ^ 0xabc);
        for g in Group::ALL {
            if g.is_bias() {
                for v in p.group_mut(g) {
                    *v = 0.3 * rng.standard_normal();
                }
            }
        }
        p
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let p = PriorNetParams::zeros(dims());
        let z = cell_step(&p, &HiddenState::zeros(5), &[3.0, -1.0]);
        assert!(z.z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_halve_the_state() {
        let p = PriorNetParams::zeros(dims());
        let v = vec![0.4, -0.2, 1.0, 0.0, -1.0];
        let z = cell_step(&p, &HiddenState { z: v.clone() }, &[5.0, 2.0]);
        for (a, b) in z.z.iter().zip(&v) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_params_heads() {
        let out = heads(&PriorNetParams::zeros(dims()), &HiddenState::zeros(5));
        assert_eq!(out.mean, vec![0.0; 3]);
        for v in out.diag_cov {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((v - 0.693147).abs() < 1e-6);
        }
    }

    #[test]
    fn bias_only_mean() {
        let mut p = PriorNetParams::zeros(dims());
        p.group_mut(Group::MeanOutBias).copy_from_slice(&[1.5, -2.0, 25.0]);
        let out = heads(&p, &HiddenState { z: vec![0.7; 5] });
        assert_eq!(out.mean, vec![1.5, -2.0, 25.0]);
    }

    #[test]
    fn covariance_is_positive() {
        let p = randomized(dims(), 4);
        for out in forward_priors(&p, &random_ys(50, 1)) {
            assert!(out.diag_cov.iter().all(|v| *v > 0.0));
        }
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn first_prior_uses_initial_state() {
        let p = randomized(dims(), 2);
        let out = forward_priors(&p, &random_ys(1, 3));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], heads(&p, &HiddenState::zeros(5)));
    }

    #[test]
    fn forward_matches_unrolled_reference() {
        let p = randomized(dims(), 8);
        let ys = random_ys(3, 9);
        let out = forward_priors(&p, &ys);
        let z0 = HiddenState::zeros(5);
        let z1 = cell_step(&p, &z0, ys.row(0));
        let z2 = cell_step(&p, &z1, ys.row(1));
        assert_eq!(out[0], heads(&p, &z0));
        assert_eq!(out[1], heads(&p, &z1));
        assert_eq!(out[2], heads(&p, &z2));
    }

    #[test]
    fn forward_is_causal() {
        let p = randomized(dims(), 5);
        let ys = random_ys(12, 6);
        let mut edited = ys.clone();
        let mut flat = edited.as_flat().to_vec();
        let last = flat.len() - 1;
        flat[last] += 100.0;
        edited = Trajectory::from_flat(2, flat).unwrap();
        assert_eq!(forward_priors(&p, &ys), forward_priors(&p, &edited));
    }

    fn objective(p: &PriorNetParams, ys: &Trajectory, up: &[PriorGrad]) -> f64 {
        forward_priors(p, ys)
            .iter()
            .zip(up)
            .map(|(o, g)| {
                o.mean.iter().zip(&g.mean).map(|(a, b)| a * b).sum::<f64>()
                    + o.diag_cov.iter().zip(&g.diag_cov).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = randomized(dims(), 1);
        let ys = random_ys(6, 2);
        let g = backward(&p, &ys, &vec![PriorGrad::zeros(3); 6]);
        assert!(g.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_mean_head_gradient_by_hand() {
        // d<up, W2 a + b2>/dW2 = up aᵀ, /db2 = up.
        let p = randomized(dims(), 3);
        let ys = random_ys(1, 3);
        let up = PriorGrad {
            mean: vec![0.5, -1.0, 2.0],
            diag_cov: vec![0.0; 3],
        };
        let g = backward(&p, &ys, std::slice::from_ref(&up));
        let (_, cache) = heads_forward(&p, &[0.0; 5]);
        assert_eq!(g.group(Group::MeanOutBias), up.mean.as_slice());
        let w = g.group(Group::MeanOut);
        for i in 0..3 {
            for j in 0..6 {
                assert!((w[i * 6 + j] - up.mean[i] * cache.mean_hidden[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = dims();
        let p = randomized(dims, 11);
        let ys = random_ys(10, 12);
        let mut rng = SeededRng::new(13);
        let up: Vec<PriorGrad> = (0..10)
            .map(|_| PriorGrad {
                mean: (0..3).map(|_| rng.standard_normal()).collect(),
                diag_cov: (0..3).map(|_| rng.standard_normal()).collect(),
            })
            .collect();
        let g = backward(&p, &ys, &up);
        let eps = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values_mut()[i] += eps;
            let mut minus = p.clone();
            minus.values_mut()[i] -= eps;
            let fd = (objective(&plus, &ys, &up) - objective(&minus, &ys, &up)) / (2.0 * eps);
            let an = g.values()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4 || (fd - an).abs() < 1e-8, "{:?}: fd {fd} vs analytic {an}", p.locate(i));
        }
    }

    #[test]
    fn cell_jacobian_column_matches_perturbation() {
        let p = randomized(dims(), 21);
        let z = HiddenState { z: vec![0.2, -0.4, 0.1, 0.9, -0.3] };
        let y = [0.5, -1.2];
        let base = cell_step(&p, &z, &y);
        // Perturb one recurrent weight and compare with the linearized change.
        let flat = p.group(Group::CandHid).as_ptr() as usize - p.values().as_ptr() as usize;
        let idx = flat / std::mem::size_of::<f64>() + 7;
        let mut q = p.clone();
        q.values_mut()[idx] += 1e-6;
        let moved = cell_step(&q, &z, &y);
        for k in 0..5 {
            let mut dz = vec![0.0; 5];
            dz[k] = 1.0;
            let mut g = p.zeros_like();
            cell_backward(&p, &cell_forward(&p, &z.z, &y), &dz, &mut g);
            let predicted = g.values()[idx] * 1e-6;
            let actual = moved.z[k] - base.z[k];
            assert!((predicted - actual).abs() <= 1e-5 * actual.abs().max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn locate_roundtrip() {
        let p = PriorNetParams::zeros(NetDims::new(2, 3));
        let (g, off) = p.locate(0);
        assert_eq!((g, off), (Group::ResetIn, 0));
        let (g, _) = p.locate(p.len() - 1);
        assert_eq!(g, Group::CovOutBias);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let d = NetDims::new(2, 3);
        let a = PriorNetParams::init(d, 7);
        assert_eq!(a, PriorNetParams::init(d, 7));
        for g in Group::ALL {
            let vals = a.group(g);
            if g.is_bias() {
                assert!(vals.iter().all(|v| *v == 0.0));
            } else {
                let bound = 1.0 / (g.shape(&d).1 as f64).sqrt();
                assert!(vals.iter().all(|v| v.abs() <= bound));
            }
        }
    }
}
