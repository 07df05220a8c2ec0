//! Paired state/measurement datasets, the labelled/unlabelled split and
//! on-disk persistence.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::dynamics::{simulate, SsmSpec, StateTrajectory, System, STATE_DIM};
use crate::error::{Error, Result};
use crate::estimator::SeqRef;
use crate::measurement::{calibrate_sigma_w, measure, MeasModel, MeasTrajectory};
use crate::numerics::{child_seed, SeededRng};
use crate::trajectory::Trajectory;

/// Row-major matrix as stored in file headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Format(format!(
                "{}x{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Everything needed to regenerate or interpret a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: System,
    pub step_size: f64,
    pub taylor_order: usize,
    pub decimation_factor: f64,
    pub process_noise_cov: MatrixRecord,
    pub rossler_epsilon: Option<f64>,
    pub h: MatrixRecord,
    pub c_w: MatrixRecord,
    pub sigma_e2: f64,
    pub smnr_db: Option<f64>,
    pub master_seed: u64,
}

impl DatasetMeta {
    pub fn new(spec: &SsmSpec, model: &MeasModel, master_seed: u64) -> Self {
        Self {
            system: spec.system,
            step_size: spec.step_size,
            taylor_order: spec.taylor_order,
            decimation_factor: spec.decimation_factor,
            process_noise_cov: (&spec.process_noise_cov).into(),
            rossler_epsilon: spec.rossler_epsilon,
            h: (&model.h).into(),
            c_w: (&model.c_w).into(),
            sigma_e2: spec.sigma_e2(),
            smnr_db: None,
            master_seed,
        }
    }

    pub fn spec(&self) -> Result<SsmSpec> {
        let spec = SsmSpec {
            system: self.system,
            step_size: self.step_size,
            taylor_order: self.taylor_order,
            process_noise_cov: self.process_noise_cov.to_matrix()?,
            rossler_epsilon: self.rossler_epsilon,
            decimation_factor: self.decimation_factor,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model(&self) -> Result<MeasModel> {
        MeasModel::new(self.h.to_matrix()?, self.c_w.to_matrix()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub states: StateTrajectory,
    pub measurements: MeasTrajectory,
}

impl Pair {
    pub fn seq(&self) -> SeqRef<'_> {
        SeqRef {
            measurements: &self.measurements.measurements,
            states: Some(&self.states.states),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub meta: DatasetMeta,
    pub items: Vec<Pair>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.items.iter().map(|p| p.states.len()).collect()
    }

    pub fn states(&self) -> Vec<StateTrajectory> {
        self.items.iter().map(|p| p.states.clone()).collect()
    }
}

/// Seeds for item `i`: (state simulation, measurement noise).
pub fn item_seeds(master_seed: u64, i: usize) -> (u64, u64) {
    let s = child_seed(master_seed, i as u64);
    (child_seed(s, 0), child_seed(s, 1))
}

/// Simulate `n_items` state trajectories of length `len`.
pub fn generate_states(spec: &SsmSpec, n_items: usize, len: usize, master_seed: u64) -> Result<Vec<StateTrajectory>> {
    if n_items == 0 || len == 0 {
        return Err(Error::InvalidArgument("dataset needs N >= 1 and T >= 1".into()));
    }
    (0..n_items)
        .into_par_iter()
        .map(|i| {
            simulate(spec, None, len, item_seeds(master_seed, i).0).map_err(|e| Error::Trajectory {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Measure pre-simulated states; item `i` uses its own noise seed.
pub fn attach_measurements(
    spec: &SsmSpec,
    model: &MeasModel,
    states: Vec<StateTrajectory>,
    master_seed: u64,
) -> Result<PairedDataset> {
    let items = states
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| {
            let y = measure(&s, model, item_seeds(master_seed, i).1).map_err(|e| Error::Trajectory {
                index: i,
                source: Box::new(e),
            })?;
            Ok(Pair {
                states: s,
                measurements: y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset {
        meta: DatasetMeta::new(spec, model, master_seed),
        items,
    })
}

/// `N` independent state/measurement pairs of length `T`.
pub fn generate(spec: &SsmSpec, model: &MeasModel, n_items: usize, len: usize, master_seed: u64) -> Result<PairedDataset> {
    let states = generate_states(spec, n_items, len, master_seed)?;
    attach_measurements(spec, model, states, master_seed)
}

/// As [`generate`], with isotropic measurement noise calibrated on the
/// generated states to hit `smnr_db`.
pub fn generate_at_smnr(
    spec: &SsmSpec,
    h: &DMatrix<f64>,
    smnr_db: f64,
    n_items: usize,
    len: usize,
    master_seed: u64,
) -> Result<PairedDataset> {
    let states = generate_states(spec, n_items, len, master_seed)?;
    let sigma_w2 = calibrate_sigma_w(&states, h, smnr_db)?;
    let model = MeasModel::isotropic(h.clone(), sigma_w2)?;
    let mut data = attach_measurements(spec, &model, states, master_seed)?;
    data.meta.smnr_db = Some(smnr_db);
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub kappa: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(kappa: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(Error::InvalidArgument(format!("kappa {kappa} outside [0, 1]")));
        }
        Ok(Self { kappa, seed })
    }

    /// `round(κ N)`, ties up.
    pub fn labelled_count(&self, n_items: usize) -> usize {
        ((self.kappa * n_items as f64 + 0.5).floor() as usize).min(n_items)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDataset {
    /// Labelled pairs, in increasing parent index order.
    pub labelled: PairedDataset,
    /// Measurement-only trajectories, in increasing parent index order.
    pub unlabelled: Vec<MeasTrajectory>,
    pub labelled_indices: Vec<usize>,
    pub unlabelled_indices: Vec<usize>,
}

impl SemiDataset {
    pub fn len(&self) -> usize {
        self.labelled_indices.len() + self.unlabelled_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_labelled(&self) -> usize {
        self.labelled_indices.len()
    }

    pub fn n_unlabelled(&self) -> usize {
        self.unlabelled_indices.len()
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.labelled.meta
    }

    /// Every item in parent index order; labelled items carry their states.
    pub fn items(&self) -> Vec<(usize, SeqRef<'_>)> {
        let mut out: Vec<(usize, SeqRef<'_>)> = self
            .labelled_indices
            .iter()
            .zip(&self.labelled.items)
            .map(|(i, p)| (*i, p.seq()))
            .chain(self.unlabelled_indices.iter().zip(&self.unlabelled).map(|(i, y)| {
                (
                    *i,
                    SeqRef {
                        measurements: &y.measurements,
                        states: None,
                    },
                )
            }))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    /// Split off a validation subset: `floor(fraction · N_s)` labelled and
    /// `max(1, round(fraction · N_u))` unlabelled items (when available),
    /// chosen by ranking the hashed parent indices under `seed`.
    pub fn hold_out(&self, fraction: f64, seed: u64) -> (SemiDataset, SemiDataset) {
        fn pick(indices: &[usize], count: usize, seed: u64) -> Vec<bool> {
            let mut ranked: Vec<(u64, usize)> = indices
                .iter()
                .enumerate()
                .map(|(k, i)| (child_seed(seed, *i as u64), k))
                .collect();
            ranked.sort_unstable();
            let mut chosen = vec![false; indices.len()];
            for (_, k) in ranked.into_iter().take(count) {
                chosen[k] = true;
            }
            chosen
        }
        let n_s = self.n_labelled();
        let n_u = self.n_unlabelled();
        let val_s = (fraction * n_s as f64).floor() as usize;
        let val_u = if n_u >= 2 {
            ((fraction * n_u as f64).round() as usize).clamp(1, n_u - 1)
        } else {
            0
        };
        let pick_s = pick(&self.labelled_indices, val_s, seed);
        let pick_u = pick(&self.unlabelled_indices, val_u, seed);

        let mut parts = [self.empty_like(), self.empty_like()];
        for (k, chosen) in pick_s.iter().enumerate() {
            let dst = &mut parts[*chosen as usize];
            dst.labelled.items.push(self.labelled.items[k].clone());
            dst.labelled_indices.push(self.labelled_indices[k]);
        }
        for (k, chosen) in pick_u.iter().enumerate() {
            let dst = &mut parts[*chosen as usize];
            dst.unlabelled.push(self.unlabelled[k].clone());
            dst.unlabelled_indices.push(self.unlabelled_indices[k]);
        }
        let [train, val] = parts;
        (train, val)
    }

    fn empty_like(&self) -> SemiDataset {
        SemiDataset {
            labelled: PairedDataset {
                meta: self.labelled.meta.clone(),
                items: Vec::new(),
            },
            unlabelled: Vec::new(),
            labelled_indices: Vec::new(),
            unlabelled_indices: Vec::new(),
        }
    }
}

/// Uniformly random disjoint labelled/unlabelled split with `N_s = round(κ N)`.
pub fn split_semi(data: &PairedDataset, cfg: &SplitConfig) -> SemiDataset {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(cfg.seed).shuffle(&mut order);
    let n_s = cfg.labelled_count(n);
    let mut labelled_indices = order[..n_s].to_vec();
    let mut unlabelled_indices = order[n_s..].to_vec();
    labelled_indices.sort_unstable();
    unlabelled_indices.sort_unstable();
    SemiDataset {
        labelled: PairedDataset {
            meta: data.meta.clone(),
            items: labelled_indices.iter().map(|i| data.items[*i].clone()).collect(),
        },
        unlabelled: unlabelled_indices
            .iter()
            .map(|i| data.items[*i].measurements.clone())
            .collect(),
        labelled_indices,
        unlabelled_indices,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    kind: String,
    meta: DatasetMeta,
    state_dim: usize,
    meas_dim: usize,
    lengths: Vec<usize>,
    state_seeds: Vec<u64>,
    meas_seeds: Vec<u64>,
    raw_samples: Vec<usize>,
}

const DATASET_KIND: &str = "paired_dataset";

/// Serialize to the container format: one state block and one measurement
/// block per item, in item order.
pub fn to_bytes(data: &PairedDataset) -> Result<Vec<u8>> {
    let header = FileHeader {
        kind: DATASET_KIND.into(),
        meta: data.meta.clone(),
        state_dim: STATE_DIM,
        meas_dim: data.meta.h.rows,
        lengths: data.lengths(),
        state_seeds: data.items.iter().map(|p| p.states.seed).collect(),
        meas_seeds: data.items.iter().map(|p| p.measurements.seed).collect(),
        raw_samples: data.items.iter().map(|p| p.states.raw_samples).collect(),
    };
    let blocks: Vec<&[f64]> = data
        .items
        .iter()
        .flat_map(|p| [p.states.states.as_flat(), p.measurements.measurements.as_flat()])
        .collect();
    container::encode(&header, &blocks)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PairedDataset> {
    let (header, blocks): (FileHeader, _) = container::decode(bytes)?;
    if header.kind != DATASET_KIND {
        return Err(Error::Format(format!("expected a dataset, found '{}'", header.kind)));
    }
    let n = header.lengths.len();
    if blocks.len() != 2 * n
        || header.state_seeds.len() != n
        || header.meas_seeds.len() != n
        || header.raw_samples.len() != n
    {
        return Err(Error::Format("item count disagrees with header".into()));
    }
    let mut blocks = blocks.into_iter();
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let xs = Trajectory::from_flat(header.state_dim, blocks.next().unwrap())?;
        let ys = Trajectory::from_flat(header.meas_dim, blocks.next().unwrap())?;
        if xs.len() != header.lengths[i] || ys.len() != header.lengths[i] {
            return Err(Error::Format(format!("item {i} length disagrees with header")));
        }
        items.push(Pair {
            states: StateTrajectory {
                states: xs,
                seed: header.state_seeds[i],
                raw_samples: header.raw_samples[i],
            },
            measurements: MeasTrajectory {
                measurements: ys,
                seed: header.meas_seeds[i],
            },
        });
    }
    Ok(PairedDataset {
        meta: header.meta,
        items,
    })
}

pub fn save(data: &PairedDataset, path: &Path) -> Result<()> {
    container::write_atomic(path, &to_bytes(data)?)
}

pub fn load(path: &Path) -> Result<PairedDataset> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{builtin_h, BuiltinH};
    use proptest::prelude::*;

    fn small(n: usize, len: usize, seed: u64) -> PairedDataset {
        let spec = SsmSpec::new(System::Lorenz63, 0.01);
        let model = MeasModel::isotropic(builtin_h(BuiltinH::DenseRandom2x3), 0.5).unwrap();
        generate(&spec, &model, n, len, seed).unwrap()
    }

    #[test]
    fn single_item() {
        let d = small(1, 1, 3);
        assert_eq!(d.len(), 1);
        assert_eq!(d.items[0].states.len(), 1);
        assert_eq!(d.items[0].measurements.len(), 1);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = to_bytes(&small(4, 20, 11)).unwrap();
        let b = to_bytes(&small(4, 20, 11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, to_bytes(&small(4, 20, 12)).unwrap());
    }

    #[test]
    fn round_trip_and_corruption() {
        let d = small(3, 15, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/train.bin");
        save(&d, &path).unwrap();
        assert_eq!(load(&path).unwrap(), d);

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&(container::FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { .. })));
    }

    #[test]
    fn split_counts() {
        let d = small(10, 2, 1);
        let s0 = split_semi(&d, &SplitConfig::new(0.0, 9).unwrap());
        assert_eq!((s0.n_labelled(), s0.n_unlabelled()), (0, 10));
        let s1 = split_semi(&d, &SplitConfig::new(1.0, 9).unwrap());
        assert_eq!((s1.n_labelled(), s1.n_unlabelled()), (10, 0));
        assert_eq!(SplitConfig::new(0.02, 0).unwrap().labelled_count(1000), 20);
        assert_eq!(SplitConfig::new(0.25, 0).unwrap().labelled_count(10), 3);
        assert!(SplitConfig::new(1.5, 0).is_err());
    }

    #[test]
    fn unlabelled_measurements_match_parent() {
        let d = small(8, 5, 2);
        let s = split_semi(&d, &SplitConfig::new(0.5, 4).unwrap());
        for (i, y) in s.unlabelled_indices.iter().zip(&s.unlabelled) {
            assert_eq!(y, &d.items[*i].measurements);
        }
        for (i, p) in s.labelled_indices.iter().zip(&s.labelled.items) {
            assert_eq!(p, &d.items[*i]);
        }
        let order: Vec<usize> = s.items().iter().map(|(i, _)| *i).collect();
        assert_eq!(order, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn hold_out_partitions() {
        let d = small(40, 2, 6);
        let s = split_semi(&d, &SplitConfig::new(0.5, 1).unwrap());
        let (tr, va) = s.hold_out(0.1, 77);
        assert_eq!(va.n_labelled(), 2);
        assert_eq!(va.n_unlabelled(), 2);
        let mut all: Vec<usize> = tr.items().iter().chain(va.items().iter()).map(|(i, _)| *i).collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    fn stub(n: usize) -> PairedDataset {
        let spec = SsmSpec::noiseless(System::Lorenz63);
        let model = MeasModel::isotropic(builtin_h(BuiltinH::Extreme1), 1.0).unwrap();
        let pair = Pair {
            states: StateTrajectory {
                states: Trajectory::from_flat(3, vec![0.0; 3]).unwrap(),
                seed: 0,
                raw_samples: 1,
            },
            measurements: MeasTrajectory {
                measurements: Trajectory::from_flat(1, vec![0.0]).unwrap(),
                seed: 0,
            },
        };
        PairedDataset {
            meta: DatasetMeta::new(&spec, &model, 0),
            items: vec![pair; n],
        }
    }

    proptest! {
        #[test]
        fn split_partitions_index_set(n in 0usize..300, kappa in 0.0f64..=1.0, seed: u64) {
            let d = stub(n);
            let cfg = SplitConfig::new(kappa, seed).unwrap();
            let s = split_semi(&d, &cfg);
            prop_assert_eq!(s.n_labelled(), cfg.labelled_count(n));
            prop_assert_eq!(s.n_labelled() + s.n_unlabelled(), n);
            let mut all: Vec<usize> = s.labelled_indices.iter().chain(&s.unlabelled_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
