//! Per-SMNR data preparation and method execution shared by the sweep,
//! evaluation and dump commands.

use rayon::prelude::*;
use serde_json::json;

use super::config::{ExperimentConfig, FilterInit, Method};
use super::metrics::{coordinate, nmse_db_each};
use crate::baselines::{ekf, perturbed_truth_prior, ukf, uninformed_prior};
use crate::checkpoint::{self, CheckpointInfo};
use crate::dataset::{attach_measurements, generate_states, load, save, split_semi, PairedDataset, SplitConfig};
use crate::dynamics::{calibrate_process_noise, SsmSpec, StateTrajectory};
use crate::error::{Error, Result};
use crate::estimator::{infer, train, FilterOutput, TrainConfig, TrainLog};
use crate::measurement::{calibrate_sigma_w, MeasModel};
use crate::numerics::{child_seed, SeededRng};
use crate::prior_net::PriorNetParams;
use crate::trajectory::Trajectory;

const TAG_PILOT: u64 = 0x5049_4c4f;
const TAG_TRAIN: u64 = 0x5452_4e;
const TAG_TEST: u64 = 0x5445_5354;
const TAG_SPLIT: u64 = 0x5350_4c54;
const TAG_INIT: u64 = 0x494e_4954;
const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_VALID: u64 = 0x5641_4c44;
const TAG_FILTER: u64 = 0x4649_4c54;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn smnr_key(smnr_db: f64) -> u64 {
    (smnr_db * 1000.0).round() as i64 as u64
}

/// Master seed of one dataset; distinct per split, SMNR and burn-in.
pub fn dataset_seed(cfg: &ExperimentConfig, smnr_db: f64, split: Split) -> u64 {
    let tag = match split {
        Split::Train => TAG_TRAIN,
        Split::Test => TAG_TEST,
    };
    child_seed(child_seed(child_seed(cfg.seed, tag), smnr_key(smnr_db)), cfg.burn_in as u64)
}

/// System spec with process noise calibrated to the configured level.
pub fn process_spec(cfg: &ExperimentConfig) -> Result<SsmSpec> {
    let base = SsmSpec::new(cfg.system, 0.0);
    let sigma_e2 = calibrate_process_noise(&base, cfg.process_noise_db, child_seed(cfg.seed, TAG_PILOT))?;
    Ok(SsmSpec::new(cfg.system, sigma_e2))
}

fn sizes(cfg: &ExperimentConfig, split: Split) -> (usize, usize) {
    match split {
        Split::Train => (cfg.n_train, cfg.t_train),
        Split::Test => (cfg.n_test, cfg.t_test),
    }
}

/// Simulate, drop the burn-in, calibrate measurement noise on these states
/// and measure.
pub fn build_dataset(cfg: &ExperimentConfig, spec: &SsmSpec, smnr_db: f64, split: Split) -> Result<PairedDataset> {
    let (n, len) = sizes(cfg, split);
    let seed = dataset_seed(cfg, smnr_db, split);
    let mut states = generate_states(spec, n, len + cfg.burn_in, seed)?;
    if cfg.burn_in > 0 {
        for s in &mut states {
            s.states = s.states.skip(cfg.burn_in);
        }
    }
    let h = cfg.h.matrix();
    let sigma_w2 = calibrate_sigma_w(&states, &h, smnr_db)?;
    let model = MeasModel::isotropic(h, sigma_w2)?;
    let mut data = attach_measurements(spec, &model, states, seed)?;
    data.meta.smnr_db = Some(smnr_db);
    Ok(data)
}

fn matches(data: &PairedDataset, cfg: &ExperimentConfig, spec: &SsmSpec, smnr_db: f64, split: Split) -> bool {
    let (n, len) = sizes(cfg, split);
    let m = &data.meta;
    m.master_seed == dataset_seed(cfg, smnr_db, split)
        && m.system == cfg.system
        && m.smnr_db == Some(smnr_db)
        && m.sigma_e2 == spec.sigma_e2()
        && m.h.to_matrix().ok().as_ref() == Some(&cfg.h.matrix())
        && data.len() == n
        && data.lengths().iter().all(|l| *l == len)
}

/// Load the cached dataset when it matches the config, otherwise build and
/// cache it.
pub fn load_or_build(cfg: &ExperimentConfig, spec: &SsmSpec, smnr_db: f64, split: Split) -> Result<PairedDataset> {
    let path = cfg.dataset_path(smnr_db, split.name());
    if path.exists() {
        if let Ok(data) = load(&path) {
            if matches(&data, cfg, spec, smnr_db, split) {
                return Ok(data);
            }
        }
    }
    let data = build_dataset(cfg, spec, smnr_db, split)?;
    save(&data, &path)?;
    Ok(data)
}

/// Both splits for one SMNR point.
#[derive(Debug, Clone)]
pub struct PointData {
    pub smnr_db: f64,
    pub train: PairedDataset,
    pub test: PairedDataset,
}

impl PointData {
    pub fn load(cfg: &ExperimentConfig, spec: &SsmSpec, smnr_db: f64) -> Result<Self> {
        Ok(Self {
            smnr_db,
            train: load_or_build(cfg, spec, smnr_db, Split::Train)?,
            test: load_or_build(cfg, spec, smnr_db, Split::Test)?,
        })
    }
}

pub fn method_kappa(cfg: &ExperimentConfig, method: Method) -> f64 {
    match method {
        Method::Danse => 0.0,
        _ => cfg.kappa,
    }
}

/// Trainer settings for a learned method. Seeds are shared between methods,
/// so κ is the only difference between SemiDANSE and DANSE runs.
pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        init_seed: child_seed(cfg.seed, TAG_INIT),
        shuffle_seed: child_seed(cfg.seed, TAG_SHUFFLE),
        validation_seed: child_seed(cfg.seed, TAG_VALID),
        ..cfg.train.clone()
    }
}

/// Train a learned method on `train_data` (split by the method's κ).
pub fn train_method(
    cfg: &ExperimentConfig,
    method: Method,
    train_data: &PairedDataset,
) -> Result<(PriorNetParams, TrainLog)> {
    let split = SplitConfig::new(method_kappa(cfg, method), child_seed(cfg.seed, TAG_SPLIT))?;
    let semi = split_semi(train_data, &split);
    train(&semi, &train_data.meta.model()?, &train_config(cfg))
}

fn checkpoint_tag(cfg: &ExperimentConfig, method: Method, smnr_db: f64) -> serde_json::Value {
    json!({
        "config_hash": cfg.hash(),
        "method": method.name(),
        "smnr_db": smnr_db,
        "kappa": method_kappa(cfg, method),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointPolicy {
    /// Reuse a matching checkpoint, train otherwise.
    TrainIfMissing,
    /// Fail when no matching checkpoint exists.
    Require,
    /// Always train and overwrite.
    Retrain,
}

/// Parameters for a learned method at one SMNR, honouring `policy`.
pub fn learned_params(
    cfg: &ExperimentConfig,
    method: Method,
    point: &PointData,
    policy: CheckpointPolicy,
) -> Result<PriorNetParams> {
    let path = cfg.checkpoint_path(method, point.smnr_db);
    let tag = checkpoint_tag(cfg, method, point.smnr_db);
    if policy != CheckpointPolicy::Retrain && path.exists() {
        let (params, info) = checkpoint::load(&path)?;
        if info.extra == tag {
            return Ok(params);
        }
        if policy == CheckpointPolicy::Require {
            return Err(Error::Config(format!(
                "checkpoint {} was trained under a different configuration",
                path.display()
            )));
        }
    }
    if policy == CheckpointPolicy::Require {
        return Err(Error::MissingCheckpoint(path));
    }
    let (params, log) = train_method(cfg, method, &point.train)?;
    let info = CheckpointInfo {
        init_seed: train_config(cfg).init_seed,
        epoch: log.best_epoch,
        extra: tag,
    };
    checkpoint::save(&path, &params, &info)?;
    log.write_jsonl(&cfg.log_path(method, point.smnr_db))?;
    Ok(params)
}

/// Initial belief for the model-driven filters on test item `index`.
pub fn filter_prior(cfg: &ExperimentConfig, states: &StateTrajectory, index: usize) -> Result<crate::numerics::GaussianBelief> {
    match cfg.filter_init {
        FilterInit::PerturbedTruth => {
            let mut rng = SeededRng::new(child_seed(child_seed(cfg.seed, TAG_FILTER), index as u64));
            perturbed_truth_prior(states.states.row(0), &mut rng)
        }
        FilterInit::Uninformed => uninformed_prior(states.states.dim()),
    }
}

/// Run `method` on one test item.
pub fn run_one(
    cfg: &ExperimentConfig,
    method: Method,
    spec: &SsmSpec,
    params: Option<&PriorNetParams>,
    test: &PairedDataset,
    index: usize,
) -> Result<FilterOutput> {
    let model = test.meta.model()?;
    let item = test
        .items
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("test set has no trajectory {index}")))?;
    let ys = &item.measurements.measurements;
    match method {
        Method::Ekf => ekf(ys, spec, &model, &filter_prior(cfg, &item.states, index)?),
        Method::Ukf => ukf(ys, spec, &model, &filter_prior(cfg, &item.states, index)?, &cfg.ukf),
        Method::SemiDanse | Method::Danse => {
            let params = params.ok_or_else(|| Error::InvalidArgument("learned method needs parameters".into()))?;
            infer(params, ys, &model)
        }
    }
}

/// Run `method` on every test item, in parallel, results in item order.
pub fn run_all(
    cfg: &ExperimentConfig,
    method: Method,
    spec: &SsmSpec,
    params: Option<&PriorNetParams>,
    test: &PairedDataset,
) -> Result<Vec<FilterOutput>> {
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            run_one(cfg, method, spec, params, test, i).map_err(|e| Error::Trajectory {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Accuracy of one method on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub nmse_each: Vec<f64>,
    /// Per-coordinate NMSE (dB), averaged over trajectories.
    pub coord_nmse_db: Vec<f64>,
    /// NMSE (dB) of the one-step-ahead predicted measurement mean against `y_t`.
    pub pred_y_nmse_db: f64,
}

pub fn score(test: &PairedDataset, outputs: &[FilterOutput]) -> Result<Scores> {
    let truth: Vec<&Trajectory> = test.items.iter().map(|p| &p.states.states).collect();
    let means: Vec<Trajectory> = outputs.iter().map(|o| o.means()).collect();
    let est: Vec<&Trajectory> = means.iter().collect();
    let nmse_each = nmse_db_each(&truth, &est)?;

    let dim = truth[0].dim();
    let mut coord_nmse_db = Vec::with_capacity(dim);
    for j in 0..dim {
        let tj: Vec<Trajectory> = truth.iter().map(|t| coordinate(t, j)).collect();
        let ej: Vec<Trajectory> = means.iter().map(|t| coordinate(t, j)).collect();
        let v = nmse_db_each(&tj.iter().collect::<Vec<_>>(), &ej.iter().collect::<Vec<_>>())?;
        coord_nmse_db.push(v.iter().sum::<f64>() / v.len() as f64);
    }

    let ys: Vec<&Trajectory> = test.items.iter().map(|p| &p.measurements.measurements).collect();
    let preds: Vec<Trajectory> = outputs
        .iter()
        .map(|o| o.predicted_measurements().ok_or(Error::InvalidArgument("no predictive beliefs".into())))
        .collect::<Result<_>>()?;
    let pv = nmse_db_each(&ys, &preds.iter().collect::<Vec<_>>())?;
    Ok(Scores {
        nmse_each,
        coord_nmse_db,
        pred_y_nmse_db: pv.iter().sum::<f64>() / pv.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::System;
    use crate::measurement::BuiltinH;

    #[derive(serde::Deserialize)]
    struct Golden {
        lorenz_sigma_e2_minus10db_seed7: f64,
        desk_initial_train_loss: f64,
        desk_final_train_loss: f64,
        desk_epochs: usize,
    }

    fn golden() -> Golden {
        serde_json::from_str(include_str!("../../tests/golden/regression.json")).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn process_noise_calibration_is_frozen() {
        let v = calibrate_process_noise(&SsmSpec::new(System::Lorenz63, 0.0), -10.0, 7).unwrap();
        assert!(rel(v, golden().lorenz_sigma_e2_minus10db_seed7) < 1e-9);
    }

    #[test]
    fn datasets_are_seeded_per_point_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            data_dir: Some(dir.path().join("data")),
            n_train: 3,
            t_train: 20,
            n_test: 2,
            t_test: 30,
            ..ExperimentConfig::default()
        };
        let spec = process_spec(&cfg).unwrap();
        let a = load_or_build(&cfg, &spec, 10.0, Split::Train).unwrap();
        assert!(cfg.dataset_path(10.0, "train").exists());
        assert_eq!(load_or_build(&cfg, &spec, 10.0, Split::Train).unwrap(), a);
        let test = load_or_build(&cfg, &spec, 10.0, Split::Test).unwrap();
        assert_ne!(test.items[0].states.states, a.items[0].states.states);
        assert_ne!(dataset_seed(&cfg, 0.0, Split::Train), dataset_seed(&cfg, 10.0, Split::Train));

        // A stale cache entry is rebuilt rather than reused.
        cfg.n_train = 4;
        assert_eq!(load_or_build(&cfg, &spec, 10.0, Split::Train).unwrap().len(), 4);
    }

    /// Desk-scale SemiDANSE run on the partially observed Lorenz system.
    #[test]
    fn desk_training_regression() {
        let cfg = ExperimentConfig {
            h: BuiltinH::Partial23,
            smnr_db: vec![10.0],
            ..ExperimentConfig::default()
        };
        let spec = process_spec(&cfg).unwrap();
        let train_data = build_dataset(&cfg, &spec, 10.0, Split::Train).unwrap();
        let (_, log) = train_method(&cfg, Method::SemiDanse, &train_data).unwrap();
        let g = golden();
        let final_loss = log.final_train_loss().unwrap();
        assert!(final_loss < log.initial_train_loss);
        assert!(rel(log.initial_train_loss, g.desk_initial_train_loss) < 1e-9);
        assert!(rel(final_loss, g.desk_final_train_loss) < 1e-6);
        assert_eq!(log.epochs.len(), g.desk_epochs);
    }
}
