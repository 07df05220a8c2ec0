//! NMSE-versus-SMNR sweeps.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{format_db, ExperimentConfig, Method};
use super::experiment::{learned_params, process_spec, run_all, score, CheckpointPolicy, PointData};
use super::metrics::mean_and_stderr;
use crate::container::write_atomic;
use crate::dynamics::SsmSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub smnr_db: f64,
    pub nmse_db: f64,
    pub nmse_stderr: f64,
    pub coord_nmse_db: Vec<f64>,
    pub pred_y_nmse_db: f64,
    pub n_test: usize,
    /// Seconds spent on this row, including training. Not part of the CSV.
    pub wall_time: f64,
    pub error: Option<String>,
}

impl ResultRow {
    fn failed(method: Method, smnr_db: f64, e: &Error, wall_time: f64) -> Self {
        Self {
            method,
            smnr_db,
            nmse_db: f64::NAN,
            nmse_stderr: f64::NAN,
            coord_nmse_db: vec![f64::NAN; 3],
            pred_y_nmse_db: f64::NAN,
            n_test: 0,
            wall_time,
            error: Some(e.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub csv_path: PathBuf,
}

pub const CSV_HEADER: &str =
    "config_hash,method,smnr_db,nmse_db,nmse_stderr,nmse_x1_db,nmse_x2_db,nmse_x3_db,pred_y_nmse_db,n_test,error";

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV text for `rows`; contains no timing, so reruns are byte-identical.
pub fn to_csv(hash: &str, rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let coords: Vec<String> = (0..3).map(|j| num(*r.coord_nmse_db.get(j).unwrap_or(&f64::NAN))).collect();
        let _ = writeln!(
            out,
            "{hash},{},{},{},{},{},{},{},{}",
            r.method.name(),
            format_db(r.smnr_db),
            num(r.nmse_db),
            num(r.nmse_stderr),
            coords.join(","),
            num(r.pred_y_nmse_db),
            r.n_test,
            csv_field(r.error.as_deref().unwrap_or("")),
        );
    }
    out
}

/// Evaluate one method on one prepared SMNR point.
pub fn evaluate_point(
    cfg: &ExperimentConfig,
    spec: &SsmSpec,
    method: Method,
    point: &PointData,
    policy: CheckpointPolicy,
) -> ResultRow {
    let start = Instant::now();
    let run = || -> Result<ResultRow> {
        let params = if method.is_learned() {
            Some(learned_params(cfg, method, point, policy)?)
        } else {
            None
        };
        let outputs = run_all(cfg, method, spec, params.as_ref(), &point.test)?;
        let s = score(&point.test, &outputs)?;
        let (mean, stderr) = mean_and_stderr(&s.nmse_each);
        Ok(ResultRow {
            method,
            smnr_db: point.smnr_db,
            nmse_db: mean,
            nmse_stderr: stderr,
            coord_nmse_db: s.coord_nmse_db,
            pred_y_nmse_db: s.pred_y_nmse_db,
            n_test: s.nmse_each.len(),
            wall_time: 0.0,
            error: None,
        })
    };
    match run() {
        Ok(mut row) => {
            row.wall_time = start.elapsed().as_secs_f64();
            row
        }
        Err(e) => ResultRow::failed(method, point.smnr_db, &e, start.elapsed().as_secs_f64()),
    }
}

fn sweep_point(cfg: &ExperimentConfig, spec: &SsmSpec, smnr_db: f64, policy: CheckpointPolicy) -> Vec<ResultRow> {
    let start = Instant::now();
    match PointData::load(cfg, spec, smnr_db) {
        Ok(point) => cfg
            .methods
            .iter()
            .map(|m| evaluate_point(cfg, spec, *m, &point, policy))
            .collect(),
        Err(e) => {
            let t = start.elapsed().as_secs_f64();
            cfg.methods.iter().map(|m| ResultRow::failed(*m, smnr_db, &e, t)).collect()
        }
    }
}

/// Evaluate every method at every SMNR point, `jobs` points at a time, and
/// write `sweep.csv`, `timing.json` and the resolved config to the output
/// directory. Rows are ordered by SMNR (as configured), then method.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize, policy: CheckpointPolicy) -> Result<SweepOutput> {
    cfg.validate()?;
    let spec = process_spec(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rows: Vec<ResultRow> = pool.install(|| {
        cfg.smnr_db
            .par_iter()
            .map(|db| sweep_point(cfg, &spec, *db, policy))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });

    let hash = cfg.hash();
    let csv_path = cfg.output_dir.join("sweep.csv");
    write_atomic(&csv_path, to_csv(&hash, &rows).as_bytes())?;
    let timing: Vec<_> = rows
        .iter()
        .map(|r| serde_json::json!({"method": r.method.name(), "smnr_db": r.smnr_db, "wall_time_s": r.wall_time}))
        .collect();
    write_atomic(
        &cfg.output_dir.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({"config_hash": hash, "rows": timing}))?.as_bytes(),
    )?;
    write_atomic(&cfg.output_dir.join("config.resolved.cfg"), cfg.to_text().as_bytes())?;
    Ok(SweepOutput { rows, csv_path })
}
