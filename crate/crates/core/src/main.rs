use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use semidanse::dataset::SplitConfig;
use semidanse::estimator::DofReport;
use semidanse::harness::config::{ExperimentConfig, Method};
use semidanse::harness::dump::{dump_path, dump_trajectory, write_dump};
use semidanse::harness::experiment::{learned_params, process_spec, CheckpointPolicy, PointData, Split};
use semidanse::harness::sweep::run_sweep;
use semidanse::measurement::MeasModel;
use semidanse::prior_net::{NetDims, PriorNetParams};
use semidanse::{Error, Result};

#[derive(Parser)]
#[command(name = "semidanse", version, about = "Semi-supervised data-driven nonlinear state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config file (sectioned key = value).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated methods: ekf, ukf, semidanse, danse.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    kappa: Option<f64>,
    /// lorenz, chen or rossler.
    #[arg(long)]
    system: Option<String>,
    /// Comma-separated SMNR values in dB.
    #[arg(long, allow_hyphen_values = true)]
    smnr: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or verify cached) train and test datasets for every SMNR.
    Generate(Common),
    /// Train the learned methods at every SMNR, overwriting checkpoints.
    Train(Common),
    /// Evaluate with existing checkpoints; fails if one is missing.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train where needed, evaluate everything, write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// SMNR points processed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Per-step CSV (and optional SVG) for one test trajectory.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        svg: bool,
    },
    /// Constraint and parameter counts for the configured training set.
    DofReport(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut sets = c.overrides.clone();
    if let Some(m) = &c.methods {
        sets.push(format!("experiment.methods={m}"));
    }
    if let Some(k) = c.kappa {
        sets.push(format!("data.kappa={k}"));
    }
    if let Some(s) = &c.system {
        sets.push(format!("system.system={s}"));
    }
    if let Some(s) = &c.smnr {
        sets.push(format!("measurement.smnr_db={s}"));
    }
    if let Some(d) = &c.output_dir {
        sets.push(format!("experiment.output_dir={}", d.display()));
    }
    cfg.apply_overrides(&sets)?;
    Ok(cfg)
}

fn generate(cfg: &ExperimentConfig) -> Result<Value> {
    let spec = process_spec(cfg)?;
    let mut out = Vec::new();
    for &db in &cfg.smnr_db {
        let point = PointData::load(cfg, &spec, db)?;
        out.push(json!({
            "smnr_db": db,
            "sigma_w2": point.train.meta.model()?.sigma_w2(),
            "train": cfg.dataset_path(db, Split::Train.name()),
            "test": cfg.dataset_path(db, Split::Test.name()),
        }));
    }
    Ok(json!({"sigma_e2": spec.sigma_e2(), "datasets": out}))
}

fn train(cfg: &ExperimentConfig) -> Result<Value> {
    let mut learned: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.is_learned()).collect();
    if learned.is_empty() {
        learned.push(Method::SemiDanse);
    }
    let spec = process_spec(cfg)?;
    let mut out = Vec::new();
    for &db in &cfg.smnr_db {
        let point = PointData::load(cfg, &spec, db)?;
        for &m in &learned {
            learned_params(cfg, m, &point, CheckpointPolicy::Retrain)?;
            out.push(json!({
                "method": m.name(),
                "smnr_db": db,
                "checkpoint": cfg.checkpoint_path(m, db),
                "log": cfg.log_path(m, db),
            }));
        }
    }
    Ok(json!({"trained": out}))
}

fn sweep(cfg: &ExperimentConfig, jobs: usize, policy: CheckpointPolicy) -> Result<Value> {
    let out = run_sweep(cfg, jobs, policy)?;
    let failed = out.rows.iter().filter(|r| !r.is_ok()).count();
    let rows: Vec<Value> = out
        .rows
        .iter()
        .map(|r| json!({"method": r.method.name(), "smnr_db": r.smnr_db, "nmse_db": r.nmse_db, "error": r.error}))
        .collect();
    Ok(json!({"csv": out.csv_path, "config_hash": cfg.hash(), "failed_rows": failed, "rows": rows}))
}

fn dump(cfg: &ExperimentConfig, method: &str, index: usize, svg: bool) -> Result<Value> {
    let method: Method = method.parse()?;
    let db = *cfg
        .smnr_db
        .first()
        .ok_or_else(|| Error::Config("no SMNR configured".into()))?;
    let d = dump_trajectory(cfg, method, db, index)?;
    let csv = dump_path(cfg, method, db, index, "csv");
    let svg_path = svg.then(|| dump_path(cfg, method, db, index, "svg"));
    let written = write_dump(&d, &csv, svg_path.as_deref())?;
    Ok(json!({"written": written}))
}

fn dof(cfg: &ExperimentConfig) -> Result<Value> {
    let model = MeasModel::isotropic(cfg.h.matrix(), 1.0)?;
    let n_params = PriorNetParams::zeros(NetDims::new(model.meas_dim(), model.state_dim())).len();
    let n_labelled = SplitConfig::new(cfg.kappa, 0)?.labelled_count(cfg.n_train);
    let report = DofReport::from_counts(
        n_params,
        model.meas_dim(),
        model.state_dim(),
        &vec![cfg.t_train; cfg.n_train],
        &vec![cfg.t_train; n_labelled],
    );
    Ok(serde_json::to_value(report)?)
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Generate(c) => generate(&load_config(&c)?),
        Command::Train(c) => train(&load_config(&c)?),
        Command::Eval { common, jobs } => sweep(&load_config(&common)?, jobs, CheckpointPolicy::Require),
        Command::Sweep { common, jobs } => sweep(&load_config(&common)?, jobs, CheckpointPolicy::TrainIfMissing),
        Command::Dump {
            common,
            method,
            index,
            svg,
        } => dump(&load_config(&common)?, &method, index, svg),
        Command::DofReport(c) => dof(&load_config(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", json!({"error": "usage", "message": e.kind().to_string()}));
            }
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("semidanse").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(parse(&["bogus"]).err().unwrap().exit_code(), 2);
        assert_eq!(parse(&["sweep", "--no-such-flag"]).err().unwrap().exit_code(), 2);
        assert_eq!(parse(&[]).err().unwrap().exit_code(), 2);
    }

    #[test]
    fn flags_become_overrides() {
        let Command::Train(c) = parse(&["train", "--kappa", "0.02", "--system", "rossler", "--smnr", "-5,5"])
            .unwrap()
            .command
        else {
            panic!("expected train");
        };
        let cfg = load_config(&c).unwrap();
        assert_eq!(cfg.kappa, 0.02);
        assert_eq!(cfg.system, semidanse::dynamics::System::Rossler);
        assert_eq!(cfg.smnr_db, vec![-5.0, 5.0]);
        let bad = Common {
            overrides: vec!["data.kappa=7".into()],
            ..Common::default()
        };
        assert_eq!(load_config(&bad).err().unwrap().kind(), "config");
    }

    #[test]
    fn sweep_with_shipped_config_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/lorenz_dense.cfg");
        let out = dir.path().to_str().unwrap();
        let cli = parse(&["sweep", "--config", cfg, "--methods", "ekf,ukf", "--output-dir", out]).unwrap();
        let v = run(cli).unwrap();
        assert_eq!(v["failed_rows"], 0);
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 10);
        assert!(dir.path().join("timing.json").exists());
    }

    #[test]
    fn train_writes_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let args = [
            "train", "--kappa", "0.02", "--system", "lorenz", "--smnr", "10", "--output-dir", out, "--set",
            "train.max_epochs=3",
        ];
        run(parse(&args).unwrap()).unwrap();
        assert!(dir.path().join("checkpoints/semidanse_smnr10.bin").exists());
        let log = std::fs::read_to_string(dir.path().join("logs/semidanse_smnr10.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);

        let dump_args = ["dump", "--method", "semidanse", "--kappa", "0.02", "--smnr", "10", "--output-dir", out, "--set", "train.max_epochs=3"];
        run(parse(&dump_args).unwrap()).unwrap();
        let other = ["dump", "--method", "danse", "--kappa", "0.02", "--smnr", "10", "--output-dir", out];
        assert_eq!(run(parse(&other).unwrap()).err().unwrap().kind(), "missing_checkpoint");
    }
}
