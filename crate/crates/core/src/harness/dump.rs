//! Per-time-step dumps of one test trajectory, with optional SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{format_db, ExperimentConfig, Method};
use super::experiment::{learned_params, process_spec, run_one, CheckpointPolicy, PointData};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::estimator::FilterOutput;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone)]
pub struct Dump {
    pub states: Trajectory,
    pub measurements: Trajectory,
    pub output: FilterOutput,
}

impl Dump {
    pub fn header(&self) -> String {
        let n = self.measurements.dim();
        let d = self.states.dim();
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=d).map(|i| format!("x{i}")));
        cols.extend((1..=n).map(|i| format!("y{i}")));
        cols.extend((1..=d).map(|i| format!("m{i}")));
        cols.extend((1..=d).map(|i| format!("s{i}")));
        cols.extend((1..=n).map(|i| format!("yhat{i}")));
        cols.join(",")
    }

    /// Columns: t, true state, measurement, posterior mean, posterior standard
    /// deviation, one-step-ahead predicted measurement mean.
    pub fn to_csv(&self) -> Result<String> {
        let means = self.output.means();
        let sds = self.output.std_devs();
        let yhat = self
            .output
            .predicted_measurements()
            .ok_or_else(|| Error::InvalidArgument("filter output has no predictive beliefs".into()))?;
        let mut out = self.header();
        out.push('\n');
        for t in 0..self.states.len() {
            let mut row = vec![(t + 1).to_string()];
            for src in [&self.states, &self.measurements, &means, &sds, &yhat] {
                row.extend(src.row(t).iter().map(|v| format!("{v:.9e}")));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    /// One panel per state coordinate: truth, posterior mean and a ±1σ band.
    pub fn to_svg(&self) -> String {
        let means = self.output.means();
        let sds = self.output.std_devs();
        let d = self.states.dim();
        let (w, ph) = (900.0, 220.0);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            ph * d as f64
        );
        for j in 0..d {
            let truth = self.states.component(j);
            let m = means.component(j);
            let s = sds.component(j);
            let lo: Vec<f64> = m.iter().zip(&s).map(|(a, b)| a - b).collect();
            let hi: Vec<f64> = m.iter().zip(&s).map(|(a, b)| a + b).collect();
            let all = truth.iter().chain(&lo).chain(&hi).copied().filter(|v| v.is_finite());
            let (mut ymin, mut ymax) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !(ymax > ymin) {
                ymin -= 1.0;
                ymax += 1.0;
            }
            let panel = Panel {
                x0: 50.0,
                y0: ph * j as f64 + 20.0,
                w: w - 70.0,
                h: ph - 40.0,
                len: truth.len(),
                ymin,
                ymax,
            };
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
                panel.x0, panel.y0, panel.w, panel.h
            );
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">x{}</text>", 10.0, panel.y0 + panel.h / 2.0, j + 1);
            let mut band = panel.points(&hi);
            let mut lower = panel.points(&lo);
            lower.reverse();
            band.extend(lower);
            let _ = writeln!(svg, "<polygon points=\"{}\" fill=\"#f4a582\" fill-opacity=\"0.5\" stroke=\"none\"/>", join(&band));
            let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>", join(&panel.points(&truth)));
            let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"#b2182b\" stroke-width=\"1\"/>", join(&panel.points(&m)));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    len: usize,
    ymin: f64,
    ymax: f64,
}

impl Panel {
    fn points(&self, v: &[f64]) -> Vec<(f64, f64)> {
        let span = (self.len.max(2) - 1) as f64;
        v.iter()
            .enumerate()
            .map(|(t, y)| {
                let y = y.clamp(self.ymin, self.ymax);
                (
                    self.x0 + self.w * t as f64 / span,
                    self.y0 + self.h * (1.0 - (y - self.ymin) / (self.ymax - self.ymin)),
                )
            })
            .collect()
    }
}

fn join(points: &[(f64, f64)]) -> String {
    points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect::<Vec<_>>().join(" ")
}

/// Run `method` on test trajectory `index` at `smnr_db`. Learned methods need
/// an existing checkpoint.
pub fn dump_trajectory(cfg: &ExperimentConfig, method: Method, smnr_db: f64, index: usize) -> Result<Dump> {
    let spec = process_spec(cfg)?;
    let point = PointData::load(cfg, &spec, smnr_db)?;
    let params = if method.is_learned() {
        Some(learned_params(cfg, method, &point, CheckpointPolicy::Require)?)
    } else {
        None
    };
    let output = run_one(cfg, method, &spec, params.as_ref(), &point.test, index)?;
    let item = &point.test.items[index];
    Ok(Dump {
        states: item.states.states.clone(),
        measurements: item.measurements.measurements.clone(),
        output,
    })
}

pub fn dump_path(cfg: &ExperimentConfig, method: Method, smnr_db: f64, index: usize, ext: &str) -> PathBuf {
    cfg.output_dir
        .join("dumps")
        .join(format!("{}_smnr{}_traj{index}.{ext}", method.name(), format_db(smnr_db)))
}

/// Write the CSV (and SVG when asked); returns the paths written.
pub fn write_dump(dump: &Dump, csv: &Path, svg: Option<&Path>) -> Result<Vec<PathBuf>> {
    write_atomic(csv, dump.to_csv()?.as_bytes())?;
    let mut written = vec![csv.to_path_buf()];
    if let Some(p) = svg {
        write_atomic(p, dump.to_svg().as_bytes())?;
        written.push(p.to_path_buf());
    }
    Ok(written)
}
