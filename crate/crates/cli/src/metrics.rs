//! Stress error metrics and the CSV records written by the commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use apcms_core::fem::vtk::VtkField;
use apcms_core::synthesis::Timing;
use apcms_core::{Error, Result};

/// One sweep point: errors of the reduced solve against the oracle plus the
/// reduced solve's timing breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub theta: f64,
    pub rrmse: f64,
    pub re_max: f64,
    pub n_sc: usize,
    pub fe_dofs: usize,
    pub buffer_s: f64,
    pub bubble_s: f64,
    pub solve_s: f64,
    pub total_s: f64,
}

impl MetricsRecord {
    pub fn new(theta: f64, errors: StressErrors, n_sc: usize, fe_dofs: usize, timing: &Timing) -> Self {
        Self {
            theta,
            rrmse: errors.rrmse,
            re_max: errors.re_max,
            n_sc,
            fe_dofs,
            buffer_s: timing.buffer_mesh_generation_s,
            bubble_s: timing.bubble_function_s,
            solve_s: timing.solution_computation_s,
            total_s: timing.total_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressErrors {
    pub rrmse: f64,
    pub re_max: f64,
}

fn norm2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative 2-norm error and relative error of the maximum of `a` against
/// the reference `b`, both per-element stresses on the same mesh.
pub fn stress_errors(a: &[f64], b: &[f64]) -> Result<StressErrors> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "stress fields have {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    let nb = norm2(b.iter().copied());
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (ma, mb) = (max(a), max(b));
    if !(nb > 0.0 && mb > 0.0) {
        return Err(Error::Config("reference stress field is identically zero".into()));
    }
    Ok(StressErrors {
        rrmse: norm2(a.iter().zip(b).map(|(x, y)| x - y)) / nb,
        re_max: (ma - mb).abs() / mb,
    })
}

/// Errors between two fields that must live on the same mesh.
pub fn compare_fields(a: &VtkField, b: &VtkField) -> Result<StressErrors> {
    if a.cells != b.cells || a.points.len() != b.points.len() {
        return Err(Error::Config("compared fields live on different meshes".into()));
    }
    let scale = b
        .points
        .iter()
        .map(|p| p[0].abs().max(p[1].abs()))
        .fold(1.0f64, f64::max);
    let moved = a
        .points
        .iter()
        .zip(&b.points)
        .any(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()) > 1e-12 * scale);
    if moved {
        return Err(Error::Config("compared fields have different node positions".into()));
    }
    stress_errors(&a.von_mises, &b.von_mises)
}

/// Relative Euclidean distance of `a` from the reference `b`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let nb = norm2(b.iter().copied());
    let d = norm2(a.iter().zip(b).map(|(x, y)| x - y));
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

/// Averages of reduced and oracle timings with the speed-up factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: &'static str,
    pub n_dofs: f64,
    pub buffer_s: f64,
    pub bubble_s: f64,
    pub solve_s: f64,
    pub total_s: f64,
    pub rrmse: f64,
    pub re_max: f64,
    pub speedup: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Summary table: one row for the reduced model and one for the oracle.
/// The reduced row's speed-up is mean oracle total over mean reduced total.
pub fn summarize(records: &[MetricsRecord], oracle: &[Timing]) -> [SummaryRow; 2] {
    let rom_total = mean(records.iter().map(|r| r.total_s));
    let fe_total = mean(oracle.iter().map(|t| t.total_s));
    [
        SummaryRow {
            method: "rom",
            n_dofs: mean(records.iter().map(|r| r.n_sc as f64)),
            buffer_s: mean(records.iter().map(|r| r.buffer_s)),
            bubble_s: mean(records.iter().map(|r| r.bubble_s)),
            solve_s: mean(records.iter().map(|r| r.solve_s)),
            total_s: rom_total,
            rrmse: mean(records.iter().map(|r| r.rrmse)),
            re_max: mean(records.iter().map(|r| r.re_max)),
            speedup: if rom_total > 0.0 { fe_total / rom_total } else { 0.0 },
        },
        SummaryRow {
            method: "fe",
            n_dofs: mean(records.iter().map(|r| r.fe_dofs as f64)),
            buffer_s: mean(oracle.iter().map(|t| t.buffer_mesh_generation_s)),
            bubble_s: 0.0,
            solve_s: mean(oracle.iter().map(|t| t.solution_computation_s)),
            total_s: fe_total,
            rrmse: 0.0,
            re_max: 0.0,
            speedup: 1.0,
        },
    ]
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::parse(path, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_fields_have_zero_error() {
        let s = [1.0, 3.0, 2.0];
        let e = stress_errors(&s, &s).unwrap();
        assert_eq!((e.rrmse, e.re_max), (0.0, 0.0));
    }

    #[test]
    fn uniform_scaling_gives_the_scale_excess() {
        let b = [0.5, 2.0, 1.25, 4.0];
        let a: Vec<f64> = b.iter().map(|x| 1.01 * x).collect();
        let e = stress_errors(&a, &b).unwrap();
        assert!((e.rrmse - 0.01).abs() < 1e-14);
        assert!((e.re_max - 0.01).abs() < 1e-14);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(stress_errors(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn speedup_is_ratio_of_mean_totals() {
        let t = |total| Timing {
            total_s: total,
            ..Timing::default()
        };
        let rec = |total| MetricsRecord::new(0.0, StressErrors { rrmse: 0.0, re_max: 0.0 }, 1, 10, &t(total));
        let [rom, fe] = summarize(&[rec(1.0), rec(3.0)], &[t(30.0), t(50.0)]);
        assert_eq!(rom.speedup, 20.0);
        assert_eq!(fe.total_s, 40.0);
    }
}
