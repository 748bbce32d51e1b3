//! Run artifacts on disk.
//!
//! | file | content |
//! |------|---------|
//! | `steps.jsonl` | one [`StepRecord`] per line |
//! | `fields_t<k>.csv` | unified field at step `k` |
//! | `benefit_t<k>.csv`, `risk_t<k>.csv` | benefit and risk fields at step `k` |
//! | `convergence.jsonl` | one line per best-response iteration |
//! | `safety.json` | [`SafetyReport`] |
//! | `scenario.resolved.toml` | effective scenario |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use upf_core::fieldgrid::{GridSpec, ScalarField};
use serde::{Deserialize, Serialize};

use crate::run::{RunLog, SafetyReport, StepRecord};
use crate::SimError;

pub const STEPS_FILE: &str = "steps.jsonl";
pub const CONVERGENCE_FILE: &str = "convergence.jsonl";
pub const SAFETY_FILE: &str = "safety.json";
pub const SCENARIO_FILE: &str = "scenario.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleCost {
    pub id: u32,
    pub cost: f64,
}

/// One line of `convergence.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub step: usize,
    pub t_s: f64,
    pub iteration: usize,
    pub w2_gap: f64,
    pub w2_to_final: f64,
    pub rho_hat: Option<f64>,
    pub converged: bool,
    pub costs: Vec<VehicleCost>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: PathBuf, content: &str) -> Result<(), SimError> {
    fs::write(&path, content).map_err(io_err(&path))
}

/// `%.9g`-style rendering.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// CSV with header `s,d,value`, rows ordered by `s` then `d`.
pub fn field_to_csv(f: &ScalarField) -> String {
    let spec = f.spec;
    let mut out = String::with_capacity(spec.len() * 32);
    out.push_str("s,d,value\n");
    for i in 0..spec.n_s {
        for j in 0..spec.n_d {
            let _ = writeln!(
                out,
                "{},{},{}",
                format_sig9(spec.s_at(i)),
                format_sig9(spec.d_at(j)),
                format_sig9(f.at(i, j))
            );
        }
    }
    out
}

/// Inverse of [`field_to_csv`]; the grid is recovered from the coordinates.
pub fn field_from_csv(text: &str) -> Result<ScalarField, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("s,d,value") {
        return Err("missing `s,d,value` header".into());
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 2))?;
        if cols.len() != 3 {
            return Err(format!("line {}: expected 3 columns", n + 2));
        }
        rows.push((cols[0], cols[1], cols[2]));
    }
    let first_s = rows.first().ok_or("no data rows")?.0;
    let n_d = rows.iter().take_while(|r| r.0 == first_s).count();
    if n_d < 2 || rows.len() % n_d != 0 {
        return Err("rows do not form a rectangular grid".into());
    }
    let n_s = rows.len() / n_d;
    let spec = GridSpec::new(rows[0].0, rows[rows.len() - 1].0, rows[0].1, rows[n_d - 1].1, n_s, n_d)
        .map_err(|e| e.to_string())?;
    ScalarField::from_values(spec, rows.into_iter().map(|r| r.2).collect()).map_err(|e| e.to_string())
}

pub fn steps_to_jsonl(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn convergence_records(log: &RunLog) -> Vec<ConvergenceRecord> {
    let mut out = Vec::new();
    for entry in &log.convergence {
        let rep = &entry.report;
        for (i, gap) in rep.gaps.iter().enumerate() {
            out.push(ConvergenceRecord {
                step: entry.step,
                t_s: entry.t_s,
                iteration: i + 1,
                w2_gap: *gap,
                w2_to_final: rep.distances_to_final[i],
                rho_hat: rep.rho_hat,
                converged: rep.converged,
                costs: entry
                    .ids
                    .iter()
                    .zip(&rep.costs[i])
                    .map(|(&id, &cost)| VehicleCost { id, cost })
                    .collect(),
            });
        }
    }
    out
}

pub fn write_fields(dir: &Path, names: [&str; 3], fields: [&ScalarField; 3]) -> Result<(), SimError> {
    for (name, f) in names.iter().zip(fields) {
        write(dir.join(name), &field_to_csv(f))?;
    }
    Ok(())
}

/// Write every artifact of `log` into `dir`, creating it if needed.
pub fn export_run(log: &RunLog, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(dir.join(STEPS_FILE), &steps_to_jsonl(&log.records))?;
    for snap in &log.snapshots {
        let k = snap.step;
        write_fields(
            dir,
            [&format!("fields_t{k}.csv"), &format!("benefit_t{k}.csv"), &format!("risk_t{k}.csv")],
            [&snap.phi, &snap.benefit, &snap.risk],
        )?;
    }
    let mut conv = String::new();
    for rec in convergence_records(log) {
        conv.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        conv.push('\n');
    }
    write(dir.join(CONVERGENCE_FILE), &conv)?;
    let safety = serde_json::to_string_pretty(&log.safety()).expect("report serializes");
    write(dir.join(SAFETY_FILE), &(safety + "\n"))?;
    write(dir.join(SCENARIO_FILE), &log.scenario.to_toml_string())?;
    Ok(())
}

/// Parsed contents of an exported run directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub steps: Vec<StepRecord>,
    pub convergence: Vec<ConvergenceRecord>,
    pub safety: SafetyReport,
}

fn read(path: &Path) -> Result<String, SimError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SimError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| SimError::Artifact {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}

pub fn read_run(dir: &Path) -> Result<RunArtifacts, SimError> {
    let steps = parse_jsonl(&dir.join(STEPS_FILE))?;
    let convergence = parse_jsonl(&dir.join(CONVERGENCE_FILE))?;
    let path = dir.join(SAFETY_FILE);
    let safety = serde_json::from_str(&read(&path)?).map_err(|e| SimError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(RunArtifacts {
        steps,
        convergence,
        safety,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(600.0), "600");
        assert_eq!(format_sig9(-8.0), "-8");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(2.0 / 3.0 * 1e-7), "6.66666667e-8");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567894.0), "1.23456789e9");
        assert_eq!(format_sig9(9.9999999996), "10");
    }

    #[test]
    fn csv_round_trip() {
        let spec = GridSpec::new(0.0, 600.0, -8.0, 8.0, 7, 4).unwrap();
        let f = ScalarField::from_fn(spec, |s, d| s * 1e-3 - d / 7.0);
        let text = field_to_csv(&f);
        assert!(text.starts_with("s,d,value\n0,-8,"));
        assert_eq!(text.lines().count(), 1 + 28);
        let back = field_from_csv(&text).unwrap();
        assert_eq!(back.spec.n_s, 7);
        assert_eq!(back.spec.n_d, 4);
        for (a, b) in back.values.iter().zip(&f.values) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }
}
