//! CSV output. Floats use Rust's shortest round-trip formatting, so equal
//! results give byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::config::SweepSpec;
use super::convergence::ConvergenceRow;
use super::sweep::SweepOutcome;
use super::twin::{CycleRecord, ExperimentResult};
use crate::error::Result;

const RESULT_COLUMNS: [&str; 6] = ["cycle", "rmse", "alpha_mean", "alpha_min", "alpha_max", "ess_mean"];

fn record_fields(r: &CycleRecord) -> [String; 6] {
    [
        r.cycle.to_string(),
        r.rmse.to_string(),
        r.alpha_mean.to_string(),
        r.alpha_min.to_string(),
        r.alpha_max.to_string(),
        r.ess_mean.to_string(),
    ]
}

pub fn write_results<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in &result.records {
        w.write_record(record_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cycle series with header `cycle,rmse,alpha_mean,alpha_min,alpha_max,ess_mean`.
pub fn emit_results(result: &ExperimentResult, path: &Path) -> Result<()> {
    write_results(result, BufWriter::new(File::create(path)?))
}

/// Per-cycle rows of every sweep job, prefixed by the swept parameters.
pub fn write_sweep<W: Write>(outcomes: &[SweepOutcome], spec: &SweepSpec, out: W) -> Result<()> {
    let mut header: Vec<&str> = Vec::new();
    if !spec.alpha.is_empty() {
        header.push("alpha");
    }
    if !spec.theta.is_empty() {
        header.push("theta");
    }
    if !spec.ensemble_size.is_empty() {
        header.push("ensemble_size");
    }
    if !spec.seed.is_empty() {
        header.push("seed");
    }
    let swept = header.len();
    header.extend(RESULT_COLUMNS);

    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    for o in outcomes {
        let mut prefix = Vec::with_capacity(swept);
        if !spec.alpha.is_empty() {
            prefix.push(opt(o.job.alpha.map(|v| v.to_string())));
        }
        if !spec.theta.is_empty() {
            prefix.push(opt(o.job.theta.map(|v| v.to_string())));
        }
        if !spec.ensemble_size.is_empty() {
            prefix.push(opt(o.job.ensemble_size.map(|v| v.to_string())));
        }
        if !spec.seed.is_empty() {
            prefix.push(opt(o.job.seed.map(|v| v.to_string())));
        }
        for r in &o.result.records {
            w.write_record(prefix.iter().cloned().chain(record_fields(r)))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_sweep(outcomes: &[SweepOutcome], spec: &SweepSpec, path: &Path) -> Result<()> {
    write_sweep(outcomes, spec, BufWriter::new(File::create(path)?))
}

/// One row per ensemble size: `ensemble_size,optimal_alpha,rmse`.
pub fn write_convergence<W: Write>(rows: &[ConvergenceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ensemble_size", "optimal_alpha", "rmse"])?;
    for r in rows {
        w.write_record([
            r.ensemble_size.to_string(),
            r.optimal_alpha.to_string(),
            r.rmse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_convergence(rows: &[ConvergenceRow], path: &Path) -> Result<()> {
    write_convergence(rows, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sweep::SweepJob;
    use std::time::Duration;

    fn result() -> ExperimentResult {
        let rec = |cycle, rmse| CycleRecord {
            cycle,
            rmse,
            alpha_mean: 0.25,
            alpha_min: 0.0,
            alpha_max: 0.5,
            ess_mean: 12.5,
        };
        ExperimentResult {
            records: vec![rec(1, 1.5), rec(2, f64::INFINITY)],
            rmse: f64::INFINITY,
            spin_up: 0,
            divergence: None,
            max_balance_residual: None,
            wall_time: Duration::from_secs(1),
        }
    }

    #[test]
    fn results_csv_layout() {
        let mut buf = Vec::new();
        write_results(&result(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "cycle,rmse,alpha_mean,alpha_min,alpha_max,ess_mean\n1,1.5,0.25,0,0.5,12.5\n2,inf,0.25,0,0.5,12.5\n"
        );
    }

    #[test]
    fn sweep_csv_adds_swept_columns() {
        let spec = SweepSpec {
            alpha: vec![0.1],
            seed: vec![4],
            ..SweepSpec::default()
        };
        let outcomes = vec![SweepOutcome {
            job: SweepJob {
                alpha: Some(0.1),
                theta: None,
                ensemble_size: None,
                seed: Some(4),
            },
            result: result(),
        }];
        let mut buf = Vec::new();
        write_sweep(&outcomes, &spec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("alpha,seed,cycle,rmse,alpha_mean,alpha_min,alpha_max,ess_mean")
        );
        assert_eq!(lines.next(), Some("0.1,4,1,1.5,0.25,0,0.5,12.5"));
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        emit_results(&result(), &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("cycle,rmse"));
    }
}
