//! Monte Carlo figures of merit: detection probability and conditional
//! position RMSE per step, plus the CSV formats used to store them.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of a run record. `truth_*` and `est_*` are empty when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub scenario: String,
    pub seed: u64,
    pub step: usize,
    pub truth_present: bool,
    pub truth_px: Option<f64>,
    pub truth_py: Option<f64>,
    pub presence: f64,
    pub detected: bool,
    pub est_px: Option<f64>,
    pub est_py: Option<f64>,
    pub est_vx: Option<f64>,
    pub est_vy: Option<f64>,
    pub ess: f64,
}

impl StepRecord {
    fn position_error(&self) -> Option<f64> {
        let (tx, ty) = (self.truth_px?, self.truth_py?);
        let (ex, ey) = (self.est_px?, self.est_py?);
        Some((ex - tx).hypot(ey - ty))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    pub fn new(scenario: impl Into<String>, seed: u64) -> Self {
        Self {
            scenario: scenario.into(),
            seed,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        if self.steps.is_empty() {
            w.write_record(RUN_HEADER)?;
        }
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a run CSV. Every row must carry the same scenario and seed and
    /// steps must be numbered `0, 1, ...`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(|e| csv_err("<input>", e))?.clone();
        if headers.iter().ne(RUN_HEADER.iter().copied()) {
            return Err(Error::Usage(format!(
                "run record header mismatch: expected {}",
                RUN_HEADER.join(",")
            )));
        }
        let mut steps: Vec<StepRecord> = Vec::new();
        for row in r.deserialize() {
            let rec: StepRecord = row.map_err(|e| csv_err("<input>", e))?;
            if rec.step != steps.len() {
                return Err(Error::Usage(format!(
                    "run record step {} out of order (expected {})",
                    rec.step,
                    steps.len()
                )));
            }
            if let Some(first) = steps.first() {
                if first.scenario != rec.scenario || first.seed != rec.seed {
                    return Err(Error::Usage("run record mixes scenarios or seeds".into()));
                }
            }
            steps.push(rec);
        }
        let (scenario, seed) = steps
            .first()
            .map(|s| (s.scenario.clone(), s.seed))
            .unwrap_or_default();
        Ok(Self {
            scenario,
            seed,
            steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| csv_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Csv { source, .. } => csv_err(path, source),
            Error::Usage(msg) => Error::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

const RUN_HEADER: [&str; 13] = [
    "scenario",
    "seed",
    "step",
    "truth_present",
    "truth_px",
    "truth_py",
    "presence",
    "detected",
    "est_px",
    "est_py",
    "est_vx",
    "est_vy",
    "ess",
];

fn csv_err(path: impl AsRef<Path>, source: csv::Error) -> Error {
    Error::Csv {
        path: path.as_ref().to_path_buf(),
        source,
    }
}

/// Checks that runs share a scenario, a length and a ground truth, and
/// returns the common length.
fn check_runs(runs: &[RunRecord]) -> Result<usize> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Usage("metrics need at least one run".into()))?;
    for run in runs {
        if run.scenario != first.scenario {
            return Err(Error::Usage(format!(
                "runs mix scenarios {:?} and {:?}",
                first.scenario, run.scenario
            )));
        }
        if run.len() != first.len() {
            return Err(Error::Usage(format!(
                "run lengths differ ({} vs {})",
                first.len(),
                run.len()
            )));
        }
        for (a, b) in run.steps.iter().zip(&first.steps) {
            if a.truth_present != b.truth_present {
                return Err(Error::Usage(format!(
                    "runs disagree on truth existence at step {}",
                    a.step
                )));
            }
        }
    }
    Ok(first.len())
}

/// Fraction of runs declaring a detection at each step.
pub fn detection_probability_curve(runs: &[RunRecord]) -> Result<Vec<f64>> {
    let len = check_runs(runs)?;
    Ok((0..len)
        .map(|k| runs.iter().filter(|r| r.steps[k].detected).count() as f64 / runs.len() as f64)
        .collect())
}

/// Position RMSE over runs that detected at each step with the target
/// present; `None` where no run contributes.
pub fn rmse_curve(runs: &[RunRecord]) -> Result<Vec<Option<f64>>> {
    let len = check_runs(runs)?;
    Ok((0..len).map(|k| rmse_at(runs, k).0).collect())
}

fn rmse_at(runs: &[RunRecord], k: usize) -> (Option<f64>, usize) {
    if !runs[0].steps[k].truth_present {
        return (None, 0);
    }
    let mut sq: Vec<f64> = runs
        .iter()
        .filter(|r| r.steps[k].detected)
        .filter_map(|r| r.steps[k].position_error())
        .map(|e| e * e)
        .collect();
    if sq.is_empty() {
        return (None, 0);
    }
    // fixed summation order keeps the result independent of run order
    sq.sort_by(f64::total_cmp);
    let n = sq.len();
    (Some((sq.iter().sum::<f64>() / n as f64).sqrt()), n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub truth_present: bool,
    pub detect_prob: f64,
    pub rmse: Option<f64>,
    /// Runs contributing to `rmse`.
    pub n_detected: usize,
}

pub fn metrics_table(runs: &[RunRecord]) -> Result<Vec<MetricsRow>> {
    let detect = detection_probability_curve(runs)?;
    Ok(detect
        .into_iter()
        .enumerate()
        .map(|(k, detect_prob)| {
            let (rmse, n_detected) = rmse_at(runs, k);
            MetricsRow {
                step: k,
                truth_present: runs[0].steps[k].truth_present,
                detect_prob,
                rmse,
                n_detected,
            }
        })
        .collect())
}

const METRICS_HEADER: [&str; 5] = ["step", "truth_present", "detect_prob", "rmse", "n_detected"];

pub fn write_metrics_csv<W: Write>(
    rows: &[MetricsRow],
    writer: W,
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| csv_err("<input>", e))?.clone();
    if headers.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Usage("metrics header mismatch".into()));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err("<input>", e)))
        .collect()
}

pub fn save_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(rows, std::io::BufWriter::new(file)).map_err(|e| csv_err(path, e))
}
