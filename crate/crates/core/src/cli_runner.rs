//! Command implementations behind the `tbd` binary: simulation, Monte Carlo
//! tracking, grid-oracle comparison and metric aggregation.
//!
//! Every command is a pure function of its [`RunManifest`]. Each run draws
//! from its own ChaCha8 streams keyed by `(seed, run, stream)`, so outputs do
//! not depend on the worker count.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunSpec;
use crate::error::{Error, Result};
use crate::eval_metrics::{metrics_table, save_metrics, RunRecord, StepRecord};
use crate::frame::Frame;
use crate::grid_oracle::{GridOracle, OracleModel};
use crate::models::snr_db;
use crate::pgm::{Pgm, PgmEncoding};
use crate::preprocess::Preprocessor;
use crate::scene_sim::{GroundTruth, Scene};
use crate::tbd_filter::{BirthVelocity, FilterConfig, TbdFilter};

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    /// Spec file path or preset name.
    pub scenario: String,
    /// Optional `[filter]` / `[preprocess]` override file.
    pub filter: Option<PathBuf>,
    pub seed: u64,
    pub runs: usize,
    pub out: PathBuf,
    pub dump_frames: bool,
    /// Use the estimated residual noise level in the measurement model.
    pub auto_sigma: bool,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
}

impl RunManifest {
    pub fn new(scenario: impl Into<String>, out: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            filter: None,
            seed: 0,
            runs: 1,
            out: out.into(),
            dump_frames: false,
            auto_sigma: false,
            threads: None,
        }
    }

    pub fn load_spec(&self) -> Result<RunSpec> {
        if self.runs == 0 {
            return Err(Error::config("runs", "must be >= 1"));
        }
        let mut spec = RunSpec::load(&self.scenario)?;
        if let Some(path) = &self.filter {
            spec.apply_override(path)?;
        }
        Ok(spec)
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(Error::config("threads", "must be >= 1"));
            }
            builder = builder.num_threads(n);
        }
        builder
            .build()
            .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))
    }
}

/// SplitMix64 finalizer over `(master, run, stream)`.
pub fn derive_seed(master: u64, run: u64, stream: u64) -> u64 {
    let mut z = master
        ^ run.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SCENE_STREAM: u64 = 0;
const FILTER_STREAM: u64 = 1;

fn rng_for(master: u64, run: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, run as u64, stream))
}

fn io_create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(io_create(path)?);
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TruthRow {
    step: usize,
    present: bool,
    px: Option<f64>,
    vx: Option<f64>,
    py: Option<f64>,
    vy: Option<f64>,
}

const TRUTH_HEADER: [&str; 6] = ["step", "present", "px", "vx", "py", "vy"];

fn truth_rows(truth: &GroundTruth) -> Vec<TruthRow> {
    truth
        .states()
        .iter()
        .enumerate()
        .map(|(step, s)| TruthRow {
            step,
            present: s.is_some(),
            px: s.map(|s| s.px),
            vx: s.map(|s| s.vx),
            py: s.map(|s| s.py),
            vy: s.map(|s| s.vy),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ScaleRow {
    step: usize,
    lo: f64,
    hi: f64,
}

/// Writes 16-bit PGMs scaled per frame onto `[min, max]`, plus a
/// `scale.csv` to undo the scaling.
fn dump_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scales = Vec::with_capacity(frames.len());
    for frame in frames {
        let lo = frame.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = frame
            .pixels()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let pgm = Pgm::from_frame(frame, lo, hi, u16::MAX);
        pgm.write(
            &dir.join(format!("frame_{:04}.pgm", frame.step)),
            PgmEncoding::Raw,
        )?;
        scales.push(ScaleRow {
            step: frame.step,
            lo,
            hi,
        });
    }
    write_rows(&dir.join("scale.csv"), &["step", "lo", "hi"], &scales)
}

/// Renders run 0 of the scenario: `frames/frame_XXXX.pgm` and `truth.csv`.
pub fn cmd_simulate(manifest: &RunManifest) -> Result<()> {
    let spec = manifest.load_spec()?;
    manifest.prepare_out()?;
    let scene = Scene::new(spec.scenario)?;
    let (truth, frames) = scene.simulate(&mut rng_for(manifest.seed, 0, SCENE_STREAM))?;
    dump_frames(&manifest.out.join("frames"), &frames)?;
    write_rows(
        &manifest.out.join("truth.csv"),
        &TRUTH_HEADER,
        &truth_rows(&truth),
    )?;
    log::info!(
        "wrote {} frames of {}x{} to {}",
        frames.len(),
        scene.config.width,
        scene.config.height,
        manifest.out.display()
    );
    Ok(())
}

/// Simulated and conditioned input for one Monte Carlo run.
struct PreparedRun {
    truth: GroundTruth,
    processed: Vec<Frame>,
    mean_noise_variance: f64,
    filter: FilterConfig,
}

fn prepare_run(
    spec: &RunSpec,
    scene: &Scene,
    master: u64,
    run: usize,
    auto_sigma: bool,
) -> Result<PreparedRun> {
    let (truth, frames) = scene.simulate(&mut rng_for(master, run, SCENE_STREAM))?;
    let pre = Preprocessor::new(spec.preprocess.clone(), &frames)?;
    let mut variances = Vec::with_capacity(frames.len());
    let mut processed = Vec::with_capacity(frames.len());
    for frame in &frames {
        let p = pre.process(frame)?;
        variances.push(p.noise_variance);
        processed.push(p.frame);
    }
    let mean_noise_variance = if variances.is_empty() {
        f64::NAN
    } else {
        variances.iter().sum::<f64>() / variances.len() as f64
    };
    let sigma = (auto_sigma && mean_noise_variance > 0.0).then(|| mean_noise_variance.sqrt());
    let filter = spec.filter_config(sigma)?;
    Ok(PreparedRun {
        truth,
        processed,
        mean_noise_variance,
        filter,
    })
}

fn track_run(
    spec: &RunSpec,
    prepared: &PreparedRun,
    master: u64,
    run: usize,
) -> Result<(RunRecord, Vec<f64>)> {
    let mut record = RunRecord::new(
        spec.scenario.name.clone(),
        derive_seed(master, run as u64, 0),
    );
    let mut presence = Vec::with_capacity(prepared.processed.len());
    let Some(first) = prepared.processed.first() else {
        return Ok((record, presence));
    };
    let mut rng = rng_for(master, run, FILTER_STREAM);
    let mut filter = TbdFilter::new(prepared.filter.clone(), first, &mut rng)?;
    for (k, frame) in prepared.processed.iter().enumerate() {
        let out = filter.step(frame, &mut rng)?;
        let truth = prepared.truth.state(k);
        let est = out.estimate.as_ref();
        presence.push(out.presence);
        record.steps.push(StepRecord {
            scenario: record.scenario.clone(),
            seed: record.seed,
            step: k,
            truth_present: truth.is_some(),
            truth_px: truth.map(|s| s.px),
            truth_py: truth.map(|s| s.py),
            presence: out.presence,
            detected: out.detected,
            est_px: est.map(|s| s.px),
            est_py: est.map(|s| s.py),
            est_vx: est.map(|s| s.vx),
            est_vy: est.map(|s| s.vy),
            ess: out.effective_sample_size,
        });
    }
    Ok((record, presence))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TrackSummary {
    scenario: String,
    runs: usize,
    seed: u64,
    frame_count: usize,
    snr_before_db: f64,
    snr_after_db: f64,
    mean_noise_variance: f64,
    filter_sigma: f64,
    filter_intensity: f64,
    mean_detect_prob_present: Option<f64>,
    mean_detect_prob_absent: Option<f64>,
}

/// Summary of a tracking experiment.
#[derive(Debug, Clone)]
pub struct TrackReport {
    pub records: Vec<RunRecord>,
    pub metrics: Vec<crate::eval_metrics::MetricsRow>,
}

/// Monte Carlo tracking: writes `run_XXXX.csv` per run, `metrics.csv` and
/// `summary.csv`; with `dump_frames`, run 0's conditioned frames go to
/// `processed/`.
pub fn cmd_track(manifest: &RunManifest) -> Result<TrackReport> {
    let spec = manifest.load_spec()?;
    manifest.prepare_out()?;
    let scene = Scene::new(spec.scenario.clone())?;
    let pool = manifest.pool()?;
    let results: Vec<(RunRecord, f64, FilterConfig)> = pool.install(|| {
        (0..manifest.runs)
            .into_par_iter()
            .map(|run| {
                let prepared = prepare_run(&spec, &scene, manifest.seed, run, manifest.auto_sigma)?;
                if run == 0 && manifest.dump_frames {
                    dump_frames(&manifest.out.join("processed"), &prepared.processed)?;
                }
                let (record, _) = track_run(&spec, &prepared, manifest.seed, run)?;
                Ok((record, prepared.mean_noise_variance, prepared.filter))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    for (run, (record, _, _)) in results.iter().enumerate() {
        record.save(&manifest.out.join(format!("run_{run:04}.csv")))?;
    }
    let records: Vec<RunRecord> = results.iter().map(|r| r.0.clone()).collect();
    let metrics = metrics_table(&records)?;
    save_metrics(&metrics, &manifest.out.join("metrics.csv"))?;

    let mean_var = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let sensor = &results[0].2.sensor;
    let mean_where = |present: bool| {
        let v: Vec<f64> = metrics
            .iter()
            .filter(|m| m.truth_present == present)
            .map(|m| m.detect_prob)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = TrackSummary {
        scenario: spec.scenario.name.clone(),
        runs: manifest.runs,
        seed: manifest.seed,
        frame_count: spec.scenario.frame_count,
        snr_before_db: snr_db(
            spec.scenario.target_mean_intensity,
            spec.scenario.noise_sigma,
        ),
        snr_after_db: snr_db(sensor.nominal_intensity, mean_var.sqrt()),
        mean_noise_variance: mean_var,
        filter_sigma: sensor.noise_sigma,
        filter_intensity: sensor.nominal_intensity,
        mean_detect_prob_present: mean_where(true),
        mean_detect_prob_absent: mean_where(false),
    };
    write_rows(&manifest.out.join("summary.csv"), &[], &[summary])?;
    Ok(TrackReport { records, metrics })
}

/// Grid model matching a filter configuration, if the configuration is
/// representable on the lattice.
pub fn oracle_model(filter: &FilterConfig) -> Result<OracleModel> {
    let velocities = match &filter.birth_velocity {
        BirthVelocity::Discrete(v) => v.clone(),
        BirthVelocity::Uniform { .. } => {
            return Err(Error::Usage(
                "oracle comparison needs a discrete birth_velocity set".into(),
            ))
        }
    };
    if filter.intensity.is_some() {
        return Err(Error::Usage(
            "oracle comparison does not support intensity estimation".into(),
        ));
    }
    if filter.birth_proposal_floor > f64::NEG_INFINITY {
        return Err(Error::Usage(
            "oracle comparison needs birth_floor unset".into(),
        ));
    }
    Ok(OracleModel {
        sensor: filter.sensor.clone(),
        velocities,
        modes: filter.modes.clone(),
        mode_chain: filter.mode_chain.clone(),
        existence: filter.existence,
        step: filter.step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: usize,
    pub step: usize,
    pub p_filter: f64,
    pub p_oracle: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonSummary {
    pub runs: usize,
    pub steps: usize,
    pub max_abs_diff: Option<f64>,
    pub mean_abs_diff: Option<f64>,
}

/// Runs the particle filter and the grid recursion on the same frames and
/// writes `oracle_compare.csv` and `oracle_summary.csv`.
pub fn cmd_oracle_compare(
    manifest: &RunManifest,
) -> Result<(Vec<ComparisonRow>, ComparisonSummary)> {
    let spec = manifest.load_spec()?;
    manifest.prepare_out()?;
    let scene = Scene::new(spec.scenario.clone())?;
    let oracle = GridOracle::new(oracle_model(&spec.filter_config(None)?)?)?;
    let pool = manifest.pool()?;
    let per_run: Vec<Vec<ComparisonRow>> = pool.install(|| {
        (0..manifest.runs)
            .into_par_iter()
            .map(|run| {
                let prepared = prepare_run(&spec, &scene, manifest.seed, run, false)?;
                let (_, p_filter) = track_run(&spec, &prepared, manifest.seed, run)?;
                let p_oracle =
                    crate::grid_oracle::oracle_presence_series(&oracle, &prepared.processed)?;
                Ok(p_filter
                    .iter()
                    .zip(&p_oracle)
                    .enumerate()
                    .map(|(step, (&a, &b))| ComparisonRow {
                        run,
                        step,
                        p_filter: a,
                        p_oracle: b,
                        abs_diff: (a - b).abs(),
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<ComparisonRow> = per_run.into_iter().flatten().collect();
    let n = rows.len();
    let summary = ComparisonSummary {
        runs: manifest.runs,
        steps: spec.scenario.frame_count,
        max_abs_diff: rows.iter().map(|r| r.abs_diff).reduce(f64::max),
        mean_abs_diff: (n > 0).then(|| rows.iter().map(|r| r.abs_diff).sum::<f64>() / n as f64),
    };
    write_rows(
        &manifest.out.join("oracle_compare.csv"),
        &["run", "step", "p_filter", "p_oracle", "abs_diff"],
        &rows,
    )?;
    write_rows(
        &manifest.out.join("oracle_summary.csv"),
        &[],
        std::slice::from_ref(&summary),
    )?;
    Ok((rows, summary))
}

/// Re-aggregates every `run_*.csv` in `dir` into `dir/metrics.csv`.
pub fn cmd_metrics(dir: &Path) -> Result<Vec<crate::eval_metrics::MetricsRow>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".csv"))
        })
        .collect();
    if paths.is_empty() {
        return Err(Error::Usage(format!(
            "no run_*.csv files in {}",
            dir.display()
        )));
    }
    paths.sort();
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p))
        .collect::<Result<Vec<_>>>()?;
    let metrics = metrics_table(&records)?;
    save_metrics(&metrics, &dir.join("metrics.csv"))?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_run_and_stream() {
        let a = derive_seed(7, 0, 0);
        assert_ne!(a, derive_seed(7, 1, 0));
        assert_ne!(a, derive_seed(7, 0, 1));
        assert_ne!(a, derive_seed(8, 0, 0));
        assert_eq!(a, derive_seed(7, 0, 0));
    }

    #[test]
    fn zero_runs_is_a_config_error() {
        let mut m = RunManifest::new("oracle-small", "/nonexistent");
        m.runs = 0;
        assert!(m.load_spec().unwrap_err().is_usage());
    }

    #[test]
    fn oracle_model_requires_lattice_config() {
        let spec = RunSpec::load("scenario1").unwrap();
        assert!(oracle_model(&spec.filter_config(None).unwrap()).is_err());
        let spec = RunSpec::load("oracle-small").unwrap();
        assert!(oracle_model(&spec.filter_config(None).unwrap()).is_ok());
    }
}
