//! Exact Bayes recursion for the Bernoulli TBD model on a discretized state
//! space, used as a reference for the particle filter.
//!
//! States are lattice points `(cell, velocity, mode)` with positions at cell
//! centers, plus one absorbing "outside the grid" bucket whose likelihood
//! ratio is 1 (the same convention the filter uses for off-grid particles).
//! The dynamics kernel integrates the Gaussian process noise over
//! destination lattice points with the midpoint rule.

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::models::{ExistenceModel, ModeChain, MotionMode, SensorModel, Spread};

/// Largest lattice the oracle will enumerate.
pub const MAX_STATES: usize = 1_000_000;

/// Kernel entries below this probability are dropped.
const PRUNE: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct OracleModel {
    pub sensor: SensorModel,
    pub velocities: Vec<[f64; 2]>,
    pub modes: Vec<MotionMode>,
    pub mode_chain: ModeChain,
    pub existence: ExistenceModel,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    /// Mass per lattice state conditioned on `E_k = 1` (excluding `outside`).
    pub density: Vec<f64>,
    /// Conditional mass of the off-grid bucket.
    pub outside: f64,
    /// `p(E_k = 1 | Z^k)`.
    pub presence: f64,
}

impl GridPosterior {
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() + self.outside
    }
}

#[derive(Debug, Clone)]
struct Transition {
    dest: Vec<(u32, f64)>,
    outside: f64,
}

#[derive(Debug, Clone)]
pub struct GridOracle {
    model: OracleModel,
    cells: usize,
    /// `kernels[mode][cell * V + velocity]`.
    kernels: Vec<Vec<Transition>>,
    birth: Vec<f64>,
}

impl GridOracle {
    pub fn new(model: OracleModel) -> Result<Self> {
        model.sensor.validate()?;
        model.existence.validate()?;
        if !matches!(model.sensor.spread, Spread::Point) {
            return Err(Error::Usage(
                "the grid oracle supports point targets only".into(),
            ));
        }
        if model.velocities.is_empty() {
            return Err(Error::Usage(
                "oracle needs at least one velocity bin".into(),
            ));
        }
        if model.modes.len() != model.mode_chain.len() {
            return Err(Error::config(
                "oracle.modes",
                "mode count does not match the chain",
            ));
        }
        if !(model.step > 0.0) {
            return Err(Error::config("oracle.step", "must be > 0"));
        }
        let cells = model.sensor.width * model.sensor.height;
        let states = cells
            .checked_mul(model.velocities.len())
            .and_then(|v| v.checked_mul(model.modes.len()))
            .unwrap_or(usize::MAX);
        if states > MAX_STATES {
            return Err(Error::Usage(format!(
                "oracle lattice has {states} states, limit is {MAX_STATES}"
            )));
        }
        let kernels = model
            .modes
            .iter()
            .map(|mode| build_kernel(&model, mode))
            .collect::<Result<Vec<_>>>()?;

        let n_v = model.velocities.len();
        let mut birth = vec![0.0; states];
        for (r, &pr) in model.mode_chain.initial().iter().enumerate() {
            let mass = pr / (cells * n_v) as f64;
            for s in 0..cells * n_v {
                birth[r * cells * n_v + s] = mass;
            }
        }
        Ok(Self {
            model,
            cells,
            kernels,
            birth,
        })
    }

    pub fn model(&self) -> &OracleModel {
        &self.model
    }

    pub fn state_count(&self) -> usize {
        self.birth.len()
    }

    /// Uniform birth density and presence `μ₁`.
    pub fn initial(&self) -> GridPosterior {
        GridPosterior {
            density: self.birth.clone(),
            outside: 0.0,
            presence: self.model.existence.mu1,
        }
    }

    fn per_mode(&self) -> usize {
        self.cells * self.model.velocities.len()
    }

    /// Decodes a lattice index into `(col, row, velocity index, mode)`.
    pub fn decode(&self, index: usize) -> (usize, usize, usize, usize) {
        let per_mode = self.per_mode();
        let mode = index / per_mode;
        let rem = index % per_mode;
        let cell = rem / self.model.velocities.len();
        let v = rem % self.model.velocities.len();
        (
            cell % self.model.sensor.width,
            cell / self.model.sensor.width,
            v,
            mode,
        )
    }

    /// Survival prediction: mode transition, then the mode's dynamics kernel.
    pub fn predict(&self, posterior: &GridPosterior) -> GridPosterior {
        let per_mode = self.per_mode();
        let m = self.model.modes.len();
        let tpm = self.model.mode_chain.tpm();
        let mut predicted = vec![0.0; posterior.density.len()];
        let mut outside = posterior.outside;
        let mut mixed = vec![0.0; per_mode];
        for to in 0..m {
            mixed.iter_mut().for_each(|v| *v = 0.0);
            for (from, row) in tpm.iter().enumerate() {
                let p = row[to];
                if p == 0.0 {
                    continue;
                }
                let src = &posterior.density[from * per_mode..(from + 1) * per_mode];
                for (acc, &mass) in mixed.iter_mut().zip(src) {
                    *acc += p * mass;
                }
            }
            let dst = &mut predicted[to * per_mode..(to + 1) * per_mode];
            for (s, &mass) in mixed.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let t = &self.kernels[to][s];
                for &(d, p) in &t.dest {
                    dst[d as usize] += mass * p;
                }
                outside += mass * t.outside;
            }
        }
        GridPosterior {
            density: predicted,
            outside,
            presence: posterior.presence,
        }
    }

    fn log_ratios(&self, frame: &Frame) -> Result<Vec<f64>> {
        let sensor = &self.model.sensor;
        if frame.width() != sensor.width || frame.height() != sensor.height {
            return Err(Error::Usage(format!(
                "frame {}x{} does not match the oracle grid {}x{}",
                frame.width(),
                frame.height(),
                sensor.width,
                sensor.height
            )));
        }
        let sigma = sensor.noise_sigma;
        let h = sensor.nominal_intensity;
        frame
            .pixels()
            .iter()
            .map(|&z| crate::models::log_pixel_likelihood_ratio(z, h, sigma))
            .collect()
    }

    /// One exact recursion on `frame`.
    pub fn step(&self, frame: &Frame, posterior: &GridPosterior) -> Result<GridPosterior> {
        let e = &self.model.existence;
        let p = posterior.presence;
        let log_lr = self.log_ratios(frame)?;
        // scale every ratio by exp(-shift) so that all of them are <= 1
        let shift = log_lr.iter().cloned().fold(0.0, f64::max);
        let scaled: Vec<f64> = log_lr.iter().map(|l| (l - shift).exp()).collect();
        let outside_lr = (-shift).exp();
        let n_v = self.model.velocities.len();
        let lr_of = |index: usize| scaled[(index % self.per_mode()) / n_v];

        let predicted = self.predict(posterior);
        // survival evidence: ∫ L(x) p(x | E_k = 1, E_{k-1} = 1, Z^{k-1}) dx
        let mut l_survival = predicted.outside * outside_lr;
        let mut l_birth = 0.0;
        for (s, (&pred, &born)) in predicted.density.iter().zip(&self.birth).enumerate() {
            let lr = lr_of(s);
            l_survival += pred * lr;
            l_birth += born * lr;
        }

        let a = l_survival * (1.0 - e.p_death) * p;
        let b = l_birth * e.p_birth * (1.0 - p);
        let c = (e.p_death * p + (1.0 - e.p_birth) * (1.0 - p)) * outside_lr;
        if a + b + c == 0.0 {
            return Err(Error::DegeneratePresence);
        }
        let presence = ((a + b) / (a + b + c)).clamp(0.0, 1.0);

        let (density, outside) = if a + b > 0.0 {
            // posterior switch probabilities p(E_{k-1} | E_k = 1, Z^k)
            let w_surv = a / (a + b);
            let w_birth = b / (a + b);
            let mut density = vec![0.0; predicted.density.len()];
            for (s, slot) in density.iter_mut().enumerate() {
                let lr = lr_of(s);
                let surv = if l_survival > 0.0 {
                    predicted.density[s] * lr / l_survival
                } else {
                    0.0
                };
                let born = if l_birth > 0.0 {
                    self.birth[s] * lr / l_birth
                } else {
                    0.0
                };
                *slot = w_surv * surv + w_birth * born;
            }
            let outside = if l_survival > 0.0 {
                w_surv * predicted.outside * outside_lr / l_survival
            } else {
                0.0
            };
            (density, outside)
        } else {
            let ws = (1.0 - e.p_death) * p;
            let wb = e.p_birth * (1.0 - p);
            let (ws, wb) = if ws + wb > 0.0 {
                (ws / (ws + wb), wb / (ws + wb))
            } else {
                (0.5, 0.5)
            };
            let density = predicted
                .density
                .iter()
                .zip(&self.birth)
                .map(|(&pr, &bo)| ws * pr + wb * bo)
                .collect();
            (density, ws * predicted.outside)
        };
        let mut post = GridPosterior {
            density,
            outside,
            presence,
        };
        renormalize(&mut post);
        Ok(post)
    }

    /// Posterior mean position over in-grid states, or `None` if all mass is
    /// off the grid.
    pub fn mean_position(&self, posterior: &GridPosterior) -> Option<(f64, f64)> {
        let sensor = &self.model.sensor;
        let mut total = 0.0;
        let (mut x, mut y) = (0.0, 0.0);
        for (s, &mass) in posterior.density.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (col, row, _, _) = self.decode(s);
            x += mass * (col as f64 + 0.5) * sensor.cell_dx;
            y += mass * (row as f64 + 0.5) * sensor.cell_dy;
            total += mass;
        }
        (total > 0.0).then(|| (x / total, y / total))
    }

    /// Marginal mass per cell (row-major).
    pub fn cell_marginal(&self, posterior: &GridPosterior) -> Vec<f64> {
        let n_v = self.model.velocities.len();
        let mut out = vec![0.0; self.cells];
        for (s, &mass) in posterior.density.iter().enumerate() {
            out[(s % self.per_mode()) / n_v] += mass;
        }
        out
    }
}

fn renormalize(post: &mut GridPosterior) {
    let total = post.total_mass();
    if total > 0.0 && (total - 1.0).abs() > 0.0 {
        post.density.iter_mut().for_each(|v| *v /= total);
        post.outside /= total;
    }
}

fn build_kernel(model: &OracleModel, mode: &MotionMode) -> Result<Vec<Transition>> {
    let sensor = &model.sensor;
    let (w, h) = (sensor.width as i64, sensor.height as i64);
    let (dx, dy) = (sensor.cell_dx, sensor.cell_dy);
    let q = mode.process_noise_cov + Matrix4::from_diagonal_element(1e-9);
    let q_inv: Matrix4<f64> = q
        .try_inverse()
        .ok_or_else(|| Error::config("oracle.modes", "process noise not invertible"))?;
    let reach_x = (4.0 * q[(0, 0)].sqrt() / dx).ceil() as i64 + 1;
    let reach_y = (4.0 * q[(2, 2)].sqrt() / dy).ceil() as i64 + 1;
    let f = mode.transition_matrix(model.step);
    let n_v = model.velocities.len();

    let mut kernel = Vec::with_capacity(sensor.width * sensor.height * n_v);
    let mut candidates: Vec<(Option<u32>, f64)> = Vec::new();
    for row in 0..h {
        for col in 0..w {
            for v in &model.velocities {
                let x = Vector4::new((col as f64 + 0.5) * dx, v[0], (row as f64 + 0.5) * dy, v[1]);
                let mean = f * x;
                let mc = (mean[0] / dx).floor() as i64;
                let mr = (mean[2] / dy).floor() as i64;
                candidates.clear();
                for dr in -reach_y..=reach_y {
                    for dc in -reach_x..=reach_x {
                        let (c2, r2) = (mc + dc, mr + dr);
                        for (vi, v2) in model.velocities.iter().enumerate() {
                            let dest = Vector4::new(
                                (c2 as f64 + 0.5) * dx,
                                v2[0],
                                (r2 as f64 + 0.5) * dy,
                                v2[1],
                            );
                            let d = dest - mean;
                            let log_w = -0.5 * (d.transpose() * q_inv * d)[0];
                            let inside = c2 >= 0 && r2 >= 0 && c2 < w && r2 < h;
                            let index = inside.then(|| ((r2 * w + c2) as usize * n_v + vi) as u32);
                            candidates.push((index, log_w));
                        }
                    }
                }
                let max = candidates
                    .iter()
                    .map(|c| c.1)
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = candidates.iter().map(|c| (c.1 - max).exp()).sum();
                let mut t = Transition {
                    dest: Vec::new(),
                    outside: 0.0,
                };
                for &(index, log_w) in &candidates {
                    let p = (log_w - max).exp() / total;
                    if p < PRUNE {
                        continue;
                    }
                    match index {
                        Some(i) => t.dest.push((i, p)),
                        None => t.outside += p,
                    }
                }
                let kept: f64 = t.dest.iter().map(|d| d.1).sum::<f64>() + t.outside;
                t.dest.iter_mut().for_each(|d| d.1 /= kept);
                t.outside /= kept;
                kernel.push(t);
            }
        }
    }
    Ok(kernel)
}

/// Presence from exact evidence integrals via the unnormalized
/// presence/absence pair `L_s (1 − p_d) p + L_b p_b (1 − p)` and
/// `p_d p + (1 − p_b)(1 − p)`.
pub fn presence_from_likelihoods(
    survival_likelihood: f64,
    birth_likelihood: f64,
    p_prev: f64,
    existence: &ExistenceModel,
) -> f64 {
    let present = survival_likelihood * (1.0 - existence.p_death) * p_prev
        + birth_likelihood * existence.p_birth * (1.0 - p_prev);
    let absent = existence.p_death * p_prev + (1.0 - existence.p_birth) * (1.0 - p_prev);
    present / (present + absent)
}

/// Iterates [`GridOracle::step`] over `frames` and returns every `p_k`.
pub fn oracle_presence_series(oracle: &GridOracle, frames: &[Frame]) -> Result<Vec<f64>> {
    let mut post = oracle.initial();
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        post = oracle.step(frame, &post)?;
        out.push(post.presence);
    }
    Ok(out)
}
