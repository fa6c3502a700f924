//! Multiple-model Bernoulli track-before-detect particle filter.
//!
//! Each step draws a newborn particle stream from a measurement-driven
//! proposal and a continuing stream from the motion models, weights both by
//! the frame likelihood ratio, updates the presence probability from the two
//! weight sums, and resamples the union back to `N_c` equally weighted
//! particles. All weight arithmetic is carried in the log domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::models::{
    propagate_unchecked, ExistenceModel, FrameLikelihood, ModeChain, MotionMode, SensorModel,
    TargetState,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: TargetState,
    pub mode: usize,
    pub weight: f64,
}

/// Velocity component of the birth proposal (and of the birth prior).
#[derive(Debug, Clone, PartialEq)]
pub enum BirthVelocity {
    /// Uniform in `[-v_max, v_max]` per axis.
    Uniform { v_max: f64 },
    /// Uniform over a fixed set of `(vx, vy)` values.
    Discrete(Vec<[f64; 2]>),
}

/// Intensity augmentation: uniform prior on `[min, max]`; newborn intensities
/// are proposed within `proposal_halfwidth` of the observed pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityPrior {
    pub min: f64,
    pub max: f64,
    pub proposal_halfwidth: f64,
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub n_continuing: usize,
    pub n_birth: usize,
    pub existence: ExistenceModel,
    pub mode_chain: ModeChain,
    pub modes: Vec<MotionMode>,
    pub sensor: SensorModel,
    /// Sampling interval `T`.
    pub step: f64,
    pub detection_threshold: f64,
    /// Minimum pixel value for a cell to enter the birth proposal support.
    pub birth_proposal_floor: f64,
    pub birth_velocity: BirthVelocity,
    pub intensity: Option<IntensityPrior>,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_continuing == 0 {
            return Err(Error::config("filter.n_continuing", "must be >= 1"));
        }
        if self.n_birth == 0 {
            return Err(Error::config("filter.n_birth", "must be >= 1"));
        }
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return Err(Error::config(
                "filter.detection_threshold",
                format!("must lie in (0, 1), got {}", self.detection_threshold),
            ));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::config("filter.step", "must be > 0"));
        }
        if self.birth_proposal_floor.is_nan() {
            return Err(Error::config("filter.birth_floor", "must not be NaN"));
        }
        self.existence.validate()?;
        self.sensor.validate()?;
        if self.modes.len() != self.mode_chain.len() {
            return Err(Error::config(
                "filter.modes",
                format!(
                    "{} modes but the mode chain has {} states",
                    self.modes.len(),
                    self.mode_chain.len()
                ),
            ));
        }
        for (i, mode) in self.modes.iter().enumerate() {
            if mode.id != i {
                return Err(Error::config(
                    "filter.modes",
                    format!("mode ids must be 0..M in order, found {} at {i}", mode.id),
                ));
            }
        }
        match &self.birth_velocity {
            BirthVelocity::Uniform { v_max } if !(*v_max >= 0.0) || !v_max.is_finite() => {
                return Err(Error::config("filter.birth_velocity.v_max", "must be >= 0"));
            }
            BirthVelocity::Discrete(values) if values.is_empty() => {
                return Err(Error::config(
                    "filter.birth_velocity.values",
                    "must be non-empty",
                ));
            }
            _ => {}
        }
        if let Some(prior) = &self.intensity {
            if !(prior.min >= 0.0 && prior.max > prior.min && prior.proposal_halfwidth > 0.0) {
                return Err(Error::config(
                    "filter.intensity",
                    "need 0 <= min < max and proposal_halfwidth > 0",
                ));
            }
        }
        Ok(())
    }
}

/// A normalized particle stream plus the log of its unnormalized weight sum.
#[derive(Debug, Clone)]
pub struct WeightedSet {
    pub particles: Vec<Particle>,
    pub log_weight_sum: f64,
}

impl WeightedSet {
    /// Normalizes `log_weights` into the particles' `weight` fields.
    fn from_log_weights(mut particles: Vec<Particle>, log_weights: &[f64]) -> Self {
        let max = log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            let uniform = 1.0 / particles.len() as f64;
            particles.iter_mut().for_each(|p| p.weight = uniform);
            return Self {
                particles,
                log_weight_sum: max,
            };
        }
        // normalize relative to the max: at |ln w| ~ 1e250 adding ln Σ is lost
        // to rounding, so `exp(lw - lse)` would not sum to one
        let scaled: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
        let total: f64 = scaled.iter().sum();
        for (p, s) in particles.iter_mut().zip(&scaled) {
            p.weight = s / total;
        }
        let log_weight_sum = max + total.ln();
        Self {
            particles,
            log_weight_sum,
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Support of the newborn proposal over one frame.
#[derive(Debug, Clone)]
pub struct BirthProposal {
    cells: Vec<(usize, usize)>,
    /// `ln(|support| / |grid|)`: the position part of `p / q`.
    log_area_ratio: f64,
    degenerate: bool,
}

impl BirthProposal {
    pub fn new(frame: &Frame, sensor: &SensorModel, floor: f64) -> Self {
        let (w, h) = (
            sensor.width.min(frame.width()),
            sensor.height.min(frame.height()),
        );
        let mut cells = Vec::new();
        for row in 0..h {
            for col in 0..w {
                if frame.get(col, row) >= floor {
                    cells.push((col, row));
                }
            }
        }
        let degenerate = cells.is_empty();
        if degenerate {
            log::debug!(
                "step {}: no pixel reaches the birth floor {floor}; using a uniform proposal",
                frame.step
            );
            cells = (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).collect();
        }
        let log_area_ratio = (cells.len() as f64 / (sensor.width * sensor.height) as f64).ln();
        Self {
            cells,
            log_area_ratio,
            degenerate,
        }
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Draws one newborn particle and returns it with `ln(p / q)`.
    fn sample<R: Rng + ?Sized>(
        &self,
        frame: &Frame,
        config: &FilterConfig,
        rng: &mut R,
    ) -> (Particle, f64) {
        let (col, row) = self.cells[rng.random_range(0..self.cells.len())];
        let sensor = &config.sensor;
        let px = (col as f64 + rng.random::<f64>()) * sensor.cell_dx;
        let py = (row as f64 + rng.random::<f64>()) * sensor.cell_dy;
        let (vx, vy) = match &config.birth_velocity {
            BirthVelocity::Uniform { v_max } if *v_max > 0.0 => (
                rng.random_range(-v_max..=*v_max),
                rng.random_range(-v_max..=*v_max),
            ),
            BirthVelocity::Uniform { .. } => (0.0, 0.0),
            BirthVelocity::Discrete(values) => {
                let v = values[rng.random_range(0..values.len())];
                (v[0], v[1])
            }
        };
        let mut state = TargetState::new(px, vx, py, vy);
        let mut log_ratio = self.log_area_ratio;
        if let Some(prior) = &config.intensity {
            let z = frame.get(col, row);
            let mut lo = (z - prior.proposal_halfwidth).max(prior.min);
            let mut hi = (z + prior.proposal_halfwidth).min(prior.max);
            if !(hi > lo) {
                lo = prior.min;
                hi = prior.max;
            }
            state.intensity = Some(rng.random_range(lo..=hi));
            log_ratio += ((hi - lo) / (prior.max - prior.min)).ln();
        }
        let mode = config.mode_chain.sample_initial(rng);
        (
            Particle {
                state,
                mode,
                weight: 0.0,
            },
            log_ratio,
        )
    }
}

/// Newborn stream: `w̃ = L · p / (N_b · q)`, normalized to sum to one.
pub fn spawn_birth<L: FrameLikelihood + ?Sized, R: Rng + ?Sized>(
    frame: &Frame,
    config: &FilterConfig,
    likelihood: &L,
    rng: &mut R,
) -> (WeightedSet, BirthProposal) {
    let proposal = BirthProposal::new(frame, &config.sensor, config.birth_proposal_floor);
    let ln_n = (config.n_birth as f64).ln();
    let mut particles = Vec::with_capacity(config.n_birth);
    let mut log_weights = Vec::with_capacity(config.n_birth);
    for _ in 0..config.n_birth {
        let (p, log_prior_ratio) = proposal.sample(frame, config, rng);
        log_weights.push(likelihood.log_ratio(frame, &p.state) + log_prior_ratio - ln_n);
        particles.push(p);
    }
    (
        WeightedSet::from_log_weights(particles, &log_weights),
        proposal,
    )
}

/// Continuing stream: mode transition, then the mode's dynamics as the
/// proposal; `w̃ = L / N_c`.
pub fn propagate_survival<L: FrameLikelihood + ?Sized, R: Rng + ?Sized>(
    particles: &[Particle],
    frame: &Frame,
    config: &FilterConfig,
    likelihood: &L,
    rng: &mut R,
) -> WeightedSet {
    let ln_n = (particles.len() as f64).ln();
    let mut out = Vec::with_capacity(particles.len());
    let mut log_weights = Vec::with_capacity(particles.len());
    for p in particles {
        let mode = config.mode_chain.sample_transition(p.mode, rng);
        let state = propagate_unchecked(&p.state, &config.modes[mode], config.step, rng);
        log_weights.push(likelihood.log_ratio(frame, &state) - ln_n);
        out.push(Particle {
            state,
            mode,
            weight: 0.0,
        });
    }
    WeightedSet::from_log_weights(out, &log_weights)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresenceUpdate {
    pub presence: f64,
    pub m_birth: f64,
    pub m_continuing: f64,
}

/// Presence recursion from the two unnormalized weight sums (log domain):
///
/// `M̃_b = p_b (1 − p) Σw̃_b`, `M̃_c = (1 − p_d) p Σw̃_c`,
/// `p_k = (M̃_b + M̃_c) / (M̃_b + M̃_c + p_d p + (1 − p_b)(1 − p))`.
pub fn presence_update_log(
    log_birth_sum: f64,
    log_survival_sum: f64,
    p_prev: f64,
    existence: &ExistenceModel,
) -> Result<PresenceUpdate> {
    if !(0.0..=1.0).contains(&p_prev) {
        return Err(Error::Usage(format!(
            "previous presence {p_prev} outside [0, 1]"
        )));
    }
    if log_birth_sum.is_nan() || log_survival_sum.is_nan() {
        return Err(Error::Usage("weight sums must not be NaN".into()));
    }
    let (pb, pd) = (existence.p_birth, existence.p_death);
    let lb = pb.ln() + (1.0 - p_prev).ln() + log_birth_sum;
    let lc = (1.0 - pd).ln() + p_prev.ln() + log_survival_sum;
    let l_absent = (pd * p_prev + (1.0 - pb) * (1.0 - p_prev)).ln();
    let l_present = log_add(lb, lc);
    let l_total = log_add(l_present, l_absent);
    if l_total == f64::NEG_INFINITY {
        return Err(Error::DegeneratePresence);
    }
    // logistic forms stay normalized even when the log terms are ~1e250
    let presence = (1.0 / (1.0 + (l_absent - l_present).exp())).clamp(0.0, 1.0);
    let (m_birth, m_continuing) = if l_present == f64::NEG_INFINITY {
        (0.5, 0.5)
    } else {
        let d = lc - lb;
        (1.0 / (1.0 + d.exp()), 1.0 / (1.0 + (-d).exp()))
    };
    Ok(PresenceUpdate {
        presence,
        m_birth,
        m_continuing,
    })
}

/// Linear-domain form of [`presence_update_log`].
pub fn presence_update(
    birth_sum: f64,
    survival_sum: f64,
    p_prev: f64,
    existence: &ExistenceModel,
) -> Result<PresenceUpdate> {
    if !(birth_sum >= 0.0 && survival_sum >= 0.0) {
        return Err(Error::Usage("weight sums must be >= 0".into()));
    }
    presence_update_log(birth_sum.ln(), survival_sum.ln(), p_prev, existence)
}

/// Systematic resampling: `n` indices from normalized `weights`.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    assert!(!weights.is_empty());
    let total: f64 = weights.iter().sum();
    let step = total / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut idx = 0;
    let mut cumulative = weights[0];
    let last = weights.len() - 1;
    for _ in 0..n {
        while u >= cumulative && idx < last {
            idx += 1;
            cumulative += weights[idx];
        }
        out.push(idx);
        u += step;
    }
    out
}

/// Merges both streams with weights `M_b w_b` and `M_c w_c` and resamples
/// down to `n_out` particles of weight `1 / n_out`. Also returns the
/// effective sample size `1 / Σŵ²` of the merged set.
pub fn combine_and_resample<R: Rng + ?Sized>(
    birth: &WeightedSet,
    survival: &WeightedSet,
    m_birth: f64,
    m_continuing: f64,
    n_out: usize,
    rng: &mut R,
) -> (Vec<Particle>, f64) {
    let merged: Vec<&Particle> = survival.particles.iter().chain(&birth.particles).collect();
    let weights: Vec<f64> = survival
        .particles
        .iter()
        .map(|p| m_continuing * p.weight)
        .chain(birth.particles.iter().map(|p| m_birth * p.weight))
        .collect();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sum_sq > 0.0 { 1.0 / sum_sq } else { 0.0 };
    let uniform = 1.0 / n_out as f64;
    let selected = systematic_resample(&weights, n_out, rng)
        .into_iter()
        .map(|i| Particle {
            weight: uniform,
            ..*merged[i]
        })
        .collect();
    (selected, ess)
}

/// Weighted mean of the particle states.
pub fn estimate_state(particles: &[Particle]) -> Option<TargetState> {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    if particles.is_empty() || !(total > 0.0) {
        return None;
    }
    let mut mean = TargetState::new(0.0, 0.0, 0.0, 0.0);
    let mut intensity = Some(0.0);
    for p in particles {
        let w = p.weight / total;
        mean.px += w * p.state.px;
        mean.vx += w * p.state.vx;
        mean.py += w * p.state.py;
        mean.vy += w * p.state.vy;
        intensity = match (intensity, p.state.intensity) {
            (Some(acc), Some(i)) => Some(acc + w * i),
            _ => None,
        };
    }
    mean.intensity = intensity;
    Some(mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub m_birth: f64,
    pub m_continuing: f64,
    pub log_birth_weight_sum: f64,
    pub log_survival_weight_sum: f64,
    pub birth_support_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub step: usize,
    pub presence: f64,
    pub detected: bool,
    /// Present iff `detected`.
    pub estimate: Option<TargetState>,
    pub effective_sample_size: f64,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone)]
pub struct FilterState {
    pub particles: Vec<Particle>,
    pub presence: f64,
}

/// One filter instance. `step` mutates the instance and is single-writer.
#[derive(Debug, Clone)]
pub struct TbdFilter<L = SensorModel> {
    config: FilterConfig,
    likelihood: L,
    state: FilterState,
}

impl TbdFilter<SensorModel> {
    pub fn new<R: Rng + ?Sized>(
        config: FilterConfig,
        first_frame: &Frame,
        rng: &mut R,
    ) -> Result<Self> {
        let likelihood = config.sensor.clone();
        Self::with_likelihood(config, likelihood, first_frame, rng)
    }
}

impl<L: FrameLikelihood> TbdFilter<L> {
    /// Seeds `N_c` continuing particles from the birth proposal over
    /// `first_frame` with equal weights and sets the presence to `μ₁`.
    pub fn with_likelihood<R: Rng + ?Sized>(
        config: FilterConfig,
        likelihood: L,
        first_frame: &Frame,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let proposal = BirthProposal::new(first_frame, &config.sensor, config.birth_proposal_floor);
        let weight = 1.0 / config.n_continuing as f64;
        let particles = (0..config.n_continuing)
            .map(|_| {
                let (mut p, _) = proposal.sample(first_frame, &config, rng);
                p.weight = weight;
                p
            })
            .collect();
        let presence = config.existence.mu1;
        Ok(Self {
            config,
            likelihood,
            state: FilterState {
                particles,
                presence,
            },
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn presence(&self) -> f64 {
        self.state.presence
    }

    pub fn particles(&self) -> &[Particle] {
        &self.state.particles
    }

    /// Runs one full recursion on a preprocessed frame.
    pub fn step<R: Rng + ?Sized>(&mut self, frame: &Frame, rng: &mut R) -> Result<FilterOutput> {
        let cfg = &self.config;
        let (birth, proposal) = spawn_birth(frame, cfg, &self.likelihood, rng);
        let survival = propagate_survival(&self.state.particles, frame, cfg, &self.likelihood, rng);
        let update = presence_update_log(
            birth.log_weight_sum,
            survival.log_weight_sum,
            self.state.presence,
            &cfg.existence,
        )?;
        let (particles, ess) = combine_and_resample(
            &birth,
            &survival,
            update.m_birth,
            update.m_continuing,
            cfg.n_continuing,
            rng,
        );
        let detected = update.presence > cfg.detection_threshold;
        let estimate = if detected {
            estimate_state(&particles)
        } else {
            None
        };
        self.state = FilterState {
            particles,
            presence: update.presence,
        };
        Ok(FilterOutput {
            step: frame.step,
            presence: update.presence,
            detected,
            estimate,
            effective_sample_size: ess,
            diagnostics: StepDiagnostics {
                m_birth: update.m_birth,
                m_continuing: update.m_continuing,
                log_birth_weight_sum: birth.log_weight_sum,
                log_survival_weight_sum: survival.log_weight_sum,
                birth_support_cells: proposal.cells().len(),
            },
        })
    }
}
