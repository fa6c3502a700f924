//! Target dynamics, the motion-mode chain, the target existence chain and the
//! image-plane sensor likelihood.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Log likelihood ratios are clamped to this magnitude so that adversarial
/// pixel values can never produce infinities in the weight arithmetic.
pub const MAX_LOG_RATIO: f64 = 1e250;

/// Kinematic state `(px, vx, py, vy)` plus an optional intensity component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub px: f64,
    pub vx: f64,
    pub py: f64,
    pub vy: f64,
    pub intensity: Option<f64>,
}

impl TargetState {
    pub fn new(px: f64, vx: f64, py: f64, vy: f64) -> Self {
        Self {
            px,
            vx,
            py,
            vy,
            intensity: None,
        }
    }

    pub fn with_intensity(mut self, intensity: f64) -> Self {
        self.intensity = Some(intensity.max(0.0));
        self
    }

    pub fn kinematic(&self) -> Vector4<f64> {
        Vector4::new(self.px, self.vx, self.py, self.vy)
    }

    fn set_kinematic(&mut self, v: &Vector4<f64>) {
        self.px = v[0];
        self.vx = v[1];
        self.py = v[2];
        self.vy = v[3];
    }
}

/// One member of the motion-model set.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMode {
    pub id: usize,
    /// Turn rate in rad/step; zero selects the constant-velocity model.
    pub turn_rate: f64,
    pub process_noise_cov: Matrix4<f64>,
    /// Std. dev. of the intensity random-walk increment.
    pub intensity_sigma: f64,
    noise_factor: Matrix4<f64>,
    noiseless: bool,
}

impl MotionMode {
    /// Validates that the covariance is symmetric PSD and precomputes a
    /// square-root factor for sampling.
    pub fn new(
        id: usize,
        turn_rate: f64,
        process_noise_cov: Matrix4<f64>,
        intensity_sigma: f64,
    ) -> Result<Self> {
        if !turn_rate.is_finite() {
            return Err(Error::config("mode.turn_rate", "must be finite"));
        }
        if !intensity_sigma.is_finite() || intensity_sigma < 0.0 {
            return Err(Error::config(
                "mode.intensity_sigma",
                format!("must be >= 0, got {intensity_sigma}"),
            ));
        }
        let noise_factor = psd_factor(&process_noise_cov)?;
        Ok(Self {
            id,
            turn_rate,
            process_noise_cov,
            intensity_sigma,
            noiseless: noise_factor.iter().all(|&v| v == 0.0),
            noise_factor,
        })
    }

    /// Constant-velocity mode driven by discrete white-noise acceleration of
    /// variance `accel_var` per axis.
    pub fn constant_velocity(
        id: usize,
        accel_var: f64,
        step: f64,
        intensity_sigma: f64,
    ) -> Result<Self> {
        if !accel_var.is_finite() || accel_var < 0.0 {
            return Err(Error::config(
                "mode.accel_var",
                format!("must be >= 0, got {accel_var}"),
            ));
        }
        Self::new(
            id,
            0.0,
            white_noise_acceleration(accel_var, step),
            intensity_sigma,
        )
    }

    /// State transition matrix over `(px, vx, py, vy)` for a step of `step`.
    pub fn transition_matrix(&self, step: f64) -> Matrix4<f64> {
        let w = self.turn_rate;
        if w == 0.0 {
            #[rustfmt::skip]
            let f = Matrix4::new(
                1.0, step, 0.0, 0.0,
                0.0, 1.0,  0.0, 0.0,
                0.0, 0.0,  1.0, step,
                0.0, 0.0,  0.0, 1.0,
            );
            f
        } else {
            let (s, c) = (w * step).sin_cos();
            #[rustfmt::skip]
            let f = Matrix4::new(
                1.0, s / w,         0.0, -(1.0 - c) / w,
                0.0, c,             0.0, -s,
                0.0, (1.0 - c) / w, 1.0, s / w,
                0.0, s,             0.0, c,
            );
            f
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.noiseless
    }
}

/// Per-axis `q * [[T^3/3, T^2/2], [T^2/2, T]]` in `(px, vx, py, vy)` order.
pub fn white_noise_acceleration(accel_var: f64, step: f64) -> Matrix4<f64> {
    let a = accel_var * step.powi(3) / 3.0;
    let b = accel_var * step.powi(2) / 2.0;
    let c = accel_var * step;
    #[rustfmt::skip]
    let q = Matrix4::new(
        a,   b,   0.0, 0.0,
        b,   c,   0.0, 0.0,
        0.0, 0.0, a,   b,
        0.0, 0.0, b,   c,
    );
    q
}

fn psd_factor(cov: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("mode.process_noise_cov", "non-finite entry"));
    }
    let scale = cov.amax().max(f64::MIN_POSITIVE);
    if (cov - cov.transpose()).amax() > 1e-12 * scale {
        return Err(Error::config("mode.process_noise_cov", "not symmetric"));
    }
    let eig = SymmetricEigen::new(*cov);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::config(
            "mode.process_noise_cov",
            format!("not positive semidefinite (eigenvalue {min:e})"),
        ));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix4::from_diagonal(&roots))
}

/// Advances `state` by one step of length `step` under `mode`.
///
/// The intensity component, when present, follows a random walk clamped at 0.
pub fn propagate<R: Rng + ?Sized>(
    state: &TargetState,
    mode: &MotionMode,
    step: f64,
    rng: &mut R,
) -> Result<TargetState> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::config("step", format!("must be > 0, got {step}")));
    }
    Ok(propagate_unchecked(state, mode, step, rng))
}

pub(crate) fn propagate_unchecked<R: Rng + ?Sized>(
    state: &TargetState,
    mode: &MotionMode,
    step: f64,
    rng: &mut R,
) -> TargetState {
    let mut x = mode.transition_matrix(step) * state.kinematic();
    if !mode.noiseless {
        let n = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        x += mode.noise_factor * n;
    }
    let mut out = *state;
    out.set_kinematic(&x);
    if let Some(i) = state.intensity {
        let next = if mode.intensity_sigma > 0.0 {
            i + mode.intensity_sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            i
        };
        out.intensity = Some(next.max(0.0));
    }
    out
}

/// Markov chain over motion-mode indices `0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeChain {
    tpm: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

fn check_distribution(field: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::config(field, "entries must lie in [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::config(
            field,
            format!("must sum to 1, sums to {sum}"),
        ));
    }
    Ok(())
}

impl ModeChain {
    pub fn new(tpm: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        let m = tpm.len();
        if m == 0 {
            return Err(Error::config("modes.tpm", "at least one mode is required"));
        }
        if initial.len() != m {
            return Err(Error::config(
                "modes.initial",
                format!("length {} does not match {m} modes", initial.len()),
            ));
        }
        for (i, row) in tpm.iter().enumerate() {
            if row.len() != m {
                return Err(Error::config(
                    format!("modes.tpm[{i}]"),
                    format!("row has {} entries, expected {m}", row.len()),
                ));
            }
            check_distribution(&format!("modes.tpm[{i}]"), row)?;
        }
        check_distribution("modes.initial", &initial)?;
        Ok(Self { tpm, initial })
    }

    pub fn single() -> Self {
        Self {
            tpm: vec![vec![1.0]],
            initial: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.tpm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tpm.is_empty()
    }

    pub fn tpm(&self) -> &[Vec<f64>] {
        &self.tpm
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }

    /// Draws the next mode given `prev_mode`. A single-mode chain consumes no
    /// randomness.
    pub fn sample_transition<R: Rng + ?Sized>(&self, prev_mode: usize, rng: &mut R) -> usize {
        assert!(prev_mode < self.len(), "mode {prev_mode} out of range");
        sample_categorical(&self.tpm[prev_mode], rng)
    }
}

/// Convenience wrapper matching the free-function form of the mode draw.
pub fn sample_mode_transition<R: Rng + ?Sized>(
    prev_mode: usize,
    chain: &ModeChain,
    rng: &mut R,
) -> usize {
    chain.sample_transition(prev_mode, rng)
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    if probs.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = j;
        }
        acc += p;
        if u < acc {
            return j;
        }
    }
    last_positive
}

/// Birth/death chain for the existence variable `E_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExistenceModel {
    pub p_birth: f64,
    pub p_death: f64,
    /// Presence probability before the first frame.
    pub mu1: f64,
}

impl ExistenceModel {
    pub fn new(p_birth: f64, p_death: f64, mu1: f64) -> Result<Self> {
        let model = Self {
            p_birth,
            p_death,
            mu1,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("existence.p_birth", self.p_birth),
            ("existence.p_death", self.p_death),
            ("existence.mu1", self.mu1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// `[[1 - Pb, Pb], [Pd, 1 - Pd]]`, rows indexed by the previous state.
    pub fn transition_matrix(&self) -> [[f64; 2]; 2] {
        [
            [1.0 - self.p_birth, self.p_birth],
            [self.p_death, 1.0 - self.p_death],
        ]
    }

    /// Prior presence probability one step ahead, without any evidence.
    pub fn predict_presence(&self, p_prev: f64) -> f64 {
        self.p_birth * (1.0 - p_prev) + (1.0 - self.p_death) * p_prev
    }
}

/// Odd-sized square point-spread weights, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel")]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    size: usize,
    weights: Vec<f64>,
}

impl TryFrom<RawKernel> for Kernel {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        Kernel::new(raw.size, raw.weights)
    }
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::config(
                "kernel.size",
                format!("must be odd, got {size}"),
            ));
        }
        if weights.len() != size * size {
            return Err(Error::config(
                "kernel.weights",
                format!("expected {} weights, got {}", size * size, weights.len()),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("kernel.weights", "non-finite weight"));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(
                "kernel.weights",
                "must sum to a positive value",
            ));
        }
        Ok(Self { size, weights })
    }

    pub fn delta() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    /// Default 3x3 extended-target blob.
    pub fn blob3() -> Self {
        #[rustfmt::skip]
        let weights = vec![
            0.5,  0.75, 0.5,
            0.75, 1.0,  0.75,
            0.5,  0.75, 0.5,
        ];
        Self { size: 3, weights }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half(&self) -> i64 {
        (self.size / 2) as i64
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weight at offset `(du, dv)` from the center; 0 outside the support.
    pub fn at(&self, du: i64, dv: i64) -> f64 {
        let h = self.half();
        if du.abs() > h || dv.abs() > h {
            return 0.0;
        }
        self.weights[((dv + h) as usize) * self.size + (du + h) as usize]
    }

    /// Nearest-neighbor rotation by `angle` radians about the center. The
    /// output grows to hold the rotated support.
    pub fn rotated(&self, angle: f64) -> Kernel {
        if angle == 0.0 {
            return self.clone();
        }
        let (s, c) = angle.sin_cos();
        let extent = self.size as f64 * (c.abs() + s.abs());
        let mut size = (extent - 1e-9).ceil() as usize;
        if size.is_multiple_of(2) {
            size += 1;
        }
        let size = size.max(self.size);
        let h = (size / 2) as i64;
        let mut weights = Vec::with_capacity(size * size);
        for dv in -h..=h {
            for du in -h..=h {
                // inverse map: rotate the destination offset by -angle
                let su = (c * du as f64 + s * dv as f64).round() as i64;
                let sv = (-s * du as f64 + c * dv as f64).round() as i64;
                weights.push(self.at(su, sv));
            }
        }
        Kernel { size, weights }
    }
}

/// How a target's intensity spreads over pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Spread {
    Point,
    Extended { kernel: Kernel },
}

/// Pixel grid geometry plus the Gaussian observation-noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    /// Columns (x extent, `n`).
    pub width: usize,
    /// Rows (y extent, `m`).
    pub height: usize,
    pub cell_dx: f64,
    pub cell_dy: f64,
    pub noise_sigma: f64,
    /// Intensity used when a state carries no intensity component.
    pub nominal_intensity: f64,
    pub spread: Spread,
}

impl SensorModel {
    pub fn new(
        width: usize,
        height: usize,
        noise_sigma: f64,
        nominal_intensity: f64,
    ) -> Result<Self> {
        let sensor = Self {
            width,
            height,
            cell_dx: 1.0,
            cell_dy: 1.0,
            noise_sigma,
            nominal_intensity,
            spread: Spread::Point,
        };
        sensor.validate()?;
        Ok(sensor)
    }

    pub fn with_spread(mut self, spread: Spread) -> Self {
        self.spread = spread;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("sensor.grid", "dimensions must be positive"));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config(
                "sensor.noise_sigma",
                format!("must be > 0, got {}", self.noise_sigma),
            ));
        }
        if !(self.cell_dx > 0.0 && self.cell_dy > 0.0) {
            return Err(Error::config("sensor.cell", "cell dimensions must be > 0"));
        }
        if !self.nominal_intensity.is_finite() || self.nominal_intensity < 0.0 {
            return Err(Error::config("sensor.nominal_intensity", "must be >= 0"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.cell_dx * self.height as f64 * self.cell_dy
    }

    /// Cell `(col, row)` containing the state's position, if inside the grid.
    pub fn containing_cell(&self, state: &TargetState) -> Option<(usize, usize)> {
        let col = (state.px / self.cell_dx).floor();
        let row = (state.py / self.cell_dy).floor();
        if col >= 0.0 && row >= 0.0 && col < self.width as f64 && row < self.height as f64 {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }

    pub fn intensity_of(&self, state: &TargetState) -> f64 {
        state.intensity.unwrap_or(self.nominal_intensity)
    }

    /// Visits every in-grid pixel `(col, row, h)` with a nonzero target
    /// contribution. States outside the grid contribute nothing.
    pub fn for_each_contribution(
        &self,
        state: &TargetState,
        mut visit: impl FnMut(usize, usize, f64),
    ) {
        let Some((col, row)) = self.containing_cell(state) else {
            return;
        };
        let intensity = self.intensity_of(state);
        match &self.spread {
            Spread::Point => visit(col, row, intensity),
            Spread::Extended { kernel } => {
                let h = kernel.half();
                for dv in -h..=h {
                    for du in -h..=h {
                        let w = kernel.at(du, dv);
                        if w == 0.0 {
                            continue;
                        }
                        let c = col as i64 + du;
                        let r = row as i64 + dv;
                        if c >= 0
                            && r >= 0
                            && (c as usize) < self.width
                            && (r as usize) < self.height
                        {
                            visit(c as usize, r as usize, intensity * w);
                        }
                    }
                }
            }
        }
    }

    /// Log of the frame likelihood ratio, touching only footprint pixels.
    pub fn log_frame_likelihood_ratio(&self, frame: &Frame, state: &TargetState) -> f64 {
        let inv_two_var = 1.0 / (2.0 * self.noise_sigma * self.noise_sigma);
        let mut acc = 0.0;
        self.for_each_contribution(state, |col, row, h| {
            let z = frame.get(col, row);
            acc += h * (2.0 * z - h) * inv_two_var;
        });
        clamp_log(acc)
    }

    pub fn frame_likelihood_ratio(&self, frame: &Frame, state: &TargetState) -> f64 {
        self.log_frame_likelihood_ratio(frame, state).exp()
    }
}

#[inline]
fn clamp_log(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO)
    }
}

/// `ln[N(z; h, σ²) / N(z; 0, σ²)] = h(2z − h) / (2σ²)`.
pub fn log_pixel_likelihood_ratio(z: f64, h: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", format!("must be > 0, got {sigma}")));
    }
    Ok(clamp_log(h * (2.0 * z - h) / (2.0 * sigma * sigma)))
}

pub fn pixel_likelihood_ratio(z: f64, h: f64, sigma: f64) -> Result<f64> {
    log_pixel_likelihood_ratio(z, h, sigma).map(f64::exp)
}

/// Frame-level likelihood ratio `L(Z_k | x, E_k = 1) / L(Z_k | E_k = 0)`.
pub trait FrameLikelihood: Sync {
    fn log_ratio(&self, frame: &Frame, state: &TargetState) -> f64;
}

impl FrameLikelihood for SensorModel {
    fn log_ratio(&self, frame: &Frame, state: &TargetState) -> f64 {
        self.log_frame_likelihood_ratio(frame, state)
    }
}

/// Likelihood ratio identically 1: the frames carry no evidence.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeutralLikelihood;

impl FrameLikelihood for NeutralLikelihood {
    fn log_ratio(&self, _frame: &Frame, _state: &TargetState) -> f64 {
        0.0
    }
}

pub fn frame_likelihood_ratio(frame: &Frame, state: &TargetState, sensor: &SensorModel) -> f64 {
    sensor.frame_likelihood_ratio(frame, state)
}

/// Per-pixel SNR in dB, `10 log10(I² / σ²)`.
pub fn snr_db(intensity: f64, sigma: f64) -> f64 {
    10.0 * (intensity * intensity / (sigma * sigma)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_mode() -> MotionMode {
        MotionMode::new(0, 0.0, Matrix4::zeros(), 0.0).unwrap()
    }

    #[test]
    fn propagate_constant_velocity_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = propagate(
            &TargetState::new(0.0, 1.0, 0.0, 2.0),
            &zero_mode(),
            1.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!((s.px, s.vx, s.py, s.vy), (1.0, 1.0, 2.0, 2.0));
        for t in [0.1, 1.0, 7.5] {
            let s = propagate(
                &TargetState::new(3.0, 0.0, 7.0, 0.0),
                &zero_mode(),
                t,
                &mut rng,
            )
            .unwrap();
            assert_eq!((s.px, s.vx, s.py, s.vy), (3.0, 0.0, 7.0, 0.0));
        }
        assert!(propagate(
            &TargetState::new(0.0, 0.0, 0.0, 0.0),
            &zero_mode(),
            0.0,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn coordinated_turn_quarter_circle() {
        let w = std::f64::consts::FRAC_PI_2;
        let mode = MotionMode::new(0, w, Matrix4::zeros(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = propagate(&TargetState::new(0.0, 1.0, 0.0, 0.0), &mode, 1.0, &mut rng).unwrap();
        // quarter turn of radius 1/w
        assert_relative_eq!(s.px, 1.0 / w, epsilon = 1e-12);
        assert_relative_eq!(s.py, 1.0 / w, epsilon = 1e-12);
        assert_relative_eq!(s.vx, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s.vy, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_psd_covariance() {
        let mut q = Matrix4::identity();
        q[(0, 0)] = -1.0;
        assert!(MotionMode::new(0, 0.0, q, 0.0).is_err());
        let mut asym = Matrix4::identity();
        asym[(0, 1)] = 0.5;
        assert!(MotionMode::new(0, 0.0, asym, 0.0).is_err());
        // singular but PSD is fine
        assert!(MotionMode::new(0, 0.0, white_noise_acceleration(1.0, 1.0), 0.0).is_ok());
    }

    #[test]
    fn empirical_covariance_matches_process_noise() {
        let q = white_noise_acceleration(0.8, 1.0) + Matrix4::from_diagonal_element(0.05);
        let mode = MotionMode::new(0, 0.0, q, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let origin = TargetState::new(0.0, 0.0, 0.0, 0.0);
        let n = 100_000;
        let mut sum = Vector4::zeros();
        let mut outer = Matrix4::zeros();
        for _ in 0..n {
            let x = propagate(&origin, &mode, 1.0, &mut rng)
                .unwrap()
                .kinematic();
            sum += x;
            outer += x * x.transpose();
        }
        let mean = sum / n as f64;
        let cov = outer / n as f64 - mean * mean.transpose();
        for i in 0..4 {
            for j in 0..4 {
                let tol = 0.05 * (q[(i, i)] * q[(j, j)]).sqrt().max(q[(i, j)].abs());
                assert!(
                    (cov[(i, j)] - q[(i, j)]).abs() <= tol,
                    "entry ({i},{j}): {} vs {}",
                    cov[(i, j)],
                    q[(i, j)]
                );
            }
        }
    }

    #[test]
    fn mode_chain_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ident = ModeChain::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.5, 0.5]).unwrap();
        assert!((0..1000).all(|_| ident.sample_transition(1, &mut rng) == 1));
        let single = ModeChain::single();
        assert!((0..100).all(|_| sample_mode_transition(0, &single, &mut rng) == 0));

        let fair = ModeChain::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![1.0, 0.0]).unwrap();
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| fair.sample_transition(0, &mut rng) == 1)
            .count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn mode_chain_frequencies_pass_chi_square() {
        let row = vec![0.2, 0.5, 0.3];
        let chain =
            ModeChain::new(vec![row.clone(), row.clone(), row.clone()], row.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[chain.sample_transition(2, &mut rng)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&row)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square, 2 dof, alpha = 0.01
        assert!(chi2 < 9.210, "chi2 = {chi2}");
    }

    #[test]
    fn mode_chain_validation() {
        assert!(ModeChain::new(vec![], vec![]).is_err());
        assert!(ModeChain::new(vec![vec![0.6, 0.6], vec![0.5, 0.5]], vec![0.5, 0.5]).is_err());
        assert!(ModeChain::new(vec![vec![1.0]], vec![0.5]).is_err());
        assert!(ModeChain::new(vec![vec![1.0, 0.0]], vec![1.0]).is_err());
    }

    #[test]
    fn existence_is_row_stochastic() {
        let e = ExistenceModel::new(0.05, 0.05, 0.0).unwrap();
        let pi = e.transition_matrix();
        assert_eq!(pi[0][0] + pi[0][1], 1.0);
        assert_eq!(pi[1][0] + pi[1][1], 1.0);
        assert!(ExistenceModel::new(1.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn pixel_ratio_examples() {
        for z in [-3.0, 0.0, 2.5, 100.0] {
            assert_eq!(pixel_likelihood_ratio(z, 0.0, 1.3).unwrap(), 1.0);
        }
        for (h, s) in [(5.0, 1.0), (2.0, 0.1), (-1.0, 3.0)] {
            assert_eq!(pixel_likelihood_ratio(h / 2.0, h, s).unwrap(), 1.0);
        }
        // direct Gaussian densities
        let gauss = |z: f64, mu: f64, s: f64| {
            (-(z - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let direct = gauss(5.0, 5.0, 1.0) / gauss(5.0, 0.0, 1.0);
        assert_relative_eq!(direct, 12.5f64.exp(), max_relative = 1e-12);
        assert_relative_eq!(
            pixel_likelihood_ratio(5.0, 5.0, 1.0).unwrap(),
            direct,
            max_relative = 1e-12
        );
        assert!(pixel_likelihood_ratio(1.0, 1.0, 0.0).is_err());
        assert!(pixel_likelihood_ratio(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn point_footprint_is_single_cell() {
        let sensor = SensorModel::new(8, 6, 1.0, 5.0).unwrap();
        let mut cells = vec![];
        sensor.for_each_contribution(&TargetState::new(3.7, 0.0, 2.2, 0.0), |c, r, h| {
            cells.push((c, r, h))
        });
        assert_eq!(cells, vec![(3, 2, 5.0)]);
        let mut frame = Frame::zeros(8, 6);
        frame.set(3, 2, 4.0);
        assert_eq!(
            sensor.frame_likelihood_ratio(&frame, &TargetState::new(3.7, 0.0, 2.2, 0.0)),
            pixel_likelihood_ratio(4.0, 5.0, 1.0).unwrap()
        );
        for outside in [(-0.1, 1.0), (8.0, 1.0), (1.0, 6.5), (f64::NAN, 0.0)] {
            let s = TargetState::new(outside.0, 0.0, outside.1, 0.0);
            assert_eq!(sensor.frame_likelihood_ratio(&frame, &s), 1.0);
        }
    }

    #[test]
    fn delta_kernel_matches_point() {
        let point = SensorModel::new(5, 5, 1.0, 3.0).unwrap();
        let delta = point.clone().with_spread(Spread::Extended {
            kernel: Kernel::delta(),
        });
        let frame = Frame::new(5, 5, (0..25).map(|v| v as f64 * 0.3).collect(), 0).unwrap();
        let s = TargetState::new(2.5, 0.0, 1.5, 0.0);
        assert_eq!(
            point.log_frame_likelihood_ratio(&frame, &s),
            delta.log_frame_likelihood_ratio(&frame, &s)
        );
    }

    #[test]
    fn kernel_rotation() {
        let k = Kernel::new(3, vec![0., 1., 0., 0., 1., 0., 0., 1., 0.]).unwrap();
        let r = k.rotated(std::f64::consts::FRAC_PI_2);
        assert_eq!(r.size(), 3);
        assert_eq!(r.weights(), &[0., 0., 0., 1., 1., 1., 0., 0., 0.]);
        let r45 = Kernel::blob3().rotated(std::f64::consts::FRAC_PI_4);
        assert_eq!(r45.size(), 5);
        assert_eq!(r45.at(0, 0), 1.0);
        assert!(Kernel::new(2, vec![1.0; 4]).is_err());
        assert!(Kernel::new(3, vec![0.0; 9]).is_err());
    }

    #[test]
    fn adversarial_pixels_stay_finite() {
        let sensor = SensorModel::new(2, 2, 1e-3, 1e3).unwrap();
        let frame = Frame::new(2, 2, vec![f64::MAX, -f64::MAX, 1e300, 0.0], 0).unwrap();
        for (x, y) in [(0.5, 0.5), (1.5, 0.5), (0.5, 1.5)] {
            let l = sensor.log_frame_likelihood_ratio(&frame, &TargetState::new(x, 0.0, y, 0.0));
            assert!(l.is_finite());
        }
    }

    proptest! {
        #[test]
        fn absent_target_is_neutral(z in -1e6f64..1e6, sigma in 1e-3f64..1e3) {
            prop_assert_eq!(pixel_likelihood_ratio(z, 0.0, sigma).unwrap(), 1.0);
        }

        #[test]
        fn zero_noise_propagation_is_linear(
            a in prop::array::uniform4(-50.0f64..50.0),
            b in prop::array::uniform4(-50.0f64..50.0),
            step in 0.1f64..3.0,
            turn in prop_oneof![Just(0.0), -0.5f64..0.5],
        ) {
            let mode = MotionMode::new(0, turn, Matrix4::zeros(), 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let sa = TargetState::new(a[0], a[1], a[2], a[3]);
            let sb = TargetState::new(b[0], b[1], b[2], b[3]);
            let sum = TargetState::new(a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]);
            let fa = propagate(&sa, &mode, step, &mut rng).unwrap().kinematic();
            let fb = propagate(&sb, &mode, step, &mut rng).unwrap().kinematic();
            let f0 = propagate(&TargetState::new(0.0, 0.0, 0.0, 0.0), &mode, step, &mut rng).unwrap().kinematic();
            let fs = propagate(&sum, &mode, step, &mut rng).unwrap().kinematic();
            let diff = fs - (fa + fb - f0);
            prop_assert!(diff.amax() <= 1e-9 * (1.0 + fs.amax()));
        }

        #[test]
        fn intensity_never_negative(seed in any::<u64>(), start in 0.0f64..2.0, sigma in 0.1f64..5.0) {
            let mode = MotionMode::constant_velocity(0, 0.1, 1.0, sigma).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = TargetState::new(0.0, 0.0, 0.0, 0.0).with_intensity(start);
            for _ in 0..200 {
                s = propagate(&s, &mode, 1.0, &mut rng).unwrap();
                prop_assert!(s.intensity.unwrap() >= 0.0);
            }
        }
    }
}
