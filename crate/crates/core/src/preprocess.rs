//! Frame conditioning ahead of the filter: background-subtraction clutter
//! suppression, regularized inverse filtering of a known PSF, and the ML
//! noise-variance estimate.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::models::Kernel;

/// Known point-spread function plus the inversion regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Psf {
    pub kernel: Kernel,
    /// Regularizer relative to `max |H|^2`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-2
}

impl Psf {
    pub fn new(kernel: Kernel, epsilon: f64) -> Result<Self> {
        let psf = Self { kernel, epsilon };
        psf.validate()?;
        Ok(psf)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(
                "psf.epsilon",
                format!("must be > 0, got {}", self.epsilon),
            ));
        }
        Ok(())
    }
}

fn fft2(data: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (
            planner.plan_fft_inverse(width),
            planner.plan_fft_inverse(height),
        )
    } else {
        (
            planner.plan_fft_forward(width),
            planner.plan_fft_forward(height),
        )
    };
    for row in data.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); height];
    for col in 0..width {
        for (row, slot) in column.iter_mut().enumerate() {
            *slot = data[row * width + col];
        }
        col_fft.process(&mut column);
        for (row, v) in column.iter().enumerate() {
            data[row * width + col] = *v;
        }
    }
}

/// Regularized frequency-domain deconvolution:
/// `Ẑ = Z · conj(H) / (|H|² + ε·max|H|²)`.
///
/// The frame is mirrored to twice its size before the transform. A footprint
/// clipped at the border then deconvolves like an interior one; with plain
/// periodic boundaries a target on the edge ties with its inner neighbour.
pub fn inverse_filter(frame: &Frame, psf: &Psf) -> Result<Frame> {
    psf.validate()?;
    let (w, h) = (frame.width(), frame.height());
    let size = psf.kernel.size();
    if size > w || size > h {
        return Err(Error::Usage(format!(
            "psf kernel {size}x{size} larger than frame {w}x{h}"
        )));
    }
    let (w, h) = (2 * w, 2 * h);
    let zero = Complex::new(0.0, 0.0);
    let mut kernel = vec![zero; w * h];
    let half = psf.kernel.half();
    for dv in -half..=half {
        for du in -half..=half {
            let col = (du.rem_euclid(w as i64)) as usize;
            let row = (dv.rem_euclid(h as i64)) as usize;
            kernel[row * w + col] += Complex::new(psf.kernel.at(du, dv), 0.0);
        }
    }
    fft2(&mut kernel, w, h, false);
    let max_power = kernel.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    let eps = psf.epsilon * max_power;

    let (fw, fh) = (frame.width(), frame.height());
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };
    let mut spectrum: Vec<Complex<f64>> = (0..h)
        .flat_map(|row| (0..w).map(move |col| (col, row)))
        .map(|(col, row)| Complex::new(frame.get(mirror(col, fw), mirror(row, fh)), 0.0))
        .collect();
    fft2(&mut spectrum, w, h, false);
    for (z, hk) in spectrum.iter_mut().zip(&kernel) {
        *z = *z * hk.conj() / (hk.norm_sqr() + eps);
    }
    fft2(&mut spectrum, w, h, true);
    let norm = 1.0 / (w * h) as f64;
    let pixels = (0..fh)
        .flat_map(|row| spectrum[row * w..row * w + fw].iter().map(|c| c.re * norm))
        .collect();
    Frame::new(fw, fh, pixels, frame.step)
}

/// Pixel-wise `frame - background`, signed.
pub fn subtract_background(frame: &Frame, background: &Frame) -> Result<Frame> {
    if !frame.same_shape(background) {
        return Err(Error::Usage(format!(
            "frame {}x{} and background {}x{} differ in size",
            frame.width(),
            frame.height(),
            background.width(),
            background.height()
        )));
    }
    let pixels = frame
        .pixels()
        .iter()
        .zip(background.pixels())
        .map(|(z, b)| z - b)
        .collect();
    Frame::new(frame.width(), frame.height(), pixels, frame.step)
}

/// Background subtraction followed by clamping negative residuals to zero.
pub fn suppress_clutter(frame: &Frame, background: &Frame) -> Result<Frame> {
    Ok(subtract_background(frame, background)?.map(|v| v.max(0.0)))
}

/// Per-pixel temporal median of `frames`.
pub fn estimate_background(frames: &[Frame]) -> Result<Frame> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Usage("background estimate needs at least one frame".into()))?;
    if frames.iter().any(|f| !f.same_shape(first)) {
        return Err(Error::Usage("background frames differ in size".into()));
    }
    let k = frames.len();
    let mut column = vec![0.0; k];
    let pixels = (0..first.len())
        .map(|idx| {
            for (slot, f) in column.iter_mut().zip(frames) {
                *slot = f.pixels()[idx];
            }
            column.sort_by(f64::total_cmp);
            if k % 2 == 1 {
                column[k / 2]
            } else {
                0.5 * (column[k / 2 - 1] + column[k / 2])
            }
        })
        .collect();
    Frame::new(first.width(), first.height(), pixels, 0)
}

/// ML variance `(1/N) Σ (z − z̄)²` over pixels whose `mask` entry is false.
pub fn estimate_noise_variance(frame: &Frame, mask: Option<&[bool]>) -> Result<f64> {
    if let Some(m) = mask {
        if m.len() != frame.len() {
            return Err(Error::Usage(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                frame.len()
            )));
        }
    }
    let included = |idx: usize| mask.is_none_or(|m| !m[idx]);
    let values = || {
        frame
            .pixels()
            .iter()
            .enumerate()
            .filter(move |(i, _)| included(*i))
            .map(|(_, &v)| v)
    };
    let n = values().count();
    if n < 2 {
        return Err(Error::Usage(format!(
            "noise variance needs at least 2 unmasked pixels, have {n}"
        )));
    }
    let mean = values().sum::<f64>() / n as f64;
    Ok(values().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundModel {
    /// Frames are used as-is.
    #[default]
    None,
    /// Temporal median over the first `frames` frames of the sequence.
    Median { frames: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default)]
    pub background: BackgroundModel,
    #[serde(default = "default_clamp")]
    pub clamp: bool,
    #[serde(default)]
    pub psf: Option<Psf>,
}

fn default_clamp() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            background: BackgroundModel::None,
            clamp: true,
            psf: None,
        }
    }
}

/// A frame after conditioning, with the noise variance estimated on the
/// signed residual before clamping.
#[derive(Debug, Clone)]
pub struct Processed {
    pub frame: Frame,
    pub noise_variance: f64,
}

/// Fixed-order pipeline: background subtraction → inverse filter → noise
/// variance estimate → clamp at zero.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    background: Option<Frame>,
}

impl Preprocessor {
    /// Estimates the background (if configured) from the leading frames.
    pub fn new(config: PreprocessConfig, frames: &[Frame]) -> Result<Self> {
        if let Some(psf) = &config.psf {
            psf.validate()?;
        }
        let background = match config.background {
            BackgroundModel::None => None,
            BackgroundModel::Median { frames: k } => {
                if k == 0 {
                    return Err(Error::config(
                        "preprocess.background.frames",
                        "must be >= 1",
                    ));
                }
                if frames.is_empty() {
                    None
                } else {
                    Some(estimate_background(&frames[..k.min(frames.len())])?)
                }
            }
        };
        Ok(Self { config, background })
    }

    pub fn with_background(config: PreprocessConfig, background: Option<Frame>) -> Self {
        Self { config, background }
    }

    pub fn background(&self) -> Option<&Frame> {
        self.background.as_ref()
    }

    pub fn residual(&self, frame: &Frame) -> Result<Frame> {
        let mut residual = match &self.background {
            Some(bg) => subtract_background(frame, bg)?,
            None => frame.clone(),
        };
        if let Some(psf) = &self.config.psf {
            residual = inverse_filter(&residual, psf)?;
        }
        Ok(residual)
    }

    pub fn process(&self, frame: &Frame) -> Result<Processed> {
        let residual = self.residual(frame)?;
        let noise_variance = estimate_noise_variance(&residual, None)?;
        let frame = if self.config.clamp {
            residual.map(|v| v.max(0.0))
        } else {
            residual
        };
        Ok(Processed {
            frame,
            noise_variance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise_frame(w: usize, h: usize, sigma: f64, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Frame::new(w, h, px, 0).unwrap()
    }

    /// Direct periodic convolution, independent of the FFT path.
    fn blur(frame: &Frame, kernel: &Kernel) -> Frame {
        let (w, h) = (frame.width() as i64, frame.height() as i64);
        let half = kernel.half();
        let mut out = Frame::zeros(frame.width(), frame.height());
        for row in 0..h {
            for col in 0..w {
                let v = frame.get(col as usize, row as usize);
                for dv in -half..=half {
                    for du in -half..=half {
                        let c = (col + du).rem_euclid(w) as usize;
                        let r = (row + dv).rem_euclid(h) as usize;
                        out.add(c, r, v * kernel.at(du, dv));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_psf_is_identity() {
        let frame = noise_frame(16, 12, 1.0, 1);
        let psf = Psf::new(Kernel::delta(), 1e-12).unwrap();
        let out = inverse_filter(&frame, &psf).unwrap();
        let err = out
            .pixels()
            .iter()
            .zip(frame.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn zero_frame_stays_zero() {
        let psf = Psf::new(Kernel::blob3(), 1e-2).unwrap();
        let out = inverse_filter(&Frame::zeros(8, 8), &psf).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_then_inverse_recovers_peak() {
        let mut frame = Frame::zeros(24, 20);
        frame.set(5, 13, 10.0);
        let blurred = blur(&frame, &Kernel::blob3());
        assert_eq!(blurred.get(6, 13), 7.5);
        // blob3 has a spectral zero, so a strongly regularized inverse loses
        // part of the peak; at ε = 1e-6 a numpy reference gives 9.7964
        let out = inverse_filter(&blurred, &Psf::new(Kernel::blob3(), 1e-6).unwrap()).unwrap();
        assert_eq!(out.argmax(), (5, 13));
        assert!(
            (out.get(5, 13) - 9.79643418614891).abs() < 1e-6,
            "peak {}",
            out.get(5, 13)
        );
    }

    #[test]
    fn corner_target_keeps_its_cell() {
        // footprint clipped at the border, as the sensor renders it
        let mut clipped = Frame::zeros(24, 20);
        for (c, r, v) in [(0, 0, 10.0), (1, 0, 7.5), (0, 1, 7.5), (1, 1, 5.0)] {
            clipped.set(c, r, v);
        }
        let out = inverse_filter(&clipped, &Psf::new(Kernel::blob3(), 1e-2).unwrap()).unwrap();
        assert_eq!(out.argmax(), (0, 0));
        // numpy: symmetric pad to 48x40, then the same regularized division
        assert!((out.get(0, 0) - 2.3786660993302187).abs() < 1e-9);
        assert!((out.get(1, 1) - 0.5718715568056171).abs() < 1e-9);
    }

    #[test]
    fn inverse_filter_rejects_bad_inputs() {
        assert!(Psf::new(Kernel::blob3(), 0.0).is_err());
        let psf = Psf {
            kernel: Kernel::blob3(),
            epsilon: -1.0,
        };
        assert!(inverse_filter(&Frame::zeros(8, 8), &psf).is_err());
        let psf = Psf::new(Kernel::blob3(), 1e-2).unwrap();
        assert!(inverse_filter(&Frame::zeros(2, 8), &psf).is_err());
    }

    #[test]
    fn inverse_filter_is_linear() {
        let x = noise_frame(16, 16, 1.0, 2);
        let y = noise_frame(16, 16, 3.0, 3);
        let (a, b) = (2.5, -0.75);
        let psf = Psf::new(Kernel::blob3(), 1e-2).unwrap();
        let combo = Frame::new(
            16,
            16,
            x.pixels()
                .iter()
                .zip(y.pixels())
                .map(|(p, q)| a * p + b * q)
                .collect(),
            0,
        )
        .unwrap();
        let lhs = inverse_filter(&combo, &psf).unwrap();
        let fx = inverse_filter(&x, &psf).unwrap();
        let fy = inverse_filter(&y, &psf).unwrap();
        let scale = lhs.pixels().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..lhs.len() {
            let rhs = a * fx.pixels()[i] + b * fy.pixels()[i];
            assert!((lhs.pixels()[i] - rhs).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn clutter_suppression_cases() {
        let frame = noise_frame(8, 8, 1.0, 4).map(|v| v + 3.0);
        let same = suppress_clutter(&frame, &frame).unwrap();
        assert!(same.pixels().iter().all(|&v| v == 0.0));
        let nonneg = frame.map(|v| v.abs());
        assert_eq!(
            suppress_clutter(&nonneg, &Frame::zeros(8, 8)).unwrap(),
            nonneg
        );
        assert!(suppress_clutter(&frame, &Frame::zeros(4, 8)).is_err());
    }

    #[test]
    fn scenario_one_style_subtraction() {
        // clutter 10 on the left half, target 5 on top of clutter at (2, 3)
        // and on the dark side at (6, 1)
        let mut bg = Frame::zeros(8, 8);
        for row in 0..8 {
            for col in 0..4 {
                bg.set(col, row, 10.0);
            }
        }
        let noise = noise_frame(8, 8, 0.1, 5);
        let mut frame = bg.clone();
        frame.add(2, 3, 5.0);
        frame.add(6, 1, 5.0);
        for row in 0..8 {
            for col in 0..8 {
                frame.add(col, row, noise.get(col, row));
            }
        }
        let out = suppress_clutter(&frame, &bg).unwrap();
        assert!((out.get(2, 3) - 5.0).abs() < 0.5);
        assert!((out.get(6, 1) - 5.0).abs() < 0.5);
        for row in 0..8 {
            for col in 0..8 {
                if (col, row) != (2, 3) && (col, row) != (6, 1) {
                    assert!(
                        out.get(col, row) < 0.5,
                        "({col},{row}) = {}",
                        out.get(col, row)
                    );
                }
            }
        }
    }

    #[test]
    fn median_background() {
        let f = noise_frame(4, 4, 1.0, 6);
        assert_eq!(estimate_background(std::slice::from_ref(&f)).unwrap(), f);
        assert!(estimate_background(&[]).is_err());

        let sigma = 1.0;
        let frames: Vec<Frame> = (0..31)
            .map(|k| noise_frame(64, 64, sigma, 100 + k).map(|v| v + 7.0))
            .collect();
        let bg = estimate_background(&frames).unwrap();
        let err_var = bg.pixels().iter().map(|v| (v - 7.0).powi(2)).sum::<f64>() / bg.len() as f64;
        assert!(err_var.sqrt() < sigma / 3.0, "stdev {}", err_var.sqrt());
    }

    #[test]
    fn transient_target_does_not_move_median() {
        let sigma = 0.5;
        let mut frames: Vec<Frame> = (0..9).map(|k| noise_frame(6, 6, sigma, 200 + k)).collect();
        // bright target sits on (3, 3) in 4 of 9 frames
        for f in frames.iter_mut().take(4) {
            f.add(3, 3, 50.0);
        }
        let bg = estimate_background(&frames).unwrap();
        assert!(bg.get(3, 3).abs() < 3.0 * sigma, "median {}", bg.get(3, 3));
    }

    #[test]
    fn noise_variance_cases() {
        assert!(estimate_noise_variance(&Frame::filled(5, 5, 3.3, 0), None).unwrap() < 1e-24);
        let pm = Frame::new(2, 2, vec![-1.0, 1.0, 1.0, -1.0], 0).unwrap();
        assert_eq!(estimate_noise_variance(&pm, None).unwrap(), 1.0);
        let f = noise_frame(100, 100, 1.5, 7);
        let v = estimate_noise_variance(&f, None).unwrap();
        assert!((2.14..=2.36).contains(&v), "variance {v}");
        let mut mask = vec![true; 4];
        mask[0] = false;
        assert!(estimate_noise_variance(&pm, Some(&mask)).is_err());
        mask[1] = false;
        assert_eq!(estimate_noise_variance(&pm, Some(&mask)).unwrap(), 1.0);
    }

    #[test]
    fn noise_variance_shift_invariant() {
        let f = noise_frame(64, 64, 2.0, 8);
        let base = estimate_noise_variance(&f, None).unwrap();
        for c in [-100.0, 0.5, 1e4] {
            let shifted = estimate_noise_variance(&f.map(|v| v + c), None).unwrap();
            assert!(
                (shifted - base).abs() <= 1e-9 * base,
                "shift {c}: {shifted} vs {base}"
            );
        }
    }

    #[test]
    fn pipeline_clamps_after_estimating() {
        let bg = Frame::filled(32, 32, 4.0, 0);
        let frame = noise_frame(32, 32, 0.5, 9).map(|v| v + 4.0);
        let config = PreprocessConfig::default();
        let pre = Preprocessor::with_background(config, Some(bg));
        let out = pre.process(&frame).unwrap();
        assert!(out.frame.pixels().iter().all(|&v| v >= 0.0));
        assert!((out.noise_variance - 0.25).abs() < 0.05);
    }
}
