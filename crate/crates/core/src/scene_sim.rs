//! Synthetic scenario generation: ground-truth trajectories and noisy,
//! cluttered frames rendered through the sensor model.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::models::{Kernel, SensorModel, Spread, TargetState};
use crate::pgm::Pgm;

const BUILTIN_PREFIX: &str = "builtin:";
const TERRAIN_128: &[u8] = include_bytes!("../assets/terrain128.pgm");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// Velocity in cells/step held for `duration` steps.
    pub velocity: [f64; 2],
    pub duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Piecewise constant velocity starting from `start` at the birth step.
    /// The last segment's velocity is held past its duration.
    Segments {
        start: [f64; 2],
        segments: Vec<Segment>,
    },
    /// Constant-speed travel along a polyline; the target stops at the end.
    Waypoints { points: Vec<[f64; 2]>, speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    Flat {
        #[serde(default)]
        level: f64,
    },
    /// Static bright discs of amplitude `max_intensity`.
    SyntheticClutter {
        max_intensity: f64,
        #[serde(default = "default_blob_count")]
        blobs: usize,
        #[serde(default = "default_blob_radius")]
        radius: f64,
    },
    /// Grayscale PGM scaled to `[min_intensity, max_intensity]`. Relative
    /// paths resolve against the scenario file; `builtin:terrain128` names
    /// the bundled texture.
    ImageFile {
        path: String,
        max_intensity: f64,
        #[serde(default)]
        min_intensity: f64,
    },
}

fn default_blob_count() -> usize {
    12
}

fn default_blob_radius() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetKind {
    #[default]
    Point,
    Extended {
        #[serde(default = "Kernel::blob3")]
        kernel: Kernel,
        /// Radians added to the kernel orientation every step.
        #[serde(default)]
        rotation_per_step: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    /// First step with the target present.
    pub birth_step: usize,
    /// First step after the target has gone. `birth_step == death_step`
    /// describes a target-free scenario.
    pub death_step: usize,
    pub trajectory: Trajectory,
    pub target_mean_intensity: f64,
    #[serde(default)]
    pub intensity_fluctuation_halfwidth: f64,
    pub noise_sigma: f64,
    pub background: Background,
    #[serde(default)]
    pub target: TargetKind,
    /// Seeds the static clutter layout.
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("scenario.width/height", "must be positive"));
        }
        if self.birth_step > self.death_step || self.death_step > self.frame_count {
            return Err(Error::config(
                "scenario.birth_step/death_step",
                format!(
                    "need birth_step <= death_step <= frame_count, got {} / {} / {}",
                    self.birth_step, self.death_step, self.frame_count
                ),
            ));
        }
        if !(self.target_mean_intensity > 0.0) || !self.target_mean_intensity.is_finite() {
            return Err(Error::config(
                "scenario.target_mean_intensity",
                "must be > 0",
            ));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("scenario.noise_sigma", "must be > 0"));
        }
        let w = self.intensity_fluctuation_halfwidth;
        if !(0.0..=self.target_mean_intensity).contains(&w) {
            return Err(Error::config(
                "scenario.intensity_fluctuation_halfwidth",
                "must lie in [0, target_mean_intensity]",
            ));
        }
        match &self.trajectory {
            Trajectory::Segments { start, segments } => {
                if start.iter().any(|v| !v.is_finite())
                    || segments
                        .iter()
                        .any(|s| s.velocity.iter().any(|v| !v.is_finite()))
                {
                    return Err(Error::config("scenario.trajectory", "non-finite value"));
                }
            }
            Trajectory::Waypoints { points, speed } => {
                if points.is_empty() {
                    return Err(Error::config(
                        "scenario.trajectory.points",
                        "need >= 1 point",
                    ));
                }
                if !(*speed >= 0.0) || !speed.is_finite() {
                    return Err(Error::config("scenario.trajectory.speed", "must be >= 0"));
                }
            }
        }
        match &self.background {
            Background::Flat { level } if !level.is_finite() => {
                return Err(Error::config("scenario.background.level", "must be finite"))
            }
            Background::SyntheticClutter {
                max_intensity,
                radius,
                ..
            } if !max_intensity.is_finite() || !(*radius >= 0.0) => {
                return Err(Error::config(
                    "scenario.background",
                    "invalid clutter parameters",
                ))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn is_present(&self, step: usize) -> bool {
        step >= self.birth_step && step < self.death_step
    }

    /// Sensor geometry matching this scenario, with the unrotated footprint.
    pub fn sensor(&self) -> SensorModel {
        SensorModel {
            width: self.width,
            height: self.height,
            cell_dx: 1.0,
            cell_dy: 1.0,
            noise_sigma: self.noise_sigma,
            nominal_intensity: self.target_mean_intensity,
            spread: match &self.target {
                TargetKind::Point => Spread::Point,
                TargetKind::Extended { kernel, .. } => Spread::Extended {
                    kernel: kernel.clone(),
                },
            },
        }
    }
}

/// Per-step existence flags and states.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    states: Vec<Option<TargetState>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn present(&self, step: usize) -> bool {
        self.states[step].is_some()
    }

    pub fn state(&self, step: usize) -> Option<&TargetState> {
        self.states[step].as_ref()
    }

    pub fn states(&self) -> &[Option<TargetState>] {
        &self.states
    }
}

/// Builds the ground-truth trajectory. Existence flips exactly at the
/// configured birth and death steps.
pub fn generate_truth(config: &ScenarioConfig) -> Result<GroundTruth> {
    config.validate()?;
    let mut states = vec![None; config.frame_count];
    let kinematics = trajectory_states(&config.trajectory, config.death_step - config.birth_step);
    for (t, (px, vx, py, vy)) in kinematics.into_iter().enumerate() {
        let step = config.birth_step + t;
        if !(px >= 0.0 && py >= 0.0 && px < config.width as f64 && py < config.height as f64) {
            return Err(Error::TrajectoryOutOfGrid { step, px, py });
        }
        states[step] = Some(TargetState {
            px,
            vx,
            py,
            vy,
            intensity: Some(config.target_mean_intensity),
        });
    }
    Ok(GroundTruth { states })
}

fn trajectory_states(trajectory: &Trajectory, count: usize) -> Vec<(f64, f64, f64, f64)> {
    let mut out = Vec::with_capacity(count);
    match trajectory {
        Trajectory::Segments { start, segments } => {
            let velocity_at = |t: usize| {
                let mut end = 0;
                for seg in segments {
                    end += seg.duration;
                    if t < end {
                        return seg.velocity;
                    }
                }
                segments.last().map(|s| s.velocity).unwrap_or([0.0, 0.0])
            };
            let (mut px, mut py) = (start[0], start[1]);
            for t in 0..count {
                let v = velocity_at(t);
                out.push((px, v[0], py, v[1]));
                px += v[0];
                py += v[1];
            }
        }
        Trajectory::Waypoints { points, speed } => {
            for t in 0..count {
                let (pos, vel) = polyline_point(points, *speed * t as f64, *speed);
                out.push((pos[0], vel[0], pos[1], vel[1]));
            }
        }
    }
    out
}

fn polyline_point(points: &[[f64; 2]], mut dist: f64, speed: f64) -> ([f64; 2], [f64; 2]) {
    for leg in points.windows(2) {
        let (a, b) = (leg[0], leg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        if dist < len {
            let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
            return (
                [a[0] + dir[0] * dist, a[1] + dir[1] * dist],
                [dir[0] * speed, dir[1] * speed],
            );
        }
        dist -= len;
    }
    (*points.last().expect("validated non-empty"), [0.0, 0.0])
}

/// Reads a PGM and scales it linearly onto `[lo, hi]`.
pub fn load_background(path: &Path, lo: f64, hi: f64) -> Result<Frame> {
    Ok(Pgm::read(path)?.to_frame(lo, hi))
}

fn resolve_background(config: &ScenarioConfig) -> Result<Frame> {
    let (w, h) = (config.width, config.height);
    let frame = match &config.background {
        Background::Flat { level } => Frame::filled(w, h, *level, 0),
        Background::SyntheticClutter {
            max_intensity,
            blobs,
            radius,
        } => clutter_field(w, h, *max_intensity, *blobs, *radius, config.seed),
        Background::ImageFile {
            path,
            max_intensity,
            min_intensity,
        } => {
            let image = if let Some(name) = path.strip_prefix(BUILTIN_PREFIX) {
                match name {
                    "terrain128" => Pgm::decode(TERRAIN_128)?,
                    other => {
                        return Err(Error::config(
                            "scenario.background.path",
                            format!("unknown builtin image {other:?}"),
                        ))
                    }
                }
            } else {
                let p = Path::new(path);
                let full = match (&config.base_dir, p.is_relative()) {
                    (Some(dir), true) => dir.join(p),
                    _ => p.to_path_buf(),
                };
                Pgm::read(&full)?
            };
            let frame = image.to_frame(*min_intensity, *max_intensity);
            if frame.width() < w || frame.height() < h {
                return Err(Error::config(
                    "scenario.background.path",
                    format!(
                        "image is {}x{}, smaller than the {w}x{h} grid",
                        frame.width(),
                        frame.height()
                    ),
                ));
            }
            crop(&frame, w, h)
        }
    };
    Ok(frame)
}

fn crop(frame: &Frame, w: usize, h: usize) -> Frame {
    if frame.width() == w && frame.height() == h {
        return frame.clone();
    }
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            out.push(frame.get(col, row));
        }
    }
    Frame::new(w, h, out, 0).expect("cropped finite frame")
}

fn clutter_field(
    w: usize,
    h: usize,
    amplitude: f64,
    blobs: usize,
    radius: f64,
    seed: u64,
) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c1_77e2_b000_0001);
    let mut frame = Frame::zeros(w, h);
    let r2 = radius * radius;
    for _ in 0..blobs {
        let cx: f64 = rng.random_range(0.0..w as f64);
        let cy: f64 = rng.random_range(0.0..h as f64);
        for row in 0..h {
            for col in 0..w {
                let dx = col as f64 + 0.5 - cx;
                let dy = row as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    frame.set(col, row, amplitude);
                }
            }
        }
    }
    frame
}

/// A scenario ready for rendering: validated config plus its static background.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: ScenarioConfig,
    pub background: Frame,
}

impl Scene {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let background = resolve_background(&config)?;
        Ok(Self { config, background })
    }

    /// Draws the step's target intensity from the fluctuation model.
    pub fn sample_intensity<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mean = self.config.target_mean_intensity;
        let w = self.config.intensity_fluctuation_halfwidth;
        if w > 0.0 {
            rng.random_range(mean - w..=mean + w)
        } else {
            mean
        }
    }

    /// `background + footprint (if present) + N(0, σ²)` per pixel.
    pub fn render_frame<R: Rng + ?Sized>(
        &self,
        step: usize,
        truth: Option<&TargetState>,
        rng: &mut R,
    ) -> Frame {
        let cfg = &self.config;
        let mut frame = self.background.clone();
        frame.step = step;
        if let Some(state) = truth {
            let intensity = self.sample_intensity(rng);
            let mut sensor = cfg.sensor();
            if let TargetKind::Extended {
                kernel,
                rotation_per_step,
            } = &cfg.target
            {
                let age = step.saturating_sub(cfg.birth_step) as f64;
                sensor.spread = Spread::Extended {
                    kernel: kernel.rotated(rotation_per_step * age),
                };
            }
            let state = state.with_intensity(intensity);
            sensor.for_each_contribution(&state, |col, row, h| frame.add(col, row, h));
        }
        let sigma = cfg.noise_sigma;
        frame.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
    }

    /// Truth plus every frame of the scenario from one randomness stream.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(GroundTruth, Vec<Frame>)> {
        let truth = generate_truth(&self.config)?;
        let frames = (0..self.config.frame_count)
            .map(|k| self.render_frame(k, truth.state(k), rng))
            .collect();
        Ok((truth, frames))
    }
}

/// Render one frame of `config` (background resolved on every call).
pub fn render_frame<R: Rng + ?Sized>(
    step: usize,
    truth: Option<&TargetState>,
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<Frame> {
    Ok(Scene::new(config.clone())?.render_frame(step, truth, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            name: "unit".into(),
            width: 32,
            height: 32,
            frame_count: 60,
            birth_step: 10,
            death_step: 40,
            trajectory: Trajectory::Segments {
                start: [2.5, 3.5],
                segments: vec![Segment {
                    velocity: [0.5, 0.25],
                    duration: 30,
                }],
            },
            target_mean_intensity: 5.0,
            intensity_fluctuation_halfwidth: 0.0,
            noise_sigma: 1.0,
            background: Background::Flat { level: 0.0 },
            target: TargetKind::Point,
            seed: 7,
            base_dir: None,
        }
    }

    #[test]
    fn existence_flips_at_birth_and_death() {
        let truth = generate_truth(&base_config()).unwrap();
        for k in 0..60 {
            assert_eq!(truth.present(k), (10..40).contains(&k), "step {k}");
        }
    }

    #[test]
    fn straight_segment_advances_one_cell() {
        let mut cfg = base_config();
        cfg.trajectory = Trajectory::Segments {
            start: [1.5, 4.5],
            segments: vec![Segment {
                velocity: [1.0, 0.0],
                duration: 30,
            }],
        };
        let truth = generate_truth(&cfg).unwrap();
        for k in 10..39 {
            let (a, b) = (truth.state(k).unwrap(), truth.state(k + 1).unwrap());
            assert_eq!(b.px - a.px, 1.0);
            assert_eq!(b.py, a.py);
        }
    }

    #[test]
    fn two_segment_maneuver_matches_direct_iteration() {
        let mut cfg = base_config();
        cfg.trajectory = Trajectory::Segments {
            start: [2.0, 2.0],
            segments: vec![
                Segment {
                    velocity: [1.0, 0.0],
                    duration: 12,
                },
                Segment {
                    velocity: [0.0, 0.5],
                    duration: 18,
                },
            ],
        };
        let truth = generate_truth(&cfg).unwrap();
        // x_{t+1} = F x_t with the velocity replaced at the switch step
        let (mut x, mut vx, mut y, mut vy) = (2.0, 1.0, 2.0, 0.0);
        for t in 0..30 {
            if t == 12 {
                vx = 0.0;
                vy = 0.5;
            }
            let s = truth.state(10 + t).unwrap();
            assert_eq!((s.px, s.vx, s.py, s.vy), (x, vx, y, vy), "t = {t}");
            x += vx;
            y += vy;
        }
    }

    #[test]
    fn waypoints_follow_polyline() {
        let mut cfg = base_config();
        cfg.trajectory = Trajectory::Waypoints {
            points: vec![[1.0, 1.0], [11.0, 1.0], [11.0, 21.0]],
            speed: 1.0,
        };
        let truth = generate_truth(&cfg).unwrap();
        let s = truth.state(10 + 15).unwrap();
        assert_eq!((s.px, s.py, s.vx, s.vy), (11.0, 6.0, 0.0, 1.0));
        // 29 units along a 30-unit path
        let end = truth.state(39).unwrap();
        assert_eq!((end.px, end.py, end.vx), (11.0, 20.0, 0.0));
    }

    #[test]
    fn leaving_grid_reports_step() {
        let mut cfg = base_config();
        cfg.trajectory = Trajectory::Segments {
            start: [28.5, 3.0],
            segments: vec![Segment {
                velocity: [1.0, 0.0],
                duration: 30,
            }],
        };
        match generate_truth(&cfg) {
            Err(Error::TrajectoryOutOfGrid { step, .. }) => assert_eq!(step, 14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = base_config();
        cfg.death_step = 61;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.birth_step = 41;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.noise_sigma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.target_mean_intensity = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noiseless_rendering() {
        let mut cfg = base_config();
        cfg.noise_sigma = 1e-300;
        let scene = Scene::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = scene.render_frame(0, None, &mut rng);
        assert!(empty.pixels().iter().all(|&v| v.abs() < 1e-200));
        let s = TargetState::new(7.2, 0.0, 9.9, 0.0);
        let f = scene.render_frame(12, Some(&s), &mut rng);
        for row in 0..32 {
            for col in 0..32 {
                let v = f.get(col, row);
                if (col, row) == (7, 9) {
                    assert!((v - 5.0).abs() < 1e-200);
                } else {
                    assert!(v.abs() < 1e-200);
                }
            }
        }
    }

    #[test]
    fn empty_frame_noise_variance() {
        let mut cfg = base_config();
        cfg.width = 128;
        cfg.height = 128;
        let scene = Scene::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let f = scene.render_frame(0, None, &mut rng);
        let mean = f.mean();
        let var = f.pixels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64;
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn same_seed_same_frames() {
        let mut cfg = base_config();
        cfg.background = Background::SyntheticClutter {
            max_intensity: 10.0,
            blobs: 4,
            radius: 2.0,
        };
        let scene = Scene::new(cfg).unwrap();
        let a = scene.simulate(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = scene.simulate(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = scene.simulate(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn clutter_is_static_and_bounded() {
        let f = clutter_field(64, 64, 10.0, 12, 3.0, 1);
        assert!(f.pixels().iter().all(|&v| v == 0.0 || v == 10.0));
        assert!(f.pixels().contains(&10.0));
        assert_eq!(f, clutter_field(64, 64, 10.0, 12, 3.0, 1));
    }

    #[test]
    fn delta_kernel_renders_like_point() {
        let mut point = base_config();
        point.noise_sigma = 0.5;
        let mut ext = point.clone();
        ext.target = TargetKind::Extended {
            kernel: Kernel::delta(),
            rotation_per_step: 0.3,
        };
        let s = TargetState::new(4.5, 0.0, 4.5, 0.0);
        let a = Scene::new(point).unwrap().render_frame(
            11,
            Some(&s),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let b =
            Scene::new(ext)
                .unwrap()
                .render_frame(11, Some(&s), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn fluctuating_intensity_within_interval() {
        let mut cfg = base_config();
        cfg.target_mean_intensity = 9.0;
        cfg.intensity_fluctuation_halfwidth = 2.0;
        let scene = Scene::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| scene.sample_intensity(&mut rng))
            .collect();
        assert!(draws.iter().all(|&i| (7.0..=11.0).contains(&i)));
        let lo = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < 7.05 && hi > 10.95);
    }

    #[test]
    fn builtin_background_loads() {
        let mut cfg = base_config();
        cfg.background = Background::ImageFile {
            path: "builtin:terrain128".into(),
            max_intensity: 4.5,
            min_intensity: 0.0,
        };
        let scene = Scene::new(cfg).unwrap();
        assert_eq!(scene.background.width(), 32);
        let max = scene
            .background
            .pixels()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(max <= 4.5);
        let mut bad = base_config();
        bad.background = Background::ImageFile {
            path: "missing/file.pgm".into(),
            max_intensity: 1.0,
            min_intensity: 0.0,
        };
        let err = Scene::new(bad).unwrap_err().to_string();
        assert!(err.contains("missing/file.pgm"), "{err}");
    }
}
