//! Image frames: an `n x m` grid of real-valued pixel intensities.
//!
//! Column index `i` runs along x (`0..width`), row index `j` along y
//! (`0..height`). Storage is row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    /// Time step this frame was observed at.
    pub step: usize,
}

impl Frame {
    /// Builds a frame, rejecting non-finite pixel values.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, step: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Usage(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Usage(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(idx) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Usage(format!(
                "pixel {} ({}, {}) is not finite",
                idx,
                idx % width,
                idx / width
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            step,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64, step: usize) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            step,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0, 0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Signed-index lookup; `None` outside the grid.
    #[inline]
    pub fn get_checked(&self, col: i64, row: i64) -> Option<f64> {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            None
        } else {
            Some(self.get(col as usize, row as usize))
        }
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: f64) {
        debug_assert!(value.is_finite());
        self.pixels[row * self.width + col] = value;
    }

    #[inline]
    pub fn add(&mut self, col: usize, row: usize, value: f64) {
        self.pixels[row * self.width + col] += value;
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Applies `f` to every pixel. Non-finite results are replaced by 0.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Frame {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| {
                let out = f(v);
                if out.is_finite() {
                    out
                } else {
                    0.0
                }
            })
            .collect();
        Frame {
            width: self.width,
            height: self.height,
            pixels,
            step: self.step,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// `(col, row)` of the largest pixel; first occurrence wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (idx, &v) in self.pixels.iter().enumerate() {
            if v > self.pixels[best] {
                best = idx;
            }
        }
        (best % self.width, best / self.width)
    }
}
