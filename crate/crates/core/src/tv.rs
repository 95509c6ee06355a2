//! Total-variation image enhancement.
//!
//! The anisotropic total variation of a raster is the sum of absolute forward
//! differences along both axes, with no wraparound and no padding at the
//! borders. Denoising minimizes
//!
//! ```text
//! E(y) = 1/2 * |y - x|^2 + lambda * sum sqrt(d^2 + eps^2)
//! ```
//!
//! over the same forward differences `d`, by gradient descent with a
//! backtracking step: a trial step that would raise `E` is halved until it
//! does not, and the next iteration starts again from the base step. Every
//! iterate is projected onto `[0, 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Halvings tried before an iteration is declared stalled.
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Row-major pixels; values are clamped to `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!("image size {width}x{height} is empty")));
        }
        if pixels.len() != width * height {
            return Err(Error::Validation(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("pixel values must be finite".into()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    channels: [GrayImage; 3],
}

impl RgbImage {
    pub fn from_channels(r: GrayImage, g: GrayImage, b: GrayImage) -> Result<Self> {
        if (r.width, r.height) != (g.width, g.height) || (r.width, r.height) != (b.width, b.height) {
            return Err(Error::Validation("channel sizes differ".into()));
        }
        Ok(RgbImage { channels: [r, g, b] })
    }

    pub fn from_gray(gray: &GrayImage) -> Self {
        RgbImage {
            channels: [gray.clone(), gray.clone(), gray.clone()],
        }
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn channel(&self, index: usize) -> &GrayImage {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[GrayImage; 3] {
        &self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseParams {
    pub iterations: usize,
    /// Weight of the total-variation term.
    pub lambda: f64,
    /// Smoothing constant in `sqrt(d^2 + eps^2)`.
    pub epsilon: f64,
    /// Base gradient step.
    pub step: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        DenoiseParams {
            iterations: 200,
            lambda: 0.1,
            epsilon: 1e-3,
            step: 0.05,
        }
    }
}

impl DenoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("epsilon", self.epsilon), ("step", self.step)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sum of absolute forward differences along both axes.
pub fn total_variation(img: &GrayImage) -> f64 {
    forward_differences(img.width, img.height, &img.pixels)
        .map(|(_, _, d)| d.abs())
        .sum()
}

/// `(from, to, value[to] - value[from])` for every right and down neighbor.
fn forward_differences<'a>(
    width: usize,
    height: usize,
    v: &'a [f64],
) -> impl Iterator<Item = (usize, usize, f64)> + 'a {
    (0..height).flat_map(move |y| {
        (0..width).flat_map(move |x| {
            let p = y * width + x;
            let right = (x + 1 < width).then(|| (p, p + 1, v[p + 1] - v[p]));
            let down = (y + 1 < height).then(|| (p, p + width, v[p + width] - v[p]));
            right.into_iter().chain(down)
        })
    })
}

/// The objective minimized by [`denoise`] for input `x` at iterate `y`.
pub fn smoothed_energy(y: &GrayImage, x: &GrayImage, params: &DenoiseParams) -> f64 {
    energy(y.width, y.height, &y.pixels, &x.pixels, params)
}

fn energy(width: usize, height: usize, y: &[f64], x: &[f64], params: &DenoiseParams) -> f64 {
    let eps2 = params.epsilon * params.epsilon;
    let fidelity: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
    let tv: f64 = forward_differences(width, height, y)
        .map(|(_, _, d)| (d * d + eps2).sqrt())
        .sum();
    fidelity + params.lambda * tv
}

fn gradient(width: usize, height: usize, y: &[f64], x: &[f64], params: &DenoiseParams, out: &mut [f64]) {
    let eps2 = params.epsilon * params.epsilon;
    for (g, (a, b)) in out.iter_mut().zip(y.iter().zip(x)) {
        *g = a - b;
    }
    for (from, to, d) in forward_differences(width, height, y) {
        let g = params.lambda * d / (d * d + eps2).sqrt();
        out[to] += g;
        out[from] -= g;
    }
}

/// Result of a traced denoising run.
#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    pub image: GrayImage,
    /// Energy before the first iteration and after each one.
    pub energy: Vec<f64>,
    /// Iterations in which no trial step lowered the energy.
    pub stalled_iterations: usize,
}

pub fn denoise(img: &GrayImage, params: &DenoiseParams) -> Result<GrayImage> {
    denoise_traced(img, params).map(|t| t.image)
}

pub fn denoise_traced(img: &GrayImage, params: &DenoiseParams) -> Result<DenoiseTrace> {
    params.validate()?;
    let (w, h) = (img.width, img.height);
    let x = &img.pixels;
    let mut y = x.clone();
    let mut current = energy(w, h, &y, x, params);
    let mut trace = Vec::with_capacity(params.iterations + 1);
    trace.push(current);
    let mut grad = vec![0.0; y.len()];
    let mut trial = vec![0.0; y.len()];
    let mut stalled = 0;

    for _ in 0..params.iterations {
        gradient(w, h, &y, x, params, &mut grad);
        let mut step = params.step;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for ((t, yi), gi) in trial.iter_mut().zip(&y).zip(&grad) {
                *t = (yi - step * gi).clamp(0.0, 1.0);
            }
            let e = energy(w, h, &trial, x, params);
            if e <= current {
                std::mem::swap(&mut y, &mut trial);
                current = e;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled += 1;
        }
        trace.push(current);
    }

    Ok(DenoiseTrace {
        image: GrayImage {
            width: w,
            height: h,
            pixels: y,
        },
        energy: trace,
        stalled_iterations: stalled,
    })
}

/// Denoises each channel independently.
pub fn denoise_rgb(img: &RgbImage, params: &DenoiseParams) -> Result<RgbImage> {
    params.validate()?;
    let out: Vec<GrayImage> = img
        .channels
        .par_iter()
        .map(|c| denoise(c, params))
        .collect::<Result<_>>()?;
    let [r, g, b]: [GrayImage; 3] = out.try_into().expect("three channels");
    Ok(RgbImage { channels: [r, g, b] })
}
