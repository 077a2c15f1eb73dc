//! Synthetic superimposition: `I = T + f(R)` with controllable degradations.
//!
//! The degradation `f` applied to the reflection layer is
//! ghost -> Gaussian blur -> attenuation, in that fixed order (ghosting is a
//! glass-geometry effect that precedes optical blur). The transmission layer
//! passes through unchanged and the sum is clamped to `[0, 1]`.
//!
//! Kernel application here is true convolution (the kernel is stamped at an
//! impulse, not flipped) with symmetric reflective padding — unlike the
//! tensor engine's `conv2d`, which follows the cross-correlation convention.

pub mod dataset;
pub mod demo;
pub mod ppm;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use dataset::{build_dataset, DatasetManifest, ManifestRecord, ParamsSchedule};

use crate::tensor::Scalar;

/// Errors from image handling, file formats, and dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthesisError {
    InvalidParam { name: &'static str, message: String },
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    /// Malformed PPM/PGM header at a byte offset.
    FormatHeader { offset: usize, message: String },
    /// Payload ended early.
    FormatTruncated { offset: usize, expected: usize, got: usize },
    Io { path: PathBuf, message: String },
    EmptyDirectory { path: PathBuf },
    SizeNotDivisible { size: usize, grid: usize },
    Manifest { message: String },
}

impl fmt::Display for SynthesisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthesisError::InvalidParam { name, message } => {
                write!(f, "invalid {name}: {message}")
            }
            SynthesisError::DimensionMismatch { left, right } => {
                write!(f, "image dimensions {left:?} and {right:?} do not match")
            }
            SynthesisError::FormatHeader { offset, message } => {
                write!(f, "malformed image header at byte {offset}: {message}")
            }
            SynthesisError::FormatTruncated { offset, expected, got } => write!(
                f,
                "truncated image payload at byte {offset}: expected {expected} bytes, got {got}"
            ),
            SynthesisError::Io { path, message } => {
                write!(f, "i/o error on {}: {message}", path.display())
            }
            SynthesisError::EmptyDirectory { path } => {
                write!(f, "no .ppm images found in {}", path.display())
            }
            SynthesisError::SizeNotDivisible { size, grid } => {
                write!(f, "image size {size} is not divisible by grid {grid}")
            }
            SynthesisError::Manifest { message } => write!(f, "manifest error: {message}"),
        }
    }
}

impl std::error::Error for SynthesisError {}

pub type SynthesisResult<V> = Result<V, SynthesisError>;

/// RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `data[(y * width + x) * 3 + c]`
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, data: vec![value; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * 3 + c] = value;
    }

    /// Mean over all pixels and channels jointly.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Round-trip through 8-bit quantization, exactly as `save` then `load`
    /// would: `v -> round(clamp(v)·255)/255`.
    pub fn quantize8(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Image { height: self.height, width: self.width, data }
    }

    pub fn center_crop_square(&self) -> Image {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        let mut out = Image::new(side, side);
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y0 + y, x0 + x, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbor resample: source index `floor((dst + 0.5)·src/dst)`.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::new(out_h, out_w);
        for y in 0..out_h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / out_h as f64) as usize)
                .min(self.height - 1);
            for x in 0..out_w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / out_w as f64) as usize)
                    .min(self.width - 1);
                for c in 0..3 {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        out
    }

    /// Flatten to `[3, H, W]` tensor data.
    pub fn to_chw<T: Scalar>(&self) -> Vec<T> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![T::zero(); 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[c * h * w + y * w + x] = T::from_f64(self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Rebuild from `[3, H, W]` tensor data, clamping to `[0, 1]`.
    pub fn from_chw<T: Scalar>(data: &[T], height: usize, width: usize) -> Image {
        let mut img = Image::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let v = data[c * height * width + y * width + x].to_f64();
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
        img
    }
}

/// Parameters of the reflection degradation `f(R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Gaussian blur applied to the reflection layer; kernel size is the odd
    /// integer `2·ceil(3·sigma)+1`.
    pub blur_sigma: f64,
    pub ghost_dx: i32,
    pub ghost_dy: i32,
    /// Weight of the secondary ghost impulse, in `[0, 1]`.
    pub ghost_alpha: f64,
    /// Multiplier on the reflection layer, in `(0, 1]`.
    pub attenuation: f64,
    pub seed: u64,
}

impl DegradationParams {
    pub fn identity(seed: u64) -> Self {
        DegradationParams {
            blur_sigma: 0.0,
            ghost_dx: 0,
            ghost_dy: 0,
            ghost_alpha: 0.0,
            attenuation: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> SynthesisResult<()> {
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(SynthesisError::InvalidParam {
                name: "blur_sigma",
                message: format!("must be a finite value >= 0, got {}", self.blur_sigma),
            });
        }
        if !(0.0..=1.0).contains(&self.ghost_alpha) {
            return Err(SynthesisError::InvalidParam {
                name: "ghost_alpha",
                message: format!("must lie in [0, 1], got {}", self.ghost_alpha),
            });
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(SynthesisError::InvalidParam {
                name: "attenuation",
                message: format!("must lie in (0, 1], got {}", self.attenuation),
            });
        }
        Ok(())
    }
}

/// Dense 2-D kernel with an explicit anchor (the origin cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub height: usize,
    pub width: usize,
    pub anchor_y: usize,
    pub anchor_x: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Normalized 2-D Gaussian. `sigma = 0` degenerates to the 1x1 identity.
pub fn gaussian_kernel(sigma: f64) -> SynthesisResult<Kernel> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(SynthesisError::InvalidParam {
            name: "sigma",
            message: format!("must be a finite value >= 0, got {sigma}"),
        });
    }
    if sigma == 0.0 {
        return Ok(Kernel { height: 1, width: 1, anchor_y: 0, anchor_x: 0, data: vec![1.0] });
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let mut data = vec![0.0; size * size];
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0;
    for y in 0..size {
        let dy = y as f64 - radius as f64;
        for x in 0..size {
            let dx = x as f64 - radius as f64;
            let v = (-(dy * dy + dx * dx) / denom).exp();
            data[y * size + x] = v;
            sum += v;
        }
    }
    for v in data.iter_mut() {
        *v /= sum;
    }
    Ok(Kernel { height: size, width: size, anchor_y: radius, anchor_x: radius, data })
}

/// Double-impulse ghosting kernel: weight `1/(1+alpha)` at the origin and
/// `alpha/(1+alpha)` at offset `(dy, dx)`. Sums to 1.
pub fn ghost_kernel(dx: i32, dy: i32, alpha: f64) -> SynthesisResult<Kernel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SynthesisError::InvalidParam {
            name: "alpha",
            message: format!("must lie in [0, 1], got {alpha}"),
        });
    }
    let (ry, rx) = (dy.unsigned_abs() as usize, dx.unsigned_abs() as usize);
    let (height, width) = (2 * ry + 1, 2 * rx + 1);
    let mut data = vec![0.0; height * width];
    let (anchor_y, anchor_x) = (ry, rx);
    let primary = 1.0 / (1.0 + alpha);
    data[anchor_y * width + anchor_x] += primary;
    let gy = (anchor_y as i32 + dy) as usize;
    let gx = (anchor_x as i32 + dx) as usize;
    data[gy * width + gx] += alpha * primary;
    Ok(Kernel { height, width, anchor_y, anchor_x, data })
}

/// Symmetric reflective index (edge repeated): `-1 -> 0`, `n -> n-1`, ...
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// True convolution with reflective padding, per channel.
pub fn convolve_reflect(img: &Image, kernel: &Kernel) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = [0.0f64; 3];
            for ky in 0..kernel.height {
                let sy = reflect(y as isize - (ky as isize - kernel.anchor_y as isize), img.height);
                for kx in 0..kernel.width {
                    let kv = kernel.get(ky, kx);
                    if kv == 0.0 {
                        continue;
                    }
                    let sx =
                        reflect(x as isize - (kx as isize - kernel.anchor_x as isize), img.width);
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += kv * img.get(sy, sx, c);
                    }
                }
            }
            for (c, &a) in acc.iter().enumerate() {
                out.set(y, x, c, a);
            }
        }
    }
    out
}

/// Superimpose a reflection onto a transmission layer.
///
/// Returns `(I, R_degraded)` where
/// `R_degraded = attenuation · blur(ghost(R))` and `I = clamp(T + R_degraded)`.
/// `R_degraded` is the reflection actually present in `I`, and is what prior
/// ground truth is computed from.
pub fn superimpose(
    transmission: &Image,
    reflection: &Image,
    params: &DegradationParams,
) -> SynthesisResult<(Image, Image)> {
    params.validate()?;
    if (transmission.height, transmission.width) != (reflection.height, reflection.width) {
        return Err(SynthesisError::DimensionMismatch {
            left: (transmission.height, transmission.width),
            right: (reflection.height, reflection.width),
        });
    }
    let ghost = ghost_kernel(params.ghost_dx, params.ghost_dy, params.ghost_alpha)?;
    let blur = gaussian_kernel(params.blur_sigma)?;
    let mut degraded = convolve_reflect(&convolve_reflect(reflection, &ghost), &blur);
    for v in degraded.data.iter_mut() {
        *v *= params.attenuation;
    }
    let mut superimposed = Image::new(transmission.height, transmission.width);
    for (o, (&t, &r)) in superimposed
        .data
        .iter_mut()
        .zip(transmission.data.iter().zip(degraded.data.iter()))
    {
        *o = (t + r).clamp(0.0, 1.0);
    }
    Ok((superimposed, degraded))
}
