//! Blend-refinement: derive a per-pixel importance map α from a model's
//! receptive-field statistics and use it to blend the input image with
//! the synthesized output, y' = (1−α)∘x + α∘y.
//!
//! The α pipeline runs six fixed stages: absolute receptive-field sums →
//! standardized scores → disk dilation → min-max rescale → logistic
//! squash → rescale again → Gaussian blur, with a final clamp to [0, 1].

use crate::dataset::ImageBuffer;
use crate::error::{LrfError, Result};
use crate::model::SparseRowModel;

/// σ below this (relative to |μ|) counts as degenerate: every receptive
/// field carries the same mass and no region can be singled out.
const DEGENERATE_SIGMA: f64 = 1e-12;

/// Tuning for the α pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaParams {
    /// Logistic steepness k.
    pub steepness: f64,
    /// Logistic threshold τ in (0, 1).
    pub threshold: f64,
    /// Disk radius for the dilation stage, in pixels.
    pub dilation_radius: usize,
    /// Standard deviation of the final Gaussian blur, in pixels.
    pub gaussian_sigma: f64,
}

impl AlphaParams {
    /// Defaults scaled to the image: k=10, τ=0.2, radius 3% and blur
    /// sigma 2% of the smaller dimension (with floors of 1 pixel and
    /// 0.5).
    pub fn for_size(height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        AlphaParams {
            steepness: 10.0,
            threshold: 0.2,
            dilation_radius: ((0.03 * side).round() as usize).max(1),
            gaussian_sigma: (0.02 * side).max(0.5),
        }
    }

    pub fn new(
        steepness: f64,
        threshold: f64,
        dilation_radius: usize,
        gaussian_sigma: f64,
    ) -> Result<Self> {
        let params = AlphaParams {
            steepness,
            threshold,
            dilation_radius,
            gaussian_sigma,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.steepness.is_finite() || self.steepness <= 0.0 {
            return Err(LrfError::Data(format!(
                "sigmoid steepness must be positive, got {}",
                self.steepness
            )));
        }
        if !self.threshold.is_finite() || self.threshold <= 0.0 || self.threshold >= 1.0 {
            return Err(LrfError::Data(format!(
                "sigmoid threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.dilation_radius == 0 {
            return Err(LrfError::Data("dilation radius must be >= 1".into()));
        }
        if !self.gaussian_sigma.is_finite() || self.gaussian_sigma <= 0.0 {
            return Err(LrfError::Data(format!(
                "gaussian sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        Ok(())
    }
}

/// The α map plus the statistics it was derived from. Spatial dimensions
/// are the model's output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    height: usize,
    width: usize,
    alpha: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
    mu: f64,
    sigma: f64,
    degenerate: bool,
}

impl AlphaMap {
    /// Wraps externally chosen blend weights (each in [0, 1]); the
    /// statistics fields are zeroed.
    pub fn from_values(height: usize, width: usize, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != height * width {
            return Err(LrfError::DimensionMismatch(format!(
                "alpha length {} does not match {height}x{width}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0 || *a > 1.0) {
            return Err(LrfError::Data("alpha values must lie in [0, 1]".into()));
        }
        Ok(AlphaMap {
            height,
            width,
            s: vec![0.0; alpha.len()],
            z: vec![0.0; alpha.len()],
            alpha,
            mu: 0.0,
            sigma: 0.0,
            degenerate: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Raw per-pixel L1 receptive-field sums.
    pub fn s(&self) -> &[f64] {
        &self.s
    }

    /// Standardized absolute scores |(s−μ)/σ|.
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// True when σ was (near) zero and α fell back to all-zeros.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// The α map as a grayscale image, e.g. for PNG export.
    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::new(self.height, self.width, 1, self.alpha.clone())
            .expect("alpha values are clamped to [0, 1]")
    }
}

/// Per-output-pixel L1 mass of the model: Σ|w| + |b|, summed across
/// channel mappings.
pub fn receptive_field_sums(model: &SparseRowModel) -> Vec<f64> {
    let k = model.geometry().output_dim();
    let mut s = vec![0.0; k];
    for map in model.channel_maps() {
        for (pixel, row) in map.iter().enumerate() {
            s[pixel] += row.weights.iter().map(|w| w.abs()).sum::<f64>() + row.bias.abs();
        }
    }
    s
}

/// Reflects an index into [0, n) by mirroring at the borders
/// (…, 1, 0 | 0, 1, …, n−1 | n−1, n−2, …).
fn reflect(mut p: i64, n: i64) -> usize {
    loop {
        if p < 0 {
            p = -p - 1;
        } else if p >= n {
            p = 2 * n - 1 - p;
        } else {
            return p as usize;
        }
    }
}

/// Morphological dilation: max filter over the disk
/// {(di, dj) : di² + dj² ≤ radius²} with reflected borders.
pub fn disk_max_filter(values: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    assert_eq!(values.len(), height * width, "value grid shape");
    let r = radius as i64;
    let mut offsets = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r * r {
                offsets.push((di, dj));
            }
        }
    }
    let (h, w) = (height as i64, width as i64);
    let mut out = vec![0.0; values.len()];
    for i in 0..h {
        for j in 0..w {
            let mut best = f64::NEG_INFINITY;
            for &(di, dj) in &offsets {
                let v = values[reflect(i + di, h) * width + reflect(j + dj, w)];
                if v > best {
                    best = v;
                }
            }
            out[(i * w + j) as usize] = best;
        }
    }
    out
}

/// Min-max rescale onto [0, 1]; a constant map becomes all zeros.
pub fn rescale_unit(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; values.len()];
    }
    let span = max - min;
    values.iter().map(|v| (v - min) / span).collect()
}

/// Element-wise logistic squash 1 / (1 + exp(−k(v − τ))).
pub fn logistic(values: &[f64], steepness: f64, threshold: f64) -> Vec<f64> {
    values
        .iter()
        .map(|v| 1.0 / (1.0 + (-steepness * (v - threshold)).exp()))
        .collect()
}

/// Separable Gaussian blur with kernel radius ⌈3σ⌉ and reflected
/// borders; the kernel is normalized to sum 1.
pub fn gaussian_blur(values: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(values.len(), height * width, "value grid shape");
    assert!(sigma > 0.0, "gaussian sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-((t * t) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (h, w) = (height as i64, width as i64);

    let mut horizontal = vec![0.0; values.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, t) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * values[i as usize * width + reflect(j + t, w)];
            }
            horizontal[(i * w + j) as usize] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, t) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * horizontal[reflect(i + t, h) * width + j as usize];
            }
            out[(i * w + j) as usize] = acc;
        }
    }
    out
}

/// Runs the α pipeline over a model's receptive-field statistics.
///
/// When σ of the sums is (near) zero the map cannot be standardized; the
/// result is α ≡ 0 — refinement then reproduces the input — with a
/// warning logged and the degenerate flag set.
pub fn compute_alpha(model: &SparseRowModel, params: &AlphaParams) -> Result<AlphaMap> {
    params.validate()?;
    let g = model.geometry();
    let (height, width) = (g.out_height, g.out_width);
    let s = receptive_field_sums(model);
    let k = s.len() as f64;
    let mu = s.iter().sum::<f64>() / k;
    let sigma = (s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / k).sqrt();
    if sigma <= DEGENERATE_SIGMA * mu.abs().max(1.0) {
        log::warn!(
            "all receptive fields carry identical mass (sigma = {sigma:.3e}); \
             alpha map degenerates to zero and refinement will return the input"
        );
        return Ok(AlphaMap {
            height,
            width,
            alpha: vec![0.0; s.len()],
            z: vec![0.0; s.len()],
            s,
            mu,
            sigma,
            degenerate: true,
        });
    }
    let z: Vec<f64> = s.iter().map(|v| ((v - mu) / sigma).abs()).collect();
    let dilated = disk_max_filter(&z, height, width, params.dilation_radius);
    let rescaled = rescale_unit(&dilated);
    let squashed = logistic(&rescaled, params.steepness, params.threshold);
    let rescaled_again = rescale_unit(&squashed);
    let blurred = gaussian_blur(&rescaled_again, height, width, params.gaussian_sigma);
    let alpha = blurred.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(AlphaMap {
        height,
        width,
        alpha,
        s,
        z,
        mu,
        sigma,
        degenerate: false,
    })
}

/// Per-pixel convex blend y' = (1−α)∘x + α∘y. Multi-channel images share
/// the same α across channels.
pub fn refine(x: &ImageBuffer, y: &ImageBuffer, alpha: &AlphaMap) -> Result<ImageBuffer> {
    if x.height() != y.height() || x.width() != y.width() || x.channels() != y.channels() {
        return Err(LrfError::DimensionMismatch(format!(
            "input {}x{}x{} and synthesis {}x{}x{} differ",
            x.height(),
            x.width(),
            x.channels(),
            y.height(),
            y.width(),
            y.channels()
        )));
    }
    if x.height() != alpha.height || x.width() != alpha.width {
        return Err(LrfError::DimensionMismatch(format!(
            "alpha map {}x{} does not match images {}x{}",
            alpha.height,
            alpha.width,
            x.height(),
            x.width()
        )));
    }
    let n = x.pixels();
    let mut data = Vec::with_capacity(n * x.channels());
    for c in 0..x.channels() {
        let (xp, yp) = (x.plane(c), y.plane(c));
        for k in 0..n {
            let a = alpha.alpha[k];
            data.push((1.0 - a) * xp[k] + a * yp[k]);
        }
    }
    ImageBuffer::from_clamped(x.height(), x.width(), x.channels(), data)
}
