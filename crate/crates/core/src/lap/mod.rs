//! The local attention pooling layer.
//!
//! A LAP reduces a feature map the way average pooling does, except that the
//! pixels under each kernel window are weighted by learned importance scores.
//! The scores come from a pixel-wise concept scorer (a stack of 1x1
//! convolutions with a sigmoid per concept head), are aggregated to one
//! scalar per pixel, and are normalized *per window* around the window
//! maximum before the weighted average is taken:
//!
//! ```text
//! weights = exp(-alpha^2 * (max(V) - V)^2) .* V + epsilon
//! output  = sum(weights .* X_window) / sum(weights)
//! ```
//!
//! `alpha` is trainable; `alpha = 0` reduces the weights to `V + epsilon`
//! (plain importance-weighted averaging) and large `alpha` approaches
//! max-score selection. `epsilon` keeps every weight positive so gradients
//! reach all pixels and the division is always defined.

mod pool;
mod scoring;

pub use pool::{
    adaptive_lap, adaptive_pool_backward_batch, adaptive_pool_batch, adaptive_regions,
    lap_forward, lap_pool, lap_pool_backward_batch, lap_pool_batch, normalize_window,
};
pub use scoring::{score_pixels, Aggregation, ConceptMaps, ScoreCache, Scorer};

use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DiscLossConfig;

/// A `C x H x W` activation grid. Batched contexts use raw `Array4` with the
/// sample axis prepended; this wrapper carries the validated single-sample
/// form used at public operation boundaries.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    /// Validates that all entries are finite and every dimension is >= 1.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::argument(format!(
                "feature map dimensions must be >= 1, got {}x{}x{}",
                c, h, w
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "feature map contains non-finite entries".into(),
            ));
        }
        Ok(FeatureMap { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// (channels, height, width)
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Sliding-window geometry. Padding is symmetric (the same amount on every
/// side) and padded feature entries are zero with their score forced to
/// zero probability, so they only ever receive the epsilon floor weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: usize,
}

impl KernelSpec {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        stride_h: usize,
        stride_w: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::geometry("kernel dimensions must be >= 1"));
        }
        if stride_h == 0 || stride_w == 0 {
            return Err(Error::geometry("strides must be >= 1"));
        }
        Ok(KernelSpec {
            kernel_h,
            kernel_w,
            stride_h,
            stride_w,
            padding,
        })
    }

    /// Square kernel with stride equal to `stride` and no padding.
    pub fn square(kernel: usize, stride: usize) -> Self {
        KernelSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            padding: 0,
        }
    }

    /// Output spatial dims for an `h x w` input:
    /// `floor((dim + 2*pad - kernel) / stride) + 1` per axis.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::geometry(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride_h + 1,
            (pw - self.kernel_w) / self.stride_w + 1,
        ))
    }

    /// Top-left corner (may be negative with padding) of the window that
    /// produces output position `(oy, ox)`.
    pub fn window_origin(&self, oy: usize, ox: usize) -> (isize, isize) {
        (
            oy as isize * self.stride_h as isize - self.padding as isize,
            ox as isize * self.stride_w as isize - self.padding as isize,
        )
    }
}

/// Per-layer LAP hyper-parameters: geometry, scorer shape and the loss
/// settings that ride along with the layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LapConfig {
    pub kernel: KernelSpec,
    /// Number of concept heads.
    pub heads: usize,
    /// Optional hidden width of the scorer; `None` means a single 1x1 conv.
    pub hidden: Option<usize>,
    pub aggregation: Aggregation,
    /// Initial value of the sharpening parameter. Stored unconstrained and
    /// squared inside the normalization, so the sign never matters.
    pub alpha_init: f64,
    /// Weight floor added after normalization. Must be > 0.
    pub epsilon: f64,
    /// Concept-discrimination settings for this layer.
    pub disc: DiscLossConfig,
}

impl LapConfig {
    pub fn new(kernel: KernelSpec, heads: usize) -> Self {
        LapConfig {
            kernel,
            heads,
            hidden: None,
            aggregation: Aggregation::Max,
            alpha_init: 4.0,
            epsilon: 1e-4,
            disc: DiscLossConfig::uniform(heads, Some(0.06), Some(0.2), Some(0.1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("LAP needs at least one concept head"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be > 0"));
        }
        if self.hidden == Some(0) {
            return Err(Error::config("hidden width must be >= 1 when present"));
        }
        self.disc.validate(self.heads)?;
        Ok(())
    }
}

/// A named-by-position trainable array with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn scalar(v: f64) -> Self {
        Param::new(ArrayD::from_elem(ndarray::IxDyn(&[1]), v))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
