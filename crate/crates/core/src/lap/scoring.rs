//! Pixel-wise concept scoring.
//!
//! The scorer maps each pixel's C-dimensional feature vector to `h` concept
//! logits through one or two 1x1 convolutions, squashes them with a sigmoid
//! into per-concept importance probabilities, and aggregates the
//! probabilities into the single score the pooling stage consumes.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, LapConfig, Param};
use crate::error::{Error, Result};

/// How the `h` per-concept probabilities collapse to one scalar per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Pointwise maximum over heads.
    Max,
    /// Pointwise sum over heads.
    Sum,
    /// Trainable linear combination of the head probabilities.
    Linear,
}

/// Per-concept importance probabilities and their aggregated score map for
/// one sample. `per_concept` has shape `(heads, H, W)` with entries strictly
/// inside (0, 1); `aggregated` is `(H, W)`.
#[derive(Debug, Clone)]
pub struct ConceptMaps {
    pub per_concept: Array3<f64>,
    pub aggregated: Array2<f64>,
}

impl ConceptMaps {
    pub fn heads(&self) -> usize {
        self.per_concept.dim().0
    }

    /// (H, W) of the maps.
    pub fn spatial(&self) -> (usize, usize) {
        self.aggregated.dim()
    }
}

/// Trainable scoring parameters: the 1x1 conv stack, the aggregation, the
/// sharpening parameter `alpha` and the fixed weight floor `epsilon`.
#[derive(Debug, Clone)]
pub struct Scorer {
    in_channels: usize,
    heads: usize,
    hidden: Option<usize>,
    pub agg: Aggregation,
    /// First 1x1 conv, `(hidden_or_heads, C)` plus bias.
    pub w1: Param,
    pub b1: Param,
    /// Second 1x1 conv `(heads, hidden)`, present when `hidden` is set.
    pub w2: Option<Param>,
    pub b2: Option<Param>,
    /// Linear-aggregation weights over heads, present for `Aggregation::Linear`.
    pub agg_w: Option<Param>,
    pub agg_b: Option<Param>,
    /// Sharpening parameter of the window normalization (squared in use).
    pub alpha: Param,
    pub epsilon: f64,
}

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    /// Pre-ReLU hidden activations `(n, hidden, H*W)`, only for two-layer scorers.
    z1: Option<Array3<f64>>,
}

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl Scorer {
    pub fn new<R: Rng>(in_channels: usize, cfg: &LapConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::config("scorer input width must be >= 1"));
        }
        let d1 = cfg.hidden.unwrap_or(cfg.heads);
        let w1 = Param::new(uniform_init(rng, d1, in_channels, in_channels).into_dyn());
        let b1 = Param::new(Array1::<f64>::zeros(d1).into_dyn());
        let (w2, b2) = match cfg.hidden {
            Some(hid) => (
                Some(Param::new(
                    uniform_init(rng, cfg.heads, hid, hid).into_dyn(),
                )),
                Some(Param::new(Array1::<f64>::zeros(cfg.heads).into_dyn())),
            ),
            None => (None, None),
        };
        let (agg_w, agg_b) = match cfg.aggregation {
            Aggregation::Linear => (
                Some(Param::new(
                    Array1::from_elem(cfg.heads, 1.0 / cfg.heads as f64).into_dyn(),
                )),
                Some(Param::scalar(0.0)),
            ),
            _ => (None, None),
        };
        Ok(Scorer {
            in_channels,
            heads: cfg.heads,
            hidden: cfg.hidden,
            agg: cfg.aggregation,
            w1,
            b1,
            w2,
            b2,
            agg_w,
            agg_b,
            alpha: Param::scalar(cfg.alpha_init),
            epsilon: cfg.epsilon,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.value[[0]]
    }

    /// Named views of every trainable array, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut out = vec![("w1", &self.w1), ("b1", &self.b1)];
        if let (Some(w2), Some(b2)) = (&self.w2, &self.b2) {
            out.push(("w2", w2));
            out.push(("b2", b2));
        }
        if let (Some(w), Some(b)) = (&self.agg_w, &self.agg_b) {
            out.push(("agg_w", w));
            out.push(("agg_b", b));
        }
        out.push(("alpha", &self.alpha));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut out: Vec<(&'static str, &mut Param)> =
            vec![("w1", &mut self.w1), ("b1", &mut self.b1)];
        if let Some(w2) = self.w2.as_mut() {
            out.push(("w2", w2));
        }
        if let Some(b2) = self.b2.as_mut() {
            out.push(("b2", b2));
        }
        if let Some(w) = self.agg_w.as_mut() {
            out.push(("agg_w", w));
        }
        if let Some(b) = self.agg_b.as_mut() {
            out.push(("agg_b", b));
        }
        out.push(("alpha", &mut self.alpha));
        out
    }

    /// Scores a batch `(N, C, H, W)`, returning per-concept probabilities
    /// `(N, h, H, W)`, aggregated maps `(N, H, W)` and the backward cache.
    pub fn score_batch(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array3<f64>, ScoreCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::config(format!(
                "scorer expects {} input channels, got {}",
                self.in_channels, c
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite activations fed to scorer".into()));
        }
        let hw = h * w;
        let w1 = self.w1.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b1 = self.b1.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let d1 = w1.dim().0;

        let mut per_concept = Array4::<f64>::zeros((n, self.heads, h, w));
        let mut aggregated = Array3::<f64>::zeros((n, h, w));
        let mut z1_cache = self
            .hidden
            .map(|hid| Array3::<f64>::zeros((n, hid, hw)));

        for s in 0..n {
            let xs = x.index_axis(Axis(0), s);
            let xmat = xs.into_shape((c, hw)).expect("contiguous sample view");
            // z1 = W1 . x + b1
            let mut z1 = w1.dot(&xmat);
            for (mut row, b) in z1.outer_iter_mut().zip(b1.iter()) {
                row += *b;
            }
            let logits: Array2<f64> = match (&self.w2, &self.b2) {
                (Some(w2), Some(b2)) => {
                    if let Some(cache) = z1_cache.as_mut() {
                        cache.index_axis_mut(Axis(0), s).assign(&z1);
                    }
                    let a1 = z1.mapv(|v| v.max(0.0));
                    let w2v = w2.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let b2v = b2.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let mut z2 = w2v.dot(&a1);
                    for (mut row, b) in z2.outer_iter_mut().zip(b2v.iter()) {
                        row += *b;
                    }
                    z2
                }
                _ => z1,
            };
            debug_assert_eq!(logits.dim(), (self.heads, hw));
            let probs = logits.mapv(sigmoid);
            let agg = self.aggregate(&probs.view());
            per_concept
                .index_axis_mut(Axis(0), s)
                .assign(&probs.into_shape((self.heads, h, w)).unwrap());
            aggregated
                .index_axis_mut(Axis(0), s)
                .assign(&agg.into_shape((h, w)).unwrap());
            let _ = d1;
        }
        Ok((per_concept, aggregated, ScoreCache { z1: z1_cache }))
    }

    fn aggregate(&self, probs: &ArrayView2<f64>) -> Array1<f64> {
        let (heads, hw) = probs.dim();
        match self.agg {
            Aggregation::Max => {
                let mut out = Array1::zeros(hw);
                for px in 0..hw {
                    let mut best = probs[[0, px]];
                    for hd in 1..heads {
                        if probs[[hd, px]] > best {
                            best = probs[[hd, px]];
                        }
                    }
                    out[px] = best;
                }
                out
            }
            Aggregation::Sum => probs.sum_axis(Axis(0)),
            Aggregation::Linear => {
                let w = self
                    .agg_w
                    .as_ref()
                    .expect("linear aggregation weights")
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let b = self.agg_b.as_ref().expect("linear aggregation bias").value[[0]];
                let mut out = w.dot(probs);
                out += b;
                out
            }
        }
    }

    /// Backward pass. `d_per_concept` is the gradient arriving directly at
    /// the probability maps (from auxiliary losses); `d_aggregated` the
    /// gradient at the aggregated score map (from the pooling stage). Returns
    /// the gradient w.r.t. the input features and accumulates parameter
    /// gradients in place.
    pub fn score_backward(
        &mut self,
        x: &Array4<f64>,
        per_concept: &Array4<f64>,
        cache: &ScoreCache,
        d_per_concept: Option<&Array4<f64>>,
        d_aggregated: Option<&Array3<f64>>,
    ) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let heads = self.heads;
        let mut dx = Array4::<f64>::zeros((n, c, h, w));

        for s in 0..n {
            let probs = per_concept
                .index_axis(Axis(0), s)
                .into_shape((heads, hw))
                .unwrap();
            // Gradient at the probabilities: external plus aggregation route.
            let mut d_p: Array2<f64> = match d_per_concept {
                Some(g) => g
                    .index_axis(Axis(0), s)
                    .into_shape((heads, hw))
                    .unwrap()
                    .to_owned(),
                None => Array2::zeros((heads, hw)),
            };
            if let Some(d_agg) = d_aggregated {
                let da = d_agg.index_axis(Axis(0), s).into_shape(hw).unwrap();
                match self.agg {
                    Aggregation::Max => {
                        for px in 0..hw {
                            let mut best = 0usize;
                            for hd in 1..heads {
                                if probs[[hd, px]] > probs[[best, px]] {
                                    best = hd;
                                }
                            }
                            d_p[[best, px]] += da[px];
                        }
                    }
                    Aggregation::Sum => {
                        for hd in 0..heads {
                            for px in 0..hw {
                                d_p[[hd, px]] += da[px];
                            }
                        }
                    }
                    Aggregation::Linear => {
                        let wv = self
                            .agg_w
                            .as_ref()
                            .unwrap()
                            .value
                            .view()
                            .into_dimensionality::<ndarray::Ix1>()
                            .unwrap()
                            .to_owned();
                        for hd in 0..heads {
                            for px in 0..hw {
                                d_p[[hd, px]] += wv[hd] * da[px];
                            }
                        }
                        let gw = self.agg_w.as_mut().unwrap();
                        let mut gwv = gw.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        for hd in 0..heads {
                            let mut acc = 0.0;
                            for px in 0..hw {
                                acc += probs[[hd, px]] * da[px];
                            }
                            gwv[hd] += acc;
                        }
                        self.agg_b.as_mut().unwrap().grad[[0]] += da.sum();
                    }
                }
            }
            // Through the sigmoid: dz = dp * p * (1 - p).
            let mut d_logits = d_p;
            for hd in 0..heads {
                for px in 0..hw {
                    let p = probs[[hd, px]];
                    d_logits[[hd, px]] *= p * (1.0 - p);
                }
            }

            let xs = x.index_axis(Axis(0), s);
            let xmat = xs.into_shape((c, hw)).unwrap();
            let w1 = self
                .w1
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();

            let dxmat: Array2<f64> = match (&self.w2, cache.z1.as_ref()) {
                (Some(w2), Some(z1)) => {
                    let z1s = z1.index_axis(Axis(0), s);
                    let a1 = z1s.mapv(|v| v.max(0.0));
                    let w2v = w2
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    // Second layer grads.
                    {
                        let gw2 = self.w2.as_mut().unwrap();
                        let d = d_logits.dot(&a1.t());
                        let mut g = gw2.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        g += &d;
                        let gb2 = self.b2.as_mut().unwrap();
                        let mut g = gb2.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        g += &d_logits.sum_axis(Axis(1));
                    }
                    let mut dz1 = w2v.t().dot(&d_logits);
                    dz1.zip_mut_with(&z1s, |g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    {
                        let d = dz1.dot(&xmat.t());
                        let mut g = self.w1.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        g += &d;
                        let mut g = self.b1.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        g += &dz1.sum_axis(Axis(1));
                    }
                    w1.t().dot(&dz1)
                }
                _ => {
                    {
                        let d = d_logits.dot(&xmat.t());
                        let mut g = self.w1.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        g += &d;
                        let mut g = self.b1.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        g += &d_logits.sum_axis(Axis(1));
                    }
                    w1.t().dot(&d_logits)
                }
            };
            dx.index_axis_mut(Axis(0), s)
                .assign(&dxmat.into_shape((c, h, w)).unwrap());
        }
        dx
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scores one sample: `per_concept[c][i][j] = sigma(S_C(x[:, i, j])[c])` and
/// `aggregated = A(per_concept)` pointwise. Spatial shape is preserved.
pub fn score_pixels(x: &FeatureMap, scorer: &Scorer) -> Result<ConceptMaps> {
    let (c, h, w) = x.dim();
    let mut batch = Array4::zeros((1, c, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(x.data());
    let (per_concept, aggregated, _) = scorer.score_batch(&batch)?;
    Ok(ConceptMaps {
        per_concept: per_concept.index_axis(Axis(0), 0).to_owned(),
        aggregated: aggregated.index_axis(Axis(0), 0).to_owned(),
    })
}
