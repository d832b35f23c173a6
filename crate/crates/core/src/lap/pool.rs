//! Window-local normalization and the weighted-average reductions.

use ndarray::{Array2, Array3, Array4, Axis};

use super::{ConceptMaps, FeatureMap, KernelSpec, Scorer};
use crate::error::{Error, Result};

/// Applies the window normalization
/// `N(V) = exp(-alpha^2 (max(V) - V)^2) .* V + epsilon`
/// with the maximum taken over this window only. Every output is >= epsilon
/// and the entry attaining `max(V)` comes out as exactly `max(V) + epsilon`.
pub fn normalize_window(v: &Array2<f64>, alpha: f64, epsilon: f64) -> Result<Array2<f64>> {
    if epsilon <= 0.0 {
        return Err(Error::argument("epsilon must be > 0"));
    }
    if v.is_empty() {
        return Err(Error::argument("empty window"));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let a2 = alpha * alpha;
    Ok(v.mapv(|x| (-a2 * (m - x) * (m - x)).exp() * x + epsilon))
}

// One gathered kernel window: score values plus their source pixels, `None`
// for padding. Padded entries carry score 0 and zero features, so their
// weight is exactly epsilon and no gradient flows through them.
struct Window {
    vals: Vec<f64>,
    src: Vec<Option<(usize, usize)>>,
}

impl Window {
    fn with_capacity(n: usize) -> Self {
        Window {
            vals: Vec::with_capacity(n),
            src: Vec::with_capacity(n),
        }
    }

    fn gather(&mut self, scores: &Array2<f64>, y0: isize, x0: isize, kh: usize, kw: usize) {
        self.vals.clear();
        self.src.clear();
        let (h, w) = scores.dim();
        for ky in 0..kh {
            for kx in 0..kw {
                let y = y0 + ky as isize;
                let x = x0 + kx as isize;
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    self.vals.push(scores[[y as usize, x as usize]]);
                    self.src.push(Some((y as usize, x as usize)));
                } else {
                    self.vals.push(0.0);
                    self.src.push(None);
                }
            }
        }
    }

    fn gather_region(&mut self, scores: &Array2<f64>, ys: (usize, usize), xs: (usize, usize)) {
        self.vals.clear();
        self.src.clear();
        for y in ys.0..ys.1 {
            for x in xs.0..xs.1 {
                self.vals.push(scores[[y, x]]);
                self.src.push(Some((y, x)));
            }
        }
    }

    /// Index of the first maximum.
    fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.vals.len() {
            if self.vals[i] > self.vals[best] {
                best = i;
            }
        }
        best
    }
}

/// Fills `weights` with the normalized window weights and returns the argmax
/// index the maximum was taken at.
fn window_weights(win: &Window, alpha: f64, epsilon: f64, weights: &mut Vec<f64>) -> usize {
    let a = win.argmax();
    let m = win.vals[a];
    let a2 = alpha * alpha;
    weights.clear();
    for &v in &win.vals {
        let d = m - v;
        weights.push((-a2 * d * d).exp() * v + epsilon);
    }
    a
}

fn reduce_window(x: &Array4<f64>, sample: usize, win: &Window, weights: &[f64], out: &mut [f64]) {
    let wsum: f64 = weights.iter().sum();
    for (ch, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, src) in win.src.iter().enumerate() {
            if let Some((y, xx)) = src {
                acc += weights[i] * x[[sample, ch, *y, *xx]];
            }
        }
        *slot = acc / wsum;
    }
}

// Backward of one window reduction. Accumulates into dx / d_scores / d_alpha.
#[allow(clippy::too_many_arguments)]
fn window_backward(
    x: &Array4<f64>,
    sample: usize,
    win: &Window,
    weights: &[f64],
    amax: usize,
    alpha: f64,
    out_val: impl Fn(usize) -> f64,
    d_out_val: impl Fn(usize) -> f64,
    channels: usize,
    dw: &mut Vec<f64>,
    dx: &mut Array4<f64>,
    d_scores: &mut Array2<f64>,
    d_alpha: &mut f64,
) {
    let wsum: f64 = weights.iter().sum();
    dw.clear();
    dw.resize(win.vals.len(), 0.0);
    for ch in 0..channels {
        let g = d_out_val(ch);
        if g == 0.0 {
            continue;
        }
        let oval = out_val(ch);
        for (i, src) in win.src.iter().enumerate() {
            match src {
                Some((y, xx)) => {
                    dw[i] += g * (x[[sample, ch, *y, *xx]] - oval) / wsum;
                    dx[[sample, ch, *y, *xx]] += g * weights[i] / wsum;
                }
                // Padded features are zero; the weight still sits in the
                // denominator, so its gradient is -g*oval/wsum.
                None => dw[i] += g * (0.0 - oval) / wsum,
            }
        }
    }

    let a2 = alpha * alpha;
    let m = win.vals[amax];
    let mut dv_max_chain = 0.0;
    for (i, src) in win.src.iter().enumerate() {
        if i == amax {
            // N(v_max) = v_max + epsilon exactly.
            if let Some((y, xx)) = src {
                d_scores[[*y, *xx]] += dw[i];
            }
            continue;
        }
        let v = win.vals[i];
        let diff = m - v;
        let e = (-a2 * diff * diff).exp();
        if let Some((y, xx)) = src {
            d_scores[[*y, *xx]] += dw[i] * e * (1.0 + 2.0 * a2 * diff * v);
        }
        // Dependence of every non-max weight on the window maximum and on
        // alpha. Padded entries have v = 0 and contribute nothing.
        dv_max_chain += dw[i] * e * v * (-2.0 * a2 * diff);
        *d_alpha += dw[i] * e * v * (-2.0 * alpha * diff * diff);
    }
    if let Some((y, xx)) = win.src[amax] {
        d_scores[[y, xx]] += dv_max_chain;
    }
}

/// Batched LAP reduction of `x` (N, C, H, W) under `scores` (N, H, W).
pub fn lap_pool_batch(
    x: &Array4<f64>,
    scores: &Array3<f64>,
    kernel: &KernelSpec,
    alpha: f64,
    epsilon: f64,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if scores.dim() != (n, h, w) {
        return Err(Error::argument(format!(
            "score maps {:?} do not match feature maps {:?}",
            scores.dim(),
            x.dim()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::argument("epsilon must be > 0"));
    }
    let (oh, ow) = kernel.output_dims(h, w)?;
    let mut out = Array4::zeros((n, c, oh, ow));
    let kk = kernel.kernel_h * kernel.kernel_w;
    let mut win = Window::with_capacity(kk);
    let mut weights = Vec::with_capacity(kk);
    let mut o = vec![0.0; c];
    for s in 0..n {
        let smap = scores.index_axis(Axis(0), s).to_owned();
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = kernel.window_origin(oy, ox);
                win.gather(&smap, y0, x0, kernel.kernel_h, kernel.kernel_w);
                window_weights(&win, alpha, epsilon, &mut weights);
                reduce_window(x, s, &win, &weights, &mut o);
                for ch in 0..c {
                    out[[s, ch, oy, ox]] = o[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`lap_pool_batch`]. `out` is the forward output. Returns the
/// gradients w.r.t. the feature maps, the score maps and `alpha`.
pub fn lap_pool_backward_batch(
    x: &Array4<f64>,
    scores: &Array3<f64>,
    kernel: &KernelSpec,
    alpha: f64,
    epsilon: f64,
    out: &Array4<f64>,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array3<f64>, f64) {
    let (n, c, h, w) = x.dim();
    let (_, _, oh, ow) = out.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    let mut d_scores = Array3::zeros((n, h, w));
    let mut d_alpha = 0.0;
    let kk = kernel.kernel_h * kernel.kernel_w;
    let mut win = Window::with_capacity(kk);
    let mut weights = Vec::with_capacity(kk);
    let mut dw = Vec::with_capacity(kk);
    for s in 0..n {
        let smap = scores.index_axis(Axis(0), s).to_owned();
        let mut ds = Array2::zeros((h, w));
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = kernel.window_origin(oy, ox);
                win.gather(&smap, y0, x0, kernel.kernel_h, kernel.kernel_w);
                let amax = window_weights(&win, alpha, epsilon, &mut weights);
                window_backward(
                    x,
                    s,
                    &win,
                    &weights,
                    amax,
                    alpha,
                    |ch| out[[s, ch, oy, ox]],
                    |ch| d_out[[s, ch, oy, ox]],
                    c,
                    &mut dw,
                    &mut dx,
                    &mut ds,
                    &mut d_alpha,
                );
            }
        }
        d_scores.index_axis_mut(Axis(0), s).assign(&ds);
    }
    (dx, d_scores, d_alpha)
}

/// Splits `in_dim` into `out_dim` contiguous regions the way standard
/// adaptive average pooling does: region `i` covers
/// `[floor(i*in/out), ceil((i+1)*in/out))`.
pub fn adaptive_regions(in_dim: usize, out_dim: usize) -> Vec<(usize, usize)> {
    (0..out_dim)
        .map(|i| {
            let start = i * in_dim / out_dim;
            let end = ((i + 1) * in_dim + out_dim - 1) / out_dim;
            (start, end)
        })
        .collect()
}

fn check_adaptive_dims(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::geometry("adaptive output dims must be >= 1"));
    }
    if out_h > h || out_w > w {
        return Err(Error::geometry(format!(
            "adaptive output {}x{} exceeds input {}x{}",
            out_h, out_w, h, w
        )));
    }
    Ok(())
}

/// Adaptive LAP reduction: the input is partitioned into the rectangular
/// regions adaptive average pooling uses and each region is reduced by the
/// weighted average with region-local normalization.
pub fn adaptive_pool_batch(
    x: &Array4<f64>,
    scores: &Array3<f64>,
    out_h: usize,
    out_w: usize,
    alpha: f64,
    epsilon: f64,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if scores.dim() != (n, h, w) {
        return Err(Error::argument("score maps do not match feature maps"));
    }
    check_adaptive_dims(h, w, out_h, out_w)?;
    let rows = adaptive_regions(h, out_h);
    let cols = adaptive_regions(w, out_w);
    let mut out = Array4::zeros((n, c, out_h, out_w));
    let mut win = Window::with_capacity(h * w);
    let mut weights = Vec::with_capacity(h * w);
    let mut o = vec![0.0; c];
    for s in 0..n {
        let smap = scores.index_axis(Axis(0), s).to_owned();
        for (oy, ys) in rows.iter().enumerate() {
            for (ox, xs) in cols.iter().enumerate() {
                win.gather_region(&smap, *ys, *xs);
                window_weights(&win, alpha, epsilon, &mut weights);
                reduce_window(x, s, &win, &weights, &mut o);
                for ch in 0..c {
                    out[[s, ch, oy, ox]] = o[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`adaptive_pool_batch`].
pub fn adaptive_pool_backward_batch(
    x: &Array4<f64>,
    scores: &Array3<f64>,
    out_h: usize,
    out_w: usize,
    alpha: f64,
    epsilon: f64,
    out: &Array4<f64>,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array3<f64>, f64) {
    let (n, c, h, w) = x.dim();
    let rows = adaptive_regions(h, out_h);
    let cols = adaptive_regions(w, out_w);
    let mut dx = Array4::zeros((n, c, h, w));
    let mut d_scores = Array3::zeros((n, h, w));
    let mut d_alpha = 0.0;
    let mut win = Window::with_capacity(h * w);
    let mut weights = Vec::with_capacity(h * w);
    let mut dw = Vec::with_capacity(h * w);
    for s in 0..n {
        let smap = scores.index_axis(Axis(0), s).to_owned();
        let mut ds = Array2::zeros((h, w));
        for (oy, ys) in rows.iter().enumerate() {
            for (ox, xs) in cols.iter().enumerate() {
                win.gather_region(&smap, *ys, *xs);
                let amax = window_weights(&win, alpha, epsilon, &mut weights);
                window_backward(
                    x,
                    s,
                    &win,
                    &weights,
                    amax,
                    alpha,
                    |ch| out[[s, ch, oy, ox]],
                    |ch| d_out[[s, ch, oy, ox]],
                    c,
                    &mut dw,
                    &mut dx,
                    &mut ds,
                    &mut d_alpha,
                );
            }
        }
        d_scores.index_axis_mut(Axis(0), s).assign(&ds);
    }
    (dx, d_scores, d_alpha)
}

fn batchify(x: &FeatureMap) -> Array4<f64> {
    let (c, h, w) = x.dim();
    let mut batch = Array4::zeros((1, c, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(x.data());
    batch
}

fn unbatch(x: Array4<f64>) -> FeatureMap {
    FeatureMap::new(x.index_axis(Axis(0), 0).to_owned()).expect("pooled output is finite")
}

/// Pools one sample under an explicit score map: every output position is
/// `sum(N(V) .* X_window) / sum(N(V))` with `V` the score window. Each output
/// channel value is a convex combination of that channel over the window.
pub fn lap_pool(
    x: &FeatureMap,
    scores: &Array2<f64>,
    kernel: &KernelSpec,
    alpha: f64,
    epsilon: f64,
) -> Result<FeatureMap> {
    let (_, h, w) = x.dim();
    let mut s3 = Array3::zeros((1, h, w));
    s3.index_axis_mut(Axis(0), 0).assign(scores);
    let out = lap_pool_batch(&batchify(x), &s3, kernel, alpha, epsilon)?;
    Ok(unbatch(out))
}

/// The full layer: score the pixels, then pool under the aggregated map.
/// Returns both the pooled features and the concept maps, which the losses
/// and the interpretation machinery consume.
pub fn lap_forward(
    x: &FeatureMap,
    kernel: &KernelSpec,
    scorer: &Scorer,
) -> Result<(FeatureMap, ConceptMaps)> {
    let batch = batchify(x);
    let (per_concept, aggregated, _) = scorer.score_batch(&batch)?;
    let out = lap_pool_batch(
        &batch,
        &aggregated,
        kernel,
        scorer.alpha_value(),
        scorer.epsilon,
    )?;
    let maps = ConceptMaps {
        per_concept: per_concept.index_axis(Axis(0), 0).to_owned(),
        aggregated: aggregated.index_axis(Axis(0), 0).to_owned(),
    };
    Ok((unbatch(out), maps))
}

/// Adaptive variant targeting an output size instead of a kernel geometry.
pub fn adaptive_lap(
    x: &FeatureMap,
    out_h: usize,
    out_w: usize,
    scorer: &Scorer,
) -> Result<(FeatureMap, ConceptMaps)> {
    let batch = batchify(x);
    let (per_concept, aggregated, _) = scorer.score_batch(&batch)?;
    let out = adaptive_pool_batch(
        &batch,
        &aggregated,
        out_h,
        out_w,
        scorer.alpha_value(),
        scorer.epsilon,
    )?;
    let maps = ConceptMaps {
        per_concept: per_concept.index_axis(Axis(0), 0).to_owned(),
        aggregated: aggregated.index_axis(Axis(0), 0).to_owned(),
    };
    Ok((unbatch(out), maps))
}
