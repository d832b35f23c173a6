//! Concept-map extraction, top-down cross-layer integration, and the
//! standalone map-based predictors.
//!
//! Shallow LAPs produce detailed but unreliable maps; deep ones are coarse
//! but accurate. Integration walks from the deepest layer down: an active
//! parent pixel passes credit to its active children (decayed by
//! `decay_alpha` per level), an inactive parent overrides its whole window.
//! A probability is "active" when strictly greater than 0.5, matching the
//! presence predictor.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Mode};
use crate::lap::{ConceptMaps, FeatureMap, KernelSpec};
use crate::losses::{topk_pixels, Direction};
use crate::train::softmax_cross_entropy;
use crate::util::upsample_nearest;

pub const DEFAULT_DECAY_ALPHA: f64 = 0.8;

/// Ordered (shallow to deep) concept maps with the window geometry linking
/// each layer's map resolution to the next.
#[derive(Debug, Clone)]
pub struct InterpretationStack {
    pub layers: Vec<(ConceptMaps, KernelSpec)>,
    pub input_size: (usize, usize),
    pub decay_alpha: f64,
}

impl InterpretationStack {
    pub fn heads(&self) -> usize {
        self.layers.first().map(|(m, _)| m.heads()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::argument("empty interpretation stack"));
        }
        if !(self.decay_alpha > 0.0 && self.decay_alpha <= 1.0) {
            return Err(Error::argument("decay_alpha must be in (0, 1]"));
        }
        let heads = self.heads();
        for window in self.layers.windows(2) {
            let (maps, kernel) = &window[0];
            let (next, _) = &window[1];
            if next.heads() != heads {
                return Err(Error::graph("stack layers disagree on head count"));
            }
            let (h, w) = maps.spatial();
            let out = kernel
                .output_dims(h, w)
                .map_err(|e| Error::graph(format!("stack geometry: {}", e)))?;
            if out != next.spatial() {
                return Err(Error::graph(format!(
                    "stack geometry mismatch: {}x{} windows over {}x{} give {}x{}, next map is {}x{}",
                    kernel.kernel_h, kernel.kernel_w, h, w, out.0, out.1,
                    next.spatial().0, next.spatial().1
                )));
            }
        }
        Ok(())
    }
}

/// Per-sample stacks captured from a single eval-mode forward pass, so the
/// maps are the exact arrays the prediction was computed from.
pub fn extract_stacks(
    model: &LayerGraph,
    images: &Array4<f64>,
) -> Result<Vec<InterpretationStack>> {
    let fwd = model.forward(images, Mode::Eval)?;
    if fwd.taps.is_empty() {
        return Err(Error::argument("model has no LAP layers to interpret"));
    }
    let n = images.dim().0;
    let input_size = (model.input_shape.1, model.input_shape.2);
    let mut stacks = Vec::with_capacity(n);
    for s in 0..n {
        let mut layers = Vec::with_capacity(fwd.taps.len());
        for tap in &fwd.taps {
            let kernel = tap.kernel.ok_or_else(|| {
                Error::graph(format!(
                    "LAP '{}' has a non-uniform adaptive partition; integration needs uniform windows",
                    tap.layer_id
                ))
            })?;
            layers.push((
                ConceptMaps {
                    per_concept: tap.per_concept.index_axis(Axis(0), s).to_owned(),
                    aggregated: tap.aggregated.index_axis(Axis(0), s).to_owned(),
                },
                kernel,
            ));
        }
        stacks.push(InterpretationStack {
            layers,
            input_size,
            decay_alpha: DEFAULT_DECAY_ALPHA,
        });
    }
    Ok(stacks)
}

/// Single-sample convenience wrapper over [`extract_stacks`].
pub fn extract_stack(model: &LayerGraph, x: &FeatureMap) -> Result<InterpretationStack> {
    let (c, h, w) = x.dim();
    let mut batch = Array4::zeros((1, c, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(x.data());
    Ok(extract_stacks(model, &batch)?.remove(0))
}

/// Parent output index for a child pixel: the covering window whose top-left
/// corner is nearest (for overlapping windows, the one starting closest to
/// the pixel); when no window covers the pixel, the nearest window overall.
fn assign_parent(y: usize, kernel: usize, stride: usize, pad: usize, out: usize) -> usize {
    let ypad = (y + pad) as isize;
    let s = stride as isize;
    let i_hi = ypad.div_euclid(s);
    let i_lo = (ypad - kernel as isize + 1 + s - 1).div_euclid(s);
    let lo = i_lo.max(0);
    let hi = i_hi.min(out as isize - 1);
    if lo <= hi {
        hi as usize
    } else {
        i_hi.clamp(0, out as isize - 1) as usize
    }
}

/// Per-parent maxima of the child map under each kernel window.
fn window_max(map: &Array2<f64>, kernel: &KernelSpec, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let mut out = Array2::from_elem((oh, ow), f64::NEG_INFINITY);
    for py in 0..oh {
        for px in 0..ow {
            let (y0, x0) = kernel.window_origin(py, px);
            let mut best = f64::NEG_INFINITY;
            for ky in 0..kernel.kernel_h {
                for kx in 0..kernel.kernel_w {
                    let y = y0 + ky as isize;
                    let x = x0 + kx as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        best = best.max(map[[y as usize, x as usize]]);
                    }
                }
            }
            out[[py, px]] = best;
        }
    }
    out
}

fn concept_layer_maps(stack: &InterpretationStack, concept: usize) -> Result<Vec<Array2<f64>>> {
    if concept >= stack.heads() {
        return Err(Error::argument(format!(
            "concept {} out of range (heads = {})",
            concept,
            stack.heads()
        )));
    }
    Ok(stack
        .layers
        .iter()
        .map(|(m, _)| m.per_concept.index_axis(Axis(0), concept).to_owned())
        .collect())
}

/// Integrates the stack for one concept into an input-resolution map.
pub fn integrate_stack(stack: &InterpretationStack, concept: usize) -> Result<Array2<f64>> {
    stack.validate()?;
    let maps = concept_layer_maps(stack, concept)?;
    let levels = maps.len();
    let mut r = maps[levels - 1].clone();
    for li in (0..levels - 1).rev() {
        let kernel = &stack.layers[li].1;
        let m = &maps[li];
        let (h, w) = m.dim();
        let (oh, ow) = r.dim();
        let decay = stack.decay_alpha.powi((levels - 1 - li) as i32);
        let wmax = window_max(m, kernel, oh, ow);
        let mut next = Array2::zeros((h, w));
        for y in 0..h {
            let py = assign_parent(y, kernel.kernel_h, kernel.stride_h, kernel.padding, oh);
            for x in 0..w {
                let px = assign_parent(x, kernel.kernel_w, kernel.stride_w, kernel.padding, ow);
                let parent = r[[py, px]];
                next[[y, x]] = if parent > 0.5 && wmax[[py, px]] > 0.5 {
                    let p = m[[y, x]] * decay;
                    if m[[y, x]] > 0.5 {
                        parent.max(p)
                    } else {
                        p
                    }
                } else {
                    parent
                };
            }
        }
        r = next;
    }
    Ok(upsample_nearest(&r, stack.input_size.0, stack.input_size.1))
}

/// The unclipped variant: scores accumulate down the stack
/// (`acc_l = acc_parent + decay^(L-1-l) * p_l`) so the ordering below 0.5 is
/// preserved for top-scored selection. Returns the input-resolution map.
pub fn integrate_accumulated(stack: &InterpretationStack, concept: usize) -> Result<Array2<f64>> {
    stack.validate()?;
    let maps = concept_layer_maps(stack, concept)?;
    let levels = maps.len();
    let mut acc = maps[levels - 1].clone();
    for li in (0..levels - 1).rev() {
        let kernel = &stack.layers[li].1;
        let m = &maps[li];
        let (h, w) = m.dim();
        let (oh, ow) = acc.dim();
        let decay = stack.decay_alpha.powi((levels - 1 - li) as i32);
        let mut next = Array2::zeros((h, w));
        for y in 0..h {
            let py = assign_parent(y, kernel.kernel_h, kernel.stride_h, kernel.padding, oh);
            for x in 0..w {
                let px = assign_parent(x, kernel.kernel_w, kernel.stride_w, kernel.padding, ow);
                next[[y, x]] = acc[[py, px]] + decay * m[[y, x]];
            }
        }
        acc = next;
    }
    Ok(upsample_nearest(&acc, stack.input_size.0, stack.input_size.1))
}

/// Top-k input pixels under the accumulated integration scores, ranked
/// descending with deterministic row-major tie order.
pub fn integrate_topk_variant(
    stack: &InterpretationStack,
    concept: usize,
    k: usize,
) -> Result<Vec<(usize, usize)>> {
    let acc = integrate_accumulated(stack, concept)?;
    topk_pixels(&acc, k, Direction::Highest)
}

/// Presence rule: a concept is predicted present when any pixel of its map
/// is strictly above 0.5.
pub fn lap_predict_presence(maps: &ConceptMaps, concept: usize) -> Result<bool> {
    if concept >= maps.heads() {
        return Err(Error::argument(format!(
            "concept {} out of range (heads = {})",
            concept,
            maps.heads()
        )));
    }
    Ok(maps
        .per_concept
        .index_axis(Axis(0), concept)
        .iter()
        .any(|&p| p > 0.5))
}

/// Class rule: the class whose head has the larger total importance wins;
/// ties resolve toward the lower index.
pub fn lap_predict_class(maps: &ConceptMaps, class_heads: &[usize]) -> Result<usize> {
    if class_heads.len() < 2 {
        return Err(Error::argument("class prediction needs at least two heads"));
    }
    let sizes = concept_size_features(maps);
    let mut best = 0usize;
    for (idx, &head) in class_heads.iter().enumerate() {
        if head >= maps.heads() {
            return Err(Error::argument(format!("head {} out of range", head)));
        }
        if sizes[head] > sizes[class_heads[best]] {
            best = idx;
        }
    }
    Ok(best)
}

/// Concept size features: the per-head sum of pixel importances.
pub fn concept_size_features(maps: &ConceptMaps) -> Array1<f64> {
    let heads = maps.heads();
    Array1::from_shape_fn(heads, |c| maps.per_concept.index_axis(Axis(0), c).sum())
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 16,
            epochs: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// A 2-layer MLP over concept size features. Inputs are standardized with
/// statistics frozen at fit time.
#[derive(Debug, Clone)]
pub struct Probe {
    mean: Array1<f64>,
    std: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Probe {
    fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut x = features.clone();
        for mut row in x.outer_iter_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        let mut z1 = x.dot(&self.w1.t());
        for mut row in z1.outer_iter_mut() {
            row += &self.b1;
        }
        let a1 = z1.mapv(|v| v.max(0.0));
        let mut z2 = a1.dot(&self.w2.t());
        for mut row in z2.outer_iter_mut() {
            row += &self.b2;
        }
        z2
    }

    pub fn predict_batch(&self, features: &Array2<f64>) -> Vec<usize> {
        crate::train::argmax_rows(&self.logits(features))
    }
}

/// Trains the probe on `(n, heads)` feature rows with full-batch Adam.
pub fn fc_probe_train(
    features: &Array2<f64>,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<Probe> {
    let (n, dim) = features.dim();
    if n == 0 || labels.len() != n {
        return Err(Error::argument("features/labels mismatch"));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Fitting(
            "probe training needs at least two classes".into(),
        ));
    }

    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let mut std = Array1::zeros(dim);
    for j in 0..dim {
        let col = features.index_axis(Axis(1), j);
        let m = mean[j];
        let var: f64 = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        std[j] = var.sqrt().max(1e-8);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound1 = 1.0 / (dim as f64).sqrt();
    let bound2 = 1.0 / (cfg.hidden as f64).sqrt();
    let mut probe = Probe {
        mean,
        std,
        w1: Array2::from_shape_fn((cfg.hidden, dim), |_| rng.gen_range(-bound1..bound1)),
        b1: Array1::zeros(cfg.hidden),
        w2: Array2::from_shape_fn((classes, cfg.hidden), |_| rng.gen_range(-bound2..bound2)),
        b2: Array1::zeros(classes),
    };

    // Standardized inputs, computed once.
    let mut x = features.clone();
    for mut row in x.outer_iter_mut() {
        row -= &probe.mean;
        row /= &probe.std;
    }

    fn adam_update(
        vals: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        lr: f64,
        bc1: f64,
        bc2: f64,
    ) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        for i in 0..vals.len() {
            let g = grads[i];
            m[i] = B1 * m[i] + (1.0 - B1) * g;
            v[i] = B2 * v[i] + (1.0 - B2) * g * g;
            vals[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
        }
    }

    let mut m1 = vec![0.0; probe.w1.len()];
    let mut v1 = m1.clone();
    let mut m2 = vec![0.0; probe.w2.len()];
    let mut v2 = m2.clone();
    let mut mb1 = vec![0.0; cfg.hidden];
    let mut vb1 = mb1.clone();
    let mut mb2 = vec![0.0; classes];
    let mut vb2 = mb2.clone();

    for t in 1..=cfg.epochs {
        let mut z1 = x.dot(&probe.w1.t());
        for mut row in z1.outer_iter_mut() {
            row += &probe.b1;
        }
        let a1 = z1.mapv(|q| q.max(0.0));
        let mut z2 = a1.dot(&probe.w2.t());
        for mut row in z2.outer_iter_mut() {
            row += &probe.b2;
        }
        let (_, d2) = softmax_cross_entropy(&z2, labels)?;
        let dw2 = d2.t().dot(&a1);
        let db2 = d2.sum_axis(Axis(0));
        let mut d1 = d2.dot(&probe.w2);
        d1.zip_mut_with(&z1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let dw1 = d1.t().dot(&x);
        let db1 = d1.sum_axis(Axis(0));

        let bc1 = 1.0 - 0.9f64.powi(t as i32);
        let bc2 = 1.0 - 0.999f64.powi(t as i32);
        let dw1 = dw1.as_standard_layout().to_owned();
        let dw2 = dw2.as_standard_layout().to_owned();
        adam_update(
            probe.w1.as_slice_mut().unwrap(),
            dw1.as_slice().unwrap(),
            &mut m1,
            &mut v1,
            cfg.lr,
            bc1,
            bc2,
        );
        adam_update(
            probe.w2.as_slice_mut().unwrap(),
            dw2.as_slice().unwrap(),
            &mut m2,
            &mut v2,
            cfg.lr,
            bc1,
            bc2,
        );
        adam_update(
            probe.b1.as_slice_mut().unwrap(),
            db1.as_slice().unwrap(),
            &mut mb1,
            &mut vb1,
            cfg.lr,
            bc1,
            bc2,
        );
        adam_update(
            probe.b2.as_slice_mut().unwrap(),
            db2.as_slice().unwrap(),
            &mut mb2,
            &mut vb2,
            cfg.lr,
            bc1,
            bc2,
        );
    }
    Ok(probe)
}
