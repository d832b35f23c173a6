//! Knowledge-injection objectives for the concept heads.
//!
//! Three families of terms train the scoring heads:
//!
//! * concept discrimination — on samples containing a concept, at least a
//!   MinAR fraction of pixels must be active and at most a MaxAR fraction may
//!   be; on samples without it, the IAR top-scored pixels must be inactive.
//!   Pixel membership in the top/bottom sets comes from a *detached*
//!   discriminative selector so a badly initialized head cannot lock onto a
//!   wrong zone.
//! * concordance — a Jensen-Shannon style divergence pulling consecutive
//!   layers toward highlighting the same clues, evaluated only where the two
//!   maps disagree by more than a threshold.
//! * bounding-box supervision — the fully supervised variant that replaces
//!   the ratio heuristics with expert boxes.
//!
//! All losses are non-negative and return gradients w.r.t. the probability
//! maps; pixel-selection sets are treated as constants of the backward pass.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lap::ConceptMaps;
use crate::util::upsample_nearest;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any
/// logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn grad_passes_clamp(p: f64) -> bool {
    p > PROB_CLAMP && p < 1.0 - PROB_CLAMP
}

/// Rectangle in pixel coordinates: `x`/`y` top-left corner, `w`/`h` extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoxRect {
    /// Scales input-resolution corners to a map resolution, rounding outward
    /// so annotated evidence is never dropped. Degenerate results are clamped
    /// to at least one pixel.
    pub fn to_map_resolution(
        &self,
        input: (usize, usize),
        map: (usize, usize),
    ) -> (usize, usize, usize, usize) {
        let (ih, iw) = input;
        let (mh, mw) = map;
        let ry = mh as f64 / ih as f64;
        let rx = mw as f64 / iw as f64;
        let y0 = ((self.y as f64 * ry).floor() as usize).min(mh - 1);
        let x0 = ((self.x as f64 * rx).floor() as usize).min(mw - 1);
        let mut y1 = (((self.y + self.h) as f64 * ry).ceil() as usize).min(mh);
        let mut x1 = (((self.x + self.w) as f64 * rx).ceil() as usize).min(mw);
        if y1 <= y0 || x1 <= x0 {
            log::warn!(
                "box {:?} degenerates at map resolution {}x{}; clamping to one pixel",
                self,
                mh,
                mw
            );
            y1 = y1.max(y0 + 1);
            x1 = x1.max(x0 + 1);
        }
        (y0, x0, y1, x1)
    }
}

/// Which concepts a sample contains, plus optional expert boxes per concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptAnnotation {
    pub sample_id: String,
    pub concepts: BTreeSet<usize>,
    pub boxes: Vec<(usize, BoxRect)>,
}

impl ConceptAnnotation {
    pub fn new(sample_id: impl Into<String>, concepts: impl IntoIterator<Item = usize>) -> Self {
        ConceptAnnotation {
            sample_id: sample_id.into(),
            concepts: concepts.into_iter().collect(),
            boxes: Vec::new(),
        }
    }

    pub fn contains(&self, concept: usize) -> bool {
        self.concepts.contains(&concept)
    }

    /// Concept indices must be in `[0, heads)` and boxes inside the image.
    pub fn validate(&self, heads: usize, image: (usize, usize)) -> Result<()> {
        for &c in &self.concepts {
            if c >= heads {
                return Err(Error::argument(format!(
                    "sample {}: concept index {} out of range (heads = {})",
                    self.sample_id, c, heads
                )));
            }
        }
        let (ih, iw) = image;
        for (c, b) in &self.boxes {
            if *c >= heads {
                return Err(Error::argument(format!(
                    "sample {}: box concept index {} out of range",
                    self.sample_id, c
                )));
            }
            if b.w == 0 || b.h == 0 || b.x + b.w > iw || b.y + b.h > ih {
                return Err(Error::argument(format!(
                    "sample {}: box {:?} outside {}x{} image bounds",
                    self.sample_id, b, ih, iw
                )));
            }
        }
        Ok(())
    }

    pub fn boxes_for(&self, concept: usize) -> Vec<BoxRect> {
        self.boxes
            .iter()
            .filter(|(c, _)| *c == concept)
            .map(|(_, b)| *b)
            .collect()
    }
}

/// Active-ratio settings for one concept head. Absent entries skip the
/// corresponding loss term, which is how free heads are configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct HeadRatios {
    pub min_ar: Option<f64>,
    pub max_ar: Option<f64>,
    pub iar: Option<f64>,
}

/// Multipliers applied on top of the fixed 2/1/1 balance of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub min_ar: f64,
    pub max_ar: f64,
    pub iar: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            min_ar: 1.0,
            max_ar: 1.0,
            iar: 1.0,
        }
    }
}

/// Concept-discrimination settings for one LAP layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscLossConfig {
    /// Ratios per concept head.
    pub heads: Vec<HeadRatios>,
    /// Concordance threshold `t`; only pixels whose probabilities in two
    /// consecutive layers differ by more than `t` enter the concordance loss.
    pub concordance_t: f64,
    /// Restrict concordance to pixels active in the shallow layer and
    /// inactive in the deep one (receptive-field gating).
    pub one_sided_concordance: bool,
    pub weights: TermWeights,
}

impl DiscLossConfig {
    /// The same ratios for every head.
    pub fn uniform(
        heads: usize,
        min_ar: Option<f64>,
        max_ar: Option<f64>,
        iar: Option<f64>,
    ) -> Self {
        DiscLossConfig {
            heads: vec![
                HeadRatios {
                    min_ar,
                    max_ar,
                    iar,
                };
                heads
            ],
            concordance_t: 0.1,
            one_sided_concordance: false,
            weights: TermWeights::default(),
        }
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.heads.len() != heads {
            return Err(Error::config(format!(
                "disc loss configures {} heads, layer has {}",
                self.heads.len(),
                heads
            )));
        }
        for (i, hr) in self.heads.iter().enumerate() {
            for (name, r) in [("min_ar", hr.min_ar), ("max_ar", hr.max_ar), ("iar", hr.iar)] {
                if let Some(r) = r {
                    if !(r > 0.0 && r <= 1.0) {
                        return Err(Error::config(format!(
                            "head {}: {} = {} outside (0, 1]",
                            i, name, r
                        )));
                    }
                }
            }
            if let (Some(lo), Some(hi)) = (hr.min_ar, hr.max_ar) {
                if lo > hi {
                    return Err(Error::config(format!(
                        "head {}: min_ar {} > max_ar {}",
                        i, lo, hi
                    )));
                }
            }
        }
        if !(self.concordance_t > 0.0 && self.concordance_t < 1.0) {
            return Err(Error::config("concordance threshold must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Number of pixels a ratio selects on an `hw`-pixel map: `ceil(ratio * hw)`.
pub fn ratio_count(ratio: f64, hw: usize) -> usize {
    ((ratio * hw as f64).ceil() as usize).min(hw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Highest,
    Lowest,
}

/// Exactly `k` pixel coordinates with extremal values. Ties resolve by
/// row-major index, so the result is deterministic.
pub fn topk_pixels(map: &Array2<f64>, k: usize, direction: Direction) -> Result<Vec<(usize, usize)>> {
    let hw = map.len();
    if k > hw {
        return Err(Error::argument(format!(
            "k = {} out of range for a {}-pixel map",
            k, hw
        )));
    }
    let (_, w) = map.dim();
    // Logical row-major order regardless of the array's memory layout.
    let vals: Vec<f64> = map.iter().cloned().collect();
    let mut idx: Vec<usize> = (0..hw).collect();
    match direction {
        Direction::Highest => idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b))),
        Direction::Lowest => idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b))),
    }
    Ok(idx[..k].iter().map(|&i| (i / w, i % w)).collect())
}

fn check_batch(
    prob_maps: &[ConceptMaps],
    set_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
) -> Result<(usize, usize, usize, usize)> {
    if prob_maps.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    if prob_maps.len() != set_maps.len() || prob_maps.len() != annotations.len() {
        return Err(Error::argument(format!(
            "batch length mismatch: {} maps, {} selector maps, {} annotations",
            prob_maps.len(),
            set_maps.len(),
            annotations.len()
        )));
    }
    let heads = prob_maps[0].heads();
    let (h, w) = prob_maps[0].spatial();
    for m in prob_maps.iter().chain(set_maps.iter()) {
        if m.heads() != heads || m.spatial() != (h, w) {
            return Err(Error::argument("inconsistent map shapes in batch"));
        }
    }
    for ann in annotations {
        ann.validate(heads, (usize::MAX, usize::MAX))?;
    }
    Ok((prob_maps.len(), heads, h, w))
}

struct Eq5Accum<'a> {
    grads: Option<&'a mut [Array3<f64>]>,
}

impl Eq5Accum<'_> {
    // loss contribution `-scale * ln(p)` with its gradient `-scale / p`.
    fn neg_log(&mut self, sample: usize, head: usize, pos: (usize, usize), p: f64, scale: f64) -> f64 {
        let pc = clamp_prob(p);
        if let Some(grads) = self.grads.as_mut() {
            if grad_passes_clamp(p) {
                grads[sample][[head, pos.0, pos.1]] += -scale / pc;
            }
        }
        -scale * pc.ln()
    }

    // loss contribution `-scale * ln(1 - p)` with gradient `scale / (1 - p)`.
    fn neg_log1m(&mut self, sample: usize, head: usize, pos: (usize, usize), p: f64, scale: f64) -> f64 {
        let pc = clamp_prob(p);
        if let Some(grads) = self.grads.as_mut() {
            if grad_passes_clamp(p) {
                grads[sample][[head, pos.0, pos.1]] += scale / (1.0 - pc);
            }
        }
        -scale * (1.0 - pc).ln()
    }
}

#[allow(clippy::too_many_arguments)]
fn eq5_terms(
    prob_maps: &[ConceptMaps],
    set_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
    head_cfg: &[HeadRatios],
    weights: &TermWeights,
    double_first_term: bool,
    mut grads: Option<&mut Vec<Array3<f64>>>,
) -> Result<f64> {
    let (n, heads, h, w) = check_batch(prob_maps, set_maps, annotations)?;
    if head_cfg.len() != heads {
        return Err(Error::config(format!(
            "loss configures {} heads, maps have {}",
            head_cfg.len(),
            heads
        )));
    }
    let hw = h * w;
    let first_factor = if double_first_term { 2.0 } else { 1.0 };
    let mut total = 0.0;

    for (c, ratios) in head_cfg.iter().enumerate() {
        let positives: Vec<usize> = (0..n).filter(|&s| annotations[s].contains(c)).collect();
        let negatives: Vec<usize> = (0..n).filter(|&s| !annotations[s].contains(c)).collect();
        let n_pos = positives.len();
        let n_neg = negatives.len();

        // MinAR: the top-k1 selector pixels of concept-positive samples must
        // be active.
        if let Some(min_ar) = ratios.min_ar {
            if n_pos > 0 {
                let k1 = ratio_count(min_ar, hw);
                let scale = first_factor * weights.min_ar / (k1 as f64 * n_pos as f64);
                for &s in &positives {
                    let sel = set_maps[s].per_concept.index_axis(ndarray::Axis(0), c);
                    let top = topk_pixels(&sel.to_owned(), k1, Direction::Highest)?;
                    let mut acc = Eq5Accum { grads: grads.as_mut().map(|g| &mut g[..]) };
                    for (y, x) in top {
                        let p = prob_maps[s].per_concept[[c, y, x]];
                        total += acc.neg_log(s, c, (y, x), p, scale);
                    }
                }
            }
        }

        // MaxAR: the bottom-k2 selector pixels of concept-positive samples
        // must be inactive.
        if let Some(max_ar) = ratios.max_ar {
            if n_pos > 0 {
                let k2 = ((1.0 - max_ar) * hw as f64).ceil() as usize;
                let k2 = k2.min(hw);
                if k2 > 0 {
                    let scale = weights.max_ar / (k2 as f64 * n_pos as f64);
                    for &s in &positives {
                        let sel = set_maps[s].per_concept.index_axis(ndarray::Axis(0), c);
                        let bot = topk_pixels(&sel.to_owned(), k2, Direction::Lowest)?;
                        let mut acc = Eq5Accum { grads: grads.as_mut().map(|g| &mut g[..]) };
                        for (y, x) in bot {
                            let p = prob_maps[s].per_concept[[c, y, x]];
                            total += acc.neg_log1m(s, c, (y, x), p, scale);
                        }
                    }
                }
            }
        }

        // IAR: the top-k3 selector pixels of concept-negative samples must be
        // inactive.
        if let Some(iar) = ratios.iar {
            if n_neg > 0 {
                let k3 = ratio_count(iar, hw);
                let scale = weights.iar / (k3 as f64 * n_neg as f64);
                for &s in &negatives {
                    let sel = set_maps[s].per_concept.index_axis(ndarray::Axis(0), c);
                    let top = topk_pixels(&sel.to_owned(), k3, Direction::Highest)?;
                    let mut acc = Eq5Accum { grads: grads.as_mut().map(|g| &mut g[..]) };
                    for (y, x) in top {
                        let p = prob_maps[s].per_concept[[c, y, x]];
                        total += acc.neg_log1m(s, c, (y, x), p, scale);
                    }
                }
            }
        }
    }
    Ok(total)
}

fn zero_grads_like(maps: &[ConceptMaps]) -> Vec<Array3<f64>> {
    maps.iter()
        .map(|m| Array3::zeros(m.per_concept.raw_dim()))
        .collect()
}

/// The per-LAP concept-discrimination loss. Pixel sets come from the
/// detached selector maps; probabilities from the concept maps. Concepts
/// with no positive (or negative) samples in the batch skip the terms that
/// would average over the missing side.
pub fn concept_discrimination_loss(
    concept_maps: &[ConceptMaps],
    selector_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
    cfg: &DiscLossConfig,
) -> Result<f64> {
    eq5_terms(
        concept_maps,
        selector_maps,
        annotations,
        &cfg.heads,
        &cfg.weights,
        true,
        None,
    )
}

/// As [`concept_discrimination_loss`] but also returns the gradient w.r.t.
/// each sample's per-concept probability maps.
pub fn concept_discrimination_loss_grad(
    concept_maps: &[ConceptMaps],
    selector_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
    cfg: &DiscLossConfig,
) -> Result<(f64, Vec<Array3<f64>>)> {
    let mut grads = zero_grads_like(concept_maps);
    let loss = eq5_terms(
        concept_maps,
        selector_maps,
        annotations,
        &cfg.heads,
        &cfg.weights,
        true,
        Some(&mut grads),
    )?;
    Ok((loss, grads))
}

fn selector_ratios(heads: usize) -> Vec<HeadRatios> {
    vec![
        HeadRatios {
            min_ar: Some(1.0),
            max_ar: None,
            iar: Some(1.0),
        };
        heads
    ]
}

/// Training objective of the discriminative selector: the first and third
/// terms only, with every ratio forced to cover the whole map and without
/// the doubling of the first term. Gradients flow only into the selector;
/// its input features are detached by the layer executor.
pub fn discriminative_selector_loss(
    selector_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
) -> Result<f64> {
    let heads = selector_maps.first().map(|m| m.heads()).unwrap_or(0);
    eq5_terms(
        selector_maps,
        selector_maps,
        annotations,
        &selector_ratios(heads),
        &TermWeights::default(),
        false,
        None,
    )
}

/// As [`discriminative_selector_loss`] with gradients w.r.t. the selector maps.
pub fn discriminative_selector_loss_grad(
    selector_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
) -> Result<(f64, Vec<Array3<f64>>)> {
    let heads = selector_maps.first().map(|m| m.heads()).unwrap_or(0);
    let mut grads = zero_grads_like(selector_maps);
    let loss = eq5_terms(
        selector_maps,
        selector_maps,
        annotations,
        &selector_ratios(heads),
        &TermWeights::default(),
        false,
        Some(&mut grads),
    )?;
    Ok((loss, grads))
}

fn concordance_impl(
    maps_l: &[ConceptMaps],
    maps_l1: &[ConceptMaps],
    t: f64,
    one_sided: bool,
    mut grads: Option<(&mut Vec<Array3<f64>>, &mut Vec<Array3<f64>>)>,
) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::argument(format!(
            "concordance threshold {} outside (0, 1)",
            t
        )));
    }
    if maps_l.is_empty() || maps_l.len() != maps_l1.len() {
        return Err(Error::argument("concordance needs equally sized batches"));
    }
    let heads = maps_l[0].heads();
    let (h, w) = maps_l[0].spatial();
    let (dh, dw) = maps_l1[0].spatial();
    let n = maps_l.len();
    let mut total = 0.0;

    for s in 0..n {
        if maps_l[s].heads() != heads || maps_l1[s].heads() != heads {
            return Err(Error::argument("inconsistent head counts in batch"));
        }
        for c in 0..heads {
            let shallow = maps_l[s].per_concept.index_axis(ndarray::Axis(0), c);
            let deep_src = maps_l1[s].per_concept.index_axis(ndarray::Axis(0), c);
            // The deeper (coarser) map is brought to the shallow resolution
            // by nearest-neighbor so probabilities are compared, not invented.
            let deep = upsample_nearest(&deep_src.to_owned(), h, w);

            let mut selected: Vec<(usize, usize)> = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let diff = shallow[[y, x]] - deep[[y, x]];
                    let hit = if one_sided { diff > t } else { diff.abs() > t };
                    if hit {
                        selected.push((y, x));
                    }
                }
            }
            let m = selected.len();
            if m == 0 {
                continue;
            }
            let norm = 1.0 / (2.0 * m as f64) / (n as f64 * heads as f64);
            for (y, x) in selected {
                let a = clamp_prob(shallow[[y, x]]);
                let b = clamp_prob(deep[[y, x]]);
                let log_ab = a.ln() - b.ln();
                let log_1ab = (1.0 - a).ln() - (1.0 - b).ln();
                total += norm * ((a - b) * log_ab + (b - a) * log_1ab);
                if let Some((gl, gl1)) = grads.as_mut() {
                    let da = norm * (log_ab + (a - b) / a - log_1ab - (b - a) / (1.0 - a));
                    let db = norm * (-log_ab - (a - b) / b + log_1ab + (b - a) / (1.0 - b));
                    if grad_passes_clamp(shallow[[y, x]]) {
                        gl[s][[c, y, x]] += da;
                    }
                    if grad_passes_clamp(deep[[y, x]]) {
                        let sy = crate::util::nearest_src(y, h, dh);
                        let sx = crate::util::nearest_src(x, w, dw);
                        gl1[s][[c, sy, sx]] += db;
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Jensen-Shannon concordance between two consecutive LAP layers, averaged
/// over samples and concepts. Zero when no pixel pair differs by more than
/// `t` (the empty selection is not a division by zero).
pub fn concordance_loss(
    maps_l: &[ConceptMaps],
    maps_l1: &[ConceptMaps],
    t: f64,
    one_sided: bool,
) -> Result<f64> {
    concordance_impl(maps_l, maps_l1, t, one_sided, None)
}

/// As [`concordance_loss`] with gradients w.r.t. both layers' maps.
pub fn concordance_loss_grad(
    maps_l: &[ConceptMaps],
    maps_l1: &[ConceptMaps],
    t: f64,
    one_sided: bool,
) -> Result<(f64, Vec<Array3<f64>>, Vec<Array3<f64>>)> {
    let mut gl = zero_grads_like(maps_l);
    let mut gl1 = zero_grads_like(maps_l1);
    let loss = concordance_impl(maps_l, maps_l1, t, one_sided, Some((&mut gl, &mut gl1)))?;
    Ok((loss, gl, gl1))
}

fn bbox_impl(
    concept_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
    input_size: (usize, usize),
    cfg: &DiscLossConfig,
    mut grads: Option<&mut Vec<Array3<f64>>>,
) -> Result<f64> {
    if concept_maps.is_empty() || concept_maps.len() != annotations.len() {
        return Err(Error::argument("batch length mismatch"));
    }
    let heads = concept_maps[0].heads();
    let (h, w) = concept_maps[0].spatial();
    let hw = h * w;
    let n = concept_maps.len();
    let mut total = 0.0;

    for (c, ratios) in cfg.heads.iter().enumerate().take(heads) {
        let positives: Vec<usize> = (0..n)
            .filter(|&s| annotations[s].contains(c) && !annotations[s].boxes_for(c).is_empty())
            .collect();
        let negatives: Vec<usize> = (0..n).filter(|&s| !annotations[s].contains(c)).collect();
        let n_pos = positives.len();
        let n_neg = negatives.len();

        for &s in &positives {
            let map = concept_maps[s].per_concept.index_axis(ndarray::Axis(0), c);
            let boxes = annotations[s].boxes_for(c);
            let mut inside = Array2::<bool>::from_elem((h, w), false);

            // Positive term: the top half of each box's pixels by probability.
            let per_box = cfg.weights.min_ar * 2.0 / (boxes.len() as f64 * n_pos as f64);
            for b in &boxes {
                let (y0, x0, y1, x1) = b.to_map_resolution(input_size, (h, w));
                let mut px: Vec<(usize, usize, f64)> = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        inside[[y, x]] = true;
                        px.push((y, x, map[[y, x]]));
                    }
                }
                px.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
                let half = (px.len() + 1) / 2;
                let scale = per_box / half as f64;
                let mut acc = Eq5Accum { grads: grads.as_mut().map(|g| &mut g[..]) };
                for &(y, x, p) in px.iter().take(half) {
                    total += acc.neg_log(s, c, (y, x), p, scale);
                }
            }

            // Negative term: every out-of-box pixel.
            let n_out = hw - inside.iter().filter(|&&b| b).count();
            if n_out > 0 {
                let scale = cfg.weights.max_ar / (n_out as f64 * n_pos as f64);
                let mut acc = Eq5Accum { grads: grads.as_mut().map(|g| &mut g[..]) };
                for y in 0..h {
                    for x in 0..w {
                        if !inside[[y, x]] {
                            total += acc.neg_log1m(s, c, (y, x), map[[y, x]], scale);
                        }
                    }
                }
            }
        }

        // IAR term on negative samples, exactly as in the weak loss but with
        // sets chosen from the concept maps themselves.
        if let Some(iar) = ratios.iar {
            if n_neg > 0 {
                let k3 = ratio_count(iar, hw);
                let scale = cfg.weights.iar / (k3 as f64 * n_neg as f64);
                for &s in &negatives {
                    let map = concept_maps[s].per_concept.index_axis(ndarray::Axis(0), c);
                    let top = topk_pixels(&map.to_owned(), k3, Direction::Highest)?;
                    let mut acc = Eq5Accum { grads: grads.as_mut().map(|g| &mut g[..]) };
                    for (y, x) in top {
                        let p = concept_maps[s].per_concept[[c, y, x]];
                        total += acc.neg_log1m(s, c, (y, x), p, scale);
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Fully supervised variant: boxes mark the active evidence. The positive
/// term covers the top half (by probability) of each box's pixels, the
/// negative term covers all out-of-box pixels of positive samples, and the
/// IAR term applies to concept-negative samples as in the weak loss.
pub fn bbox_supervision_loss(
    concept_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
    input_size: (usize, usize),
    cfg: &DiscLossConfig,
) -> Result<f64> {
    bbox_impl(concept_maps, annotations, input_size, cfg, None)
}

/// As [`bbox_supervision_loss`] with gradients w.r.t. the concept maps.
pub fn bbox_supervision_loss_grad(
    concept_maps: &[ConceptMaps],
    annotations: &[ConceptAnnotation],
    input_size: (usize, usize),
    cfg: &DiscLossConfig,
) -> Result<(f64, Vec<Array3<f64>>)> {
    let mut grads = zero_grads_like(concept_maps);
    let loss = bbox_impl(concept_maps, annotations, input_size, cfg, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Relative weights of the combined training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub task: f64,
    pub per_lap: f64,
    pub per_pair: f64,
    /// Weight of the selector objective; isolated from the rest of the
    /// model by detachment, so it only scales the selector's own updates.
    pub selector: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 1.0,
            per_lap: 0.25,
            per_pair: 0.25,
            selector: 0.25,
        }
    }
}

/// Linear combination of the task loss, the per-LAP discrimination losses
/// and the per-pair concordance losses.
pub fn combine_losses(
    task_loss: f64,
    per_lap: &[f64],
    per_pair: &[f64],
    weights: &LossWeights,
) -> Result<f64> {
    for w in [weights.task, weights.per_lap, weights.per_pair] {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::argument("loss weights must be finite and >= 0"));
        }
    }
    let lap_sum: f64 = per_lap.iter().sum();
    let pair_sum: f64 = per_pair.iter().sum();
    Ok(weights.task * task_loss + weights.per_lap * lap_sum + weights.per_pair * pair_sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn maps_from(per_concept: Array3<f64>) -> ConceptMaps {
        let agg = per_concept.index_axis(ndarray::Axis(0), 0).to_owned();
        ConceptMaps {
            per_concept,
            aggregated: agg,
        }
    }

    fn uniform_maps(heads: usize, h: usize, w: usize, p: f64) -> ConceptMaps {
        maps_from(Array3::from_elem((heads, h, w), p))
    }

    #[test]
    fn topk_full_and_empty_selections() {
        let map = array![[0.9, 0.1], [0.5, 0.5]];
        assert_eq!(topk_pixels(&map, 4, Direction::Highest).unwrap().len(), 4);
        assert!(topk_pixels(&map, 0, Direction::Highest).unwrap().is_empty());
        assert!(topk_pixels(&map, 5, Direction::Highest).is_err());
    }

    #[test]
    fn topk_picks_the_exhaustive_extremum() {
        let map = array![[0.9, 0.1], [0.5, 0.5]];
        assert_eq!(topk_pixels(&map, 1, Direction::Highest).unwrap(), vec![(0, 0)]);
        assert_eq!(topk_pixels(&map, 1, Direction::Lowest).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn topk_breaks_ties_in_row_major_order() {
        let map = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(
            topk_pixels(&map, 2, Direction::Highest).unwrap(),
            vec![(0, 0), (0, 1)]
        );
    }

    #[test]
    fn ratio_counts_use_the_ceiling() {
        assert_eq!(ratio_count(0.1, 16), 2); // ceil(1.6)
        assert_eq!(ratio_count(1.0, 16), 16);
        assert_eq!(ratio_count(0.01, 16), 1);
    }

    #[test]
    fn single_pixel_min_ar_is_minus_two_log_p() {
        let p = 0.37;
        let maps = vec![uniform_maps(1, 1, 1, p)];
        let sel = vec![uniform_maps(1, 1, 1, 0.5)];
        let ann = vec![ConceptAnnotation::new("s0", [0])];
        let cfg = DiscLossConfig::uniform(1, Some(1.0), None, None);
        let loss = concept_discrimination_loss(&maps, &sel, &ann, &cfg).unwrap();
        assert_abs_diff_eq!(loss, -2.0 * p.ln(), epsilon = 1e-10);
    }

    #[test]
    fn perfect_targets_give_near_zero_loss() {
        let hi = 1.0 - 1e-7;
        let lo = 1e-7;
        let mut pos = Array3::from_elem((1, 2, 2), lo);
        pos[[0, 0, 0]] = hi; // the one selector-top pixel
        let mut sel_pos = Array3::from_elem((1, 2, 2), 0.0);
        sel_pos[[0, 0, 0]] = 1.0;
        let maps = vec![maps_from(pos), uniform_maps(1, 2, 2, lo)];
        let sels = vec![maps_from(sel_pos), uniform_maps(1, 2, 2, 0.5)];
        let ann = vec![
            ConceptAnnotation::new("p", [0]),
            ConceptAnnotation::new("n", []),
        ];
        let cfg = DiscLossConfig::uniform(1, Some(0.25), Some(0.25), Some(0.5));
        let loss = concept_discrimination_loss(&maps, &sels, &ann, &cfg).unwrap();
        assert!(loss >= 0.0 && loss < 1e-5, "loss = {}", loss);
    }

    #[test]
    fn batch_permutation_leaves_the_loss_unchanged() {
        let maps = vec![
            uniform_maps(1, 2, 2, 0.7),
            uniform_maps(1, 2, 2, 0.2),
            uniform_maps(1, 2, 2, 0.55),
        ];
        let sels = vec![
            uniform_maps(1, 2, 2, 0.6),
            uniform_maps(1, 2, 2, 0.3),
            uniform_maps(1, 2, 2, 0.8),
        ];
        let ann = vec![
            ConceptAnnotation::new("a", [0]),
            ConceptAnnotation::new("b", []),
            ConceptAnnotation::new("c", [0]),
        ];
        let cfg = DiscLossConfig::uniform(1, Some(0.5), Some(0.5), Some(0.25));
        let loss = concept_discrimination_loss(&maps, &sels, &ann, &cfg).unwrap();
        let perm = [2usize, 0, 1];
        let maps_p: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
        let sels_p: Vec<_> = perm.iter().map(|&i| sels[i].clone()).collect();
        let ann_p: Vec<_> = perm.iter().map(|&i| ann[i].clone()).collect();
        let loss_p = concept_discrimination_loss(&maps_p, &sels_p, &ann_p, &cfg).unwrap();
        assert_abs_diff_eq!(loss, loss_p, epsilon = 1e-12);
    }

    #[test]
    fn selector_loss_on_uniform_half_is_log_two() {
        let sel = vec![uniform_maps(1, 3, 3, 0.5)];
        let ann = vec![ConceptAnnotation::new("p", [0])];
        let loss = discriminative_selector_loss(&sel, &ann).unwrap();
        assert_abs_diff_eq!(loss, -(0.5f64).ln(), epsilon = 1e-10);
    }

    #[test]
    fn perfect_selector_loss_is_near_zero() {
        let sels = vec![
            uniform_maps(1, 2, 2, 1.0 - 1e-7),
            uniform_maps(1, 2, 2, 1e-7),
        ];
        let ann = vec![
            ConceptAnnotation::new("p", [0]),
            ConceptAnnotation::new("n", []),
        ];
        let loss = discriminative_selector_loss(&sels, &ann).unwrap();
        assert!(loss < 1e-5);
    }

    #[test]
    fn concordance_of_identical_maps_is_zero() {
        let a = vec![uniform_maps(2, 4, 4, 0.7)];
        let loss = concordance_loss(&a, &a, 0.1, false).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn concordance_below_threshold_is_zero_not_nan() {
        let a = vec![uniform_maps(1, 2, 2, 0.55)];
        let b = vec![uniform_maps(1, 2, 2, 0.5)];
        let loss = concordance_loss(&a, &b, 0.1, false).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn concordance_hand_computed_single_pixel() {
        let a = vec![uniform_maps(1, 1, 1, 0.8)];
        let b = vec![uniform_maps(1, 1, 1, 0.6)];
        let loss = concordance_loss(&a, &b, 0.1, false).unwrap();
        let expect = 0.5 * (0.2 * (0.8f64 / 0.6).ln() + (-0.2) * (0.2f64 / 0.4).ln());
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.09808, epsilon = 1e-5);
    }

    #[test]
    fn concordance_upsamples_the_coarser_map() {
        // Deep 1x1 map against a uniform shallow 2x2 map: every pixel is
        // selected and contributes the same hand-computed summand.
        let shallow = vec![uniform_maps(1, 2, 2, 0.8)];
        let deep = vec![uniform_maps(1, 1, 1, 0.6)];
        let loss = concordance_loss(&shallow, &deep, 0.1, false).unwrap();
        let expect = 0.5 * (0.2 * (0.8f64 / 0.6).ln() + (-0.2) * (0.2f64 / 0.4).ln());
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn one_sided_concordance_ignores_the_other_direction() {
        let shallow = vec![uniform_maps(1, 1, 1, 0.4)];
        let deep = vec![uniform_maps(1, 1, 1, 0.8)];
        // shallow - deep = -0.4: selected two-sided, ignored one-sided.
        assert!(concordance_loss(&shallow, &deep, 0.1, false).unwrap() > 0.0);
        assert_eq!(concordance_loss(&shallow, &deep, 0.1, true).unwrap(), 0.0);
    }

    #[test]
    fn concordance_threshold_is_validated() {
        let a = vec![uniform_maps(1, 1, 1, 0.5)];
        assert!(concordance_loss(&a, &a, 0.0, false).is_err());
        assert!(concordance_loss(&a, &a, 1.0, false).is_err());
    }

    #[test]
    fn bbox_loss_on_perfect_map_is_near_zero() {
        let mut map = Array3::from_elem((1, 4, 4), 1e-7);
        for y in 1..3 {
            for x in 1..3 {
                map[[0, y, x]] = 1.0 - 1e-7;
            }
        }
        let mut ann = ConceptAnnotation::new("p", [0]);
        ann.boxes.push((0, BoxRect { x: 1, y: 1, w: 2, h: 2 }));
        let cfg = DiscLossConfig::uniform(1, Some(0.25), Some(0.5), Some(0.1));
        let loss =
            bbox_supervision_loss(&[maps_from(map)], &[ann], (4, 4), &cfg).unwrap();
        assert!(loss < 1e-5, "loss = {}", loss);
    }

    #[test]
    fn bbox_positive_term_takes_the_top_half_of_in_box_pixels() {
        // Box covers a 2x2 region with probabilities [0.9, 0.8, 0.2, 0.1];
        // out-of-box pixels are ~0 so only the positive term contributes.
        let mut map = Array3::from_elem((1, 2, 4), 1e-7);
        map[[0, 0, 0]] = 0.9;
        map[[0, 0, 1]] = 0.8;
        map[[0, 1, 0]] = 0.2;
        map[[0, 1, 1]] = 0.1;
        let mut ann = ConceptAnnotation::new("p", [0]);
        ann.boxes.push((0, BoxRect { x: 0, y: 0, w: 2, h: 2 }));
        let cfg = DiscLossConfig::uniform(1, Some(0.25), Some(0.5), None);
        let loss =
            bbox_supervision_loss(&[maps_from(map)], &[ann], (2, 4), &cfg).unwrap();
        let pos_term = 2.0 * (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        // The four out-of-box pixels at 1e-7 add a vanishing negative term.
        assert_abs_diff_eq!(loss, pos_term, epsilon = 1e-5);
    }

    #[test]
    fn bbox_negative_sample_gets_the_iar_term() {
        let maps = vec![uniform_maps(1, 4, 4, 0.5)];
        let ann = vec![ConceptAnnotation::new("n", [])];
        let cfg = DiscLossConfig::uniform(1, Some(0.25), Some(0.5), Some(0.25));
        let loss = bbox_supervision_loss(&maps, &ann, (4, 4), &cfg).unwrap();
        assert_abs_diff_eq!(loss, -(0.5f64).ln(), epsilon = 1e-10);
    }

    #[test]
    fn combine_losses_matches_the_reference_sum() {
        let w = LossWeights::default();
        assert_eq!(combine_losses(1.5, &[], &[], &w).unwrap(), 1.5);
        let got = combine_losses(1.0, &[0.4, 0.2], &[0.1], &w).unwrap();
        assert_abs_diff_eq!(got, 1.0 + 0.25 * 0.6 + 0.25 * 0.1, epsilon = 1e-12);
        let zero = LossWeights {
            task: 1.0,
            per_lap: 0.0,
            per_pair: 0.0,
            selector: 0.0,
        };
        assert_eq!(combine_losses(0.7, &[9.0], &[9.0], &zero).unwrap(), 0.7);
    }

    #[test]
    fn out_of_range_annotation_is_rejected() {
        let maps = vec![uniform_maps(1, 2, 2, 0.5)];
        let ann = vec![ConceptAnnotation::new("s", [3])];
        let cfg = DiscLossConfig::uniform(1, Some(0.5), None, None);
        assert!(concept_discrimination_loss(&maps, &maps, &ann, &cfg).is_err());
    }

    #[test]
    fn empty_batch_is_an_argument_error() {
        let cfg = DiscLossConfig::uniform(1, Some(0.5), None, None);
        assert!(matches!(
            concept_discrimination_loss(&[], &[], &[], &cfg),
            Err(Error::Argument(_))
        ));
    }
}
