//! Quantitative evaluation protocols, method-agnostic over score maps:
//! global-threshold and top-scored binarization, IoU against ground truth,
//! keep-k% faithfulness curves, and predictivity/faithfulness accuracies.

use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::losses::{topk_pixels, Direction};
use crate::train::{argmax_rows, eval_logits};

/// A non-negative per-sample importance map from any interpretation method.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub data: Array2<f64>,
    pub method: String,
}

impl ScoreMap {
    pub fn new(data: Array2<f64>, method: impl Into<String>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Numeric(
                "score maps must be finite and non-negative".into(),
            ));
        }
        Ok(ScoreMap {
            data,
            method: method.into(),
        })
    }
}

/// Divides by the map maximum, mapping scores into [0, 1]. An all-zero map
/// is returned unchanged (the degenerate case has nothing to normalize).
pub fn normalize_map(m: &ScoreMap) -> ScoreMap {
    let max = m.data.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return m.clone();
    }
    ScoreMap {
        data: m.data.mapv(|v| v / max),
        method: m.method.clone(),
    }
}

const RIDGE_ALPHA: f64 = 0.01;
const RIDGE_TOL: f64 = 1e-3;
const RIDGE_MAX_ITER: usize = 100;

/// Fits a ridge-regularized linear classifier on normalized pixel scores
/// (positives = in-mask pixels) with balanced class weighting, and returns
/// the score at which its decision function crosses zero.
///
/// Ridge strength 0.01; the single coefficient is solved iteratively
/// (residual iteration on the damped normal equation, tolerance 1e-3, at
/// most 100 iterations).
pub fn fit_global_threshold(maps: &[ScoreMap], masks: &[Array2<bool>]) -> Result<f64> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(Error::argument("maps/masks length mismatch"));
    }
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for (m, mask) in maps.iter().zip(masks.iter()) {
        if m.data.dim() != mask.dim() {
            return Err(Error::argument("map/mask shape mismatch"));
        }
        for &inside in mask.iter() {
            if inside {
                n_pos += 1;
            } else {
                n_neg += 1;
            }
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Fitting(
            "threshold fitting needs both pixel classes".into(),
        ));
    }
    let n = (n_pos + n_neg) as f64;
    let w_pos = n / (2.0 * n_pos as f64);
    let w_neg = n / (2.0 * n_neg as f64);

    // Weighted centering, as an unpenalized intercept requires.
    let mut w_sum = 0.0;
    let mut x_off = 0.0;
    let mut y_off = 0.0;
    for (m, mask) in maps.iter().zip(masks.iter()) {
        for (v, &inside) in m.data.iter().zip(mask.iter()) {
            let (w, y) = if inside { (w_pos, 1.0) } else { (w_neg, -1.0) };
            w_sum += w;
            x_off += w * v;
            y_off += w * y;
        }
    }
    x_off /= w_sum;
    y_off /= w_sum;

    let mut ata = RIDGE_ALPHA;
    let mut atb = 0.0;
    for (m, mask) in maps.iter().zip(masks.iter()) {
        for (v, &inside) in m.data.iter().zip(mask.iter()) {
            let (w, y) = if inside { (w_pos, 1.0) } else { (w_neg, -1.0) };
            let xc = v - x_off;
            ata += w * xc * xc;
            atb += w * xc * (y - y_off);
        }
    }

    let mut coef = 0.0;
    for _ in 0..RIDGE_MAX_ITER {
        let residual = atb - ata * coef;
        if residual.abs() <= RIDGE_TOL * atb.abs().max(1.0) {
            break;
        }
        coef += residual / ata;
    }
    if coef == 0.0 {
        return Err(Error::Fitting(
            "degenerate pixel scores: classifier has no slope".into(),
        ));
    }
    // decision(x) = coef * (x - x_off) + y_off = 0
    Ok(x_off - y_off / coef)
}

/// Strict thresholding: a pixel is set when its score exceeds `threshold`.
pub fn binarize(map: &ScoreMap, threshold: f64) -> Array2<bool> {
    map.data.mapv(|v| v > threshold)
}

/// Keeps exactly `area` top-scored pixels (deterministic tie order).
pub fn binarize_top_scored(map: &ScoreMap, area: usize) -> Result<Array2<bool>> {
    let hw = map.data.len();
    if area > hw {
        return Err(Error::argument(format!(
            "area {} exceeds {} pixels",
            area, hw
        )));
    }
    let mut mask = Array2::from_elem(map.data.dim(), false);
    for (y, x) in topk_pixels(&map.data, area, Direction::Highest)? {
        mask[[y, x]] = true;
    }
    Ok(mask)
}

/// Intersection over union of two masks; 1.0 when both are empty.
pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of agreeing positions.
pub fn accuracy(preds: &[usize], reference: &[usize]) -> Result<f64> {
    if preds.len() != reference.len() || preds.is_empty() {
        return Err(Error::argument("prediction/reference length mismatch"));
    }
    Ok(preds
        .iter()
        .zip(reference.iter())
        .filter(|(a, b)| a == b)
        .count() as f64
        / preds.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::argument("prediction/label length mismatch"));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let hit = idx.iter().filter(|&&i| preds[i] == c).count();
        total += hit as f64 / idx.len() as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Agreement of standalone map predictions with ground truth (predictivity)
/// and with the model's own predictions (faithfulness).
pub fn predictivity_and_faithfulness(
    lap_preds: &[usize],
    model_preds: &[usize],
    labels: &[usize],
) -> Result<(f64, f64)> {
    if lap_preds.len() != model_preds.len() || lap_preds.len() != labels.len() {
        return Err(Error::argument("prediction lists must be aligned"));
    }
    Ok((accuracy(lap_preds, labels)?, accuracy(lap_preds, model_preds)?))
}

/// The keep-k% fractions reported by the faithfulness protocol.
pub const DEFAULT_KS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub k: f64,
    pub top1: f64,
    pub top5: f64,
}

/// What the re-evaluated predictions are compared against.
#[derive(Debug, Clone, Copy)]
pub enum CurveReference<'a> {
    /// The model's own predictions on the unmodified images.
    OriginalPredictions,
    /// Ground-truth labels.
    GroundTruth(&'a [usize]),
}

/// Keep-k% faithfulness: for each fraction `k`, retain the `ceil(k * HW)`
/// top-scored pixels of every image (zeroing the rest in normalized-input
/// space), re-run the model, and report top-1/top-5 agreement with the
/// reference. `k = 1` keeps the image intact, so agreement with the original
/// predictions is 1 by construction.
pub fn faithfulness_curve(
    model: &LayerGraph,
    images: &Array4<f64>,
    scores: &[ScoreMap],
    ks: &[f64],
    reference: CurveReference,
) -> Result<Vec<CurvePoint>> {
    if ks.is_empty() {
        return Err(Error::argument("empty keep-fraction list"));
    }
    for &k in ks {
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::argument(format!("keep fraction {} outside (0, 1]", k)));
        }
    }
    let (n, _, h, w) = images.dim();
    if scores.len() != n {
        return Err(Error::argument("one score map per image required"));
    }
    for sm in scores {
        if sm.data.dim() != (h, w) {
            return Err(Error::argument("score maps must be input resolution"));
        }
    }
    let hw = h * w;
    let original = eval_logits(model, images, 64)?;
    let refs: Vec<usize> = match reference {
        CurveReference::OriginalPredictions => argmax_rows(&original),
        CurveReference::GroundTruth(labels) => {
            if labels.len() != n {
                return Err(Error::argument("one label per image required"));
            }
            labels.to_vec()
        }
    };

    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let keep = ((k * hw as f64).ceil() as usize).clamp(1, hw);
        let mut masked = images.clone();
        for s in 0..n {
            let mut keep_mask = Array2::from_elem((h, w), false);
            for (y, x) in topk_pixels(&scores[s].data, keep, Direction::Highest)? {
                keep_mask[[y, x]] = true;
            }
            let mut img = masked.index_axis_mut(Axis(0), s);
            for ((_, y, x), v) in img.indexed_iter_mut() {
                if !keep_mask[[y, x]] {
                    *v = 0.0;
                }
            }
        }
        let logits = eval_logits(model, &masked, 64)?;
        let preds = argmax_rows(&logits);
        let top1 = accuracy(&preds, &refs)?;
        let classes = logits.dim().1;
        let top_n = classes.min(5);
        let mut top5_hits = 0usize;
        for (s, &r) in refs.iter().enumerate() {
            let row = logits.index_axis(Axis(0), s);
            let mut idx: Vec<usize> = (0..classes).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            if idx[..top_n].contains(&r) {
                top5_hits += 1;
            }
        }
        out.push(CurvePoint {
            k,
            top1,
            top5: top5_hits as f64 / n as f64,
        });
    }
    Ok(out)
}

/// A flat, deterministic key/value metrics report. Keys are emitted sorted
/// so identical runs produce byte-identical files.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    entries: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new() -> Self {
        MetricsReport::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), format!("{:.6}", value)));
    }

    pub fn push_int(&mut self, key: impl Into<String>, value: i64) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_str(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn sorted(&self) -> Vec<&(String, String)> {
        let mut rows: Vec<&(String, String)> = self.entries.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows
    }

    /// `key=value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.sorted() {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// CSV with a `metric,value` header, sorted by key.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.sorted() {
            out.push_str(k);
            out.push(',');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerDesc, LayerKind};
    use crate::lap::KernelSpec;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sm(data: Array2<f64>) -> ScoreMap {
        ScoreMap::new(data, "test").unwrap()
    }

    #[test]
    fn normalize_is_idempotent_and_scale_invariant() {
        let m = sm(array![[0.2, 1.0], [0.4, 0.0]]);
        let once = normalize_map(&m);
        assert_eq!(once.data, m.data);
        let scaled = sm(m.data.mapv(|v| v * 7.0));
        assert_eq!(normalize_map(&scaled).data, once.data);
        let twice = normalize_map(&once);
        assert_eq!(twice.data, once.data);
    }

    #[test]
    fn normalize_keeps_all_zero_maps() {
        let m = sm(Array2::zeros((3, 3)));
        assert_eq!(normalize_map(&m).data, m.data);
    }

    #[test]
    fn threshold_separates_disjoint_score_bands() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut data = Array2::zeros((40, 50));
        let mut mask = Array2::from_elem((40, 50), false);
        for ((y, _), v) in data.indexed_iter_mut() {
            // Top half positive pixels in U(0.6, 1), rest U(0, 0.4).
            if y < 20 {
                *v = rng.gen_range(0.6..1.0);
            } else {
                *v = rng.gen_range(0.0..0.4);
            }
        }
        for ((y, _), m) in mask.indexed_iter_mut() {
            *m = y < 20;
        }
        let thr = fit_global_threshold(&[sm(data)], &[mask]).unwrap();
        assert!(thr > 0.4 && thr < 0.6, "threshold {}", thr);
    }

    #[test]
    fn threshold_on_perfect_split_lies_strictly_inside() {
        let data = array![[1.0, 1.0], [0.0, 0.0]];
        let mask = array![[true, true], [false, false]];
        let thr = fit_global_threshold(&[sm(data)], &[mask]).unwrap();
        assert!(thr > 0.0 && thr < 1.0, "threshold {}", thr);
    }

    #[test]
    fn threshold_needs_both_pixel_classes() {
        let data = array![[0.5, 0.6]];
        let mask = array![[true, true]];
        assert!(matches!(
            fit_global_threshold(&[sm(data)], &[mask]),
            Err(Error::Fitting(_))
        ));
    }

    #[test]
    fn binarize_variants_agree_at_a_value_gap() {
        // Three pixels clearly above a gap, the rest clearly below.
        let data = array![[0.9, 0.8], [0.85, 0.1], [0.05, 0.0]];
        let m = sm(data);
        let by_thr = binarize(&m, 0.5);
        let by_top = binarize_top_scored(&m, 3).unwrap();
        assert_eq!(by_thr, by_top);
        assert_eq!(binarize(&m, 0.0).iter().filter(|&&b| b).count(), 5);
        assert!(binarize_top_scored(&m, 0).unwrap().iter().all(|&b| !b));
        assert!(binarize_top_scored(&m, 7).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = array![[true, true, false]];
        let b = array![[false, true, true]];
        assert_abs_diff_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let empty = array![[false, false, false]];
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        let disjoint = array![[true, false, false]];
        let other = array![[false, true, false]];
        assert_eq!(iou(&disjoint, &other).unwrap(), 0.0);
        assert!(iou(&a, &array![[true], [false]]).is_err());
    }

    #[test]
    fn iou_is_symmetric_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((6, 6), |_| rng.gen_bool(0.4));
            let b = Array2::from_shape_fn((6, 6), |_| rng.gen_bool(0.4));
            let ab = iou(&a, &b).unwrap();
            assert_eq!(ab, iou(&b, &a).unwrap());
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn predictivity_and_faithfulness_basics() {
        let labels = vec![0, 1, 0, 1];
        let (p, f) = predictivity_and_faithfulness(&labels, &labels, &labels).unwrap();
        assert_eq!((p, f), (1.0, 1.0));
        let model = vec![1, 0, 1, 0];
        let (p, f) = predictivity_and_faithfulness(&model, &model, &labels).unwrap();
        assert_eq!((p, f), (0.0, 1.0));
        assert!(predictivity_and_faithfulness(&labels, &model, &[0]).is_err());
    }

    #[test]
    fn random_predictions_sit_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let model: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let (p, f) = predictivity_and_faithfulness(&preds, &model, &labels).unwrap();
        assert!((p - 0.5).abs() < 0.02, "predictivity {}", p);
        assert!((f - 0.5).abs() < 0.02, "faithfulness {}", f);
    }

    #[test]
    fn balanced_accuracy_averages_recalls() {
        let labels = vec![0, 0, 0, 1];
        let preds = vec![0, 0, 0, 0];
        assert_abs_diff_eq!(balanced_accuracy(&preds, &labels).unwrap(), 0.5);
        assert_abs_diff_eq!(accuracy(&preds, &labels).unwrap(), 0.75);
    }

    fn tiny_model() -> LayerGraph {
        LayerGraph::from_descs(
            (1, 4, 4),
            &[
                LayerDesc::new(
                    "conv",
                    LayerKind::Conv {
                        in_ch: 1,
                        out_ch: 2,
                        kernel: KernelSpec {
                            kernel_h: 3,
                            kernel_w: 3,
                            stride_h: 1,
                            stride_w: 1,
                            padding: 1,
                        },
                    },
                ),
                LayerDesc::new("flatten", LayerKind::Flatten),
                LayerDesc::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 32,
                        out_features: 2,
                    },
                ),
            ],
            5,
        )
        .unwrap()
    }

    #[test]
    fn keep_everything_agrees_with_the_original_predictions() {
        let model = tiny_model();
        let images = Array4::from_shape_fn((4, 1, 4, 4), |(s, _, y, x)| {
            ((s + y * 4 + x) % 7) as f64 * 0.2 - 0.5
        });
        let scores: Vec<ScoreMap> = (0..4)
            .map(|s| {
                sm(Array2::from_shape_fn((4, 4), |(y, x)| {
                    ((s + y + x) % 5) as f64 / 5.0
                }))
            })
            .collect();
        let curve = faithfulness_curve(
            &model,
            &images,
            &scores,
            &[0.5, 1.0],
            CurveReference::OriginalPredictions,
        )
        .unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[1].k, 1.0);
        assert_eq!(curve[1].top1, 1.0);
        assert_eq!(curve[1].top5, 1.0);
        assert!(faithfulness_curve(
            &model,
            &images,
            &scores,
            &[],
            CurveReference::OriginalPredictions
        )
        .is_err());
        assert!(faithfulness_curve(
            &model,
            &images,
            &scores,
            &[1.5],
            CurveReference::OriginalPredictions
        )
        .is_err());
    }

    #[test]
    fn metrics_report_is_sorted_and_stable() {
        let mut r = MetricsReport::new();
        r.push("zeta", 1.0);
        r.push("alpha", 0.5);
        r.push_int("count", 3);
        assert_eq!(r.to_text(), "alpha=0.500000\ncount=3\nzeta=1.000000\n");
        assert!(r.to_csv().starts_with("metric,value\n"));
        assert_eq!(r.get("alpha"), Some("0.500000"));
    }
}
