//! Optimizers, the combined training objective, and the staged schedule used
//! when plugging LAPs into an already-trained backbone.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::balanced_accuracy;
use crate::graph::{ForwardResult, LapTap, LayerGraph, Mode, TapGrad};
use crate::lap::ConceptMaps;
use crate::losses::{
    bbox_supervision_loss_grad, combine_losses, concept_discrimination_loss_grad,
    concordance_loss_grad, discriminative_selector_loss_grad, ConceptAnnotation, LossWeights,
};

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    targets: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if targets.len() != n {
        return Err(Error::argument(format!(
            "{} targets for {} logit rows",
            targets.len(),
            n
        )));
    }
    let mut d = Array2::zeros((n, k));
    let mut loss = 0.0;
    for (s, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::argument(format!("target {} out of range", t)));
        }
        let row = logits.index_axis(Axis(0), s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row.iter() {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[t];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            d[[s, j]] = (p - if j == t { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, d))
}

/// Argmax per row, ties resolved toward the lower index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// One stage of the training schedule: which parameters move, for how long,
/// and under which optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Substring patterns over dotted parameter names; a parameter is
    /// trainable when any pattern matches. `"*"` matches everything.
    pub trainable: Vec<String>,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Stage {
    pub fn all(name: impl Into<String>, epochs: usize, lr: f64) -> Self {
        Stage {
            name: name.into(),
            trainable: vec!["*".into()],
            epochs,
            optimizer: OptimizerKind::Adam,
            lr,
            weight_decay: 1e-6,
        }
    }

    /// Train only the LAP scoring/selector parameters.
    pub fn lap_only(name: impl Into<String>, epochs: usize, lr: f64) -> Self {
        Stage {
            name: name.into(),
            trainable: vec![".scorer.".into(), ".selector.".into()],
            epochs,
            optimizer: OptimizerKind::Adam,
            lr,
            weight_decay: 1e-6,
        }
    }

    fn matches(&self, param_name: &str) -> bool {
        self.trainable
            .iter()
            .any(|p| p == "*" || param_name.contains(p.as_str()))
    }
}

enum OptimizerState {
    Adam {
        t: usize,
        m: BTreeMap<String, ArrayD<f64>>,
        v: BTreeMap<String, ArrayD<f64>>,
    },
    Sgd,
}

/// Per-stage optimizer with its own state; built by [`stage_runtime`].
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    state: OptimizerState,
}

impl Optimizer {
    fn new(stage: &Stage) -> Self {
        let state = match stage.optimizer {
            OptimizerKind::Adam => OptimizerState::Adam {
                t: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
            OptimizerKind::Sgd => OptimizerState::Sgd,
        };
        Optimizer {
            kind: stage.optimizer,
            lr: stage.lr,
            weight_decay: stage.weight_decay,
            state,
        }
    }

    fn step(&mut self, graph: &mut LayerGraph, trainable: &BTreeMap<String, bool>) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if let OptimizerState::Adam { t, .. } = &mut self.state {
            *t += 1;
        }
        for (name, p) in graph.named_params_mut() {
            if !trainable.get(&name).copied().unwrap_or(false) {
                continue;
            }
            match &mut self.state {
                OptimizerState::Sgd => {
                    let lr = self.lr;
                    let wd = self.weight_decay;
                    let grad = p.grad.clone();
                    p.value.zip_mut_with(&grad, |v, &g| *v -= lr * (g + wd * *v));
                }
                OptimizerState::Adam { t, m, v } => {
                    let m_buf = m
                        .entry(name.clone())
                        .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    let v_buf = v
                        .entry(name.clone())
                        .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    let bc1 = 1.0 - BETA1.powi(*t as i32);
                    let bc2 = 1.0 - BETA2.powi(*t as i32);
                    let wd = self.weight_decay;
                    let lr = self.lr;
                    for ((val, g), (mb, vb)) in p
                        .value
                        .iter_mut()
                        .zip(p.grad.iter())
                        .zip(m_buf.iter_mut().zip(v_buf.iter_mut()))
                    {
                        let grad = *g + wd * *val;
                        *mb = BETA1 * *mb + (1.0 - BETA1) * grad;
                        *vb = BETA2 * *vb + (1.0 - BETA2) * grad * grad;
                        let mhat = *mb / bc1;
                        let vhat = *vb / bc2;
                        *val -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
        let _ = self.kind;
    }
}

/// How the concept heads are supervised during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Task loss only; LAP parameters learn from the task gradient.
    Task,
    /// Weak supervision: concept discrimination + concordance + selector.
    Weak,
    /// Full supervision from bounding boxes (no concordance, no selector).
    Boxes,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub weights: LossWeights,
    pub supervision: Supervision,
    /// Input resolution, needed to map boxes onto LAP-resolution maps.
    pub input_size: (usize, usize),
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            weights: LossWeights::default(),
            supervision: Supervision::Weak,
            input_size: (64, 64),
            shuffle_seed: 0,
        }
    }
}

/// A borrowed training split.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub images: &'a Array4<f64>,
    pub labels: &'a [usize],
    pub annotations: &'a [ConceptAnnotation],
}

impl<'a> TrainData<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss values of one batch. `combined` excludes the selector objective,
/// which is detached from everything else and reported separately.
#[derive(Debug, Clone, Default)]
pub struct BatchLosses {
    pub task: f64,
    pub per_lap: Vec<f64>,
    pub per_pair: Vec<f64>,
    pub selector: Vec<f64>,
    pub combined: f64,
}

impl BatchLosses {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        self.combined + weights.selector * self.selector.iter().sum::<f64>()
    }
}

fn tap_concept_maps(tap: &LapTap) -> Vec<ConceptMaps> {
    let n = tap.per_concept.dim().0;
    (0..n)
        .map(|s| ConceptMaps {
            per_concept: tap.per_concept.index_axis(Axis(0), s).to_owned(),
            aggregated: tap.aggregated.index_axis(Axis(0), s).to_owned(),
        })
        .collect()
}

fn tap_selector_maps(tap: &LapTap) -> Option<Vec<ConceptMaps>> {
    tap.selector.as_ref().map(|sel| {
        let n = sel.dim().0;
        (0..n)
            .map(|s| {
                let per = sel.index_axis(Axis(0), s).to_owned();
                let agg = per.index_axis(Axis(0), 0).to_owned();
                ConceptMaps {
                    per_concept: per,
                    aggregated: agg,
                }
            })
            .collect()
    })
}

fn stack_grads(grads: &[Array3<f64>]) -> Array4<f64> {
    let (h, y, x) = grads[0].dim();
    let mut out = Array4::zeros((grads.len(), h, y, x));
    for (s, g) in grads.iter().enumerate() {
        out.index_axis_mut(Axis(0), s).assign(g);
    }
    out
}

/// Runs one forward pass and assembles the combined objective with all its
/// gradients, without touching the graph. Returns the losses, the forward
/// result, the logits gradient and the per-tap gradients (aligned with
/// `ForwardResult::taps`).
pub fn batch_loss_and_grads(
    graph: &LayerGraph,
    images: &Array4<f64>,
    labels: &[usize],
    annotations: &[ConceptAnnotation],
    opts: &TrainOptions,
) -> Result<(BatchLosses, ForwardResult, Array2<f64>, Vec<TapGrad>)> {
    let fwd = graph.forward(images, Mode::Train)?;
    let (task, d_logits_raw) = softmax_cross_entropy(&fwd.logits, labels)?;
    let d_logits = d_logits_raw.mapv(|g| g * opts.weights.task);

    let mut losses = BatchLosses {
        task,
        ..Default::default()
    };
    let mut tap_grads: Vec<TapGrad> = fwd.taps.iter().map(|_| TapGrad::default()).collect();

    if opts.supervision != Supervision::Task && !fwd.taps.is_empty() {
        let maps: Vec<Vec<ConceptMaps>> = fwd.taps.iter().map(tap_concept_maps).collect();

        match opts.supervision {
            Supervision::Weak => {
                for (i, tap) in fwd.taps.iter().enumerate() {
                    let selector = tap_selector_maps(tap).ok_or_else(|| {
                        Error::graph("weak supervision requires train-mode selector maps")
                    })?;
                    let lap_cfg = &lap_cfg_for(graph, &tap.layer_id)?;
                    let (disc, disc_grads) = concept_discrimination_loss_grad(
                        &maps[i],
                        &selector,
                        annotations,
                        &lap_cfg.disc,
                    )?;
                    losses.per_lap.push(disc);
                    let mut d_pc = stack_grads(&disc_grads);
                    d_pc.mapv_inplace(|g| g * opts.weights.per_lap);
                    add_tap_grad(&mut tap_grads[i], d_pc, true);

                    let (sel_loss, sel_grads) =
                        discriminative_selector_loss_grad(&selector, annotations)?;
                    losses.selector.push(sel_loss);
                    let mut d_sel = stack_grads(&sel_grads);
                    d_sel.mapv_inplace(|g| g * opts.weights.selector);
                    add_tap_grad(&mut tap_grads[i], d_sel, false);
                }
                // Concordance between each consecutive pair; the shallow map
                // is `l`, the deeper `l+1`.
                for i in 0..fwd.taps.len().saturating_sub(1) {
                    let cfg = lap_cfg_for(graph, &fwd.taps[i].layer_id)?;
                    let (js, g_shallow, g_deep) = concordance_loss_grad(
                        &maps[i],
                        &maps[i + 1],
                        cfg.disc.concordance_t,
                        cfg.disc.one_sided_concordance,
                    )?;
                    losses.per_pair.push(js);
                    let mut ds = stack_grads(&g_shallow);
                    ds.mapv_inplace(|g| g * opts.weights.per_pair);
                    add_tap_grad(&mut tap_grads[i], ds, true);
                    let mut dd = stack_grads(&g_deep);
                    dd.mapv_inplace(|g| g * opts.weights.per_pair);
                    add_tap_grad(&mut tap_grads[i + 1], dd, true);
                }
            }
            Supervision::Boxes => {
                for (i, tap) in fwd.taps.iter().enumerate() {
                    let lap_cfg = lap_cfg_for(graph, &tap.layer_id)?;
                    let (bb, bb_grads) = bbox_supervision_loss_grad(
                        &maps[i],
                        annotations,
                        opts.input_size,
                        &lap_cfg.disc,
                    )?;
                    losses.per_lap.push(bb);
                    let mut d_pc = stack_grads(&bb_grads);
                    d_pc.mapv_inplace(|g| g * opts.weights.per_lap);
                    add_tap_grad(&mut tap_grads[i], d_pc, true);
                }
            }
            Supervision::Task => unreachable!(),
        }
    }

    losses.combined = combine_losses(task, &losses.per_lap, &losses.per_pair, &opts.weights)?;
    Ok((losses, fwd, d_logits, tap_grads))
}

fn add_tap_grad(tg: &mut TapGrad, grad: Array4<f64>, concept: bool) {
    let slot = if concept {
        &mut tg.d_per_concept
    } else {
        &mut tg.d_selector
    };
    match slot {
        Some(existing) => *existing += &grad,
        None => *slot = Some(grad),
    }
}

fn lap_cfg_for(graph: &LayerGraph, id: &str) -> Result<crate::lap::LapConfig> {
    fn walk(layers: &[crate::graph::Layer], id: &str) -> Option<crate::lap::LapConfig> {
        for l in layers {
            match &l.op {
                crate::graph::LayerOp::Lap(lap) if l.id == id => return Some(lap.cfg.clone()),
                crate::graph::LayerOp::AdaptiveLap { lap, .. } if l.id == id => {
                    return Some(lap.cfg.clone())
                }
                crate::graph::LayerOp::Residual(body) => {
                    if let Some(c) = walk(body, id) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        None
    }
    walk(&graph.layers, id).ok_or_else(|| Error::graph(format!("no LAP layer '{}'", id)))
}

/// One optimizer step over one batch. Returns the batch losses.
pub fn train_step(
    graph: &mut LayerGraph,
    images: &Array4<f64>,
    labels: &[usize],
    annotations: &[ConceptAnnotation],
    opts: &TrainOptions,
    optimizer: &mut Optimizer,
    trainable: &BTreeMap<String, bool>,
) -> Result<BatchLosses> {
    graph.zero_grads();
    let (losses, fwd, d_logits, tap_grads) =
        batch_loss_and_grads(graph, images, labels, annotations, opts)?;
    graph.backward(&fwd, &d_logits, &tap_grads)?;
    optimizer.step(graph, trainable);
    Ok(losses)
}

/// Eval-mode logits over a dataset, batched to bound memory.
pub fn eval_logits(graph: &LayerGraph, images: &Array4<f64>, batch: usize) -> Result<Array2<f64>> {
    let n = images.dim().0;
    let classes = match graph.output_shape()? {
        crate::graph::ShapeState::Flat(k) => k,
        _ => return Err(Error::graph("network output is not flat")),
    };
    let mut out = Array2::zeros((n, classes));
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let chunk = images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let fwd = graph.forward(&chunk, Mode::Eval)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&fwd.logits);
        start = end;
    }
    Ok(out)
}

/// Eval-mode class predictions.
pub fn predict_classes(
    graph: &LayerGraph,
    images: &Array4<f64>,
    batch: usize,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&eval_logits(graph, images, batch)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub stage: String,
    pub epoch: usize,
    pub combined_loss: f64,
    pub task_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_val_balanced_accuracy: f64,
    /// Index into `epochs`; `None` when the untrained initialization won.
    pub best_epoch: Option<usize>,
}

fn snapshot(graph: &LayerGraph) -> Vec<(String, ArrayD<f64>)> {
    graph
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone()))
        .collect()
}

fn restore(graph: &mut LayerGraph, snap: &[(String, ArrayD<f64>)]) {
    let map: BTreeMap<&str, &ArrayD<f64>> =
        snap.iter().map(|(n, v)| (n.as_str(), v)).collect();
    for (name, p) in graph.named_params_mut() {
        if let Some(v) = map.get(name.as_str()) {
            p.value.assign(v);
        }
    }
}

fn gather_batch(
    data: &TrainData,
    idx: &[usize],
) -> (Array4<f64>, Vec<usize>, Vec<ConceptAnnotation>) {
    let (_, c, h, w) = data.images.dim();
    let mut images = Array4::zeros((idx.len(), c, h, w));
    let mut labels = Vec::with_capacity(idx.len());
    let mut annots = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        images
            .index_axis_mut(Axis(0), row)
            .assign(&data.images.index_axis(Axis(0), i));
        labels.push(data.labels[i]);
        annots.push(data.annotations[i].clone());
    }
    (images, labels, annots)
}

/// Runs the stages in order, tracking validation balanced accuracy after
/// every epoch, and leaves the graph holding the best-validation parameters.
pub fn staged_training(
    graph: &mut LayerGraph,
    train: &TrainData,
    val: &TrainData,
    stages: &[Stage],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::argument("empty training split"));
    }
    let mut best = snapshot(graph);
    let val_preds = predict_classes(graph, val.images, 64)?;
    let mut best_ba = balanced_accuracy(&val_preds, val.labels)?;
    let mut best_epoch = None;
    let mut epochs = Vec::new();
    let mut epoch_counter = 0usize;

    for (stage_idx, stage) in stages.iter().enumerate() {
        let trainable: BTreeMap<String, bool> = graph
            .named_params()
            .into_iter()
            .map(|(n, _)| {
                let hit = stage.matches(&n);
                (n, hit)
            })
            .collect();
        if !trainable.values().any(|&t| t) {
            return Err(Error::config(format!(
                "stage '{}' trains no parameters",
                stage.name
            )));
        }
        let mut optimizer = Optimizer::new(stage);

        for epoch in 0..stage.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.shuffle_seed ^ ((stage_idx as u64) << 32) ^ epoch as u64,
            );
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            let mut task_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let (images, labels, annots) = gather_batch(train, chunk);
                let losses = train_step(
                    graph,
                    &images,
                    &labels,
                    &annots,
                    opts,
                    &mut optimizer,
                    &trainable,
                )?;
                loss_sum += losses.total(&opts.weights);
                task_sum += losses.task;
                batches += 1;
            }

            let val_preds = predict_classes(graph, val.images, 64)?;
            let ba = balanced_accuracy(&val_preds, val.labels)?;
            epochs.push(EpochStats {
                stage: stage.name.clone(),
                epoch,
                combined_loss: loss_sum / batches.max(1) as f64,
                task_loss: task_sum / batches.max(1) as f64,
                val_balanced_accuracy: ba,
            });
            if ba > best_ba {
                best_ba = ba;
                best = snapshot(graph);
                best_epoch = Some(epoch_counter);
            }
            epoch_counter += 1;
        }
    }

    restore(graph, &best);
    Ok(TrainReport {
        epochs,
        best_val_balanced_accuracy: best_ba,
        best_epoch,
    })
}

/// Builds the optimizer/trainable pair for driving [`train_step`] manually.
pub fn stage_runtime(
    graph: &LayerGraph,
    stage: &Stage,
) -> Result<(Optimizer, BTreeMap<String, bool>)> {
    let trainable: BTreeMap<String, bool> = graph
        .named_params()
        .into_iter()
        .map(|(n, _)| {
            let hit = stage.matches(&n);
            (n, hit)
        })
        .collect();
    if !trainable.values().any(|&t| t) {
        return Err(Error::config(format!(
            "stage '{}' trains no parameters",
            stage.name
        )));
    }
    Ok((Optimizer::new(stage), trainable))
}
