//! The pipeline commands: generate, train, interpret, evaluate.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lap_core::container::{
    load_checkpoint, load_image_png, read_lapm, save_checkpoint, save_heatmap_png, write_lapm,
};
use lap_core::evaluate::{
    accuracy, balanced_accuracy, binarize, binarize_top_scored, faithfulness_curve,
    fit_global_threshold, iou, normalize_map, predictivity_and_faithfulness, CurveReference,
    MetricsReport, ScoreMap,
};
use lap_core::graph::{extend_architecture, LayerGraph, LayerOp, PlacementSpec};
use lap_core::interpret::{
    concept_size_features, extract_stacks, fc_probe_train, integrate_accumulated, integrate_stack,
    lap_predict_class, lap_predict_presence, InterpretationStack, ProbeConfig,
};
use lap_core::losses::ConceptAnnotation;
use lap_core::synth::{self, load_annotations, save_annotations};
use lap_core::train::{predict_classes, staged_training, TrainData, TrainOptions, TrainReport};

use crate::config::Config;

/// One dataset split loaded into memory.
pub struct LoadedSplit {
    pub ids: Vec<String>,
    /// Raw [0, 1] images, `(N, 1, H, W)`.
    pub raw: Array4<f64>,
    /// Normalized inputs as the model consumes them.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub annotations: Vec<ConceptAnnotation>,
    pub masks: Vec<Array2<bool>>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            images: &self.images,
            labels: &self.labels,
            annotations: &self.annotations,
        }
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn write_split(cfg: &Config, dir: &Path, samples: &[synth::Sample]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let annots = synth::annotations(samples);
    save_annotations(&dir.join("annotations.txt"), &annots)?;
    let size = cfg.data.image_size;
    match cfg.data.format.as_str() {
        "lapm" => {
            let images = synth::images_to_array(samples).into_dyn();
            write_lapm(&dir.join("images.lapm"), &images)?;
            let mut masks = ndarray::Array3::<f64>::zeros((samples.len(), size, size));
            for (i, s) in samples.iter().enumerate() {
                for ((y, x), &m) in s.mask.indexed_iter() {
                    if m {
                        masks[[i, y, x]] = 1.0;
                    }
                }
            }
            write_lapm(&dir.join("masks.lapm"), &masks.into_dyn())?;
        }
        "png" => {
            let img_dir = dir.join("images");
            let mask_dir = dir.join("masks");
            std::fs::create_dir_all(&img_dir)?;
            std::fs::create_dir_all(&mask_dir)?;
            for s in samples {
                save_heatmap_png(&img_dir.join(format!("{}.png", s.id)), &s.image)?;
                let m = s.mask.mapv(|b| if b { 1.0 } else { 0.0 });
                save_heatmap_png(&mask_dir.join(format!("{}.png", s.id)), &m)?;
            }
        }
        other => bail!("unknown data format '{}'", other),
    }
    Ok(())
}

/// Generates the synthetic dataset under the configured data directory
/// (overridable with `--out`).
pub fn cmd_generate(cfg: &Config, out: Option<&Path>) -> anyhow::Result<PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir());
    let ds = synth::generate(&cfg.synth_spec()?)?;
    std::fs::create_dir_all(&dir)?;
    write_split(cfg, &dir.join("train"), &ds.train)?;
    write_split(cfg, &dir.join("val"), &ds.val)?;
    write_split(cfg, &dir.join("test"), &ds.test)?;
    std::fs::write(
        dir.join("dataset.toml"),
        toml::to_string(&cfg.data).context("encode dataset description")?,
    )?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// split loading
// ---------------------------------------------------------------------------

pub fn load_split(cfg: &Config, data_dir: &Path, split: &str) -> anyhow::Result<LoadedSplit> {
    let dir = data_dir.join(split);
    let size = cfg.data.image_size;
    let annotations = load_annotations(&dir.join("annotations.txt"), (size, size))
        .with_context(|| format!("loading {}", dir.join("annotations.txt").display()))?;
    let ids: Vec<String> = annotations.iter().map(|a| a.sample_id.clone()).collect();
    let labels: Vec<usize> = annotations
        .iter()
        .map(|a| usize::from(a.contains(0)))
        .collect();

    let n = ids.len();
    let (raw, masks) = match cfg.data.format.as_str() {
        "lapm" => {
            let images = read_lapm(&dir.join("images.lapm"))?;
            if images.shape() != [n, 1, size, size] {
                bail!(
                    "images.lapm shape {:?} does not match {} annotated {}x{} samples",
                    images.shape(),
                    n,
                    size,
                    size
                );
            }
            let raw = images.into_dimensionality::<ndarray::Ix4>().unwrap();
            let mask_arr = read_lapm(&dir.join("masks.lapm"))?;
            if mask_arr.shape() != [n, size, size] {
                bail!("masks.lapm shape {:?} unexpected", mask_arr.shape());
            }
            let mask3 = mask_arr.into_dimensionality::<ndarray::Ix3>().unwrap();
            let masks = (0..n)
                .map(|i| mask3.index_axis(Axis(0), i).mapv(|v| v > 0.5))
                .collect();
            (raw, masks)
        }
        "png" => {
            let mut raw = Array4::zeros((n, 1, size, size));
            let mut masks = Vec::with_capacity(n);
            for (i, id) in ids.iter().enumerate() {
                let img = load_image_png(&dir.join("images").join(format!("{}.png", id)))?;
                if img.dim() != (size, size) {
                    bail!("image {} has size {:?}", id, img.dim());
                }
                raw.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&img);
                let m = load_image_png(&dir.join("masks").join(format!("{}.png", id)))?;
                masks.push(m.mapv(|v| v > 0.5));
            }
            (raw, masks)
        }
        other => bail!("unknown data format '{}'", other),
    };

    let images = synth::normalize_images(&raw);
    Ok(LoadedSplit {
        ids,
        raw,
        images,
        labels,
        annotations,
        masks,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn train_options(cfg: &Config) -> TrainOptions {
    TrainOptions {
        batch_size: cfg.train.batch_size,
        weights: cfg.loss_weights(),
        supervision: cfg.supervision(),
        input_size: (cfg.data.image_size, cfg.data.image_size),
        shuffle_seed: cfg.seed,
    }
}

fn graph_is_lap(graph: &LayerGraph, id: &str) -> bool {
    graph.layers.iter().any(|l| {
        l.id == id
            && matches!(
                l.op,
                LayerOp::Lap(_) | LayerOp::AdaptiveLap { .. }
            )
    })
}

fn report_text(report: &TrainReport) -> String {
    let mut out = String::new();
    for e in &report.epochs {
        out.push_str(&format!(
            "stage={} epoch={} loss={:.6} task_loss={:.6} val_balanced_accuracy={:.6}\n",
            e.stage, e.epoch, e.combined_loss, e.task_loss, e.val_balanced_accuracy
        ));
    }
    out.push_str(&format!(
        "best_val_balanced_accuracy={:.6}\nbest_epoch={}\n",
        report.best_val_balanced_accuracy,
        report
            .best_epoch
            .map(|e| e.to_string())
            .unwrap_or_else(|| "init".into())
    ));
    out
}

/// Trains per the configured stages and writes the best-validation
/// checkpoint. With `--checkpoint`, training continues from the stored
/// parameters: pool targets that are still plain pools receive their LAPs
/// first (the plug-into-pretrained workflow).
pub fn cmd_train(
    cfg: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
) -> anyhow::Result<(PathBuf, TrainReport)> {
    let data_dir = cfg.data_dir();
    let train = load_split(cfg, &data_dir, "train")?;
    let val = load_split(cfg, &data_dir, "val")?;

    let mut graph = match resume {
        Some(ckpt) => {
            let g = load_checkpoint(ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let spec = cfg.placement_spec()?;
            let pending = PlacementSpec {
                placements: spec
                    .placements
                    .into_iter()
                    .filter(|p| !graph_is_lap(&g, &p.target))
                    .collect(),
            };
            extend_architecture(&g, &pending, cfg.seed)?
        }
        None => cfg.build_model()?,
    };

    let stages = cfg.stages();
    let total_epochs: usize = stages.iter().map(|s| s.epochs).sum();
    if total_epochs == 0 {
        log::warn!("no training epochs configured; emitting the initialized checkpoint");
    }

    let report = staged_training(
        &mut graph,
        &train.train_data(),
        &val.train_data(),
        &stages,
        &train_options(cfg),
    )?;

    std::fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("model.lapc");
    save_checkpoint(&graph, &ckpt)?;
    std::fs::write(out_dir.join("train_report.txt"), report_text(&report))?;
    Ok((ckpt, report))
}

// ---------------------------------------------------------------------------
// interpret
// ---------------------------------------------------------------------------

/// Chunked stack extraction with the configured decay factor.
pub fn extract_all_stacks(
    model: &LayerGraph,
    images: &Array4<f64>,
    decay_alpha: f64,
) -> anyhow::Result<Vec<InterpretationStack>> {
    let n = images.dim().0;
    let mut out = Vec::with_capacity(n);
    let chunk = 50;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let mut stacks = extract_stacks(model, &part)?;
        for s in &mut stacks {
            s.decay_alpha = decay_alpha;
        }
        out.append(&mut stacks);
        start = end;
    }
    Ok(out)
}

/// Exports per-layer concept maps and the integrated map for every sample of
/// the test split as LAPM containers (and optional PNG heatmaps).
pub fn cmd_interpret(
    cfg: &Config,
    checkpoint: &Path,
    out_dir: &Path,
    png: bool,
) -> anyhow::Result<PathBuf> {
    let model = load_checkpoint(checkpoint)?;
    let data_dir = cfg.data_dir();
    let split = load_split(cfg, &data_dir, "test")?;
    let stacks = extract_all_stacks(&model, &split.images, cfg.interpret.decay_alpha)?;

    let maps_dir = out_dir.join("maps");
    std::fs::create_dir_all(&maps_dir)?;
    let concept = cfg.interpret.concept;
    for (id, stack) in split.ids.iter().zip(stacks.iter()) {
        for (k, (maps, _)) in stack.layers.iter().enumerate() {
            write_lapm(
                &maps_dir.join(format!("{}.layer{}.lapm", id, k + 1)),
                &maps.per_concept.clone().into_dyn(),
            )?;
            if png {
                save_heatmap_png(
                    &maps_dir.join(format!("{}.layer{}.png", id, k + 1)),
                    &maps.per_concept.index_axis(Axis(0), concept).to_owned(),
                )?;
            }
        }
        let integrated = integrate_stack(stack, concept)?;
        write_lapm(
            &maps_dir.join(format!("{}.integrated.lapm", id)),
            &integrated.clone().into_dyn(),
        )?;
        if png {
            save_heatmap_png(&maps_dir.join(format!("{}.integrated.png", id)), &integrated)?;
        }
    }
    Ok(maps_dir)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn random_score_maps(seed: u64, n: usize, size: usize) -> Vec<ScoreMap> {
    (0..n)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            ScoreMap::new(
                Array2::from_shape_fn((size, size), |_| rng.gen_range(0.0..1.0)),
                "random",
            )
            .expect("finite random maps")
        })
        .collect()
}

fn load_external_maps(dir: &Path, ids: &[String], size: usize) -> anyhow::Result<Vec<ScoreMap>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let path = dir.join(format!("{}.integrated.lapm", id));
        let arr = read_lapm(&path).with_context(|| format!("reading {}", path.display()))?;
        if arr.shape() != [size, size] {
            bail!("map {} has shape {:?}", path.display(), arr.shape());
        }
        let data = arr.into_dimensionality::<ndarray::Ix2>().unwrap();
        out.push(ScoreMap::new(data.mapv(|v| v.max(0.0)), "external")?);
    }
    Ok(out)
}

fn key_for_k(prefix: &str, k: f64, what: &str) -> String {
    format!("curve.{}.k{:03}.{}", prefix, (k * 100.0).round() as usize, what)
}

/// How a LAP layer's maps turn into a standalone class prediction.
fn map_prediction(
    maps: &lap_core::ConceptMaps,
    classes: usize,
    concept: usize,
) -> anyhow::Result<usize> {
    if maps.heads() >= classes {
        // One head per class: the larger total importance wins.
        let heads: Vec<usize> = (0..classes).collect();
        Ok(lap_predict_class(maps, &heads)?)
    } else {
        // Presence rule on the designated concept head.
        Ok(usize::from(lap_predict_presence(maps, concept)?))
    }
}

/// Runs the full evaluation protocol and writes `metrics.txt`/`metrics.csv`.
/// With `--maps`, score maps come from external LAPM containers
/// (`<dir>/val/<id>.integrated.lapm`, `<dir>/test/...`) instead of the
/// model's own interpretation stacks; the per-layer predictivity and probe
/// metrics are then skipped.
pub fn cmd_evaluate(
    cfg: &Config,
    checkpoint: &Path,
    maps_dir: Option<&Path>,
    out_dir: &Path,
) -> anyhow::Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?;
    let data_dir = cfg.data_dir();
    let val = load_split(cfg, &data_dir, "val")?;
    let test = load_split(cfg, &data_dir, "test")?;
    let size = cfg.data.image_size;
    let concept = cfg.interpret.concept;

    let mut report = MetricsReport::new();
    report.push_int("data.val.n", val.len() as i64);
    report.push_int("data.test.n", test.len() as i64);
    report.push_int("model.params", model.param_count() as i64);

    // Model-level metrics.
    let test_preds = predict_classes(&model, &test.images, 64)?;
    report.push("model.test.accuracy", accuracy(&test_preds, &test.labels)?);
    report.push(
        "model.test.balanced_accuracy",
        balanced_accuracy(&test_preds, &test.labels)?,
    );

    // Score maps for both splits.
    let (val_maps, test_maps, test_rank_maps) = match maps_dir {
        Some(dir) => {
            let v = load_external_maps(&dir.join("val"), &val.ids, size)?;
            let t = load_external_maps(&dir.join("test"), &test.ids, size)?;
            let rank = t.clone();
            (v, t, rank)
        }
        None => {
            let val_stacks = extract_all_stacks(&model, &val.images, cfg.interpret.decay_alpha)?;
            let test_stacks = extract_all_stacks(&model, &test.images, cfg.interpret.decay_alpha)?;

            // Per-layer standalone predictions while the stacks are in hand.
            let n_layers = test_stacks[0].layers.len();
            for layer in 0..n_layers {
                let lap_preds: Vec<usize> = test_stacks
                    .iter()
                    .map(|s| map_prediction(&s.layers[layer].0, cfg.model.classes, concept))
                    .collect::<anyhow::Result<_>>()?;
                let (pred, faith) =
                    predictivity_and_faithfulness(&lap_preds, &test_preds, &test.labels)?;
                report.push(format!("lap{}.predictivity", layer + 1), pred);
                report.push(format!("lap{}.faithfulness", layer + 1), faith);
            }

            // Concept-size probe: fit on validation features, report on test.
            let feats = |stacks: &[InterpretationStack]| {
                let heads = stacks[0].heads();
                let deep = stacks[0].layers.len() - 1;
                let mut f = Array2::zeros((stacks.len(), heads));
                for (i, s) in stacks.iter().enumerate() {
                    f.row_mut(i).assign(&concept_size_features(&s.layers[deep].0));
                }
                f
            };
            let probe_cfg = ProbeConfig {
                hidden: cfg.evaluate.probe_hidden,
                epochs: cfg.evaluate.probe_epochs,
                lr: cfg.evaluate.probe_lr,
                seed: cfg.seed,
            };
            match fc_probe_train(&feats(&val_stacks), &val.labels, &probe_cfg) {
                Ok(probe) => {
                    let probe_preds = probe.predict_batch(&feats(&test_stacks));
                    let (pred, faith) =
                        predictivity_and_faithfulness(&probe_preds, &test_preds, &test.labels)?;
                    report.push("probe.predictivity", pred);
                    report.push("probe.faithfulness", faith);
                }
                Err(e) => log::warn!("probe training skipped: {}", e),
            }

            let to_maps = |stacks: &[InterpretationStack]| -> anyhow::Result<Vec<ScoreMap>> {
                stacks
                    .iter()
                    .map(|s| Ok(ScoreMap::new(integrate_stack(s, concept)?, "lap")?))
                    .collect()
            };
            // Top-scored selection ranks by the unclipped accumulation so
            // the ordering below 0.5 survives.
            let rank_maps: Vec<ScoreMap> = test_stacks
                .iter()
                .map(|s| Ok(ScoreMap::new(integrate_accumulated(s, concept)?, "lap")?))
                .collect::<anyhow::Result<_>>()?;
            (to_maps(&val_stacks)?, to_maps(&test_stacks)?, rank_maps)
        }
    };

    // Global threshold fitted on normalized validation maps.
    let val_norm: Vec<ScoreMap> = val_maps.iter().map(normalize_map).collect();
    let threshold = fit_global_threshold(&val_norm, &val.masks)?;
    report.push("threshold.global", threshold);

    // IoU on concept-positive test samples.
    let positives: Vec<usize> = (0..test.len())
        .filter(|&i| test.masks[i].iter().any(|&m| m))
        .collect();
    report.push_int("iou.positives", positives.len() as i64);
    let mut iou_thr = 0.0;
    let mut iou_top = 0.0;
    let mut iou_rand = 0.0;
    let random_maps = random_score_maps(cfg.seed ^ 0x9e37_79b9, test.len(), size);
    for &i in &positives {
        let norm = normalize_map(&test_maps[i]);
        iou_thr += iou(&binarize(&norm, threshold), &test.masks[i])?;
        let area = test.masks[i].iter().filter(|&&m| m).count();
        iou_top += iou(&binarize_top_scored(&test_rank_maps[i], area)?, &test.masks[i])?;
        iou_rand += iou(&binarize_top_scored(&random_maps[i], area)?, &test.masks[i])?;
    }
    let np = positives.len().max(1) as f64;
    report.push("iou.threshold.mean", iou_thr / np);
    report.push("iou.top_scored.mean", iou_top / np);
    report.push("iou.random.top_scored.mean", iou_rand / np);

    // Keep-k% faithfulness curves, always including k = 1.
    let mut ks = cfg.evaluate.ks.clone();
    if !ks.iter().any(|&k| (k - 1.0).abs() < 1e-12) {
        ks.push(1.0);
    }
    ks.sort_by(f64::total_cmp);
    let lap_curve = faithfulness_curve(
        &model,
        &test.images,
        &test_maps,
        &ks,
        CurveReference::OriginalPredictions,
    )?;
    let lap_gt_curve = faithfulness_curve(
        &model,
        &test.images,
        &test_maps,
        &ks,
        CurveReference::GroundTruth(&test.labels),
    )?;
    let rand_curve = faithfulness_curve(
        &model,
        &test.images,
        &random_maps,
        &ks,
        CurveReference::OriginalPredictions,
    )?;
    for p in &lap_curve {
        report.push(key_for_k("lap", p.k, "top1"), p.top1);
        report.push(key_for_k("lap", p.k, "top5"), p.top5);
    }
    for p in &lap_gt_curve {
        report.push(key_for_k("lap_gt", p.k, "top1"), p.top1);
        report.push(key_for_k("lap_gt", p.k, "top5"), p.top5);
    }
    for p in &rand_curve {
        report.push(key_for_k("random", p.k, "top1"), p.top1);
        report.push(key_for_k("random", p.k, "top5"), p.top5);
    }

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.txt"), report.to_text())?;
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    Ok(report)
}

/// generate -> train -> interpret -> evaluate under one working directory.
/// The determinism harness runs this twice and compares the reports.
pub fn run_full_pipeline(cfg: &Config, workdir: &Path) -> anyhow::Result<MetricsReport> {
    let mut cfg = cfg.clone();
    cfg.data.dir = workdir.join("data").to_string_lossy().into_owned();
    cmd_generate(&cfg, None)?;
    let (ckpt, _) = cmd_train(&cfg, &workdir.join("run"), None)?;
    cmd_interpret(&cfg, &ckpt, &workdir.join("run"), false)?;
    cmd_evaluate(&cfg, &ckpt, None, &workdir.join("run"))
}
