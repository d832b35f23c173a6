//! Flat layer-graph CNNs, the forward/backward executor, and the surgery
//! that converts plain networks into LAP-extended ones.
//!
//! The graph is an ordered list of layers (with residual composites for
//! ResNet-style blocks), which covers desk-scale sequential networks without
//! a general DAG engine. Every trainable array is reachable through a stable
//! dotted name (`block2.conv.w`, `block2.pool.scorer.alpha`, ...), and
//! parameter initialization is seeded per name so that adding a LAP never
//! perturbs the backbone initialization.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lap::{
    adaptive_pool_backward_batch, adaptive_pool_batch, adaptive_regions, lap_pool_backward_batch,
    lap_pool_batch, KernelSpec, LapConfig, Param, ScoreCache, Scorer,
};

pub(crate) fn fnv64(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Descriptors (the serializable architecture) and live layers.
// ---------------------------------------------------------------------------

/// Serializable layer descriptor: the architecture without its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: KernelSpec,
    },
    Relu,
    MaxPool {
        kernel: KernelSpec,
    },
    AvgPool {
        kernel: KernelSpec,
    },
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    Lap {
        cfg: LapConfig,
        in_ch: usize,
    },
    AdaptiveLap {
        out_h: usize,
        out_w: usize,
        cfg: LapConfig,
        in_ch: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Residual {
        body: Vec<LayerDesc>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDesc {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerDesc {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerDesc {
            id: id.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: KernelSpec,
    /// `(out_ch, in_ch * kh * kw)`.
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out_features, in_features)`.
    pub w: Param,
    pub b: Param,
}

/// A LAP layer: the scoring module plus its detached discriminative twin.
#[derive(Debug, Clone)]
pub struct LapLayer {
    pub cfg: LapConfig,
    pub scorer: Scorer,
    /// Same architecture as `scorer`; picks the pixel sets for the
    /// discrimination loss and is trained on detached inputs only.
    pub selector: Scorer,
}

#[derive(Debug, Clone)]
pub enum LayerOp {
    Conv(Conv2d),
    Relu,
    MaxPool(KernelSpec),
    AvgPool(KernelSpec),
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    Lap(LapLayer),
    AdaptiveLap { out_h: usize, out_w: usize, lap: LapLayer },
    Flatten,
    Linear(LinearLayer),
    Residual(Vec<Layer>),
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub id: String,
    pub op: LayerOp,
}

/// Activation shapes as they flow through the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeState {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl std::fmt::Display for ShapeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShapeState::Spatial(c, h, w) => write!(f, "{}x{}x{}", c, h, w),
            ShapeState::Flat(n) => write!(f, "flat {}", n),
        }
    }
}

fn uniform2<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

fn uniform1<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(n, |_| rng.gen_range(-bound..bound))
}

fn build_layer(desc: &LayerDesc, seed: u64) -> Result<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(&desc.id));
    let op = match &desc.kind {
        LayerKind::Conv { in_ch, out_ch, kernel } => {
            let fan_in = in_ch * kernel.kernel_h * kernel.kernel_w;
            LayerOp::Conv(Conv2d {
                in_ch: *in_ch,
                out_ch: *out_ch,
                kernel: *kernel,
                w: Param::new(uniform2(&mut rng, *out_ch, fan_in, fan_in).into_dyn()),
                b: Param::new(uniform1(&mut rng, *out_ch, fan_in).into_dyn()),
            })
        }
        LayerKind::Relu => LayerOp::Relu,
        LayerKind::MaxPool { kernel } => LayerOp::MaxPool(*kernel),
        LayerKind::AvgPool { kernel } => LayerOp::AvgPool(*kernel),
        LayerKind::AdaptiveAvgPool { out_h, out_w } => LayerOp::AdaptiveAvgPool {
            out_h: *out_h,
            out_w: *out_w,
        },
        LayerKind::Lap { cfg, in_ch } => LayerOp::Lap(build_lap(cfg, *in_ch, &mut rng)?),
        LayerKind::AdaptiveLap {
            out_h,
            out_w,
            cfg,
            in_ch,
        } => LayerOp::AdaptiveLap {
            out_h: *out_h,
            out_w: *out_w,
            lap: build_lap(cfg, *in_ch, &mut rng)?,
        },
        LayerKind::Flatten => LayerOp::Flatten,
        LayerKind::Linear {
            in_features,
            out_features,
        } => LayerOp::Linear(LinearLayer {
            in_features: *in_features,
            out_features: *out_features,
            w: Param::new(uniform2(&mut rng, *out_features, *in_features, *in_features).into_dyn()),
            b: Param::new(uniform1(&mut rng, *out_features, *in_features).into_dyn()),
        }),
        LayerKind::Residual { body } => {
            let mut layers = Vec::with_capacity(body.len());
            for d in body {
                layers.push(build_layer(d, seed)?);
            }
            LayerOp::Residual(layers)
        }
    };
    Ok(Layer {
        id: desc.id.clone(),
        op,
    })
}

fn build_lap(cfg: &LapConfig, in_ch: usize, rng: &mut ChaCha8Rng) -> Result<LapLayer> {
    let scorer = Scorer::new(in_ch, cfg, rng)?;
    let selector = Scorer::new(in_ch, cfg, rng)?;
    Ok(LapLayer {
        cfg: cfg.clone(),
        scorer,
        selector,
    })
}

fn layer_to_desc(layer: &Layer) -> LayerDesc {
    let kind = match &layer.op {
        LayerOp::Conv(c) => LayerKind::Conv {
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            kernel: c.kernel,
        },
        LayerOp::Relu => LayerKind::Relu,
        LayerOp::MaxPool(k) => LayerKind::MaxPool { kernel: *k },
        LayerOp::AvgPool(k) => LayerKind::AvgPool { kernel: *k },
        LayerOp::AdaptiveAvgPool { out_h, out_w } => LayerKind::AdaptiveAvgPool {
            out_h: *out_h,
            out_w: *out_w,
        },
        LayerOp::Lap(lap) => LayerKind::Lap {
            cfg: lap.cfg.clone(),
            in_ch: lap.scorer.in_channels(),
        },
        LayerOp::AdaptiveLap { out_h, out_w, lap } => LayerKind::AdaptiveLap {
            out_h: *out_h,
            out_w: *out_w,
            cfg: lap.cfg.clone(),
            in_ch: lap.scorer.in_channels(),
        },
        LayerOp::Flatten => LayerKind::Flatten,
        LayerOp::Linear(l) => LayerKind::Linear {
            in_features: l.in_features,
            out_features: l.out_features,
        },
        LayerOp::Residual(body) => LayerKind::Residual {
            body: body.iter().map(layer_to_desc).collect(),
        },
    };
    LayerDesc::new(layer.id.clone(), kind)
}

// ---------------------------------------------------------------------------
// The graph.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerGraph {
    /// (C, H, W) of a single input sample.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

impl LayerGraph {
    /// Builds a graph with freshly initialized parameters. Initialization is
    /// deterministic in `(seed, layer id)`.
    pub fn from_descs(
        input_shape: (usize, usize, usize),
        descs: &[LayerDesc],
        seed: u64,
    ) -> Result<LayerGraph> {
        let mut layers = Vec::with_capacity(descs.len());
        for d in descs {
            layers.push(build_layer(d, seed)?);
        }
        let g = LayerGraph {
            input_shape,
            layers,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_descs(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(layer_to_desc).collect()
    }

    /// Shape-checks the whole graph and returns (id, input shape, output
    /// shape) per top-level layer.
    pub fn validate(&self) -> Result<Vec<(String, ShapeState, ShapeState)>> {
        let mut ids = Vec::new();
        collect_ids(&self.layers, &mut ids);
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::graph("duplicate layer ids"));
        }
        let (c, h, w) = self.input_shape;
        let mut state = ShapeState::Spatial(c, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer_output_shape(layer, state)?;
            out.push((layer.id.clone(), state, next));
            state = next;
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<ShapeState> {
        Ok(self
            .validate()?
            .last()
            .map(|(_, _, s)| *s)
            .unwrap_or(ShapeState::Spatial(
                self.input_shape.0,
                self.input_shape.1,
                self.input_shape.2,
            )))
    }

    /// Every trainable array with its dotted name, in graph order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            collect_params(layer, &mut out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            collect_params_mut(layer, &mut out);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Ids of every LAP layer (windowed or adaptive), in forward order.
    pub fn lap_ids(&self) -> Vec<String> {
        fn walk(layers: &[Layer], out: &mut Vec<String>) {
            for l in layers {
                match &l.op {
                    LayerOp::Lap(_) | LayerOp::AdaptiveLap { .. } => out.push(l.id.clone()),
                    LayerOp::Residual(body) => walk(body, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> Result<ForwardResult> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.input_shape {
            return Err(Error::graph(format!(
                "input {}x{}x{} does not match graph input {:?}",
                c, h, w, self.input_shape
            )));
        }
        let mut taps = Vec::new();
        let mut caches = Vec::new();
        let act = forward_layers(
            &self.layers,
            Act::Spatial(x.clone()),
            mode,
            &mut taps,
            &mut caches,
        )?;
        let logits = match act {
            Act::Flat(a) => a,
            Act::Spatial(_) => {
                return Err(Error::graph(
                    "network must end with a flat output (add Flatten + Linear)",
                ))
            }
        };
        Ok(ForwardResult {
            logits,
            taps,
            caches,
        })
    }

    /// Runs the backward pass. `tap_grads` must be empty or aligned with
    /// `fwd.taps`; gradients accumulate into the layer parameters. Returns
    /// the gradient w.r.t. the network input.
    pub fn backward(
        &mut self,
        fwd: &ForwardResult,
        d_logits: &Array2<f64>,
        tap_grads: &[TapGrad],
    ) -> Result<Array4<f64>> {
        if !tap_grads.is_empty() && tap_grads.len() != fwd.taps.len() {
            return Err(Error::argument(format!(
                "{} tap gradients for {} taps",
                tap_grads.len(),
                fwd.taps.len()
            )));
        }
        let mut tap_cursor = fwd.taps.len();
        let act = backward_layers(
            &mut self.layers,
            &fwd.caches,
            Act::Flat(d_logits.clone()),
            tap_grads,
            &mut tap_cursor,
        )?;
        match act {
            Act::Spatial(dx) => Ok(dx),
            Act::Flat(_) => Err(Error::graph("graph does not start with a spatial input")),
        }
    }
}

fn collect_ids(layers: &[Layer], out: &mut Vec<String>) {
    for l in layers {
        out.push(l.id.clone());
        if let LayerOp::Residual(body) = &l.op {
            collect_ids(body, out);
        }
    }
}

fn collect_params<'a>(layer: &'a Layer, out: &mut Vec<(String, &'a Param)>) {
    let id = &layer.id;
    match &layer.op {
        LayerOp::Conv(c) => {
            out.push((format!("{}.w", id), &c.w));
            out.push((format!("{}.b", id), &c.b));
        }
        LayerOp::Linear(l) => {
            out.push((format!("{}.w", id), &l.w));
            out.push((format!("{}.b", id), &l.b));
        }
        LayerOp::Lap(lap) | LayerOp::AdaptiveLap { lap, .. } => {
            for (name, p) in lap.scorer.params() {
                out.push((format!("{}.scorer.{}", id, name), p));
            }
            for (name, p) in lap.selector.params() {
                out.push((format!("{}.selector.{}", id, name), p));
            }
        }
        LayerOp::Residual(body) => {
            for l in body {
                collect_params(l, out);
            }
        }
        _ => {}
    }
}

fn collect_params_mut<'a>(layer: &'a mut Layer, out: &mut Vec<(String, &'a mut Param)>) {
    let id = layer.id.clone();
    match &mut layer.op {
        LayerOp::Conv(c) => {
            out.push((format!("{}.w", id), &mut c.w));
            out.push((format!("{}.b", id), &mut c.b));
        }
        LayerOp::Linear(l) => {
            out.push((format!("{}.w", id), &mut l.w));
            out.push((format!("{}.b", id), &mut l.b));
        }
        LayerOp::Lap(lap) | LayerOp::AdaptiveLap { lap, .. } => {
            for (name, p) in lap.scorer.params_mut() {
                out.push((format!("{}.scorer.{}", id, name), p));
            }
            for (name, p) in lap.selector.params_mut() {
                out.push((format!("{}.selector.{}", id, name), p));
            }
        }
        LayerOp::Residual(body) => {
            for l in body {
                collect_params_mut(l, out);
            }
        }
        _ => {}
    }
}

fn layer_output_shape(layer: &Layer, input: ShapeState) -> Result<ShapeState> {
    let err = |msg: String| Err(Error::graph(format!("layer '{}': {}", layer.id, msg)));
    match (&layer.op, input) {
        (LayerOp::Conv(conv), ShapeState::Spatial(c, h, w)) => {
            if c != conv.in_ch {
                return err(format!("expects {} channels, got {}", conv.in_ch, c));
            }
            let (oh, ow) = conv.kernel.output_dims(h, w).map_err(|e| {
                Error::graph(format!("layer '{}': {}", layer.id, e))
            })?;
            Ok(ShapeState::Spatial(conv.out_ch, oh, ow))
        }
        (LayerOp::Relu, s) => Ok(s),
        (LayerOp::MaxPool(k), ShapeState::Spatial(c, h, w))
        | (LayerOp::AvgPool(k), ShapeState::Spatial(c, h, w)) => {
            let (oh, ow) = k
                .output_dims(h, w)
                .map_err(|e| Error::graph(format!("layer '{}': {}", layer.id, e)))?;
            Ok(ShapeState::Spatial(c, oh, ow))
        }
        (LayerOp::AdaptiveAvgPool { out_h, out_w }, ShapeState::Spatial(c, h, w)) => {
            if *out_h > h || *out_w > w || *out_h == 0 || *out_w == 0 {
                return err(format!("adaptive output {}x{} invalid for {}x{}", out_h, out_w, h, w));
            }
            Ok(ShapeState::Spatial(c, *out_h, *out_w))
        }
        (LayerOp::Lap(lap), ShapeState::Spatial(c, h, w)) => {
            if c != lap.scorer.in_channels() {
                return err(format!(
                    "LAP scorer expects {} channels, got {}",
                    lap.scorer.in_channels(),
                    c
                ));
            }
            let (oh, ow) = lap
                .cfg
                .kernel
                .output_dims(h, w)
                .map_err(|e| Error::graph(format!("layer '{}': {}", layer.id, e)))?;
            Ok(ShapeState::Spatial(c, oh, ow))
        }
        (LayerOp::AdaptiveLap { out_h, out_w, lap }, ShapeState::Spatial(c, h, w)) => {
            if c != lap.scorer.in_channels() {
                return err("adaptive LAP channel mismatch".into());
            }
            if *out_h > h || *out_w > w || *out_h == 0 || *out_w == 0 {
                return err(format!("adaptive output {}x{} invalid for {}x{}", out_h, out_w, h, w));
            }
            Ok(ShapeState::Spatial(c, *out_h, *out_w))
        }
        (LayerOp::Flatten, ShapeState::Spatial(c, h, w)) => Ok(ShapeState::Flat(c * h * w)),
        (LayerOp::Linear(l), ShapeState::Flat(n)) => {
            if n != l.in_features {
                return err(format!("expects {} features, got {}", l.in_features, n));
            }
            Ok(ShapeState::Flat(l.out_features))
        }
        (LayerOp::Residual(body), ShapeState::Spatial(c, h, w)) => {
            let mut state = ShapeState::Spatial(c, h, w);
            for inner in body {
                state = layer_output_shape(inner, state)?;
            }
            if state != ShapeState::Spatial(c, h, w) {
                return err(format!(
                    "residual body maps {} to {}",
                    ShapeState::Spatial(c, h, w),
                    state
                ));
            }
            Ok(state)
        }
        (_, s) => err(format!("cannot apply to {} input", s)),
    }
}

// ---------------------------------------------------------------------------
// Executor.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Also runs the detached selector so its maps are available to losses.
    Train,
    Eval,
}

/// Concept maps captured from one LAP layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LapTap {
    pub layer_id: String,
    /// Window geometry of the LAP. For adaptive LAPs this is the equivalent
    /// uniform kernel when the partition is uniform, `None` otherwise.
    pub kernel: Option<KernelSpec>,
    /// (N, heads, H, W) at the LAP's input resolution.
    pub per_concept: Array4<f64>,
    /// (N, H, W).
    pub aggregated: Array3<f64>,
    /// Selector probabilities, present in train mode.
    pub selector: Option<Array4<f64>>,
    pub input_hw: (usize, usize),
}

/// External gradients flowing into one LAP tap.
#[derive(Debug, Clone, Default)]
pub struct TapGrad {
    pub d_per_concept: Option<Array4<f64>>,
    pub d_selector: Option<Array4<f64>>,
}

pub struct ForwardResult {
    pub logits: Array2<f64>,
    pub taps: Vec<LapTap>,
    caches: Vec<NodeCache>,
}

#[derive(Debug, Clone)]
enum Act {
    Spatial(Array4<f64>),
    Flat(Array2<f64>),
}

struct NodeCache {
    input: Act,
    aux: Aux,
}

enum Aux {
    None,
    Conv {
        cols: Array3<f64>,
        out_hw: (usize, usize),
    },
    Lap {
        per_concept: Array4<f64>,
        aggregated: Array3<f64>,
        out: Array4<f64>,
        score_cache: ScoreCache,
        selector_maps: Option<Array4<f64>>,
        selector_cache: Option<ScoreCache>,
    },
    Residual(Vec<NodeCache>),
}

fn forward_layers(
    layers: &[Layer],
    mut act: Act,
    mode: Mode,
    taps: &mut Vec<LapTap>,
    caches: &mut Vec<NodeCache>,
) -> Result<Act> {
    for layer in layers {
        let input = act.clone();
        let (next, aux) = forward_one(layer, act, mode, taps)?;
        caches.push(NodeCache { input, aux });
        act = next;
    }
    Ok(act)
}

fn as_spatial<'a>(a: &'a Act, id: &str) -> Result<&'a Array4<f64>> {
    match a {
        Act::Spatial(x) => Ok(x),
        Act::Flat(_) => Err(Error::graph(format!("layer '{}' needs a spatial input", id))),
    }
}

fn forward_one(layer: &Layer, act: Act, mode: Mode, taps: &mut Vec<LapTap>) -> Result<(Act, Aux)> {
    match &layer.op {
        LayerOp::Conv(conv) => {
            let x = as_spatial(&act, &layer.id)?;
            let (out, cols, out_hw) = conv_forward(conv, x)?;
            Ok((Act::Spatial(out), Aux::Conv { cols, out_hw }))
        }
        LayerOp::Relu => match act {
            Act::Spatial(x) => Ok((Act::Spatial(x.mapv(|v| v.max(0.0))), Aux::None)),
            Act::Flat(x) => Ok((Act::Flat(x.mapv(|v| v.max(0.0))), Aux::None)),
        },
        LayerOp::MaxPool(k) => {
            let x = as_spatial(&act, &layer.id)?;
            Ok((Act::Spatial(max_pool_forward(x, k)?), Aux::None))
        }
        LayerOp::AvgPool(k) => {
            let x = as_spatial(&act, &layer.id)?;
            Ok((Act::Spatial(avg_pool_forward(x, k)?), Aux::None))
        }
        LayerOp::AdaptiveAvgPool { out_h, out_w } => {
            let x = as_spatial(&act, &layer.id)?;
            Ok((
                Act::Spatial(adaptive_avg_forward(x, *out_h, *out_w)?),
                Aux::None,
            ))
        }
        LayerOp::Lap(lap) => {
            let x = as_spatial(&act, &layer.id)?;
            let (n, _, h, w) = x.dim();
            let _ = n;
            let (per_concept, aggregated, score_cache) = lap.scorer.score_batch(x)?;
            let out = lap_pool_batch(
                x,
                &aggregated,
                &lap.cfg.kernel,
                lap.scorer.alpha_value(),
                lap.scorer.epsilon,
            )?;
            let (selector_maps, selector_cache) = if mode == Mode::Train {
                let (m, _, c) = lap.selector.score_batch(x)?;
                (Some(m), Some(c))
            } else {
                (None, None)
            };
            taps.push(LapTap {
                layer_id: layer.id.clone(),
                kernel: Some(lap.cfg.kernel),
                per_concept: per_concept.clone(),
                aggregated: aggregated.clone(),
                selector: selector_maps.clone(),
                input_hw: (h, w),
            });
            Ok((
                Act::Spatial(out.clone()),
                Aux::Lap {
                    per_concept,
                    aggregated,
                    out,
                    score_cache,
                    selector_maps,
                    selector_cache,
                },
            ))
        }
        LayerOp::AdaptiveLap { out_h, out_w, lap } => {
            let x = as_spatial(&act, &layer.id)?;
            let (_, _, h, w) = x.dim();
            let (per_concept, aggregated, score_cache) = lap.scorer.score_batch(x)?;
            let out = adaptive_pool_batch(
                x,
                &aggregated,
                *out_h,
                *out_w,
                lap.scorer.alpha_value(),
                lap.scorer.epsilon,
            )?;
            let (selector_maps, selector_cache) = if mode == Mode::Train {
                let (m, _, c) = lap.selector.score_batch(x)?;
                (Some(m), Some(c))
            } else {
                (None, None)
            };
            taps.push(LapTap {
                layer_id: layer.id.clone(),
                kernel: uniform_adaptive_kernel(h, w, *out_h, *out_w),
                per_concept: per_concept.clone(),
                aggregated: aggregated.clone(),
                selector: selector_maps.clone(),
                input_hw: (h, w),
            });
            Ok((
                Act::Spatial(out.clone()),
                Aux::Lap {
                    per_concept,
                    aggregated,
                    out,
                    score_cache,
                    selector_maps,
                    selector_cache,
                },
            ))
        }
        LayerOp::Flatten => {
            let x = as_spatial(&act, &layer.id)?;
            let (n, c, h, w) = x.dim();
            let flat = x
                .to_owned()
                .into_shape((n, c * h * w))
                .expect("contiguous activations");
            Ok((Act::Flat(flat), Aux::None))
        }
        LayerOp::Linear(lin) => match &act {
            Act::Flat(x) => {
                let w = lin.w.value.view().into_dimensionality::<Ix2>().unwrap();
                let b = lin.b.value.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = x.dot(&w.t());
                for mut row in out.outer_iter_mut() {
                    row += &b;
                }
                Ok((Act::Flat(out), Aux::None))
            }
            Act::Spatial(_) => Err(Error::graph(format!(
                "layer '{}' needs a flat input",
                layer.id
            ))),
        },
        LayerOp::Residual(body) => {
            let x = as_spatial(&act, &layer.id)?.clone();
            let mut inner = Vec::new();
            let branch = forward_layers(body, Act::Spatial(x.clone()), mode, taps, &mut inner)?;
            match branch {
                Act::Spatial(y) => Ok((Act::Spatial(y + &x), Aux::Residual(inner))),
                Act::Flat(_) => Err(Error::graph("residual body must stay spatial")),
            }
        }
    }
}

fn backward_layers(
    layers: &mut [Layer],
    caches: &[NodeCache],
    d_out: Act,
    tap_grads: &[TapGrad],
    tap_cursor: &mut usize,
) -> Result<Act> {
    let mut grad = d_out;
    for (layer, cache) in layers.iter_mut().zip(caches.iter()).rev() {
        grad = backward_one(layer, cache, grad, tap_grads, tap_cursor)?;
    }
    Ok(grad)
}

fn backward_one(
    layer: &mut Layer,
    cache: &NodeCache,
    d_out: Act,
    tap_grads: &[TapGrad],
    tap_cursor: &mut usize,
) -> Result<Act> {
    match (&mut layer.op, &cache.input) {
        (LayerOp::Conv(conv), Act::Spatial(x)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!("conv gradient is spatial"),
            };
            let Aux::Conv { cols, out_hw } = &cache.aux else {
                unreachable!("conv cache")
            };
            Ok(Act::Spatial(conv_backward(conv, x, cols, *out_hw, &d)))
        }
        (LayerOp::Relu, input) => match (d_out, input) {
            (Act::Spatial(mut d), Act::Spatial(x)) => {
                d.zip_mut_with(x, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                Ok(Act::Spatial(d))
            }
            (Act::Flat(mut d), Act::Flat(x)) => {
                d.zip_mut_with(x, |g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                Ok(Act::Flat(d))
            }
            _ => Err(Error::graph("relu gradient shape mismatch")),
        },
        (LayerOp::MaxPool(k), Act::Spatial(x)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!(),
            };
            Ok(Act::Spatial(max_pool_backward(x, k, &d)))
        }
        (LayerOp::AvgPool(k), Act::Spatial(x)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!(),
            };
            Ok(Act::Spatial(avg_pool_backward(x, k, &d)))
        }
        (LayerOp::AdaptiveAvgPool { out_h, out_w }, Act::Spatial(x)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!(),
            };
            Ok(Act::Spatial(adaptive_avg_backward(x, *out_h, *out_w, &d)))
        }
        (LayerOp::Lap(lap), Act::Spatial(x)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!(),
            };
            *tap_cursor -= 1;
            let tg = tap_grads.get(*tap_cursor);
            let Aux::Lap {
                per_concept,
                aggregated,
                out,
                score_cache,
                selector_maps,
                selector_cache,
            } = &cache.aux
            else {
                unreachable!("lap cache")
            };
            let (dx_pool, d_scores, d_alpha) = lap_pool_backward_batch(
                x,
                aggregated,
                &lap.cfg.kernel,
                lap.scorer.alpha_value(),
                lap.scorer.epsilon,
                out,
                &d,
            );
            lap.scorer.alpha.grad[[0]] += d_alpha;
            let d_pc = tg.and_then(|t| t.d_per_concept.as_ref());
            let dx_scorer =
                lap.scorer
                    .score_backward(x, per_concept, score_cache, d_pc, Some(&d_scores));
            if let (Some(d_sel), Some(maps), Some(cache)) = (
                tg.and_then(|t| t.d_selector.as_ref()),
                selector_maps.as_ref(),
                selector_cache.as_ref(),
            ) {
                // Detached: the selector's input gradient is dropped.
                let _ = lap
                    .selector
                    .score_backward(x, maps, cache, Some(d_sel), None);
            }
            Ok(Act::Spatial(dx_pool + dx_scorer))
        }
        (LayerOp::AdaptiveLap { out_h, out_w, lap }, Act::Spatial(x)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!(),
            };
            *tap_cursor -= 1;
            let tg = tap_grads.get(*tap_cursor);
            let Aux::Lap {
                per_concept,
                aggregated,
                out,
                score_cache,
                selector_maps,
                selector_cache,
            } = &cache.aux
            else {
                unreachable!("lap cache")
            };
            let (dx_pool, d_scores, d_alpha) = adaptive_pool_backward_batch(
                x,
                aggregated,
                *out_h,
                *out_w,
                lap.scorer.alpha_value(),
                lap.scorer.epsilon,
                out,
                &d,
            );
            lap.scorer.alpha.grad[[0]] += d_alpha;
            let d_pc = tg.and_then(|t| t.d_per_concept.as_ref());
            let dx_scorer =
                lap.scorer
                    .score_backward(x, per_concept, score_cache, d_pc, Some(&d_scores));
            if let (Some(d_sel), Some(maps), Some(cache)) = (
                tg.and_then(|t| t.d_selector.as_ref()),
                selector_maps.as_ref(),
                selector_cache.as_ref(),
            ) {
                let _ = lap
                    .selector
                    .score_backward(x, maps, cache, Some(d_sel), None);
            }
            Ok(Act::Spatial(dx_pool + dx_scorer))
        }
        (LayerOp::Flatten, Act::Spatial(x)) => {
            let d = match d_out {
                Act::Flat(d) => d,
                _ => unreachable!(),
            };
            let dim = x.dim();
            Ok(Act::Spatial(d.into_shape(dim).expect("flatten gradient")))
        }
        (LayerOp::Linear(lin), Act::Flat(x)) => {
            let d = match d_out {
                Act::Flat(d) => d,
                _ => unreachable!(),
            };
            let w = lin
                .w
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            {
                let dw = d.t().dot(x);
                let mut g = lin.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
                g += &dw;
                let mut gb = lin.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
                gb += &d.sum_axis(Axis(0));
            }
            Ok(Act::Flat(d.dot(&w)))
        }
        (LayerOp::Residual(body), Act::Spatial(_)) => {
            let d = match d_out {
                Act::Spatial(d) => d,
                _ => unreachable!(),
            };
            let Aux::Residual(inner) = &cache.aux else {
                unreachable!("residual cache")
            };
            let branch = backward_layers(
                body,
                inner,
                Act::Spatial(d.clone()),
                tap_grads,
                tap_cursor,
            )?;
            match branch {
                Act::Spatial(db) => Ok(Act::Spatial(db + &d)),
                Act::Flat(_) => Err(Error::graph("residual gradient shape mismatch")),
            }
        }
        _ => Err(Error::graph(format!(
            "layer '{}': cache/input mismatch in backward",
            layer.id
        ))),
    }
}

/// The kernel equivalent of a uniform adaptive partition, if one exists.
fn uniform_adaptive_kernel(h: usize, w: usize, out_h: usize, out_w: usize) -> Option<KernelSpec> {
    if h % out_h == 0 && w % out_w == 0 {
        Some(KernelSpec {
            kernel_h: h / out_h,
            kernel_w: w / out_w,
            stride_h: h / out_h,
            stride_w: w / out_w,
            padding: 0,
        })
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Plain layer math.
// ---------------------------------------------------------------------------

fn im2col(x: &Array4<f64>, n: usize, k: &KernelSpec, oh: usize, ow: usize) -> Array2<f64> {
    let (_, c, h, w) = x.dim();
    let mut col = Array2::zeros((c * k.kernel_h * k.kernel_w, oh * ow));
    for ch in 0..c {
        for ky in 0..k.kernel_h {
            for kx in 0..k.kernel_w {
                let row = (ch * k.kernel_h + ky) * k.kernel_w + kx;
                for oy in 0..oh {
                    let y = oy as isize * k.stride_h as isize + ky as isize - k.padding as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx =
                            ox as isize * k.stride_w as isize + kx as isize - k.padding as isize;
                        if xx < 0 || xx as usize >= w {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[n, ch, y as usize, xx as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(
    dcol: &Array2<f64>,
    k: &KernelSpec,
    oh: usize,
    ow: usize,
    dx: &mut Array4<f64>,
    n: usize,
) {
    let (_, c, h, w) = dx.dim();
    for ch in 0..c {
        for ky in 0..k.kernel_h {
            for kx in 0..k.kernel_w {
                let row = (ch * k.kernel_h + ky) * k.kernel_w + kx;
                for oy in 0..oh {
                    let y = oy as isize * k.stride_h as isize + ky as isize - k.padding as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx =
                            ox as isize * k.stride_w as isize + kx as isize - k.padding as isize;
                        if xx < 0 || xx as usize >= w {
                            continue;
                        }
                        dx[[n, ch, y as usize, xx as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

fn conv_forward(
    conv: &Conv2d,
    x: &Array4<f64>,
) -> Result<(Array4<f64>, Array3<f64>, (usize, usize))> {
    let (n, c, h, w) = x.dim();
    if c != conv.in_ch {
        return Err(Error::graph(format!(
            "conv expects {} channels, got {}",
            conv.in_ch, c
        )));
    }
    let (oh, ow) = conv.kernel.output_dims(h, w)?;
    let ck = conv.in_ch * conv.kernel.kernel_h * conv.kernel.kernel_w;
    let wmat = conv.w.value.view().into_dimensionality::<Ix2>().unwrap();
    let b = conv.b.value.view().into_dimensionality::<Ix1>().unwrap();
    let mut out = Array4::zeros((n, conv.out_ch, oh, ow));
    let mut cols = Array3::zeros((n, ck, oh * ow));
    for s in 0..n {
        let col = im2col(x, s, &conv.kernel, oh, ow);
        let mut o = wmat.dot(&col);
        for (mut row, bias) in o.outer_iter_mut().zip(b.iter()) {
            row += *bias;
        }
        out.index_axis_mut(Axis(0), s)
            .assign(&o.into_shape((conv.out_ch, oh, ow)).unwrap());
        cols.index_axis_mut(Axis(0), s).assign(&col);
    }
    Ok((out, cols, (oh, ow)))
}

fn conv_backward(
    conv: &mut Conv2d,
    x: &Array4<f64>,
    cols: &Array3<f64>,
    out_hw: (usize, usize),
    d_out: &Array4<f64>,
) -> Array4<f64> {
    let (n, _, _, _) = x.dim();
    let (oh, ow) = out_hw;
    let wmat = conv
        .w
        .value
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let mut dx = Array4::zeros(x.raw_dim());
    for s in 0..n {
        let dmat = d_out
            .index_axis(Axis(0), s)
            .into_shape((conv.out_ch, oh * ow))
            .unwrap()
            .to_owned();
        let col = cols.index_axis(Axis(0), s);
        {
            let dw = dmat.dot(&col.t());
            let mut g = conv.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            g += &dw;
            let mut gb = conv.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &dmat.sum_axis(Axis(1));
        }
        let dcol = wmat.t().dot(&dmat);
        col2im_add(&dcol, &conv.kernel, oh, ow, &mut dx, s);
    }
    dx
}

fn max_pool_forward(x: &Array4<f64>, k: &KernelSpec) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = k.output_dims(h, w)?;
    let mut out = Array4::zeros((n, c, oh, ow));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = k.window_origin(oy, ox);
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..k.kernel_h {
                        for kx in 0..k.kernel_w {
                            let y = y0 + ky as isize;
                            let xx = x0 + kx as isize;
                            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                                continue;
                            }
                            let v = x[[s, ch, y as usize, xx as usize]];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[[s, ch, oy, ox]] = if best.is_finite() { best } else { 0.0 };
                }
            }
        }
    }
    Ok(out)
}

fn max_pool_backward(x: &Array4<f64>, k: &KernelSpec, d_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (_, _, oh, ow) = d_out.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = k.window_origin(oy, ox);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_pos = None;
                    for ky in 0..k.kernel_h {
                        for kx in 0..k.kernel_w {
                            let y = y0 + ky as isize;
                            let xx = x0 + kx as isize;
                            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                                continue;
                            }
                            let v = x[[s, ch, y as usize, xx as usize]];
                            if v > best {
                                best = v;
                                best_pos = Some((y as usize, xx as usize));
                            }
                        }
                    }
                    if let Some((y, xx)) = best_pos {
                        dx[[s, ch, y, xx]] += d_out[[s, ch, oy, ox]];
                    }
                }
            }
        }
    }
    dx
}

// Average pooling divides by the number of *real* pixels under the window
// (padding excluded), matching the weighting a constant-score LAP converges
// to at the borders.
fn avg_pool_forward(x: &Array4<f64>, k: &KernelSpec) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = k.output_dims(h, w)?;
    let mut out = Array4::zeros((n, c, oh, ow));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = k.window_origin(oy, ox);
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for ky in 0..k.kernel_h {
                        for kx in 0..k.kernel_w {
                            let y = y0 + ky as isize;
                            let xx = x0 + kx as isize;
                            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                                continue;
                            }
                            acc += x[[s, ch, y as usize, xx as usize]];
                            count += 1;
                        }
                    }
                    if count > 0 {
                        out[[s, ch, oy, ox]] = acc / count as f64;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn avg_pool_backward(x: &Array4<f64>, k: &KernelSpec, d_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (_, _, oh, ow) = d_out.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = k.window_origin(oy, ox);
                    let mut count = 0usize;
                    for ky in 0..k.kernel_h {
                        for kx in 0..k.kernel_w {
                            let y = y0 + ky as isize;
                            let xx = x0 + kx as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                count += 1;
                            }
                        }
                    }
                    if count == 0 {
                        continue;
                    }
                    let g = d_out[[s, ch, oy, ox]] / count as f64;
                    for ky in 0..k.kernel_h {
                        for kx in 0..k.kernel_w {
                            let y = y0 + ky as isize;
                            let xx = x0 + kx as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                dx[[s, ch, y as usize, xx as usize]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn adaptive_avg_forward(x: &Array4<f64>, out_h: usize, out_w: usize) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::geometry("adaptive output exceeds input dims"));
    }
    let rows = adaptive_regions(h, out_h);
    let cols = adaptive_regions(w, out_w);
    let mut out = Array4::zeros((n, c, out_h, out_w));
    for s in 0..n {
        for ch in 0..c {
            for (oy, ys) in rows.iter().enumerate() {
                for (ox, xs) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for y in ys.0..ys.1 {
                        for xx in xs.0..xs.1 {
                            acc += x[[s, ch, y, xx]];
                        }
                    }
                    out[[s, ch, oy, ox]] = acc / ((ys.1 - ys.0) * (xs.1 - xs.0)) as f64;
                }
            }
        }
    }
    Ok(out)
}

fn adaptive_avg_backward(
    x: &Array4<f64>,
    out_h: usize,
    out_w: usize,
    d_out: &Array4<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let rows = adaptive_regions(h, out_h);
    let cols = adaptive_regions(w, out_w);
    let mut dx = Array4::zeros((n, c, h, w));
    for s in 0..n {
        for ch in 0..c {
            for (oy, ys) in rows.iter().enumerate() {
                for (ox, xs) in cols.iter().enumerate() {
                    let g = d_out[[s, ch, oy, ox]] / ((ys.1 - ys.0) * (xs.1 - xs.0)) as f64;
                    for y in ys.0..ys.1 {
                        for xx in xs.0..xs.1 {
                            dx[[s, ch, y, xx]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Surgery.
// ---------------------------------------------------------------------------

/// One replacement: the target layer id plus the LAP settings to install.
/// The replacement mode follows from the target's kind: pools become LAPs
/// with the pool's own geometry, adaptive pools become adaptive LAPs, and
/// strided convolutions become a stride-1 convolution followed by a LAP
/// whose kernel and stride equal the convolution's stride.
#[derive(Debug, Clone)]
pub struct Placement {
    pub target: String,
    pub cfg: LapConfig,
}

#[derive(Debug, Clone, Default)]
pub struct PlacementSpec {
    pub placements: Vec<Placement>,
}

impl PlacementSpec {
    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }
}

/// Replaces the targeted layers with LAPs. All non-target parameters are
/// preserved value-for-value (a replaced strided convolution keeps its
/// weights) and the network's output shape is unchanged.
pub fn extend_architecture(g: &LayerGraph, spec: &PlacementSpec, seed: u64) -> Result<LayerGraph> {
    let mut out = g.clone();
    if spec.is_empty() {
        return Ok(out);
    }
    let shapes = g.validate()?;
    let original_out = g.output_shape()?;

    let mut seen = std::collections::BTreeSet::new();
    for placement in &spec.placements {
        if !seen.insert(placement.target.clone()) {
            return Err(Error::graph(format!(
                "duplicate surgery target '{}'",
                placement.target
            )));
        }
        apply_placement(&mut out.layers, placement, &shapes, seed)?;
    }
    out.validate()?;
    let new_out = out.output_shape()?;
    if new_out != original_out {
        return Err(Error::graph(format!(
            "surgery changed the output shape from {} to {}",
            original_out, new_out
        )));
    }
    Ok(out)
}

fn shape_of<'a>(
    shapes: &'a [(String, ShapeState, ShapeState)],
    id: &str,
) -> Option<&'a ShapeState> {
    shapes.iter().find(|(i, _, _)| i == id).map(|(_, s, _)| s)
}

fn apply_placement(
    layers: &mut Vec<Layer>,
    placement: &Placement,
    shapes: &[(String, ShapeState, ShapeState)],
    seed: u64,
) -> Result<()> {
    let idx = layers
        .iter()
        .position(|l| l.id == placement.target)
        .ok_or_else(|| {
            Error::graph(format!(
                "surgery target '{}' not found (targets must be top-level layers)",
                placement.target
            ))
        })?;
    let input_shape = shape_of(shapes, &placement.target).copied();
    let layer = &layers[idx];
    let ShapeState::Spatial(in_ch, in_h, in_w) = input_shape.ok_or_else(|| {
        Error::graph(format!("no shape information for '{}'", placement.target))
    })?
    else {
        return Err(Error::graph(format!(
            "target '{}' does not take a spatial input",
            placement.target
        )));
    };

    match &layer.op {
        LayerOp::MaxPool(k) | LayerOp::AvgPool(k) => {
            // The LAP keeps the pool's kernel, stride and padding.
            let mut cfg = placement.cfg.clone();
            cfg.kernel = *k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(&layer.id));
            let lap = build_lap(&cfg, in_ch, &mut rng)?;
            layers[idx] = Layer {
                id: layer.id.clone(),
                op: LayerOp::Lap(lap),
            };
        }
        LayerOp::AdaptiveAvgPool { out_h, out_w } => {
            let (out_h, out_w) = (*out_h, *out_w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(&layer.id));
            let lap = build_lap(&placement.cfg, in_ch, &mut rng)?;
            layers[idx] = Layer {
                id: layer.id.clone(),
                op: LayerOp::AdaptiveLap { out_h, out_w, lap },
            };
        }
        LayerOp::Conv(conv) => {
            if conv.kernel.stride_h < 2 && conv.kernel.stride_w < 2 {
                return Err(Error::graph(format!(
                    "'{}' is not a strided convolution",
                    placement.target
                )));
            }
            let (sh, sw) = (conv.kernel.stride_h, conv.kernel.stride_w);
            let (orig_oh, orig_ow) = conv.kernel.output_dims(in_h, in_w)?;
            let mut stride1 = conv.clone();
            stride1.kernel.stride_h = 1;
            stride1.kernel.stride_w = 1;
            let (mid_h, mid_w) = stride1.kernel.output_dims(in_h, in_w)?;
            let mut cfg = placement.cfg.clone();
            cfg.kernel = KernelSpec {
                kernel_h: sh,
                kernel_w: sw,
                stride_h: sh,
                stride_w: sw,
                padding: lap_padding_for(mid_h, mid_w, sh, sw, orig_oh, orig_ow)?,
            };
            let lap_id = format!("{}.lap", layer.id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(&lap_id));
            let lap = build_lap(&cfg, conv.out_ch, &mut rng)?;
            let conv_id = layer.id.clone();
            layers[idx] = Layer {
                id: conv_id,
                op: LayerOp::Conv(stride1),
            };
            layers.insert(
                idx + 1,
                Layer {
                    id: lap_id,
                    op: LayerOp::Lap(lap),
                },
            );
        }
        _ => {
            return Err(Error::graph(format!(
                "'{}' is not a replaceable layer (pool, adaptive pool or strided conv)",
                placement.target
            )));
        }
    }
    Ok(())
}

// Smallest symmetric padding that makes a kernel-equals-stride LAP reproduce
// the strided convolution's output dims.
fn lap_padding_for(
    mid_h: usize,
    mid_w: usize,
    sh: usize,
    sw: usize,
    want_h: usize,
    want_w: usize,
) -> Result<usize> {
    for pad in 0..=sh.max(sw) {
        let k = KernelSpec {
            kernel_h: sh,
            kernel_w: sw,
            stride_h: sh,
            stride_w: sw,
            padding: pad,
        };
        if let Ok((oh, ow)) = k.output_dims(mid_h, mid_w) {
            if (oh, ow) == (want_h, want_w) {
                return Ok(pad);
            }
        }
    }
    Err(Error::graph(format!(
        "no padding reproduces {}x{} from {}x{} with a {}x{} stride window",
        want_h, want_w, mid_h, mid_w, sh, sw
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_graph(pool: &str) -> LayerGraph {
        let pool_kind = match pool {
            "max" => LayerKind::MaxPool {
                kernel: KernelSpec::square(2, 2),
            },
            "avg" => LayerKind::AvgPool {
                kernel: KernelSpec::square(2, 2),
            },
            _ => unreachable!(),
        };
        LayerGraph::from_descs(
            (1, 8, 8),
            &[
                LayerDesc::new(
                    "conv1",
                    LayerKind::Conv {
                        in_ch: 1,
                        out_ch: 4,
                        kernel: KernelSpec {
                            kernel_h: 3,
                            kernel_w: 3,
                            stride_h: 1,
                            stride_w: 1,
                            padding: 1,
                        },
                    },
                ),
                LayerDesc::new("relu1", LayerKind::Relu),
                LayerDesc::new("pool1", pool_kind),
                LayerDesc::new("flatten", LayerKind::Flatten),
                LayerDesc::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 4 * 4 * 4,
                        out_features: 2,
                    },
                ),
            ],
            42,
        )
        .unwrap()
    }

    fn demo_batch(n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, c, h, w), |(s, ch, y, x)| {
            ((s * 97 + ch * 31 + y * 7 + x * 3) % 13) as f64 * 0.15 - 0.9
        })
    }

    #[test]
    fn shapes_flow_through_the_graph() {
        let g = tiny_graph("max");
        let shapes = g.validate().unwrap();
        assert_eq!(shapes.len(), 5);
        assert_eq!(g.output_shape().unwrap(), ShapeState::Flat(2));
    }

    #[test]
    fn forward_produces_logits() {
        let g = tiny_graph("max");
        let x = demo_batch(3, 1, 8, 8);
        let fwd = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(fwd.logits.dim(), (3, 2));
        assert!(fwd.taps.is_empty());
    }

    #[test]
    fn initialization_is_deterministic_per_name() {
        let a = tiny_graph("max");
        let b = tiny_graph("max");
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn empty_surgery_is_a_byte_for_byte_no_op() {
        let g = tiny_graph("max");
        let same = extend_architecture(&g, &PlacementSpec::default(), 7).unwrap();
        let pa = g.named_params();
        let pb = same.named_params();
        assert_eq!(pa.len(), pb.len());
        for ((na, a), (nb, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.value.as_slice().unwrap(), b.value.as_slice().unwrap());
        }
    }

    #[test]
    fn pool_replacement_with_constant_scorer_matches_the_avg_pool_twin() {
        let g_max = tiny_graph("max");
        let g_avg = tiny_graph("avg");
        let spec = PlacementSpec {
            placements: vec![Placement {
                target: "pool1".into(),
                cfg: LapConfig::new(KernelSpec::square(2, 2), 1),
            }],
        };
        let mut g_lap = extend_architecture(&g_max, &spec, 7).unwrap();
        // Zero the scorer so every pixel scores 0.5: LAP == average pooling.
        for (name, p) in g_lap.named_params_mut() {
            if name.contains("scorer.w1") || name.contains("scorer.b1") {
                p.value.fill(0.0);
            }
        }
        let x = demo_batch(2, 1, 8, 8);
        let lap_logits = g_lap.forward(&x, Mode::Eval).unwrap().logits;
        let avg_logits = g_avg.forward(&x, Mode::Eval).unwrap().logits;
        for (a, b) in lap_logits.iter().zip(avg_logits.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn pool_replacement_preserves_other_parameters() {
        let g = tiny_graph("max");
        let spec = PlacementSpec {
            placements: vec![Placement {
                target: "pool1".into(),
                cfg: LapConfig::new(KernelSpec::square(2, 2), 1),
            }],
        };
        let g2 = extend_architecture(&g, &spec, 7).unwrap();
        let before: std::collections::BTreeMap<_, _> = g
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect();
        for (name, p) in g2.named_params() {
            if let Some(orig) = before.get(&name) {
                assert_eq!(&p.value, orig, "{} changed", name);
            } else {
                assert!(name.starts_with("pool1."), "unexpected new param {}", name);
            }
        }
        // Only scorer/selector/alpha parameters were added.
        let delta = g2.param_count() - g.param_count();
        // scorer + selector: each (w1: 4, b1: 1, alpha: 1) = 6.
        assert_eq!(delta, 12);
    }

    #[test]
    fn strided_conv_replacement_keeps_output_dims_and_weights() {
        let g = LayerGraph::from_descs(
            (2, 9, 9),
            &[
                LayerDesc::new(
                    "down",
                    LayerKind::Conv {
                        in_ch: 2,
                        out_ch: 4,
                        kernel: KernelSpec {
                            kernel_h: 3,
                            kernel_w: 3,
                            stride_h: 2,
                            stride_w: 2,
                            padding: 1,
                        },
                    },
                ),
                LayerDesc::new("flatten", LayerKind::Flatten),
                LayerDesc::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 4 * 5 * 5,
                        out_features: 3,
                    },
                ),
            ],
            11,
        )
        .unwrap();
        let spec = PlacementSpec {
            placements: vec![Placement {
                target: "down".into(),
                cfg: LapConfig::new(KernelSpec::square(2, 2), 1),
            }],
        };
        let g2 = extend_architecture(&g, &spec, 11).unwrap();
        assert_eq!(g2.layers.len(), 4);
        assert_eq!(g2.layers[1].id, "down.lap");
        assert_eq!(g2.output_shape().unwrap(), g.output_shape().unwrap());
        // The convolution kept its weights, only the stride changed.
        let orig_w = &g.named_params()[0].1.value;
        let new_w = &g2.named_params()[0].1.value;
        assert_eq!(orig_w, new_w);
        match &g2.layers[0].op {
            LayerOp::Conv(c) => {
                assert_eq!((c.kernel.stride_h, c.kernel.stride_w), (1, 1));
            }
            _ => panic!("expected conv"),
        }
    }

    #[test]
    fn replacing_a_non_replaceable_layer_is_an_error() {
        let g = tiny_graph("max");
        let spec = PlacementSpec {
            placements: vec![Placement {
                target: "relu1".into(),
                cfg: LapConfig::new(KernelSpec::square(2, 2), 1),
            }],
        };
        assert!(matches!(
            extend_architecture(&g, &spec, 7),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn residual_blocks_forward_and_validate() {
        let g = LayerGraph::from_descs(
            (3, 6, 6),
            &[
                LayerDesc::new(
                    "res1",
                    LayerKind::Residual {
                        body: vec![
                            LayerDesc::new(
                                "res1.conv",
                                LayerKind::Conv {
                                    in_ch: 3,
                                    out_ch: 3,
                                    kernel: KernelSpec {
                                        kernel_h: 3,
                                        kernel_w: 3,
                                        stride_h: 1,
                                        stride_w: 1,
                                        padding: 1,
                                    },
                                },
                            ),
                            LayerDesc::new("res1.relu", LayerKind::Relu),
                        ],
                    },
                ),
                LayerDesc::new("gap", LayerKind::AdaptiveAvgPool { out_h: 1, out_w: 1 }),
                LayerDesc::new("flatten", LayerKind::Flatten),
                LayerDesc::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 3,
                        out_features: 2,
                    },
                ),
            ],
            5,
        )
        .unwrap();
        let x = demo_batch(2, 3, 6, 6);
        let fwd = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(fwd.logits.dim(), (2, 2));
        // Zero conv weights: the residual body outputs relu(b) constant maps,
        // so the block acts as x + const.
        let mut g2 = g.clone();
        for (name, p) in g2.named_params_mut() {
            if name.starts_with("res1.conv") {
                p.value.fill(0.0);
            }
        }
        let fwd2 = g2.forward(&x, Mode::Eval).unwrap();
        assert_eq!(fwd2.logits.dim(), (2, 2));
    }

    #[test]
    fn lap_taps_are_captured_in_forward_order() {
        let g = LayerGraph::from_descs(
            (1, 8, 8),
            &[
                LayerDesc::new(
                    "conv1",
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
                LayerDesc::new(
                    "lap1",
                    LayerKind::Lap {
                        cfg: LapConfig::new(KernelSpec::square(2, 2), 1),
                        in_ch: 2,
                    },
                ),
                LayerDesc::new(
                    "lap2",
                    LayerKind::Lap {
                        cfg: LapConfig::new(KernelSpec::square(2, 2), 1),
                        in_ch: 2,
                    },
                ),
                LayerDesc::new("flatten", LayerKind::Flatten),
                LayerDesc::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: 2 * 2 * 2,
                        out_features: 2,
                    },
                ),
            ],
            3,
        )
        .unwrap();
        let x = demo_batch(2, 1, 8, 8);
        let fwd = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(fwd.taps.len(), 2);
        assert_eq!(fwd.taps[0].layer_id, "lap1");
        assert_eq!(fwd.taps[0].input_hw, (8, 8));
        assert_eq!(fwd.taps[1].layer_id, "lap2");
        assert_eq!(fwd.taps[1].input_hw, (4, 4));
        assert!(fwd.taps[0].selector.is_some());
        let eval = g.forward(&x, Mode::Eval).unwrap();
        assert!(eval.taps[0].selector.is_none());
        // Determinism: two identical eval passes agree bit-for-bit.
        let eval2 = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(eval.logits, eval2.logits);
        assert_eq!(eval.taps[0].per_concept, eval2.taps[0].per_concept);
    }
}
