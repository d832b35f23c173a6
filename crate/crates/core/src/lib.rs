//! Local attention pooling for convolutional networks.
//!
//! The crate is organized around the lifecycle of an attention-pooled model:
//!
//! * [`lap`] — the differentiable pooling layer itself: pixel-wise concept
//!   scoring, window-local normalization and weighted-average reduction.
//! * [`losses`] — the knowledge-injection objectives that train the scoring
//!   heads (concept discrimination, concordance between layers, bounding-box
//!   supervision).
//! * [`graph`] — a flat layer-graph representation of desk-scale CNNs, the
//!   forward/backward executor, and the surgery that swaps pooling layers
//!   (or strided convolutions) for attention pools.
//! * [`train`] — optimizers and the staged training schedule used when
//!   plugging pools into an already-trained network.
//! * [`interpret`] — concept-map extraction, cross-layer map integration and
//!   the standalone map-based predictors.
//! * [`evaluate`] — binarization, IoU, keep-k% faithfulness curves and
//!   predictivity/faithfulness accuracies, method-agnostic over score maps.
//! * [`synth`] — a deterministic synthetic spot-detection dataset with
//!   masks and boxes, sized so everything trains on a laptop CPU.
//! * [`container`] — the `LAPM` float container, PNG helpers and the
//!   checkpoint format.

pub mod container;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod interpret;
pub mod lap;
pub mod losses;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use lap::{Aggregation, ConceptMaps, FeatureMap, KernelSpec, LapConfig, Scorer};
pub use losses::{ConceptAnnotation, DiscLossConfig, HeadRatios, LossWeights};
