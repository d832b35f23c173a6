//! Deterministic synthetic "spot detection" dataset.
//!
//! Positive samples carry a bright concept shape (a circle by default) over
//! a smooth textured background; negatives carry distractor squares only.
//! Every sample comes with its concept set, a pixel mask of the concept
//! shape and the mask's tight bounding box, so localization and the
//! box-supervised loss are fully testable at desk scale. Generation is
//! byte-reproducible from the spec seed.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BoxRect, ConceptAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
}

/// One concept's shape family. `size` is the radius for circles and the
/// half-side for squares.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptShapeSpec {
    pub kind: ShapeKind,
    pub size_range: (usize, usize),
    /// Mean intensity lift of shape pixels over the local background.
    pub contrast: f64,
    pub intensity_jitter: f64,
}

/// Shapes drawn on any sample (positive or negative) that carry no label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub kind: ShapeKind,
    pub size_range: (usize, usize),
    pub contrast: f64,
    pub intensity_jitter: f64,
    pub max_count: usize,
}

/// Smooth background texture: a coarse random grid upsampled bilinearly
/// plus per-pixel noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub grid: usize,
    pub low: f64,
    pub high: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub background: BackgroundSpec,
    /// Concept 0 defines the positive class; further concepts appear
    /// independently on half of the samples.
    pub concepts: Vec<ConceptShapeSpec>,
    pub distractors: DistractorSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 64,
            n_train: 2000,
            n_val: 250,
            n_test: 250,
            background: BackgroundSpec {
                grid: 8,
                low: 0.10,
                high: 0.45,
                noise: 0.05,
            },
            concepts: vec![ConceptShapeSpec {
                kind: ShapeKind::Circle,
                size_range: (7, 12),
                contrast: 0.4,
                intensity_jitter: 0.03,
            }],
            distractors: DistractorSpec {
                kind: ShapeKind::Square,
                size_range: (3, 5),
                contrast: 0.25,
                intensity_jitter: 0.03,
                max_count: 2,
            },
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::data("image size must be at least 8"));
        }
        if self.concepts.is_empty() {
            return Err(Error::data("at least one concept shape is required"));
        }
        if self.background.grid == 0 || self.background.low > self.background.high {
            return Err(Error::data("invalid background texture parameters"));
        }
        let margin = 1usize;
        for (i, c) in self.concepts.iter().enumerate() {
            if c.size_range.0 > c.size_range.1 || c.size_range.0 == 0 {
                return Err(Error::data(format!("concept {}: invalid size range", i)));
            }
            if 2 * c.size_range.1 + 2 * margin >= self.image_size {
                return Err(Error::data(format!(
                    "concept {}: shape of size {} cannot be placed in a {}-pixel image",
                    i, c.size_range.1, self.image_size
                )));
            }
        }
        if self.distractors.size_range.0 > self.distractors.size_range.1 {
            return Err(Error::data("invalid distractor size range"));
        }
        if 2 * self.distractors.size_range.1 + 2 * margin >= self.image_size {
            return Err(Error::data("distractor does not fit in the image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Grayscale image in [0, 1].
    pub image: Array2<f64>,
    /// 1 when concept 0 is present.
    pub label: usize,
    pub annotation: ConceptAnnotation,
    /// Pixels of the concept-0 shape (empty on negatives).
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn bilinear_background(rng: &mut ChaCha8Rng, spec: &BackgroundSpec, size: usize) -> Array2<f64> {
    let g = spec.grid;
    let nodes = Array2::from_shape_fn((g + 1, g + 1), |_| rng.gen_range(spec.low..=spec.high));
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f64 * g as f64 / size as f64;
        let fx = x as f64 * g as f64 / size as f64;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let ty = fy - y0 as f64;
        let tx = fx - x0 as f64;
        let y1 = (y0 + 1).min(g);
        let x1 = (x0 + 1).min(g);
        nodes[[y0, x0]] * (1.0 - ty) * (1.0 - tx)
            + nodes[[y0, x1]] * (1.0 - ty) * tx
            + nodes[[y1, x0]] * ty * (1.0 - tx)
            + nodes[[y1, x1]] * ty * tx
    })
}

fn shape_pixels(
    kind: ShapeKind,
    cy: usize,
    cx: usize,
    size: usize,
    image_size: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let r = size as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let hit = match kind {
                ShapeKind::Circle => dy * dy + dx * dx <= r * r,
                ShapeKind::Square => true,
            };
            if !hit {
                continue;
            }
            let y = cy as isize + dy;
            let x = cx as isize + dx;
            if y >= 0 && x >= 0 && (y as usize) < image_size && (x as usize) < image_size {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn draw_shape(
    image: &mut Array2<f64>,
    rng: &mut ChaCha8Rng,
    kind: ShapeKind,
    size_range: (usize, usize),
    contrast: f64,
    jitter: f64,
) -> Vec<(usize, usize)> {
    let image_size = image.dim().0;
    let size = rng.gen_range(size_range.0..=size_range.1);
    let lo = size + 1;
    let hi = image_size - size - 2;
    let cy = rng.gen_range(lo..=hi);
    let cx = rng.gen_range(lo..=hi);
    let pixels = shape_pixels(kind, cy, cx, size, image_size);
    for &(y, x) in &pixels {
        let v = image[[y, x]] + contrast + rng.gen_range(-jitter..=jitter);
        image[[y, x]] = v.clamp(0.0, 1.0);
    }
    pixels
}

fn mask_bbox(mask: &Array2<bool>) -> Option<BoxRect> {
    let mut min_y = usize::MAX;
    let mut min_x = usize::MAX;
    let mut max_y = 0usize;
    let mut max_x = 0usize;
    let mut any = false;
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            any = true;
            min_y = min_y.min(y);
            min_x = min_x.min(x);
            max_y = max_y.max(y);
            max_x = max_x.max(x);
        }
    }
    any.then(|| BoxRect {
        x: min_x,
        y: min_y,
        w: max_x - min_x + 1,
        h: max_y - min_y + 1,
    })
}

fn generate_sample(spec: &SynthSpec, global_index: usize, id: String) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed ^ (global_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let size = spec.image_size;
    let mut image = bilinear_background(&mut rng, &spec.background, size);
    if spec.background.noise > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + rng.gen_range(-spec.background.noise..=spec.background.noise))
                .clamp(0.0, 1.0);
        }
    }

    let count = rng.gen_range(0..=spec.distractors.max_count);
    for _ in 0..count {
        draw_shape(
            &mut image,
            &mut rng,
            spec.distractors.kind,
            spec.distractors.size_range,
            spec.distractors.contrast,
            spec.distractors.intensity_jitter,
        );
    }

    let label = global_index % 2;
    let mut annotation = ConceptAnnotation::new(id.clone(), []);
    let mut mask = Array2::from_elem((size, size), false);
    for (c, shape) in spec.concepts.iter().enumerate() {
        let present = if c == 0 {
            label == 1
        } else {
            rng.gen_bool(0.5)
        };
        if !present {
            continue;
        }
        let pixels = draw_shape(
            &mut image,
            &mut rng,
            shape.kind,
            shape.size_range,
            shape.contrast,
            shape.intensity_jitter,
        );
        annotation.concepts.insert(c);
        let mut cmask = Array2::from_elem((size, size), false);
        for &(y, x) in &pixels {
            cmask[[y, x]] = true;
            if c == 0 {
                mask[[y, x]] = true;
            }
        }
        if let Some(b) = mask_bbox(&cmask) {
            annotation.boxes.push((c, b));
        }
    }

    Sample {
        id,
        image,
        label,
        annotation,
        mask,
    }
}

/// Generates the three splits. Sample ids are globally unique across splits
/// and the class labels alternate, so each split is balanced to within one
/// sample.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let counts = [spec.n_train, spec.n_val, spec.n_test];
    let mut splits: Vec<Vec<Sample>> = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut global = 0usize;
    for (si, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let id = format!("{:06}", global);
            splits[si].push(generate_sample(spec, global, id));
            global += 1;
        }
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(SynthDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Stacks sample images into an `(N, 1, H, W)` array of raw [0, 1] values.
pub fn images_to_array(samples: &[Sample]) -> Array4<f64> {
    let n = samples.len();
    let (h, w) = samples
        .first()
        .map(|s| s.image.dim())
        .unwrap_or((0, 0));
    let mut out = Array4::zeros((n, 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&s.image);
    }
    out
}

/// The input pipeline's normalization: `(x - 0.5) / 0.5`. Zeroing a pixel in
/// normalized space therefore corresponds to mid-gray in raw space.
pub fn normalize_images(raw: &Array4<f64>) -> Array4<f64> {
    raw.mapv(|v| (v - 0.5) / 0.5)
}

pub fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

pub fn annotations(samples: &[Sample]) -> Vec<ConceptAnnotation> {
    samples.iter().map(|s| s.annotation.clone()).collect()
}

// ---------------------------------------------------------------------------
// Annotation text format.
//
// One record per line:
//   <sample_id> <concepts> [<concept>:<x>,<y>,<w>,<h> ...]
// where <concepts> is a comma-separated list of indices or `-` when empty.
// Lines starting with `#` and blank lines are ignored.
// ---------------------------------------------------------------------------

pub fn save_annotations(path: &Path, annots: &[ConceptAnnotation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# lap annotations v1")?;
    for a in annots {
        let concepts = if a.concepts.is_empty() {
            "-".to_string()
        } else {
            a.concepts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "{} {}", a.sample_id, concepts)?;
        for (c, b) in &a.boxes {
            write!(f, " {}:{},{},{},{}", c, b.x, b.y, b.w, b.h)?;
        }
        writeln!(f)?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, field: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {}: '{}'", field, s),
    })
}

/// Loads annotations, rejecting malformed lines (with their line number) and
/// boxes that fall outside `image_size`.
pub fn load_annotations(path: &Path, image_size: (usize, usize)) -> Result<Vec<ConceptAnnotation>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let (ih, iw) = image_size;
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let id = parts.next().ok_or(Error::Parse {
            line: lineno,
            msg: "missing sample id".into(),
        })?;
        let concepts_str = parts.next().ok_or(Error::Parse {
            line: lineno,
            msg: "missing concept list".into(),
        })?;
        let mut ann = ConceptAnnotation::new(id, []);
        if concepts_str != "-" {
            for c in concepts_str.split(',') {
                ann.concepts
                    .insert(parse_field(c, lineno, "concept index")?);
            }
        }
        for boxspec in parts {
            let (c, rest) = boxspec.split_once(':').ok_or(Error::Parse {
                line: lineno,
                msg: format!("box '{}' is missing the concept prefix", boxspec),
            })?;
            let concept: usize = parse_field(c, lineno, "box concept")?;
            let nums: Vec<&str> = rest.split(',').collect();
            if nums.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("box '{}' must be x,y,w,h", boxspec),
                });
            }
            let b = BoxRect {
                x: parse_field(nums[0], lineno, "box x")?,
                y: parse_field(nums[1], lineno, "box y")?,
                w: parse_field(nums[2], lineno, "box w")?,
                h: parse_field(nums[3], lineno, "box h")?,
            };
            if b.w == 0 || b.h == 0 || b.x + b.w > iw || b.y + b.h > ih {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "box x={},y={},w={},h={} outside {}x{} image",
                        b.x, b.y, b.w, b.h, ih, iw
                    ),
                });
            }
            ann.boxes.push((concept, b));
        }
        out.push(ann);
    }
    Ok(out)
}
