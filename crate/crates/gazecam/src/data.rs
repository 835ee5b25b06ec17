//! Dataset plumbing: procedural glyph generation, affine augmentation,
//! stratified splitting, oracle fixation maps, and ingestion of external
//! image directories and gaze logs.
//!
//! Glyphs are rendered from fixed per-class stroke programs (line and arc
//! segments) with per-sample jitter in stroke width, position, and
//! curvature, so no font assets are needed and every dataset is
//! reproducible from its seed. Images use a white background (1.0) with
//! black ink (0.0).

use crate::cam::bilinear_resize;
use crate::error::{Error, Result};
use crate::gaze::{fixation_map, Fixation, FixationMap, GazeSample};
use crate::pfm::{read_pfm, write_pfm};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Default stimulus resolution, pixels per side.
pub const STIMULUS_SIDE: usize = 400;
/// Background gray level (white paper).
pub const BACKGROUND: f64 = 1.0;
/// Ink gray level.
pub const INK: f64 = 0.0;
/// Fraction of pixels kept as pseudo-fixations by [`oracle_fixmaps`].
pub const ORACLE_TOP_Q: f64 = 0.05;
/// Number of distinct glyph stroke programs available.
pub const MAX_GLYPH_CLASSES: usize = 16;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Grayscale image, shape [side, side], values in [0, 1].
    pub image: Tensor,
    pub label: usize,
    /// Supervision map, shape [h, w], when one is attached or loaded.
    pub fixmap: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Indices of the samples of one class.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Random-augmentation distribution: a draw applies shear in
/// [-shear, shear], rotation in [-rotation_deg, rotation_deg] degrees, and
/// each enabled flip with probability one half.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub shear: f64,
    pub rotation_deg: f64,
    pub h_flip: bool,
    pub v_flip: bool,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            shear: 0.2,
            rotation_deg: 40.0,
            h_flip: true,
            v_flip: true,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shear >= 0.0 && self.shear.is_finite()) {
            return Err(Error::Config(format!(
                "shear must be non-negative, got {}",
                self.shear
            )));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return Err(Error::Config(format!(
                "rotation range must lie in [0, 180] degrees, got {}",
                self.rotation_deg
            )));
        }
        Ok(())
    }
}

// ── glyph stroke programs ────────────────────────────────────────────────

enum Stroke {
    /// Straight segment in unit glyph coordinates (y grows downward).
    Line { a: (f64, f64), b: (f64, f64) },
    /// Circular arc; angles in degrees, point = center + r(cos, sin).
    Arc {
        c: (f64, f64),
        r: f64,
        start_deg: f64,
        end_deg: f64,
    },
}

fn glyph_program(class: usize) -> Vec<Stroke> {
    use Stroke::*;
    let line = |ax, ay, bx, by| Line {
        a: (ax, ay),
        b: (bx, by),
    };
    let arc = |cx, cy, r, s, e| Arc {
        c: (cx, cy),
        r,
        start_deg: s,
        end_deg: e,
    };
    match class {
        0 => vec![arc(0.5, 0.5, 0.32, 0.0, 360.0)],
        1 => vec![line(0.5, 0.12, 0.5, 0.88)],
        2 => vec![line(0.12, 0.5, 0.88, 0.5)],
        3 => vec![line(0.15, 0.85, 0.85, 0.15)],
        4 => vec![line(0.15, 0.15, 0.85, 0.85), line(0.15, 0.85, 0.85, 0.15)],
        5 => vec![line(0.2, 0.1, 0.2, 0.85), line(0.2, 0.85, 0.8, 0.85)],
        6 => vec![line(0.12, 0.15, 0.88, 0.15), line(0.5, 0.15, 0.5, 0.88)],
        7 => vec![line(0.15, 0.12, 0.5, 0.88), line(0.85, 0.12, 0.5, 0.88)],
        8 => vec![
            line(0.18, 0.18, 0.82, 0.18),
            line(0.82, 0.18, 0.82, 0.82),
            line(0.82, 0.82, 0.18, 0.82),
            line(0.18, 0.82, 0.18, 0.18),
        ],
        9 => vec![line(0.5, 0.12, 0.5, 0.88), line(0.12, 0.5, 0.88, 0.5)],
        10 => vec![
            line(0.2, 0.12, 0.2, 0.6),
            line(0.8, 0.12, 0.8, 0.6),
            arc(0.5, 0.6, 0.3, 0.0, 180.0),
        ],
        11 => vec![
            arc(0.5, 0.33, 0.17, 90.0, 360.0),
            arc(0.5, 0.67, 0.17, 270.0, 540.0),
        ],
        12 => vec![
            line(0.15, 0.15, 0.85, 0.15),
            line(0.85, 0.15, 0.15, 0.85),
            line(0.15, 0.85, 0.85, 0.85),
        ],
        13 => vec![
            line(0.25, 0.12, 0.25, 0.88),
            arc(0.25, 0.5, 0.38, 270.0, 450.0),
        ],
        14 => vec![
            arc(0.5, 0.5, 0.34, 0.0, 360.0),
            arc(0.5, 0.5, 0.06, 0.0, 360.0),
        ],
        15 => vec![
            line(0.5, 0.14, 0.86, 0.82),
            line(0.86, 0.82, 0.14, 0.82),
            line(0.14, 0.82, 0.5, 0.14),
        ],
        _ => Vec::new(),
    }
}

/// Stamps an anti-aliased disk of ink; coverage falls off linearly over the
/// last pixel of the radius.
fn stamp_disk(img: &mut [f64], side: usize, cx: f64, cy: f64, radius: f64) {
    let lo = |c: f64| ((c - radius - 1.0).floor().max(0.0)) as i64;
    let hi = |c: f64| ((c + radius + 1.0).ceil().min((side - 1) as f64)) as i64;
    let (x0, x1, y0, y1) = (lo(cx), hi(cx), lo(cy), hi(cy));
    if x0 > x1 || y0 > y1 || x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0.max(0)..=y1 {
        for x in x0.max(0)..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let coverage = (radius + 0.5 - d).clamp(0.0, 1.0);
            let v = &mut img[y as usize * side + x as usize];
            *v = v.min(1.0 - coverage);
        }
    }
}

/// Walks a curve given by `point(t)` for t in [0, 1] and stamps disks.
fn stamp_curve(
    img: &mut [f64],
    side: usize,
    length_px: f64,
    radius: f64,
    point: impl Fn(f64) -> (f64, f64),
) {
    let step = (0.35 * radius).max(0.25);
    let n = (length_px / step).ceil().max(1.0) as usize + 1;
    for i in 0..n {
        let t = i as f64 / (n - 1).max(1) as f64;
        let (x, y) = point(t);
        stamp_disk(img, side, x, y, radius);
    }
}

struct Jitter {
    dx: f64,
    dy: f64,
    width_factor: f64,
}

impl Jitter {
    fn none() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            width_factor: 1.0,
        }
    }
}

fn render_glyph(class: usize, side: usize, rng: Option<&mut ChaCha8Rng>) -> Tensor {
    let mut img = vec![BACKGROUND; side * side];
    let s = (side - 1) as f64;
    let strokes = glyph_program(class);

    let mut rng = rng;
    let jitter = match rng.as_deref_mut() {
        Some(r) => Jitter {
            dx: r.gen_range(-0.025..=0.025),
            dy: r.gen_range(-0.025..=0.025),
            width_factor: r.gen_range(0.8..=1.3),
        },
        None => Jitter::none(),
    };
    let px = |u: f64, du: f64| (0.1 + 0.8 * (u + du)) * s;
    let radius = (0.032 * side as f64 * jitter.width_factor).max(0.55);

    for stroke in &strokes {
        match stroke {
            Stroke::Line { a, b } => {
                let (mut ax, mut ay, mut bx, mut by) = (a.0, a.1, b.0, b.1);
                let mut bow = 0.0;
                if let Some(r) = rng.as_deref_mut() {
                    ax += r.gen_range(-0.02..=0.02);
                    ay += r.gen_range(-0.02..=0.02);
                    bx += r.gen_range(-0.02..=0.02);
                    by += r.gen_range(-0.02..=0.02);
                    bow = r.gen_range(-0.06..=0.06);
                }
                let (pax, pay) = (px(ax, jitter.dx), px(ay, jitter.dy));
                let (pbx, pby) = (px(bx, jitter.dx), px(by, jitter.dy));
                let len = ((pbx - pax).powi(2) + (pby - pay).powi(2)).sqrt();
                // quadratic curve bowed perpendicular to the chord
                let (mx, my) = ((pax + pbx) / 2.0, (pay + pby) / 2.0);
                let (nx, ny) = if len > 0.0 {
                    (-(pby - pay) / len, (pbx - pax) / len)
                } else {
                    (0.0, 0.0)
                };
                let (cx, cy) = (mx + bow * len * nx, my + bow * len * ny);
                stamp_curve(&mut img, side, len.max(1.0), radius, |t| {
                    let u = 1.0 - t;
                    (
                        u * u * pax + 2.0 * u * t * cx + t * t * pbx,
                        u * u * pay + 2.0 * u * t * cy + t * t * pby,
                    )
                });
            }
            Stroke::Arc {
                c,
                r,
                start_deg,
                end_deg,
            } => {
                let (mut cx, mut cy, mut rr) = (c.0, c.1, *r);
                if let Some(rng) = rng.as_deref_mut() {
                    cx += rng.gen_range(-0.02..=0.02);
                    cy += rng.gen_range(-0.02..=0.02);
                    rr *= rng.gen_range(0.92..=1.08);
                }
                let (pcx, pcy) = (px(cx, jitter.dx), px(cy, jitter.dy));
                let r_px = rr * 0.8 * s;
                let (a0, a1) = (start_deg.to_radians(), end_deg.to_radians());
                let arclen = (a1 - a0).abs() * r_px;
                stamp_curve(&mut img, side, arclen.max(1.0), radius, |t| {
                    let angle = a0 + t * (a1 - a0);
                    (pcx + r_px * angle.cos(), pcy + r_px * angle.sin())
                });
            }
        }
    }
    Tensor::new(vec![side, side], img).expect("render buffer matches its shape")
}

/// Generates `num_classes * per_class` jittered glyph images at
/// `side` x `side` pixels, deterministically from `seed`.
pub fn generate_glyphs(
    num_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if num_classes > MAX_GLYPH_CLASSES {
        return Err(Error::Config(format!(
            "only {MAX_GLYPH_CLASSES} glyph programs are defined, got {num_classes} classes"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if side < 8 {
        return Err(Error::Config(format!(
            "glyphs need at least 8 pixels per side, got {side}"
        )));
    }
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for i in 0..per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64, i as u64]));
            samples.push(Sample {
                id: format!("g{class:02}_{i:04}"),
                image: render_glyph(class, side, Some(&mut rng)),
                label: class,
                fixmap: None,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}

// ── augmentation ─────────────────────────────────────────────────────────

fn bilinear_at(data: &[f64], h: usize, w: usize, x: f64, y: f64, background: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |xx: i64, yy: i64| {
        if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
            data[yy as usize * w + xx as usize]
        } else {
            background
        }
    };
    (1.0 - fy) * ((1.0 - fx) * fetch(x0, y0) + fx * fetch(x0 + 1, y0))
        + fy * ((1.0 - fx) * fetch(x0, y0 + 1) + fx * fetch(x0 + 1, y0 + 1))
}

/// Rotates and shears about the image center with bilinear resampling and
/// `background` fill, then applies the requested flips as exact pixel
/// permutations (so a repeated flip restores the input bit-for-bit).
pub fn apply_affine(
    image: &Tensor,
    rotation_deg: f64,
    shear: f64,
    h_flip: bool,
    v_flip: bool,
    background: f64,
) -> Result<Tensor> {
    if image.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "affine transform expects an [h, w] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    // inverse of rotate(theta) . shear(s), applied destination -> source
    let m00 = cos + shear * sin;
    let m01 = sin - shear * cos;
    let m10 = -sin;
    let m11 = cos;

    let src = image.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            let sx = m00 * dx + m01 * dy + cx;
            let sy = m10 * dx + m11 * dy + cy;
            out[y * w + x] = bilinear_at(src, h, w, sx, sy, background);
        }
    }
    if h_flip {
        for row in out.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if v_flip {
        for y in 0..h / 2 {
            for x in 0..w {
                out.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Draws one random transform from `params` and applies it to the sample's
/// image (white background fill) and, when present, its fixation map (zero
/// fill), keeping the two aligned.
pub fn augment(sample: &Sample, params: &AugmentParams) -> Result<Sample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let rotation = if params.rotation_deg > 0.0 {
        rng.gen_range(-params.rotation_deg..=params.rotation_deg)
    } else {
        0.0
    };
    let shear = if params.shear > 0.0 {
        rng.gen_range(-params.shear..=params.shear)
    } else {
        0.0
    };
    let h_flip = params.h_flip && rng.gen_bool(0.5);
    let v_flip = params.v_flip && rng.gen_bool(0.5);

    let image = apply_affine(&sample.image, rotation, shear, h_flip, v_flip, BACKGROUND)?;
    let fixmap = match &sample.fixmap {
        Some(map) => Some(apply_affine(map, rotation, shear, h_flip, v_flip, 0.0)?),
        None => None,
    };
    Ok(Sample {
        id: sample.id.clone(),
        image,
        label: sample.label,
        fixmap,
    })
}

// ── splitting ────────────────────────────────────────────────────────────

/// Stratified train/test split: each class is shuffled independently
/// (seeded) and divided at `train_fraction`, so class proportions carry
/// over within one sample.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.num_classes {
        let mut indices = dataset.class_indices(class);
        if indices.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} has {} sample(s); stratified splitting needs at least 2",
                indices.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64]));
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        for (k, &idx) in indices.iter().enumerate() {
            let sample = dataset.samples[idx].clone();
            if k < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok((
        Dataset {
            samples: train,
            num_classes: dataset.num_classes,
        },
        Dataset {
            samples: test,
            num_classes: dataset.num_classes,
        },
    ))
}

// ── oracle fixation maps ─────────────────────────────────────────────────

/// Per-class mean images. Every class must have at least one sample and all
/// images must share one shape.
pub fn class_prototypes(dataset: &Dataset) -> Result<Vec<Tensor>> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::Data("dataset has no samples".into()))?;
    let shape = first.image.shape().to_vec();
    let n = first.image.numel();
    let mut sums = vec![vec![0.0; n]; dataset.num_classes];
    let mut counts = vec![0usize; dataset.num_classes];
    for sample in &dataset.samples {
        if sample.image.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "sample {} has shape {:?}, expected {:?}",
                sample.id,
                sample.image.shape(),
                shape
            )));
        }
        if sample.label >= dataset.num_classes {
            return Err(Error::Data(format!(
                "sample {} has label {} but the dataset declares {} classes",
                sample.id, sample.label, dataset.num_classes
            )));
        }
        let sum = &mut sums[sample.label];
        for (acc, &v) in sum.iter_mut().zip(sample.image.data()) {
            *acc += v;
        }
        counts[sample.label] += 1;
    }
    let mut protos = Vec::with_capacity(dataset.num_classes);
    for (class, (mut sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            return Err(Error::Data(format!(
                "class {class} has no samples; cannot form a prototype"
            )));
        }
        let inv = 1.0 / count as f64;
        sum.iter_mut().for_each(|v| *v *= inv);
        protos.push(Tensor::new(shape.clone(), sum)?);
    }
    Ok(protos)
}

/// Builds one fixation map per sample without human gaze data: for each
/// class, the pixels where its prototype differs most from the
/// nearest-confusable class prototype (top `top_q` fraction, ties broken by
/// index) become equal-duration pseudo-fixations, rendered through the same
/// duration-weighted Gaussian as real gaze and rescaled so the strongest
/// pixel reads exactly 1.
pub fn oracle_fixmaps(dataset: &Dataset, sigma_px: f64, top_q: f64) -> Result<Vec<FixationMap>> {
    if !(top_q > 0.0 && top_q <= 1.0) {
        return Err(Error::Config(format!(
            "top_q must lie in (0, 1], got {top_q}"
        )));
    }
    if dataset.num_classes < 2 {
        return Err(Error::Config(
            "discriminative pixels need at least 2 classes".into(),
        ));
    }
    let protos = class_prototypes(dataset)?;
    let (h, w) = (protos[0].shape()[0], protos[0].shape()[1]);
    let mut class_maps: Vec<FixationMap> = Vec::with_capacity(dataset.num_classes);
    for (class, proto) in protos.iter().enumerate() {
        let mut nearest = usize::MAX;
        let mut best = f64::INFINITY;
        for (other, other_proto) in protos.iter().enumerate() {
            if other == class {
                continue;
            }
            let dist: f64 = proto
                .data()
                .iter()
                .zip(other_proto.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if dist < best {
                best = dist;
                nearest = other;
            }
        }
        if best == 0.0 {
            return Err(Error::Data(format!(
                "class prototypes {class} and {nearest} are identical; no discriminative pixels"
            )));
        }
        let mut ranked: Vec<(f64, usize)> = proto
            .data()
            .iter()
            .zip(protos[nearest].data())
            .enumerate()
            .filter_map(|(idx, (a, b))| {
                let d = (a - b).abs();
                (d > 0.0).then_some((d, idx))
            })
            .collect();
        ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let k = ((top_q * (h * w) as f64).round() as usize).max(1);
        ranked.truncate(k);
        let fixations: Vec<Fixation> = ranked
            .iter()
            .map(|&(_, idx)| Fixation {
                x: (idx % w) as f64,
                y: (idx / w) as f64,
                duration: 1.0,
            })
            .collect();
        let mut map = fixation_map(&fixations, w, h, sigma_px)?;
        let peak = map.values.data().iter().cloned().fold(0.0, f64::max);
        map.values.data_mut().iter_mut().for_each(|v| *v /= peak);
        class_maps.push(map);
    }
    Ok(dataset
        .samples
        .iter()
        .map(|s| class_maps[s.label].clone())
        .collect())
}

/// Copies oracle (or externally computed) maps into the samples.
pub fn attach_fixmaps(dataset: &mut Dataset, maps: &[FixationMap]) -> Result<()> {
    if maps.len() != dataset.samples.len() {
        return Err(Error::Dimension(format!(
            "{} maps for {} samples",
            maps.len(),
            dataset.samples.len()
        )));
    }
    for (sample, map) in dataset.samples.iter_mut().zip(maps) {
        sample.fixmap = Some(map.values.clone());
    }
    Ok(())
}

/// The fixation maps of all samples, in order; errors name the first sample
/// missing one.
pub fn fixmap_tensors(dataset: &Dataset) -> Result<Vec<Tensor>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            s.fixmap.clone().ok_or_else(|| {
                Error::Data(format!("sample {} has no fixation map", s.id))
            })
        })
        .collect()
}

// ── dataset and gaze IO ──────────────────────────────────────────────────

/// Companion fixation-map path of an image path: the extension is replaced
/// by `fix.pfm`.
pub fn fixmap_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("fix.pfm")
}

/// Writes `manifest.csv` (`id,path,label`), one 8-bit grayscale PNG per
/// sample, and a float PFM next to each image that carries a fixation map.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    writer
        .write_record(["id", "path", "label"])
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    for sample in &dataset.samples {
        let rel = format!("{}.png", sample.id);
        let path = dir.join(&rel);
        let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
        let bytes: Vec<u8> = sample
            .image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_vec(w as u32, h as u32, bytes)
            .expect("buffer length matches dimensions")
            .save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if let Some(map) = &sample.fixmap {
            write_pfm(&fixmap_path(&path), map)?;
        }
        writer
            .write_record([&sample.id, &rel, &sample.label.to_string()])
            .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

fn pad_to_square(image: Tensor, target: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h == target && w == target {
        return Ok(image);
    }
    let scale = target as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let resized = bilinear_resize(&image, nh, nw)?;
    let (oy, ox) = ((target - nh) / 2, (target - nw) / 2);
    let mut out = vec![BACKGROUND; target * target];
    for y in 0..nh {
        let src = &resized.data()[y * nw..(y + 1) * nw];
        out[(y + oy) * target + ox..(y + oy) * target + ox + nw].copy_from_slice(src);
    }
    Tensor::new(vec![target, target], out)
}

/// Loads a dataset directory written by [`save_dataset`] (or assembled by
/// hand to the same layout): grayscale conversion, [0, 1] scaling, and
/// aspect-preserving padding to `target_side`. Fixation maps found at the
/// companion `.fix.pfm` paths are attached as-is.
pub fn load_images(dir: &Path, target_side: usize) -> Result<Dataset> {
    if target_side == 0 {
        return Err(Error::Config("target side must be positive".into()));
    }
    let manifest = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "path", "label"] {
        return Err(Error::Data(format!(
            "{}: expected header id,path,label, got {}",
            manifest.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    let mut max_label = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: manifest.display().to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, name: &str| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Parse {
                path: manifest.display().to_string(),
                line,
                message: format!("missing {name} field"),
            })
        };
        let id = field(0, "id")?.to_string();
        let rel = field(1, "path")?.to_string();
        let label: usize = field(2, "label")?.parse().map_err(|_| Error::Parse {
            path: manifest.display().to_string(),
            line,
            message: format!("label '{}' is not a non-negative integer", field(2, "label").unwrap_or("")),
        })?;
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                path: manifest.display().to_string(),
                line,
                message: format!("duplicate sample id '{id}'"),
            });
        }
        let img_path = dir.join(&rel);
        let img = image::open(&img_path)
            .map_err(|e| Error::Data(format!("{}: {e}", img_path.display())))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
        let image = pad_to_square(Tensor::new(vec![h, w], data)?, target_side)?;
        let fm_path = fixmap_path(&img_path);
        let fixmap = if fm_path.exists() {
            Some(read_pfm(&fm_path)?)
        } else {
            None
        };
        max_label = max_label.max(label);
        samples.push(Sample {
            id,
            image,
            label,
            fixmap,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest lists no samples",
            manifest.display()
        )));
    }
    Ok(Dataset {
        num_classes: max_label + 1,
        samples,
    })
}

#[derive(Debug, Clone)]
pub struct GazeTrial {
    pub id: String,
    pub samples: Vec<GazeSample>,
}

/// Reads a gaze log (`trial_id,t_ms,x_px,y_px,valid`), grouping rows by
/// trial id in order of first appearance. Timestamps must be strictly
/// increasing within each trial.
pub fn load_gaze_csv(path: &Path) -> Result<Vec<GazeTrial>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let expected = ["trial_id", "t_ms", "x_px", "y_px", "valid"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "{}: expected header {}, got {}",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut trials: Vec<GazeTrial> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let get = |i: usize, name: &str| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| parse_err(format!("missing {name} field")))
        };
        let trial_id = get(0, "trial_id")?.to_string();
        let num = |i: usize, name: &str| -> Result<f64> {
            let raw = get(i, name)?;
            raw.trim()
                .parse()
                .map_err(|_| parse_err(format!("{name} '{raw}' is not a number")))
        };
        let t_ms = num(1, "t_ms")?;
        let x = num(2, "x_px")?;
        let y = num(3, "y_px")?;
        let valid = match get(4, "valid")?.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(parse_err(format!("valid '{other}' is not 0/1/true/false"))),
        };
        let slot = *index.entry(trial_id.clone()).or_insert_with(|| {
            trials.push(GazeTrial {
                id: trial_id.clone(),
                samples: Vec::new(),
            });
            trials.len() - 1
        });
        if let Some(last) = trials[slot].samples.last() {
            if t_ms <= last.t_ms {
                return Err(Error::Data(format!(
                    "trial {trial_id}: timestamps not strictly increasing at line {line} ({} then {t_ms})",
                    last.t_ms
                )));
            }
        }
        trials[slot].samples.push(GazeSample {
            t_ms,
            x,
            y,
            valid,
        });
    }
    Ok(trials)
}
