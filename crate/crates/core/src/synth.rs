//! Deterministic three-domain synthetic benchmark.
//!
//! A scene is the product of two independent factors: *content* (background,
//! object geometry and colours), a pure function of the content seed, and
//! *appearance* (haze, gain, noise, channel shift), applied afterwards as a
//! pixel transform. Source and target scenes with the same content seed
//! therefore carry identical box lists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use bridge_autodiff::Tensor;

use crate::seed;
use crate::CoreError;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["frame", "disk"];
pub const MIN_OBJECT_SIZE: f64 = 8.0;

const MIN_OBJECTS: usize = 1;
const MAX_OBJECTS: usize = 4;
const SIZE_RANGE: (usize, usize) = (10, 26);
/// Largest allowed intersection over the smaller object's area.
const MAX_OVERLAP: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;
/// Boxes are drawn as hollow frames of this thickness; disks are filled.
const FRAME_WIDTH: f64 = 3.0;

/// Object class ids.
pub const CLASS_BOX: usize = 0;
pub const CLASS_DISK: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class: usize,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    /// Ground-truth invariants: ordered corners, minimum size, inside the image.
    pub fn is_valid(&self, image_size: usize) -> bool {
        let s = image_size as f64;
        self.class < NUM_CLASSES
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= s
            && self.y_max <= s
            && self.width() >= MIN_OBJECT_SIZE
            && self.height() >= MIN_OBJECT_SIZE
    }

    pub fn clip(&self, image_size: usize) -> BBox {
        let s = image_size as f64;
        BBox {
            x_min: self.x_min.clamp(0.0, s),
            y_min: self.y_min.clamp(0.0, s),
            x_max: self.x_max.clamp(0.0, s),
            y_max: self.y_max.clamp(0.0, s),
            class: self.class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// Labeled source.
    #[serde(rename = "S")]
    Source,
    /// Intermediate domain: translated source scenes.
    #[serde(rename = "F")]
    Synthetic,
    /// Unlabeled target.
    #[serde(rename = "T")]
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "S",
            Domain::Synthetic => "F",
            Domain::Target => "T",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Synthetic => 1,
            Domain::Target => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Domain::Source),
            1 => Some(Domain::Synthetic),
            2 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// Planar (channel-major) RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[CHANNELS, self.height, self.width], self.data.clone())
    }

    /// True when every pixel sits exactly on the 8-bit grid `k / 255`.
    pub fn is_quantized(&self) -> bool {
        self.data.iter().all(|&v| quantize(v) == v)
    }
}

/// Clamp to `[0, 1]` and snap to the nearest `k / 255`.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub domain: Domain,
    pub content_seed: u64,
    /// Translation quality, intermediate-domain scenes only.
    pub quality: Option<f64>,
    /// Importance weight, once assigned.
    pub weight: Option<f64>,
}

impl Scene {
    pub fn is_labeled(&self) -> bool {
        !self.boxes.is_empty()
    }

    /// Copy without annotations, as handed to training for target scenes.
    pub fn unlabeled(&self) -> Scene {
        Scene {
            boxes: Vec::new(),
            ..self.clone()
        }
    }
}

/// Pixel-level appearance transform applied on top of scene content:
/// `clamp((1 - haze) * gain * x + haze + shift[c] + N(0, noise^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    pub haze: f64,
    pub gain: f64,
    pub noise: f64,
    pub shift: [f64; 3],
}

impl AppearanceParams {
    pub const IDENTITY: AppearanceParams = AppearanceParams {
        haze: 0.0,
        gain: 1.0,
        noise: 0.0,
        shift: [0.0; 3],
    };

    pub fn validate(&self) -> Result<(), CoreError> {
        let ok = (0.0..=1.0).contains(&self.haze)
            && self.gain > 0.0
            && self.gain.is_finite()
            && self.noise >= 0.0
            && self.noise.is_finite()
            && self.shift.iter().all(|s| s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(format!("appearance parameters out of range: {self:?}")))
        }
    }

    /// Noise-free part of the transform for one channel.
    #[inline]
    pub fn affine(&self, c: usize, x: f64) -> f64 {
        (1.0 - self.haze) * self.gain * x + self.haze + self.shift[c]
    }
}

/// Per-scene distribution of appearance parameters for one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceRange {
    pub haze: (f64, f64),
    pub gain: (f64, f64),
    pub noise: f64,
    pub shift: [f64; 3],
}

impl AppearanceRange {
    pub fn source() -> Self {
        Self {
            haze: (0.0, 0.0),
            gain: (0.95, 1.05),
            noise: 0.01,
            shift: [0.0; 3],
        }
    }

    pub fn target() -> Self {
        Self {
            haze: (0.3, 0.5),
            gain: (0.85, 0.95),
            noise: 0.05,
            shift: [0.04, 0.0, -0.04],
        }
    }

    pub fn fixed(p: AppearanceParams) -> Self {
        Self {
            haze: (p.haze, p.haze),
            gain: (p.gain, p.gain),
            noise: p.noise,
            shift: p.shift,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |what: &str| Err(CoreError::InvalidConfig(format!("appearance range: {what}")));
        if !(0.0 <= self.haze.0 && self.haze.0 <= self.haze.1 && self.haze.1 <= 1.0) {
            return bad("haze bounds must satisfy 0 <= lo <= hi <= 1");
        }
        if !(0.0 < self.gain.0 && self.gain.0 <= self.gain.1 && self.gain.1.is_finite()) {
            return bad("gain bounds must satisfy 0 < lo <= hi");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> AppearanceParams {
        let mut uniform = |(lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        AppearanceParams {
            haze: uniform(self.haze),
            gain: uniform(self.gain),
            noise: self.noise,
            shift: self.shift,
        }
    }
}

/// Appearance-free scene: rendered base image plus annotations.
#[derive(Debug, Clone)]
pub struct Content {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

fn overlap_ok(a: &BBox, placed: &[BBox]) -> bool {
    placed
        .iter()
        .all(|b| a.intersection(b) <= MAX_OVERLAP * a.area().min(b.area()))
}

fn try_layout(rng: &mut ChaCha8Rng) -> Option<Vec<BBox>> {
    let n = rng.gen_range(MIN_OBJECTS..=MAX_OBJECTS);
    let mut placed: Vec<BBox> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return None;
        }
        let class = rng.gen_range(0..NUM_CLASSES);
        let (w, h) = if class == CLASS_DISK {
            let d = rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1);
            (d, d)
        } else {
            (
                rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1),
                rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1),
            )
        };
        let x0 = rng.gen_range(0..=IMAGE_SIZE - w) as f64;
        let y0 = rng.gen_range(0..=IMAGE_SIZE - h) as f64;
        let b = BBox::new(x0, y0, x0 + w as f64, y0 + h as f64, class);
        if overlap_ok(&b, &placed) {
            placed.push(b);
        }
    }
    Some(placed)
}

/// Background and object geometry for a content seed. Layout failures
/// retry under derived sub-seeds, so this never fails.
pub fn gen_content(content_seed: u64) -> Content {
    let mut sub = 0u64;
    let (mut rng, boxes) = loop {
        let mut rng = seed::rng(content_seed, sub);
        if let Some(b) = try_layout(&mut rng) {
            break (rng, b);
        }
        sub += 1;
    };

    let base: f64 = rng.gen_range(0.15..0.4);
    let tint: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let mut image = Image::filled(IMAGE_SIZE, IMAGE_SIZE, 0.0);
    let s = IMAGE_SIZE as f64;
    for c in 0..CHANNELS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let u = (x as f64 + 0.5) / s - 0.5;
                let v = (y as f64 + 0.5) / s - 0.5;
                let i = image.idx(c, y, x);
                image.data[i] = base + tint[c] + gx * u + gy * v;
            }
        }
    }
    for b in &boxes {
        let color: [f64; 3] = [
            rng.gen_range(0.55..0.95),
            rng.gen_range(0.55..0.95),
            rng.gen_range(0.55..0.95),
        ];
        let (cx, cy) = b.center();
        let r = 0.5 * b.width();
        for y in b.y_min as usize..b.y_max as usize {
            for x in b.x_min as usize..b.x_max as usize {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = if b.class == CLASS_BOX {
                    let edge = (px - b.x_min).min(b.x_max - px).min(py - b.y_min).min(b.y_max - py);
                    edge < FRAME_WIDTH
                } else {
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= r * r
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        let i = image.idx(c, y, x);
                        image.data[i] = *col;
                    }
                }
            }
        }
    }
    Content { image, boxes }
}

/// Apply an appearance transform with noise drawn from `rng`, then clamp
/// and quantize.
pub fn apply_appearance(image: &Image, p: &AppearanceParams, rng: &mut ChaCha8Rng) -> Image {
    let mut out = image.clone();
    let plane = image.height * image.width;
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i / plane;
        let n: f64 = if p.noise > 0.0 {
            p.noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        *v = quantize(p.affine(c, *v) + n);
    }
    out
}

/// Render the scene for `content_seed` under `params`. The box list depends
/// on the content seed alone.
pub fn gen_scene(content_seed: u64, params: &AppearanceParams, domain: Domain) -> Result<Scene, CoreError> {
    params.validate()?;
    let content = gen_content(content_seed);
    let mut noise = seed::rng(content_seed, seed::TAG_NOISE ^ ((domain.code() as u64) << 8));
    let image = apply_appearance(&content.image, params, &mut noise);
    Ok(Scene {
        image,
        boxes: content.boxes,
        domain,
        content_seed,
        quality: None,
        weight: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub count: usize,
    /// First index of this split's half-open seed range.
    pub seed_start: u64,
}

impl SplitSpec {
    fn range(&self) -> std::ops::Range<u64> {
        self.seed_start..self.seed_start + self.count as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_source: SplitSpec,
    pub train_target: SplitSpec,
    pub eval_target: SplitSpec,
    pub eval_source: SplitSpec,
    pub source_appearance: AppearanceRange,
    pub target_appearance: AppearanceRange,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_source: SplitSpec { count: 2000, seed_start: 0 },
            train_target: SplitSpec { count: 2000, seed_start: 1_000_000 },
            eval_target: SplitSpec { count: 200, seed_start: 2_000_000 },
            eval_source: SplitSpec { count: 200, seed_start: 3_000_000 },
            source_appearance: AppearanceRange::source(),
            target_appearance: AppearanceRange::target(),
        }
    }
}

impl DatasetConfig {
    pub fn splits(&self) -> [(&'static str, SplitSpec); 4] {
        [
            ("train_S", self.train_source),
            ("train_T", self.train_target),
            ("eval_T", self.eval_target),
            ("eval_S", self.eval_source),
        ]
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let splits = self.splits();
        for (name, s) in &splits {
            if s.count == 0 {
                return Err(CoreError::InvalidConfig(format!("split {name} must contain at least one scene")));
            }
            if s.seed_start.checked_add(s.count as u64).is_none() {
                return Err(CoreError::InvalidConfig(format!("split {name} seed range overflows")));
            }
        }
        for i in 0..splits.len() {
            for j in i + 1..splits.len() {
                let (a, b) = (splits[i].1.range(), splits[j].1.range());
                if a.start < b.end && b.start < a.end {
                    return Err(CoreError::InvalidConfig(format!(
                        "seed ranges of {} and {} overlap",
                        splits[i].0, splits[j].0
                    )));
                }
            }
        }
        self.source_appearance.validate()?;
        self.target_appearance.validate()
    }
}

/// The four generated splits. Target training scenes carry no boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train_source: Vec<Scene>,
    pub train_target: Vec<Scene>,
    pub eval_target: Vec<Scene>,
    pub eval_source: Vec<Scene>,
}

/// Content seed of scene `index` in a split under `master_seed`.
pub fn content_seed(master_seed: u64, index: u64) -> u64 {
    seed::derive(master_seed, index)
}

fn gen_split(master_seed: u64, split: SplitSpec, range: &AppearanceRange, domain: Domain) -> Result<Vec<Scene>, CoreError> {
    split
        .range()
        .map(|i| {
            let cs = content_seed(master_seed, i);
            let mut rng = seed::rng(cs, seed::TAG_APPEARANCE ^ ((domain.code() as u64) << 8));
            let params = range.sample(&mut rng);
            gen_scene(cs, &params, domain)
        })
        .collect()
}

pub fn gen_dataset(master_seed: u64, config: &DatasetConfig) -> Result<Datasets, CoreError> {
    config.validate()?;
    let (s, t) = (&config.source_appearance, &config.target_appearance);
    Ok(Datasets {
        train_source: gen_split(master_seed, config.train_source, s, Domain::Source)?,
        train_target: gen_split(master_seed, config.train_target, t, Domain::Target)?
            .iter()
            .map(Scene::unlabeled)
            .collect(),
        eval_target: gen_split(master_seed, config.eval_target, t, Domain::Target)?,
        eval_source: gen_split(master_seed, config.eval_source, s, Domain::Source)?,
    })
}
