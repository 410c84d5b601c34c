//! Procedural bi-temporal scene generator with exact labels.
//!
//! Scenes are textured backgrounds with non-overlapping rectangles and
//! ellipses drawn from two visually separable appearance classes. Each
//! shape is static or follows one trend (appear / disappear / transform),
//! which determines its presence and class in the two frames; labels fall
//! out of the geometry exactly. Both frames then receive independent
//! global brightness shifts and pixel noise so that unchanged regions are
//! never pixel-identical and plain differencing cannot solve the task.

mod io;

pub use io::{
    read_eval_pairs, read_image_pairs, read_manifest, read_train_pairs, write_dataset,
    write_gray as write_gray_image, write_indexed as write_trend_image, write_rgb as write_rgb_image,
    EvalPair, Manifest, Splits, TrainPair, DATASET_FORMAT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trend::{TREND_APPEAR, TREND_DISAPPEAR, TREND_TRANSFORM, TREND_UNCHANGED};

fn default_image_size() -> usize {
    64
}
fn default_shape_count() -> (usize, usize) {
    (2, 5)
}
fn default_shape_radius() -> (usize, usize) {
    (4, 9)
}
fn default_background_band() -> (f32, f32) {
    (0.0, 0.3)
}
fn default_class_a_band() -> (f32, f32) {
    (0.55, 0.7)
}
fn default_class_b_band() -> (f32, f32) {
    (0.8, 0.95)
}
fn default_background_freq() -> f32 {
    2.0
}
fn default_class_a_freq() -> f32 {
    5.0
}
fn default_class_b_freq() -> f32 {
    11.0
}
fn default_texture_amplitude() -> f32 {
    0.05
}
fn default_trend_prob() -> f32 {
    0.25
}
fn default_brightness_shift() -> f32 {
    0.1
}
fn default_noise_sigma() -> f32 {
    0.02
}

/// Parameters of the scene distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Inclusive range of shapes per scene.
    #[serde(default = "default_shape_count")]
    pub shape_count: (usize, usize),
    /// Inclusive range of shape half-extents in pixels.
    #[serde(default = "default_shape_radius")]
    pub shape_radius: (usize, usize),
    /// Base intensity bands; must be pairwise disjoint and ordered
    /// background < class A < class B.
    #[serde(default = "default_background_band")]
    pub background_band: (f32, f32),
    #[serde(default = "default_class_a_band")]
    pub class_a_band: (f32, f32),
    #[serde(default = "default_class_b_band")]
    pub class_b_band: (f32, f32),
    /// Sinusoidal texture frequencies (cycles across the image).
    #[serde(default = "default_background_freq")]
    pub background_texture_freq: f32,
    #[serde(default = "default_class_a_freq")]
    pub class_a_texture_freq: f32,
    #[serde(default = "default_class_b_freq")]
    pub class_b_texture_freq: f32,
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f32,
    /// Per-shape trend probabilities; the remainder is static shapes.
    #[serde(default = "default_trend_prob")]
    pub p_appear: f32,
    #[serde(default = "default_trend_prob")]
    pub p_disappear: f32,
    #[serde(default = "default_trend_prob")]
    pub p_transform: f32,
    /// Max magnitude of the per-frame global brightness shift.
    #[serde(default = "default_brightness_shift")]
    pub brightness_shift: f32,
    /// Stddev of per-pixel Gaussian noise added to each frame.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: default_image_size(),
            shape_count: default_shape_count(),
            shape_radius: default_shape_radius(),
            background_band: default_background_band(),
            class_a_band: default_class_a_band(),
            class_b_band: default_class_b_band(),
            background_texture_freq: default_background_freq(),
            class_a_texture_freq: default_class_a_freq(),
            class_b_texture_freq: default_class_b_freq(),
            texture_amplitude: default_texture_amplitude(),
            p_appear: default_trend_prob(),
            p_disappear: default_trend_prob(),
            p_transform: default_trend_prob(),
            brightness_shift: default_brightness_shift(),
            noise_sigma: default_noise_sigma(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(format!("scene spec: {msg}")));
        if self.image_size < 16 {
            return err(format!("image_size {} is too small", self.image_size));
        }
        if self.shape_count.0 > self.shape_count.1 {
            return err(format!("shape_count range {:?} is inverted", self.shape_count));
        }
        if self.shape_radius.0 < 2 || self.shape_radius.0 > self.shape_radius.1 {
            return err(format!("shape_radius range {:?} is invalid", self.shape_radius));
        }
        if 2 * self.shape_radius.1 + 2 >= self.image_size {
            return err(format!(
                "max shape radius {} does not fit a {}px canvas",
                self.shape_radius.1, self.image_size
            ));
        }
        for (name, band) in [
            ("background_band", self.background_band),
            ("class_a_band", self.class_a_band),
            ("class_b_band", self.class_b_band),
        ] {
            if !(0.0..=1.0).contains(&band.0) || !(0.0..=1.0).contains(&band.1) || band.0 >= band.1 {
                return err(format!("{name} {band:?} must be an increasing range in [0,1]"));
            }
        }
        if self.background_band.1 >= self.class_a_band.0 || self.class_a_band.1 >= self.class_b_band.0 {
            return err("intensity bands must be disjoint and ordered background < A < B".into());
        }
        for (name, p) in [
            ("p_appear", self.p_appear),
            ("p_disappear", self.p_disappear),
            ("p_transform", self.p_transform),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} {p} must lie in [0,1]"));
            }
        }
        if self.p_appear + self.p_disappear + self.p_transform > 1.0 + 1e-6 {
            return err("trend probabilities must sum to at most 1".into());
        }
        if self.brightness_shift < 0.0 || self.noise_sigma < 0.0 {
            return err("brightness_shift and noise_sigma must be non-negative".into());
        }
        if self.texture_amplitude < 0.0 || self.texture_amplitude > 0.2 {
            return err(format!(
                "texture_amplitude {} must lie in [0, 0.2]",
                self.texture_amplitude
            ));
        }
        Ok(())
    }
}

/// One bi-temporal sample with exact labels.
///
/// `change` is the only supervision used for training; `trend` exists for
/// evaluation and is withheld from the training path.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `[3, H, W]` in [0,1].
    pub t1: Tensor,
    pub t2: Tensor,
    /// `H*W` values in {0,1}.
    pub change: Vec<u8>,
    /// `H*W` trend codes in {0..=3}.
    pub trend: Vec<u8>,
    pub seed: u64,
}

impl SamplePair {
    pub fn spatial(&self) -> (usize, usize) {
        let s = self.t1.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, PartialEq)]
enum Class {
    A,
    B,
}

#[derive(Clone, Copy)]
enum ShapeTrend {
    Static,
    Appear,
    Disappear,
    Transform,
}

struct Shape {
    kind: ShapeKind,
    cx: usize,
    cy: usize,
    rx: usize,
    ry: usize,
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f32 - self.cx as f32;
        let dy = y as f32 - self.cy as f32;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= self.rx as f32 && dy.abs() <= self.ry as f32,
            ShapeKind::Ellipse => {
                let nx = dx / self.rx as f32;
                let ny = dy / self.ry as f32;
                nx * nx + ny * ny <= 1.0
            }
        }
    }

    fn bbox(&self) -> (usize, usize, usize, usize) {
        (
            self.cx - self.rx,
            self.cy - self.ry,
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }
}

/// A drawn surface: base intensity plus an oriented sinusoidal grating.
struct Appearance {
    base: f32,
    amp: f32,
    freq: f32,
    cos_t: f32,
    sin_t: f32,
    phase: f32,
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng, band: (f32, f32), freq: f32, amp: f32, size: usize) -> Self {
        // Shrink the band so texture never leaves it.
        let lo = (band.0 + amp).min(band.1);
        let hi = (band.1 - amp).max(lo);
        let base = lo + (hi - lo) * rng.random::<f32>();
        let theta = rng.random::<f32>() * std::f32::consts::TAU;
        let phase = rng.random::<f32>() * std::f32::consts::TAU;
        let _ = size;
        Appearance {
            base,
            amp,
            freq,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            phase,
        }
    }

    fn at(&self, x: usize, y: usize, size: usize) -> f32 {
        let u = (x as f32 * self.cos_t + y as f32 * self.sin_t) / size as f32;
        self.base + self.amp * (std::f32::consts::TAU * self.freq * u + self.phase).sin()
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Generate one sample. Deterministic in `(spec, seed)`.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let background = Appearance::sample(
        &mut rng,
        spec.background_band,
        spec.background_texture_freq,
        spec.texture_amplitude,
        size,
    );
    let mut frame1: Vec<f32> = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            frame1.push(background.at(x, y, size));
        }
    }
    let mut frame2 = frame1.clone();
    let mut change = vec![0u8; size * size];
    let mut trend = vec![TREND_UNCHANGED; size * size];
    let mut occupied = vec![false; size * size];

    let count = rng.random_range(spec.shape_count.0..=spec.shape_count.1);
    for shape_idx in 0..count {
        let shape = place_shape(&mut rng, spec, &occupied).ok_or_else(|| {
            Error::Data(format!(
                "placement failed for shape {shape_idx} after {MAX_PLACEMENT_ATTEMPTS} attempts (seed {seed})"
            ))
        })?;

        let t: f32 = rng.random();
        let shape_trend = if t < spec.p_appear {
            ShapeTrend::Appear
        } else if t < spec.p_appear + spec.p_disappear {
            ShapeTrend::Disappear
        } else if t < spec.p_appear + spec.p_disappear + spec.p_transform {
            ShapeTrend::Transform
        } else {
            ShapeTrend::Static
        };
        let class = if rng.random::<f32>() < 0.5 { Class::A } else { Class::B };
        let other = if class == Class::A { Class::B } else { Class::A };

        let appearance = |rng: &mut ChaCha8Rng, c: Class| {
            let (band, freq) = match c {
                Class::A => (spec.class_a_band, spec.class_a_texture_freq),
                Class::B => (spec.class_b_band, spec.class_b_texture_freq),
            };
            Appearance::sample(rng, band, freq, spec.texture_amplitude, size)
        };

        let (app1, app2, code) = match shape_trend {
            ShapeTrend::Static => {
                let a = appearance(&mut rng, class);
                (Some(a), None, TREND_UNCHANGED) // same appearance reused below
            }
            ShapeTrend::Appear => (None, Some(appearance(&mut rng, class)), TREND_APPEAR),
            ShapeTrend::Disappear => (Some(appearance(&mut rng, class)), None, TREND_DISAPPEAR),
            ShapeTrend::Transform => (
                Some(appearance(&mut rng, class)),
                Some(appearance(&mut rng, other)),
                TREND_TRANSFORM,
            ),
        };

        let (x0, y0, x1, y1) = shape.bbox();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !shape.contains(x, y) {
                    continue;
                }
                let px = y * size + x;
                occupied[px] = true;
                match shape_trend {
                    ShapeTrend::Static => {
                        let v = app1.as_ref().unwrap().at(x, y, size);
                        frame1[px] = v;
                        frame2[px] = v;
                    }
                    ShapeTrend::Appear => {
                        frame2[px] = app2.as_ref().unwrap().at(x, y, size);
                    }
                    ShapeTrend::Disappear => {
                        frame1[px] = app1.as_ref().unwrap().at(x, y, size);
                    }
                    ShapeTrend::Transform => {
                        frame1[px] = app1.as_ref().unwrap().at(x, y, size);
                        frame2[px] = app2.as_ref().unwrap().at(x, y, size);
                    }
                }
                if code != TREND_UNCHANGED {
                    trend[px] = code;
                    change[px] = 1;
                }
            }
        }
    }

    let t1 = finish_frame(&frame1, size, spec, &mut rng);
    let t2 = finish_frame(&frame2, size, spec, &mut rng);

    Ok(SamplePair {
        t1: Tensor::new(vec![3, size, size], t1)?,
        t2: Tensor::new(vec![3, size, size], t2)?,
        change,
        trend,
        seed,
    })
}

fn place_shape(rng: &mut ChaCha8Rng, spec: &SceneSpec, occupied: &[bool]) -> Option<Shape> {
    let size = spec.image_size;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let rx = rng.random_range(spec.shape_radius.0..=spec.shape_radius.1);
        let ry = rng.random_range(spec.shape_radius.0..=spec.shape_radius.1);
        let cx = rng.random_range(rx + 1..size - rx - 1);
        let cy = rng.random_range(ry + 1..size - ry - 1);
        let kind = if rng.random::<f32>() < 0.5 {
            ShapeKind::Rect
        } else {
            ShapeKind::Ellipse
        };
        let shape = Shape { kind, cx, cy, rx, ry };
        // Reject on any occupied pixel within the bounding box plus a
        // one-pixel gap so adjacent shapes never touch.
        let (x0, y0, x1, y1) = shape.bbox();
        let clear = (y0.saturating_sub(1)..=(y1 + 1).min(size - 1)).all(|y| {
            (x0.saturating_sub(1)..=(x1 + 1).min(size - 1)).all(|x| !occupied[y * size + x])
        });
        if clear {
            return Some(shape);
        }
    }
    None
}

/// Expand one intensity plane into 3 channels with a global brightness
/// shift and per-pixel noise, clamped to [0,1].
fn finish_frame(frame: &[f32], size: usize, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let shift = if spec.brightness_shift > 0.0 {
        (2.0 * rng.random::<f32>() - 1.0) * spec.brightness_shift
    } else {
        0.0
    };
    let mut out = vec![0.0f32; 3 * size * size];
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
        for (c, chunk) in out.chunks_mut(size * size).enumerate() {
            let _ = c;
            for (dst, v) in chunk.iter_mut().zip(frame) {
                *dst = (v + shift + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    } else {
        for chunk in out.chunks_mut(size * size) {
            for (dst, v) in chunk.iter_mut().zip(frame) {
                *dst = (v + shift).clamp(0.0, 1.0);
            }
        }
    }
    out
}

// ── paired augmentation ─────────────────────────────────────────────

/// One jointly-sampled spatial transform: crop, then a 90-degree rotation,
/// then flips, applied identically to both frames and both label maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop: usize,
    /// Number of 90-degree rotations, 0..=3.
    pub rot: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn identity(size: usize) -> Self {
        Transform {
            crop_x: 0,
            crop_y: 0,
            crop: size,
            rot: 0,
            hflip: false,
            vflip: false,
        }
    }

    /// Sample a transform. `crop` of `None` keeps the full extent.
    pub fn sample<R: Rng>(rng: &mut R, size: usize, crop: Option<usize>) -> Result<Self> {
        let crop = crop.unwrap_or(size);
        if crop == 0 || crop > size {
            return Err(Error::Config(format!(
                "crop size {crop} invalid for image size {size}"
            )));
        }
        let max_off = size - crop;
        Ok(Transform {
            crop_x: if max_off > 0 { rng.random_range(0..=max_off) } else { 0 },
            crop_y: if max_off > 0 { rng.random_range(0..=max_off) } else { 0 },
            crop,
            rot: rng.random_range(0..4u8),
            hflip: rng.random::<f32>() < 0.5,
            vflip: rng.random::<f32>() < 0.5,
        })
    }
}

/// Inverse pixel mapping of one transform on a square image.
struct PixelMap {
    size: usize,
    t: Transform,
}

impl PixelMap {
    fn new(h: usize, w: usize, t: &Transform) -> Result<Self> {
        if h != w {
            return Err(Error::invalid("augment", "only square images are supported"));
        }
        if t.crop == 0 || t.crop_x + t.crop > h || t.crop_y + t.crop > h {
            return Err(Error::Config(format!(
                "crop window ({},{})+{} exceeds image size {h}",
                t.crop_x, t.crop_y, t.crop
            )));
        }
        Ok(PixelMap { size: h, t: *t })
    }

    fn src(&self, ox: usize, oy: usize) -> (usize, usize) {
        let s = self.t.crop;
        let fx = if self.t.hflip { s - 1 - ox } else { ox };
        let fy = if self.t.vflip { s - 1 - oy } else { oy };
        let (ix, iy) = match self.t.rot {
            0 => (fx, fy),
            1 => (s - 1 - fy, fx),
            2 => (s - 1 - fx, s - 1 - fy),
            _ => (fy, s - 1 - fx),
        };
        (self.t.crop_x + ix, self.t.crop_y + iy)
    }

    fn map_image(&self, data: &[f32]) -> Result<Tensor> {
        let (s, size) = (self.t.crop, self.size);
        let mut out = Vec::with_capacity(3 * s * s);
        for c in 0..3 {
            let plane = &data[c * size * size..(c + 1) * size * size];
            for oy in 0..s {
                for ox in 0..s {
                    let (ix, iy) = self.src(ox, oy);
                    out.push(plane[iy * size + ix]);
                }
            }
        }
        Tensor::new(vec![3, s, s], out)
    }

    fn map_labels(&self, data: &[u8]) -> Vec<u8> {
        let (s, size) = (self.t.crop, self.size);
        let mut out = Vec::with_capacity(s * s);
        for oy in 0..s {
            for ox in 0..s {
                let (ix, iy) = self.src(ox, oy);
                out.push(data[iy * size + ix]);
            }
        }
        out
    }
}

/// Apply a transform to a sample pair. Label maps move as categorical
/// maps; no interpolation anywhere.
pub fn apply_transform(pair: &SamplePair, t: &Transform) -> Result<SamplePair> {
    let (h, w) = pair.spatial();
    let map = PixelMap::new(h, w, t)?;
    Ok(SamplePair {
        t1: map.map_image(pair.t1.data())?,
        t2: map.map_image(pair.t2.data())?,
        change: map.map_labels(&pair.change),
        trend: map.map_labels(&pair.trend),
        seed: pair.seed,
    })
}

/// Apply a transform to a training pair; the training view has no trend
/// labels to move.
pub fn apply_transform_train(pair: &TrainPair, t: &Transform) -> Result<TrainPair> {
    let shape = pair.t1.shape();
    let map = PixelMap::new(shape[1], shape[2], t)?;
    Ok(TrainPair {
        t1: map.map_image(pair.t1.data())?,
        t2: map.map_image(pair.t2.data())?,
        change: map.map_labels(&pair.change),
    })
}

/// Sample and apply one paired augmentation.
pub fn augment(pair: &SamplePair, crop: Option<usize>, seed: u64) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, _) = pair.spatial();
    let t = Transform::sample(&mut rng, h, crop)?;
    apply_transform(pair, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trend::{trend_to_change, TrendMap};
    use proptest::prelude::*;

    #[test]
    fn zero_trend_probabilities_give_all_zero_labels() {
        let spec = SceneSpec {
            p_appear: 0.0,
            p_disappear: 0.0,
            p_transform: 0.0,
            ..SceneSpec::default()
        };
        let pair = generate(&spec, 5).unwrap();
        assert!(pair.change.iter().all(|v| *v == 0));
        assert!(pair.trend.iter().all(|v| *v == 0));
    }

    #[test]
    fn forced_appear_shape_marks_exactly_its_mask() {
        let spec = SceneSpec {
            shape_count: (1, 1),
            p_appear: 1.0,
            p_disappear: 0.0,
            p_transform: 0.0,
            ..SceneSpec::default()
        };
        let pair = generate(&spec, 33).unwrap();
        let marked: usize = pair.trend.iter().filter(|v| **v != 0).count();
        assert!(marked > 0);
        assert!(pair.trend.iter().all(|v| *v == 0 || *v == 1));
        for (c, t) in pair.change.iter().zip(&pair.trend) {
            assert_eq!(*c == 1, *t != 0);
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let spec = SceneSpec::default();
        let a = generate(&spec, 99).unwrap();
        let b = generate(&spec, 99).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frames_differ_on_unchanged_regions_under_nuisance() {
        let pair = generate(&SceneSpec::default(), 123).unwrap();
        let identical = pair
            .t1
            .data()
            .iter()
            .zip(pair.t2.data())
            .filter(|(a, b)| a == b)
            .count();
        // brightness shift + noise make pixel-identical values rare
        assert!(identical < pair.t1.numel() / 10);
    }

    #[test]
    fn default_spec_values_stay_in_unit_range() {
        for seed in 0..20 {
            let pair = generate(&SceneSpec::default(), seed).unwrap();
            for v in pair.t1.data().iter().chain(pair.t2.data()) {
                assert!(*v >= 0.0 && *v <= 1.0);
            }
        }
    }

    #[test]
    fn each_trend_class_gets_a_meaningful_pixel_share() {
        let spec = SceneSpec::default();
        let mut per_class = [0u64; 4];
        let mut changed = 0u64;
        for seed in 0..1000 {
            let pair = generate(&spec, seed).unwrap();
            for t in &pair.trend {
                per_class[*t as usize] += 1;
                if *t != 0 {
                    changed += 1;
                }
            }
        }
        for class in 1..4 {
            let share = per_class[class] as f64 / changed as f64;
            assert!(share > 0.01, "class {class} share {share}");
        }
    }

    #[test]
    fn identity_transform_is_identity() {
        let pair = generate(&SceneSpec::default(), 7).unwrap();
        let out = apply_transform(&pair, &Transform::identity(64)).unwrap();
        assert_eq!(pair, out);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let pair = generate(&SceneSpec::default(), 8).unwrap();
        let half = Transform {
            rot: 2,
            ..Transform::identity(64)
        };
        let once = apply_transform(&pair, &half).unwrap();
        let twice = apply_transform(&once, &half).unwrap();
        assert_eq!(pair, twice);
    }

    #[test]
    fn invalid_crops_are_rejected() {
        let pair = generate(&SceneSpec::default(), 9).unwrap();
        assert!(augment(&pair, Some(0), 1).is_err());
        assert!(augment(&pair, Some(65), 1).is_err());
        assert!(augment(&pair, Some(32), 1).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn augmentation_preserves_label_consistency(seed in 0u64..500, aug_seed in 0u64..500, crop in prop::option::of(16usize..=64)) {
            let pair = generate(&SceneSpec::default(), seed).unwrap();
            let out = augment(&pair, crop, aug_seed).unwrap();
            let (h, w) = out.spatial();
            prop_assert_eq!(h * w, out.change.len());
            let tm = TrendMap { h, w, codes: out.trend.clone() };
            prop_assert_eq!(&trend_to_change(&tm).values, &out.change);
            for v in out.t1.data().iter().chain(out.t2.data()) {
                prop_assert!(*v >= 0.0 && *v <= 1.0);
            }
        }

        #[test]
        fn generated_change_label_recodes_from_trend(seed in 0u64..500) {
            let pair = generate(&SceneSpec::default(), seed).unwrap();
            let (h, w) = pair.spatial();
            let tm = TrendMap { h, w, codes: pair.trend.clone() };
            prop_assert_eq!(&trend_to_change(&tm).values, &pair.change);
        }

        #[test]
        fn augmentation_is_a_pixel_permutation(seed in 0u64..200, aug_seed in 0u64..200) {
            // full-size transforms only rearrange pixels
            let pair = generate(&SceneSpec::default(), seed).unwrap();
            let out = augment(&pair, None, aug_seed).unwrap();
            let mut a: Vec<u8> = pair.trend.clone();
            let mut b: Vec<u8> = out.trend.clone();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
