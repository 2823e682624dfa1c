//! Procedural camouflage-style binary segmentation tasks with a known
//! per-pixel label-flip field.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diff::{RngStream, TensorMap};
use crate::error::{DuqError, Result};

const MAX_RETRIES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Crescent,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Crescent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Crescent => "crescent",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestId, Split::TestOod];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::TestId => self.test_id,
            Split::TestOod => self.test_ood,
        }
    }

    /// First global sample index of `split`; splits occupy disjoint ranges.
    pub fn base_index(&self, split: Split) -> usize {
        match split {
            Split::Train => 0,
            Split::Val => self.train,
            Split::TestId => self.train + self.val,
            Split::TestOod => self.train + self.val + self.test_id,
        }
    }
}

/// Which samples count as out-of-distribution. A sample is OOD when it
/// meets every condition that is set; in-distribution samples meet none.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRule {
    pub held_out_shape: Option<ShapeClass>,
    pub offset_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub image_size: usize,
    /// Foreground/background mean intensity gap.
    pub contrast: f64,
    pub texture_amplitude: f64,
    /// Width of the band around the mask boundary where labels may flip, in pixels.
    pub boundary_band: f64,
    /// Flip probability at the boundary.
    pub max_flip: f64,
    pub counts: SplitCounts,
    pub ood: OodRule,
    /// Per-axis standard deviation of in-distribution center offsets.
    pub center_sigma: f64,
    /// Largest center offset magnitude in the OOD split.
    pub max_offset: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            image_size: 32,
            contrast: 0.25,
            texture_amplitude: 0.12,
            boundary_band: 3.0,
            max_flip: 0.35,
            counts: SplitCounts {
                train: 200,
                val: 50,
                test_id: 50,
                test_ood: 50,
            },
            ood: OodRule {
                held_out_shape: Some(ShapeClass::Crescent),
                offset_threshold: Some(4.0),
            },
            center_sigma: 1.5,
            max_offset: 8.0,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DuqError::InvalidConfig(m.to_string()));
        if !(0.0..=0.5).contains(&self.max_flip) {
            return bad("max_flip must lie in [0, 0.5]");
        }
        if !(self.contrast >= 0.0) {
            return bad("contrast must be non-negative");
        }
        if !(self.texture_amplitude >= 0.0) {
            return bad("texture_amplitude must be non-negative");
        }
        if !(self.boundary_band > 0.0) {
            return bad("boundary_band must be positive");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        let c = &self.counts;
        if c.train == 0 || c.val == 0 || c.test_id == 0 || c.test_ood == 0 {
            return bad("every split count must be positive");
        }
        if let Some(t) = self.ood.offset_threshold {
            if !(t > 0.0 && t < self.max_offset) {
                return bad("offset_threshold must lie in (0, max_offset)");
            }
        }
        if self.ood.held_out_shape.is_none() && self.ood.offset_threshold.is_none() {
            return bad("ood rule needs a held-out shape or an offset threshold");
        }
        if self.ood.held_out_shape.is_some()
            && ShapeClass::ALL
                .iter()
                .all(|s| Some(*s) == self.ood.held_out_shape)
        {
            return bad("at least one shape class must remain in-distribution");
        }
        Ok(())
    }

    pub fn is_ood(&self, shape: ShapeClass, offset: [f64; 2]) -> bool {
        let mag = offset[0].hypot(offset[1]);
        let shape_ok = self.ood.held_out_shape.map_or(true, |s| s == shape);
        let offset_ok = self.ood.offset_threshold.map_or(true, |t| mag > t);
        shape_ok && offset_ok
    }

    fn is_in_distribution(&self, shape: ShapeClass, offset: [f64; 2]) -> bool {
        let mag = offset[0].hypot(offset[1]);
        let shape_ok = self.ood.held_out_shape.map_or(true, |s| s != shape);
        let offset_ok = self.ood.offset_threshold.map_or(true, |t| mag <= t);
        shape_ok && offset_ok
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub split: Split,
    pub image: TensorMap,
    pub clean_mask: TensorMap,
    pub noisy_label: TensorMap,
    /// Per-pixel label-flip probability.
    pub noise_field: TensorMap,
    pub shape_class: ShapeClass,
    /// Shape centre relative to the image centre, `[dx, dy]` in pixels.
    pub center_offset: [f64; 2],
    pub ood: bool,
}

impl SyntheticSample {
    pub fn offset_magnitude(&self) -> f64 {
        self.center_offset[0].hypot(self.center_offset[1])
    }
}

struct ShapeParams {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
    /// Crescent bite offset as a fraction of the radius.
    bite: f64,
}

impl ShapeParams {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.class {
            ShapeClass::Disk => u * u + v * v <= self.size * self.size,
            ShapeClass::Square => {
                let half = self.size * 0.85;
                u.abs() <= half && v.abs() <= half
            }
            ShapeClass::Triangle => {
                // Equilateral, circumradius 1.2·size.
                let r = self.size * 1.2;
                (0..3).all(|k| {
                    let a = PI / 6.0 + k as f64 * 2.0 * PI / 3.0;
                    let (nx, ny) = (a.cos(), a.sin());
                    u * nx + v * ny <= r * 0.5
                })
            }
            ShapeClass::Crescent => {
                let r = self.size * 1.1;
                let inside = u * u + v * v <= r * r;
                let (bu, bv) = (u - self.bite * r, v);
                inside && bu * bu + bv * bv > (0.8 * r) * (0.8 * r)
            }
        }
    }
}

/// Smooth random texture: a few oriented gratings plus fine pixel noise.
fn texture(size: usize, amplitude: f64, rng: &mut RngStream) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.uniform_range(0.0, PI);
            let freq = rng.uniform_range(0.15, 0.6);
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            let amp = rng.uniform_range(0.5, 1.0);
            (theta, freq, phase, amp)
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(theta, freq, phase, amp) in &waves {
                v += amp * (freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase).sin();
            }
            let fine = rng.normal() * 0.35;
            out.push(amplitude * (v / norm + fine));
        }
    }
    out
}

/// Distance from each pixel centre to the nearest pixel of the opposite
/// label, minus half a pixel (so boundary-adjacent pixels sit at 0.5).
pub fn boundary_distance(mask: &TensorMap) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let vals = mask.values();
    let mut out = vec![f64::INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let me = vals[y * w + x] > 0.5;
            let mut best = f64::INFINITY;
            for yy in 0..h {
                let dy = yy as f64 - y as f64;
                if dy * dy >= best {
                    continue;
                }
                for xx in 0..w {
                    if (vals[yy * w + xx] > 0.5) != me {
                        let dx = xx as f64 - x as f64;
                        best = best.min(dx * dx + dy * dy);
                    }
                }
            }
            out[y * w + x] = best.sqrt() - 0.5;
        }
    }
    out
}

/// `ρ_max·exp(−d²/(2(b/2)²))` inside the band `d ≤ b`, zero outside.
pub fn noise_field_from_distance(dist: &[f64], band: f64, max_flip: f64) -> Vec<f64> {
    let sigma = band / 2.0;
    dist.iter()
        .map(|&d| {
            if d <= band {
                max_flip * (-d * d / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            }
        })
        .collect()
}

/// Flips each label pixel independently with its noise-field probability.
pub fn flip_labels(clean: &TensorMap, noise: &TensorMap, rng: &mut RngStream) -> Result<TensorMap> {
    clean.ensure_same_shape(noise)?;
    let data = clean
        .values()
        .iter()
        .zip(noise.values())
        .map(|(&c, &p)| {
            if p > 0.0 && rng.bernoulli(p) {
                1.0 - c
            } else {
                c
            }
        })
        .collect();
    TensorMap::new(clean.channels(), clean.height(), clean.width(), data)
}

fn sample_offset(cfg: &BenchConfig, ood: bool, rng: &mut RngStream) -> [f64; 2] {
    if ood {
        // Uniform over the disk of radius max_offset, outside the threshold.
        let lo = cfg.ood.offset_threshold.unwrap_or(0.0);
        loop {
            let r = (rng.uniform_range((lo / cfg.max_offset).powi(2), 1.0)).sqrt() * cfg.max_offset;
            let a = rng.uniform_range(0.0, 2.0 * PI);
            let off = [r * a.cos(), r * a.sin()];
            if cfg.ood.offset_threshold.map_or(true, |t| r > t) {
                return off;
            }
        }
    } else {
        loop {
            let off = [
                rng.normal() * cfg.center_sigma,
                rng.normal() * cfg.center_sigma,
            ];
            if cfg
                .ood
                .offset_threshold
                .map_or(true, |t| off[0].hypot(off[1]) <= t)
            {
                return off;
            }
        }
    }
}

fn sample_shape(cfg: &BenchConfig, ood: bool, rng: &mut RngStream) -> ShapeClass {
    let allowed: Vec<ShapeClass> = match (ood, cfg.ood.held_out_shape) {
        (true, Some(s)) => vec![s],
        (false, Some(s)) => ShapeClass::ALL.into_iter().filter(|c| *c != s).collect(),
        (_, None) => ShapeClass::ALL.to_vec(),
    };
    allowed[rng.below(allowed.len())]
}

fn try_generate(
    cfg: &BenchConfig,
    split: Split,
    index: usize,
    rng: &mut RngStream,
) -> Result<Option<SyntheticSample>> {
    let n = cfg.image_size;
    let ood = split == Split::TestOod;
    let mut geom = rng.derive_named("geometry");
    let class = sample_shape(cfg, ood, &mut geom);
    let offset = sample_offset(cfg, ood, &mut geom);
    let scale = n as f64 / 32.0;
    let shape = ShapeParams {
        class,
        cx: (n as f64 - 1.0) / 2.0 + offset[0],
        cy: (n as f64 - 1.0) / 2.0 + offset[1],
        size: geom.uniform_range(5.5, 8.5) * scale,
        angle: geom.uniform_range(0.0, 2.0 * PI),
        bite: geom.uniform_range(0.45, 0.65),
    };
    let mask = TensorMap::from_fn(1, n, n, |_, y, x| {
        if shape.contains(x as f64, y as f64) {
            1.0
        } else {
            0.0
        }
    });
    let fg = mask.values().iter().filter(|v| **v > 0.5).count();
    if fg == 0 || fg == n * n {
        return Ok(None);
    }
    let mut tex = rng.derive_named("texture");
    let bg_tex = texture(n, cfg.texture_amplitude, &mut tex);
    let fg_tex = texture(n, cfg.texture_amplitude, &mut tex);
    let image_vals: Vec<f64> = (0..n * n)
        .map(|i| {
            let v = if mask.values()[i] > 0.5 {
                0.5 + cfg.contrast / 2.0 + fg_tex[i]
            } else {
                0.5 - cfg.contrast / 2.0 + bg_tex[i]
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    let image = TensorMap::new(1, n, n, image_vals)?;
    let dist = boundary_distance(&mask);
    let noise_field = TensorMap::new(
        1,
        n,
        n,
        noise_field_from_distance(&dist, cfg.boundary_band, cfg.max_flip),
    )?;
    let noisy_label = flip_labels(&mask, &noise_field, &mut rng.derive_named("labels"))?;
    let is_ood = cfg.is_ood(class, offset);
    debug_assert!(is_ood == ood || (!ood && cfg.is_in_distribution(class, offset)));
    Ok(Some(SyntheticSample {
        index,
        split,
        image,
        clean_mask: mask,
        noisy_label,
        noise_field,
        shape_class: class,
        center_offset: offset,
        ood: is_ood,
    }))
}

/// Generates sample `index` of `split`; a pure function of
/// `(cfg, split, index)`.
pub fn generate_sample(cfg: &BenchConfig, split: Split, index: usize) -> Result<SyntheticSample> {
    if index >= cfg.counts.get(split) {
        return Err(DuqError::Usage(format!(
            "index {index} out of range for split {} of size {}",
            split.dir_name(),
            cfg.counts.get(split)
        )));
    }
    let global = cfg.counts.base_index(split) + index;
    let base = RngStream::new(cfg.seed, 0x5EED_0000).derive(global as u64);
    for attempt in 0..=MAX_RETRIES {
        let mut rng = base.derive(attempt);
        if let Some(s) = try_generate(cfg, split, index, &mut rng)? {
            return Ok(s);
        }
    }
    Err(DuqError::Validation(format!(
        "sample {index} of split {} kept producing a degenerate mask",
        split.dir_name()
    )))
}

pub fn generate_split(cfg: &BenchConfig, split: Split) -> Result<Vec<SyntheticSample>> {
    use rayon::prelude::*;
    (0..cfg.counts.get(split))
        .into_par_iter()
        .map(|i| generate_sample(cfg, split, i))
        .collect()
}

/// An in-memory benchmark: every split of one [`BenchConfig`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: BenchConfig,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test_id: Vec<SyntheticSample>,
    pub test_ood: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn generate(cfg: &BenchConfig) -> Result<Dataset> {
        cfg.validate()?;
        Ok(Dataset {
            config: cfg.clone(),
            train: generate_split(cfg, Split::Train)?,
            val: generate_split(cfg, Split::Val)?,
            test_id: generate_split(cfg, Split::TestId)?,
            test_ood: generate_split(cfg, Split::TestOod)?,
        })
    }

    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<SyntheticSample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::TestId => &mut self.test_id,
            Split::TestOod => &mut self.test_ood,
        }
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }
}
