//! Procedural glyph images for desk-scale experiments.
//!
//! Every class is a (style, shape) pair such as "outline circle". The
//! auxiliary task used for backbone pretraining and the downstream task use
//! disjoint pairs, so the backbone has seen every shape and every style but
//! never the downstream combinations. Each shape appears in the auxiliary
//! task with two styles, which keeps shape and style from being confounded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Style {
    Filled,
    Outline,
    /// Outline with horizontal bars inside.
    Striped,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Filled, Style::Outline, Style::Striped];

    pub fn word(self) -> &'static str {
        match self {
            Style::Filled => "filled",
            Style::Outline => "outline",
            Style::Striped => "striped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlyphClass {
    pub style: Style,
    pub shape: Shape,
}

impl GlyphClass {
    pub fn name(&self) -> String {
        format!("{} {}", self.style.word(), self.shape.word())
    }
}

/// Shape `i` is held out in style `i mod 3` for the downstream task.
fn held_out_style(i: usize) -> Style {
    Style::ALL[i % Style::ALL.len()]
}

/// The two remaining styles of every shape, style-major.
pub fn auxiliary_classes() -> Vec<GlyphClass> {
    let mut out = Vec::new();
    for style in Style::ALL {
        for (i, &shape) in Shape::ALL.iter().enumerate() {
            if held_out_style(i) != style {
                out.push(GlyphClass { style, shape });
            }
        }
    }
    out
}

pub fn downstream_classes() -> Vec<GlyphClass> {
    Shape::ALL
        .iter()
        .enumerate()
        .map(|(i, &shape)| GlyphClass {
            style: held_out_style(i),
            shape,
        })
        .collect()
}

/// Rendering nuisance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub size: usize,
    /// Maximum centre offset in pixels.
    pub jitter: f32,
    pub min_radius: f32,
    pub max_radius: f32,
    /// Maximum rotation in degrees.
    pub max_rotation: f32,
    pub stroke: f32,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    /// Number of small random specks added as clutter.
    pub clutter: usize,
}

impl Default for GlyphStyle {
    fn default() -> Self {
        GlyphStyle {
            size: 32,
            jitter: 4.0,
            min_radius: 6.5,
            max_radius: 11.0,
            max_rotation: 20.0,
            stroke: 2.0,
            noise: 0.08,
            clutter: 3,
        }
    }
}

fn sd_box(x: f32, y: f32, hx: f32, hy: f32) -> f32 {
    let qx = x.abs() - hx;
    let qy = y.abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn sd_triangle(x: f32, y: f32, half_side: f32) -> f32 {
    // equilateral, apex towards the top of the image (image y grows downwards)
    let k = 3f32.sqrt();
    let mut px = x.abs() - half_side;
    let mut py = -y + half_side / k;
    if px + k * py > 0.0 {
        let (ox, oy) = (px, py);
        px = (ox - k * oy) / 2.0;
        py = (-k * ox - oy) / 2.0;
    }
    px -= px.clamp(-2.0 * half_side, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

/// Signed distance in pixels, negative inside.
fn signed_distance(shape: Shape, x: f32, y: f32, r: f32) -> f32 {
    match shape {
        Shape::Circle => (x * x + y * y).sqrt() - r,
        Shape::Square => sd_box(x, y, r * 0.8, r * 0.8),
        Shape::Triangle => sd_triangle(x, y, r * 1.1),
        Shape::Diamond => (x.abs() + y.abs() - r * 1.05) / std::f32::consts::SQRT_2,
        Shape::Cross => sd_box(x, y, r, r * 0.4).min(sd_box(x, y, r * 0.4, r)),
    }
}

const STRIPE: f32 = 2.0;

pub fn render_glyph<R: Rng + ?Sized>(class: GlyphClass, style: &GlyphStyle, rng: &mut R) -> Image {
    let n = style.size;
    let c = n as f32 / 2.0 - 0.5;
    let cx = c + rng.gen_range(-style.jitter..=style.jitter);
    let cy = c + rng.gen_range(-style.jitter..=style.jitter);
    let r = rng.gen_range(style.min_radius..=style.max_radius);
    let theta = rng.gen_range(-style.max_rotation..=style.max_rotation).to_radians();
    let (sin, cos) = theta.sin_cos();
    let ink = rng.gen_range(0.7f32..=1.0);
    let paper = rng.gen_range(0.0f32..=0.2);
    let stroke = style.stroke * rng.gen_range(0.8f32..=1.3);

    let mut img = Image::filled(n, n, 1, paper);
    for yy in 0..n {
        for xx in 0..n {
            let dx = xx as f32 - cx;
            let dy = yy as f32 - cy;
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            let sd = signed_distance(class.shape, lx, ly, r);
            let edge = match class.style {
                Style::Filled => sd,
                Style::Outline | Style::Striped => sd.abs() - stroke / 2.0,
            };
            let mut cover = (0.5 - edge).clamp(0.0, 1.0);
            if class.style == Style::Striped && sd < 0.0 && (ly + r).rem_euclid(2.0 * STRIPE) < STRIPE {
                cover = 1.0;
            }
            img.set(yy, xx, 0, paper + (ink - paper) * cover);
        }
    }
    for _ in 0..style.clutter {
        let sx = rng.gen_range(0..n);
        let sy = rng.gen_range(0..n);
        let v = rng.gen_range(0.3f32..=0.9);
        for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if sy + oy < n && sx + ox < n {
                img.set(sy + oy, sx + ox, 0, v);
            }
        }
    }
    if style.noise > 0.0 {
        let normal = Normal::new(0.0f32, style.noise).expect("positive std");
        for p in &mut img.pixels {
            *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// `per_class` images of each class, interleaved class by class.
pub fn glyph_dataset(classes: &[GlyphClass], per_class: usize, style: &GlyphStyle, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * classes.len());
    let mut labels = Vec::with_capacity(per_class * classes.len());
    for _ in 0..per_class {
        for (label, &class) in classes.iter().enumerate() {
            images.push(render_glyph(class, style, &mut rng));
            labels.push(label);
        }
    }
    Dataset::new(images, labels, classes.iter().map(GlyphClass::name).collect())
}

/// The four datasets a desk-scale experiment needs.
#[derive(Clone, Debug)]
pub struct GlyphTask {
    pub aux_train: Dataset,
    pub aux_test: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphTaskSpec {
    pub aux_train_per_class: usize,
    pub aux_test_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub style: GlyphStyle,
    pub seed: u64,
}

impl Default for GlyphTaskSpec {
    fn default() -> Self {
        GlyphTaskSpec {
            aux_train_per_class: 300,
            aux_test_per_class: 50,
            train_per_class: 400,
            test_per_class: 100,
            style: GlyphStyle::default(),
            seed: 2024,
        }
    }
}

pub fn glyph_task(spec: &GlyphTaskSpec) -> Result<GlyphTask> {
    let (aux_train, aux_test) = auxiliary_datasets(spec)?;
    let (train, test) = downstream_datasets(spec)?;
    Ok(GlyphTask {
        aux_train,
        aux_test,
        train,
        test,
    })
}

/// The auxiliary half of [`glyph_task`].
pub fn auxiliary_datasets(spec: &GlyphTaskSpec) -> Result<(Dataset, Dataset)> {
    let aux = auxiliary_classes();
    let s = spec.seed.wrapping_mul(4);
    Ok((
        glyph_dataset(&aux, spec.aux_train_per_class, &spec.style, s)?,
        glyph_dataset(&aux, spec.aux_test_per_class, &spec.style, s + 1)?,
    ))
}

/// The downstream half of [`glyph_task`].
pub fn downstream_datasets(spec: &GlyphTaskSpec) -> Result<(Dataset, Dataset)> {
    let down = downstream_classes();
    let s = spec.seed.wrapping_mul(4);
    Ok((
        glyph_dataset(&down, spec.train_per_class, &spec.style, s + 2)?,
        glyph_dataset(&down, spec.test_per_class, &spec.style, s + 3)?,
    ))
}
