//! Seeded weak and strong augmentation.
//!
//! Each view draws from its own generator seeded by
//! [`derive_seed`]`(global, sample, epoch, view)`, so a view is a pure
//! function of those four numbers and the source image.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Translate,
    Rotate,
    Invert,
    Solarize,
    Contrast,
    Brightness,
    Sharpen,
    Posterize,
}

impl AugOp {
    pub const ALL: [AugOp; 8] = [
        AugOp::Translate,
        AugOp::Rotate,
        AugOp::Invert,
        AugOp::Solarize,
        AugOp::Contrast,
        AugOp::Brightness,
        AugOp::Sharpen,
        AugOp::Posterize,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Magnitude ranges for the strong operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Magnitudes {
    /// Maximum shift as a fraction of the side length.
    pub translate: f32,
    /// Maximum rotation in degrees, either direction.
    pub rotate: f32,
    /// Solarize threshold range.
    pub solarize: (f32, f32),
    /// Contrast factor range.
    pub contrast: (f32, f32),
    /// Brightness factor range.
    pub brightness: (f32, f32),
    /// Sharpness factor range (0 = blurred, 1 = identity).
    pub sharpen: (f32, f32),
    /// Bits kept by posterize.
    pub posterize: (u32, u32),
}

impl Default for Magnitudes {
    fn default() -> Self {
        Magnitudes {
            translate: 0.25,
            rotate: 30.0,
            solarize: (0.4, 1.0),
            contrast: (0.3, 1.7),
            brightness: (0.3, 1.7),
            sharpen: (0.0, 2.0),
            posterize: (2, 6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Operations sampled without replacement per strong view.
    pub ops: Vec<AugOp>,
    pub ops_per_view: usize,
    pub magnitudes: Magnitudes,
    /// Side of the square cutout hole; 0 disables it.
    pub cutout: usize,
    /// Maximum shift of the weak policy as a fraction of the side length.
    pub weak_translate: f32,
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Weak,
            ops: Vec::new(),
            ops_per_view: 0,
            magnitudes: Magnitudes::default(),
            cutout: 0,
            weak_translate: 0.125,
        }
    }

    pub fn strong() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Strong,
            ops: AugOp::ALL.to_vec(),
            ops_per_view: 2,
            magnitudes: Magnitudes::default(),
            cutout: 10,
            weak_translate: 0.125,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Image {
        match self.kind {
            AugmentKind::Weak => {
                let flip = rng.gen_bool(0.5);
                let (dy, dx) = random_shift(image, self.weak_translate, rng);
                flip_and_shift(image, flip, dy, dx)
            }
            AugmentKind::Strong => {
                let mut out = image.clone();
                let n = self.ops_per_view.min(self.ops.len());
                for i in sample(rng, self.ops.len(), n) {
                    out = apply_op(self.ops[i], &out, &self.magnitudes, rng);
                }
                if self.cutout > 0 {
                    let side = self.cutout.min(out.height).min(out.width);
                    let y0 = rng.gen_range(0..=out.height - side);
                    let x0 = rng.gen_range(0..=out.width - side);
                    cutout(&mut out, y0, x0, side);
                }
                clip(&mut out);
                out
            }
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, sample_index: u64, epoch: u64, view: u64) -> u64 {
    [sample_index, epoch, view].iter().fold(mix(global), |h, &v| mix(h ^ v))
}

pub fn view_rng(global: u64, sample_index: u64, epoch: u64, view: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, sample_index, epoch, view))
}

pub fn weak_augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    AugmentPolicy::weak().apply(image, rng)
}

pub fn strong_augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    AugmentPolicy::strong().apply(image, rng)
}

fn random_shift<R: Rng + ?Sized>(image: &Image, frac: f32, rng: &mut R) -> (i64, i64) {
    let my = (frac * image.height as f32).floor() as i64;
    let mx = (frac * image.width as f32).floor() as i64;
    (rng.gen_range(-my..=my), rng.gen_range(-mx..=mx))
}

/// Optional horizontal flip followed by `out[y][x] = in[y - dy][x - dx]`, zero
/// where the source falls outside the image.
pub fn flip_and_shift(image: &Image, flip: bool, dy: i64, dx: i64) -> Image {
    let (h, w, c) = (image.height as i64, image.width as i64, image.channels);
    let mut out = Image::filled(image.height, image.width, c, 0.0);
    for y in 0..h {
        let sy = y - dy;
        if !(0..h).contains(&sy) {
            continue;
        }
        for x in 0..w {
            let mut sx = x - dx;
            if !(0..w).contains(&sx) {
                continue;
            }
            if flip {
                sx = w - 1 - sx;
            }
            for ch in 0..c {
                out.set(y as usize, x as usize, ch, image.get(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

/// Nearest-neighbour rotation about the image centre, zero fill.
pub fn rotate(image: &Image, degrees: f32) -> Image {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (image.height as f32 - 1.0) / 2.0;
    let cx = (image.width as f32 - 1.0) / 2.0;
    let mut out = Image::filled(image.height, image.width, image.channels, 0.0);
    for y in 0..image.height {
        for x in 0..image.width {
            let (ry, rx) = (y as f32 - cy, x as f32 - cx);
            let sx = (cos * rx + sin * ry + cx).round();
            let sy = (-sin * rx + cos * ry + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= image.width as f32 || sy >= image.height as f32 {
                continue;
            }
            for ch in 0..image.channels {
                out.set(y, x, ch, image.get(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

pub fn cutout(image: &mut Image, y0: usize, x0: usize, side: usize) {
    for y in y0..(y0 + side).min(image.height) {
        for x in x0..(x0 + side).min(image.width) {
            for ch in 0..image.channels {
                image.set(y, x, ch, 0.5);
            }
        }
    }
}

fn clip(image: &mut Image) {
    for p in &mut image.pixels {
        *p = p.clamp(0.0, 1.0);
    }
}

fn box_blur(image: &Image) -> Image {
    let mut out = image.clone();
    let (h, w) = (image.height as i64, image.width as i64);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..image.channels {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in (y - 1).max(0)..=(y + 1).min(h - 1) {
                    for xx in (x - 1).max(0)..=(x + 1).min(w - 1) {
                        acc += image.get(yy as usize, xx as usize, ch);
                        n += 1.0;
                    }
                }
                out.set(y as usize, x as usize, ch, acc / n);
            }
        }
    }
    out
}

fn map_pixels(image: &Image, f: impl Fn(f32) -> f32) -> Image {
    let mut out = image.clone();
    for p in &mut out.pixels {
        *p = f(*p).clamp(0.0, 1.0);
    }
    out
}

fn apply_op<R: Rng + ?Sized>(op: AugOp, image: &Image, m: &Magnitudes, rng: &mut R) -> Image {
    match op {
        AugOp::Translate => {
            let (dy, dx) = random_shift(image, m.translate, rng);
            flip_and_shift(image, false, dy, dx)
        }
        AugOp::Rotate => rotate(image, rng.gen_range(-m.rotate..=m.rotate)),
        AugOp::Invert => map_pixels(image, |v| 1.0 - v),
        AugOp::Solarize => {
            let t = rng.gen_range(m.solarize.0..=m.solarize.1);
            map_pixels(image, |v| if v >= t { 1.0 - v } else { v })
        }
        AugOp::Contrast => {
            let f = rng.gen_range(m.contrast.0..=m.contrast.1);
            let mean = image.pixels.iter().sum::<f32>() / image.pixels.len() as f32;
            map_pixels(image, |v| mean + f * (v - mean))
        }
        AugOp::Brightness => {
            let f = rng.gen_range(m.brightness.0..=m.brightness.1);
            map_pixels(image, |v| v * f)
        }
        AugOp::Sharpen => {
            let f = rng.gen_range(m.sharpen.0..=m.sharpen.1);
            let blur = box_blur(image);
            let mut out = image.clone();
            for (o, b) in out.pixels.iter_mut().zip(&blur.pixels) {
                *o = (b + f * (*o - b)).clamp(0.0, 1.0);
            }
            out
        }
        AugOp::Posterize => {
            let bits = rng.gen_range(m.posterize.0..=m.posterize.1);
            let levels = ((1u32 << bits) - 1) as f32;
            map_pixels(image, |v| (v * levels).floor() / levels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(side: usize) -> Image {
        let px = (0..side * side).map(|i| (i % 251) as f32 / 251.0 + 0.001).collect();
        Image::new(side, side, 1, px).unwrap()
    }

    #[test]
    fn no_flip_zero_shift_is_identity() {
        let im = ramp(32);
        assert_eq!(flip_and_shift(&im, false, 0, 0), im);
    }

    #[test]
    fn shift_indexing() {
        let im = ramp(32);
        let out = flip_and_shift(&im, false, 2, -1);
        for y in 0..32i64 {
            for x in 0..32i64 {
                let (sy, sx) = (y - 2, x + 1);
                let expect = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                    im.get(sy as usize, sx as usize, 0)
                } else {
                    0.0
                };
                assert_eq!(out.get(y as usize, x as usize, 0), expect);
            }
        }
    }

    #[test]
    fn same_seed_same_view() {
        let im = ramp(32);
        let a = weak_augment(&im, &mut view_rng(1, 2, 3, 0));
        let b = weak_augment(&im, &mut view_rng(1, 2, 3, 0));
        assert_eq!(a, b);
        let a = strong_augment(&im, &mut view_rng(1, 2, 3, 1));
        let b = strong_augment(&im, &mut view_rng(1, 2, 3, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn strong_views_differ() {
        let im = ramp(32);
        let mut distinct = 0;
        for s in 0..100 {
            let a = strong_augment(&im, &mut view_rng(5, s, 0, 0));
            let b = strong_augment(&im, &mut view_rng(5, s, 0, 1));
            if a != b {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct}");
    }

    #[test]
    fn cutout_hole() {
        let mut im = Image::filled(32, 32, 1, 0.9);
        cutout(&mut im, 3, 7, 10);
        let gray = im.pixels.iter().filter(|&&v| v == 0.5).count();
        assert_eq!(gray, 100);
        for y in 3..13 {
            for x in 7..17 {
                assert_eq!(im.get(y, x, 0), 0.5);
            }
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let im = ramp(16);
        assert_eq!(rotate(&im, 0.0), im);
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(seed in any::<u64>(), px in proptest::collection::vec(0.0f32..=1.0, 64)) {
            let im = Image::new(8, 8, 1, px).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(strong_augment(&im, &mut rng).in_unit_range());
            prop_assert!(weak_augment(&im, &mut rng).in_unit_range());
        }

        #[test]
        fn translation_keeps_surviving_pixels(dy in -4i64..=4, dx in -4i64..=4) {
            let im = ramp(16);
            let out = flip_and_shift(&im, false, dy, dx);
            let mut kept: Vec<u32> = out.pixels.iter().filter(|&&v| v != 0.0).map(|v| v.to_bits()).collect();
            let mut expect = Vec::new();
            for y in 0..16i64 {
                for x in 0..16i64 {
                    if (0..16).contains(&(y + dy)) && (0..16).contains(&(x + dx)) {
                        expect.push(im.get(y as usize, x as usize, 0).to_bits());
                    }
                }
            }
            kept.sort_unstable();
            expect.sort_unstable();
            prop_assert_eq!(kept, expect);
        }
    }
}
