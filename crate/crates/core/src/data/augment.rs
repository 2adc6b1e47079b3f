//! Photometric and occlusion augmentation of stereo pairs.

use rand::Rng;

use super::synth::StereoPair;
use crate::tensor::Tensor;

/// Brightness, contrast and saturation factors for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter { brightness: 1.0, contrast: 1.0, saturation: 1.0 };

    /// Each factor uniform in `[1 - strength, 1 + strength]`.
    pub fn random<R: Rng + ?Sized>(strength: f32, rng: &mut R) -> Self {
        if strength <= 0.0 {
            return Self::IDENTITY;
        }
        let mut f = || 1.0 + rng.gen_range(-strength..=strength);
        ColorJitter { brightness: f(), contrast: f(), saturation: f() }
    }

    /// Applies the factors to a `[3, H, W]` image and clamps to `[0, 1]`.
    /// Factors of exactly 1 leave the image bit-unchanged.
    pub fn apply(&self, image: &mut Tensor) {
        let plane = image.shape()[1] * image.shape()[2];
        let data = image.data_mut();
        let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
        for v in data.iter_mut() {
            *v += (self.contrast - 1.0) * (*v - mean);
            *v *= self.brightness;
        }
        for p in 0..plane {
            let gray = (data[p] + data[plane + p] + data[2 * plane + p]) / 3.0;
            for c in 0..3 {
                let v = &mut data[c * plane + p];
                *v += (self.saturation - 1.0) * (*v - gray);
            }
        }
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Jitters both images, with shared factors when `symmetric`. Returns the
/// factors used for the left and right image.
pub fn chromatic_augment<R: Rng + ?Sized>(pair: &mut StereoPair, symmetric: bool, strength: f32, rng: &mut R) -> (ColorJitter, ColorJitter) {
    let left = ColorJitter::random(strength, rng);
    let right = if symmetric { left } else { ColorJitter::random(strength, rng) };
    left.apply(&mut pair.left);
    right.apply(&mut pair.right);
    (left, right)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

/// Replaces one rectangle of the right image, with sides in
/// `min_side..=max_side`, by a copy of another rectangle of the same image.
/// Returns the overwritten rectangle, or `None` if the image is too small.
pub fn occlusion_augment<R: Rng + ?Sized>(pair: &mut StereoPair, min_side: usize, max_side: usize, rng: &mut R) -> Option<Rect> {
    let (h, w) = (pair.height(), pair.width());
    let max_side = max_side.min(h).min(w);
    if min_side == 0 || min_side > max_side {
        return None;
    }
    let ph = rng.gen_range(min_side..=max_side);
    let pw = rng.gen_range(min_side..=max_side);
    let dst = Rect { top: rng.gen_range(0..=h - ph), left: rng.gen_range(0..=w - pw), height: ph, width: pw };
    let (sy, sx) = loop {
        let sy = rng.gen_range(0..=h - ph);
        let sx = rng.gen_range(0..=w - pw);
        if (sy, sx) != (dst.top, dst.left) || (h == ph && w == pw) {
            break (sy, sx);
        }
    };
    let src = pair.right.clone();
    let data = pair.right.data_mut();
    for c in 0..3 {
        for y in 0..ph {
            for x in 0..pw {
                data[(c * h + dst.top + y) * w + dst.left + x] = src.data()[(c * h + sy + y) * w + sx + x];
            }
        }
    }
    Some(dst)
}
