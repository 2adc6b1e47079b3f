//! Layered synthetic stereo pairs with exact integer ground truth.
//!
//! A scene is a background plane plus rectangles and ellipses, each at a
//! constant integer disparity; nearer layers (larger disparity) cover farther
//! ones. Every layer carries its own random-dot texture defined on a canvas
//! `W + D` wide, so the right view can reveal texture that the left view
//! never shows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::head::DisparityMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    /// `[3, H, W]` in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// Left-view disparities; invalid pixels hold `+inf`.
    pub gt: DisparityMap,
}

impl StereoPair {
    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub max_disparity: usize,
    /// Inclusive range of foreground shape counts.
    pub shapes: (usize, usize),
    /// Disparities to draw from; all must be below `max_disparity`. Empty
    /// means every integer in `0..max_disparity`.
    pub disparities: Vec<u32>,
    /// Per-pixel texture noise amplitude around each layer's base colour.
    pub noise: f32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn desk(seed: u64) -> Self {
        SynthConfig { height: 64, width: 64, max_disparity: 16, shapes: (2, 5), disparities: Vec::new(), noise: 0.35, seed }
    }

    fn disparity_set(&self) -> Vec<u32> {
        if self.disparities.is_empty() { (0..self.max_disparity as u32).collect() } else { self.disparities.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.max_disparity == 0 {
            return Err(arg_err!("image size and max disparity must be positive"));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(arg_err!("shape range {:?} is empty", self.shapes));
        }
        if let Some(&d) = self.disparities.iter().find(|&&d| d as usize >= self.max_disparity) {
            return Err(arg_err!("disparity {d} is not below the maximum {}", self.max_disparity));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(arg_err!("noise amplitude must lie in [0, 1], got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Half-open pixel box `[top, bottom) × [left, right)` in left-view coordinates.
    Rect { top: i32, left: i32, bottom: i32, right: i32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    pub fn contains(&self, row: i32, col: i32) -> bool {
        match *self {
            Shape::Rect { top, left, bottom, right } => row >= top && row < bottom && col >= left && col < right,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (row as f32 - cy) / ry;
                let dx = (col as f32 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    pub disparity: u32,
}

/// Background disparity plus foreground layers, drawn in order (later on top).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: u32,
    pub layers: Vec<Layer>,
}

impl Scene {
    /// Layers sorted so that nearer (larger disparity) ones are drawn last,
    /// which makes the drawing order a valid depth order.
    pub fn random<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let set = cfg.disparity_set();
        let (h, w) = (cfg.height as f32, cfg.width as f32);
        let count = rng.gen_range(cfg.shapes.0..=cfg.shapes.1);
        let mut sorted = set.clone();
        sorted.sort_unstable();
        // The background is the farthest surface, so foreground layers never
        // sit behind it.
        let background = sorted[rng.gen_range(0..sorted.len().div_ceil(2))];
        let front: Vec<u32> = sorted.into_iter().filter(|&d| d >= background).collect();
        let mut layers: Vec<Layer> = (0..count)
            .map(|_| {
                let disparity = *front.choose(rng).expect("contains the background");
                let sh = rng.gen_range(h / 6.0..h / 2.0);
                let sw = rng.gen_range(w / 6.0..w / 2.0);
                let cy = rng.gen_range(0.0..h);
                let cx = rng.gen_range(0.0..w);
                let shape = if rng.gen_bool(0.5) {
                    Shape::Rect {
                        top: (cy - sh / 2.0) as i32,
                        left: (cx - sw / 2.0) as i32,
                        bottom: (cy + sh / 2.0) as i32,
                        right: (cx + sw / 2.0) as i32,
                    }
                } else {
                    Shape::Ellipse { cy, cx, ry: sh / 2.0, rx: sw / 2.0 }
                };
                Layer { shape, disparity }
            })
            .collect();
        layers.sort_by_key(|l| l.disparity);
        Scene { background, layers }
    }

    /// Topmost layer at a left-view pixel; 0 is the background, `k + 1` is `layers[k]`.
    fn top(&self, row: i32, col: i32) -> usize {
        self.layers.iter().rposition(|l| l.shape.contains(row, col)).map_or(0, |k| k + 1)
    }

    /// Topmost layer seen by the right view at `(row, col)`: layer `k` covers
    /// right pixel `col` when its shape contains `col + disparity`.
    fn top_right(&self, row: i32, col: i32) -> usize {
        self.layers
            .iter()
            .rposition(|l| l.shape.contains(row, col + l.disparity as i32))
            .map_or(0, |k| k + 1)
    }

    fn disparity(&self, layer: usize) -> u32 {
        if layer == 0 { self.background } else { self.layers[layer - 1].disparity }
    }
}

/// Per-layer texture on a `[3, H, W + D]` canvas.
struct Texture {
    width: usize,
    data: Vec<f32>,
}

impl Texture {
    fn random<R: Rng + ?Sized>(height: usize, width: usize, noise: f32, rng: &mut R) -> Self {
        let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let mut data = vec![0.0; 3 * height * width];
        for (c, chunk) in data.chunks_mut(height * width).enumerate() {
            for v in chunk.iter_mut() {
                *v = (base[c] + noise * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0);
            }
        }
        Texture { width, data }
    }

    fn at(&self, c: usize, height: usize, row: usize, x: usize) -> f32 {
        self.data[(c * height + row) * self.width + x]
    }
}

/// Renders a scene with textures drawn from `rng`.
pub fn render_scene<R: Rng + ?Sized>(scene: &Scene, cfg: &SynthConfig, rng: &mut R) -> Result<StereoPair> {
    cfg.validate()?;
    let max = cfg.max_disparity as u32;
    if scene.background >= max || scene.layers.iter().any(|l| l.disparity >= max) {
        return Err(arg_err!("scene uses a disparity of at least {max}"));
    }
    let (h, w) = (cfg.height, cfg.width);
    let canvas = w + cfg.max_disparity;
    let textures: Vec<Texture> = (0..=scene.layers.len()).map(|_| Texture::random(h, canvas, cfg.noise, rng)).collect();
    let mut left = vec![0.0f32; 3 * h * w];
    let mut right = vec![0.0f32; 3 * h * w];
    let mut gt = vec![f32::INFINITY; h * w];
    let mut valid = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = scene.top(i as i32, j as i32);
            let d = scene.disparity(k) as usize;
            for c in 0..3 {
                left[(c * h + i) * w + j] = textures[k].at(c, h, i, j);
            }
            // The right view shows layer `kr` at canvas column `j + d_kr`.
            let kr = scene.top_right(i as i32, j as i32);
            let dr = scene.disparity(kr) as usize;
            for c in 0..3 {
                right[(c * h + i) * w + j] = textures[kr].at(c, h, i, j + dr);
            }
            if j >= d && scene.top_right(i as i32, (j - d) as i32) == k {
                gt[i * w + j] = d as f32;
                valid[i * w + j] = true;
            }
        }
    }
    Ok(StereoPair {
        left: Tensor::new(&[3, h, w], left)?,
        right: Tensor::new(&[3, h, w], right)?,
        gt: DisparityMap::new(w, h, gt, valid)?,
    })
}

/// A random scene and its rendering, fully determined by `cfg.seed`.
pub fn generate_stereogram(cfg: &SynthConfig) -> Result<StereoPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = Scene::random(cfg, &mut rng);
    render_scene(&scene, cfg, &mut rng)
}
