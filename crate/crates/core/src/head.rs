//! Disparity regression from the aggregated volume, the training loss, and
//! the evaluation metrics.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Graph, Var};

/// Per-pixel disparities in pixels with a validity mask, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(shape_err!("disparity map {width}x{height} with {} values and {} mask entries", values.len(), valid.len()));
        }
        Ok(DisparityMap { width, height, values, valid })
    }

    /// All pixels valid.
    pub fn dense(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(width, height, values, vec![true; width * height])
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Upsamples `[N, d0, h0, w0]` trilinearly to `[N, D, H, W]` and takes the
/// soft argmax over the disparity axis, giving `[N, H, W]` disparities in
/// `[0, D - 1]`.
pub fn regress_disparity(g: &mut Graph, volume: Var, out: [usize; 3]) -> Result<Var> {
    let s = g.shape(volume);
    if s.len() != 4 {
        return Err(shape_err!("regression expects [N, d, h, w], got {s:?}"));
    }
    let full = g.trilinear_resize(volume, out)?;
    g.soft_argmax(full)
}

/// Mean smooth-L1 loss over pixels valid in the ground truth. `pred` is
/// `[N, H, W]`; `gt` holds one map per batch entry.
pub fn disparity_loss(g: &mut Graph, pred: Var, gt: &[&DisparityMap]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() != 3 || s[0] != gt.len() || gt.iter().any(|m| m.height != s[1] || m.width != s[2]) {
        return Err(shape_err!("prediction {s:?} does not match {} ground-truth maps", gt.len()));
    }
    let target: Vec<f32> = gt.iter().flat_map(|m| m.values.iter().map(|&v| if v.is_finite() { v } else { 0.0 })).collect();
    let mask: Vec<bool> = gt.iter().flat_map(|m| m.valid.iter().copied()).collect();
    g.smooth_l1(pred, &target, &mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// `(threshold, fraction of pixels with error strictly above it)`.
    pub bad: Vec<(f32, f64)>,
    pub pixels: usize,
}

impl MetricReport {
    pub fn bad(&self, threshold: f32) -> Option<f64> {
        self.bad.iter().find(|(t, _)| *t == threshold).map(|&(_, f)| f)
    }
}

/// EPE and Bad-n over pixels valid in both maps.
pub fn compute_metrics(pred: &DisparityMap, gt: &DisparityMap, thresholds: &[f32]) -> Result<MetricReport> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(shape_err!("prediction {}x{} vs ground truth {}x{}", pred.width, pred.height, gt.width, gt.height));
    }
    let errors: Vec<f64> = pred
        .values
        .iter()
        .zip(&gt.values)
        .zip(pred.valid.iter().zip(&gt.valid))
        .filter(|(_, (&a, &b))| a && b)
        .map(|((&p, &t), _)| (p as f64 - t as f64).abs())
        .collect();
    if errors.is_empty() {
        return Err(arg_err!("no valid pixels to evaluate"));
    }
    let n = errors.len() as f64;
    let epe = errors.iter().sum::<f64>() / n;
    let bad = thresholds
        .iter()
        .map(|&t| (t, errors.iter().filter(|&&e| e > t as f64).count() as f64 / n))
        .collect();
    Ok(MetricReport { epe, bad, pixels: errors.len() })
}
