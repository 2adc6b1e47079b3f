//! Initial cost volume by group-wise correlation, and the independent stem
//! that brings the left image to the volume's resolution.

use crate::error::{arg_err, shape_err, Result};
use crate::extractor::Stem;
use crate::nn::{Builder, Session};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GwcConfig {
    /// Feature channels.
    pub channels: usize,
    /// Number of correlation groups.
    pub groups: usize,
    /// Maximum disparity at full resolution.
    pub max_disparity: usize,
}

impl GwcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels == 0 || self.channels % self.groups != 0 {
            return Err(arg_err!("{} feature channels cannot be split into {} groups", self.channels, self.groups));
        }
        if self.max_disparity < 3 {
            return Err(arg_err!("max disparity must be at least 3, got {}", self.max_disparity));
        }
        Ok(())
    }

    /// Disparity bins at one third resolution.
    pub fn bins(&self) -> usize {
        self.max_disparity / 3
    }
}

/// `[N, C, h, w]` pair to `[N, groups, D/3, h, w]` where entry `(g, d, i, j)`
/// is the mean product of group `g` of the left features at `(i, j)` and the
/// right features at `(i, j - d)`, and zero when `j < d`.
pub fn build_cost_volume(s: &mut Session<'_>, left: Var, right: Var, cfg: &GwcConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = s.graph.shape(left);
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(shape_err!("cost volume expects [N, {}, h, w] features, got {shape:?}", cfg.channels));
    }
    s.graph.group_correlation(left, right, cfg.groups, cfg.bins())
}

/// Image-side input of the aggregation: a stem like the extractor's, with
/// its own weights, mapping `[N, 3, H, W]` to `[N, c0, H/3, W/3]`.
#[derive(Clone, Debug)]
pub struct ImageStem {
    pub stem: Stem,
}

impl ImageStem {
    pub fn new(b: &mut Builder<'_>, c0: usize) -> Result<Self> {
        Ok(ImageStem { stem: Stem::new(b, 3, [16, c0, c0])? })
    }

    pub fn out_channels(&self) -> usize {
        self.stem.out_channels()
    }

    pub fn forward(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        let shape = s.graph.shape(image);
        if shape.len() != 4 || shape[1] != 3 || shape[2] < 3 || shape[3] < 3 {
            return Err(shape_err!("image stem expects [N, 3, H>=3, W>=3], got {shape:?}"));
        }
        self.stem.forward(s, image, "image_stem")
    }
}
