//! Shared-weight feature extractor: a stride-3 stem followed by a UNet whose
//! output sits at one third of the input resolution.

use crate::blocks::{Phi, PhiUp};
use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Builder, Session};
use crate::tensor::{ConvGeometry, Var};

/// Three 3×3 conv blocks with strides 1, 3, 1. The stride-3 conv is unpadded
/// so that the output extent is exactly `floor(n / 3)` for every `n`.
#[derive(Clone, Debug)]
pub struct Stem {
    pub layers: [Phi; 3],
}

impl Stem {
    pub fn new(b: &mut Builder<'_>, in_ch: usize, widths: [usize; 3]) -> Result<Self> {
        let same = ConvGeometry::planar(3, 1, 1);
        let down = ConvGeometry { kernel: [1, 3, 3], stride: [1, 3, 3], dilation: [1; 3], padding: [0; 3] };
        let l0 = Phi::with_geometry(&mut b.scope("0"), true, in_ch, widths[0], same)?;
        let l1 = Phi::with_geometry(&mut b.scope("1"), true, widths[0], widths[1], down)?;
        let l2 = Phi::with_geometry(&mut b.scope("2"), true, widths[1], widths[2], same)?;
        Ok(Stem { layers: [l0, l1, l2] })
    }

    pub fn out_channels(&self) -> usize {
        self.layers[2].conv.out_ch
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, label: &str) -> Result<Var> {
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(s, y)?;
            s.record(format!("{label}.{i}"), y);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub stem: [usize; 3],
    /// Widths of the UNet encoder levels below the stem.
    pub encoder: Vec<usize>,
    /// Width of every decoder level, including the output.
    pub decoder: usize,
}

impl ExtractorConfig {
    pub fn standard() -> Self {
        ExtractorConfig { stem: [16, 32, 32], encoder: vec![32, 64, 128], decoder: 128 }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(arg_err!("extractor needs at least one encoder level"));
        }
        if self.stem.contains(&0) || self.encoder.contains(&0) {
            return Err(arg_err!("extractor widths must be positive"));
        }
        // The upsampled path fills whatever the skip does not, so the
        // decoder must be wider than every skip it absorbs.
        let skips = std::iter::once(self.stem[2]).chain(self.encoder[..self.encoder.len() - 1].iter().copied());
        for skip in skips {
            if self.decoder <= skip {
                return Err(arg_err!("decoder width {} must exceed skip width {skip}", self.decoder));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Phi,
    conv: Phi,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: PhiUp,
    merge: Phi,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    stem: Stem,
    encoder: Vec<EncoderLevel>,
    /// Ordered from the deepest level upwards.
    decoder: Vec<DecoderLevel>,
}

/// Spatial extent after `levels` stride-2, padding-1 convolutions.
pub fn halved(mut n: usize, levels: usize) -> usize {
    for _ in 0..levels {
        n = n.div_ceil(2);
    }
    n
}

impl Extractor {
    pub fn new(b: &mut Builder<'_>, config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(&mut b.scope("stem"), 3, config.stem)?;
        let mut encoder = Vec::new();
        let mut prev = config.stem[2];
        for (i, &w) in config.encoder.iter().enumerate() {
            let mut lb = b.scope(&format!("enc{}", i + 1));
            let down = Phi::planar(&mut lb.scope("down"), prev, w, 3, 2)?;
            let conv = Phi::planar(&mut lb.scope("conv"), w, w, 3, 1)?;
            encoder.push(EncoderLevel { down, conv });
            prev = w;
        }
        let mut decoder = Vec::new();
        let mut below = *config.encoder.last().expect("validated");
        for level in (0..config.encoder.len()).rev() {
            let skip = if level == 0 { config.stem[2] } else { config.encoder[level - 1] };
            let mut lb = b.scope(&format!("dec{level}"));
            let up = PhiUp::new(&mut lb.scope("up"), true, below, config.decoder - skip, [1, 2, 2])?;
            let merge = Phi::planar(&mut lb.scope("merge"), config.decoder, config.decoder, 3, 1)?;
            decoder.push(DecoderLevel { up, merge });
            below = config.decoder;
        }
        Ok(Extractor { config, stem, encoder, decoder })
    }

    pub fn out_channels(&self) -> usize {
        self.config.decoder
    }

    /// Smallest accepted image side: the one-third map must survive every
    /// encoder halving with at least two pixels.
    pub fn min_side(&self) -> usize {
        3 * (1 << self.config.depth())
    }

    /// `[N, 3, H, W] -> [N, c_f, H/3, W/3]` (floored).
    pub fn forward(&self, s: &mut Session<'_>, image: Var, label: &str) -> Result<Var> {
        let shape = s.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(shape_err!("extractor expects [N, 3, H, W], got {shape:?}"));
        }
        let min = self.min_side();
        if shape[2] < min || shape[3] < min {
            return Err(arg_err!("image {}x{} is below the minimum {min}x{min}", shape[2], shape[3]));
        }
        let x = self.stem.forward(s, image, &format!("{label}.stem"))?;
        let mut skips = vec![x];
        let mut y = x;
        for (i, level) in self.encoder.iter().enumerate() {
            y = level.down.forward(s, y)?;
            y = level.conv.forward(s, y)?;
            s.record(format!("{label}.enc{}", i + 1), y);
            skips.push(y);
        }
        for (k, level) in self.decoder.iter().enumerate() {
            let lvl = self.encoder.len() - 1 - k;
            let skip = skips[lvl];
            let ss = s.graph.shape(skip).to_vec();
            let up = level.up.forward(s, y, [1, ss[2], ss[3]])?;
            let cat = s.graph.concat(&[up, skip], 1)?;
            y = level.merge.forward(s, cat)?;
            s.record(format!("{label}.dec{lvl}"), y);
        }
        Ok(y)
    }
}
