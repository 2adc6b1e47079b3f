//! Coupled aggregation: a 2D UNet over image features runs alongside a 3D
//! UNet over the cost volume, and every 3D level absorbs the matching 2D
//! level through a [`Fusion`] site. Information flows from 2D to 3D only.

use crate::blocks::{ConvPair, Fusion, Phi, PhiUp, Psi};
use crate::error::{arg_err, shape_err, Result};
use crate::extractor::halved;
use crate::nn::{Builder, Conv, Session};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregationConfig {
    /// Number of downsampling levels.
    pub depth: usize,
    /// Channels of the incoming cost volume.
    pub volume_ch: usize,
    /// Width of each level, index 0 being full aggregation resolution. Level
    /// 0 is also the width of the image-side input and of the final decoder.
    pub widths: Vec<usize>,
    /// Stride of the 3D encoders along the disparity axis (1 or 2).
    pub disparity_stride: usize,
    pub atrous: bool,
    pub image_branch: bool,
    /// Use the reduced final decoder (plain convolutions around one sum).
    pub light_final: bool,
}

impl AggregationConfig {
    /// Widths `c0 * 2^i` for levels `0..=depth`.
    pub fn standard(depth: usize, c0: usize, volume_ch: usize) -> Self {
        AggregationConfig {
            depth,
            volume_ch,
            widths: (0..=depth).map(|i| c0 << i).collect(),
            disparity_stride: 2,
            atrous: true,
            image_branch: true,
            light_final: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(arg_err!("aggregation depth must be at least 1"));
        }
        if self.widths.len() != self.depth + 1 || self.widths.contains(&0) {
            return Err(arg_err!("need {} positive level widths, got {:?}", self.depth + 1, self.widths));
        }
        if self.volume_ch == 0 {
            return Err(arg_err!("cost volume must have channels"));
        }
        if !(1..=2).contains(&self.disparity_stride) {
            return Err(arg_err!("disparity stride must be 1 or 2, got {}", self.disparity_stride));
        }
        Ok(())
    }

    fn stride(&self) -> [usize; 3] {
        [self.disparity_stride, 2, 2]
    }

    /// `(d, h, w)` of 3D level `i` for an input volume of `(d0, h0, w0)`.
    pub fn level_extent(&self, base: [usize; 3], level: usize) -> [usize; 3] {
        let d = if self.disparity_stride == 2 { halved(base[0], level) } else { base[0] };
        [d, halved(base[1], level), halved(base[2], level)]
    }
}

#[derive(Clone, Debug)]
struct Enc2d {
    down: Phi,
    a: Phi,
    b: Phi,
}

#[derive(Clone, Debug)]
struct Dec2d {
    up: PhiUp,
    merge: Phi,
    a: Phi,
    b: Phi,
}

#[derive(Clone, Debug)]
struct Enc3d {
    down: Phi,
    fuse: Fusion,
    post: Phi,
}

#[derive(Clone, Debug)]
struct Dec3d {
    up: PhiUp,
    merge: Phi,
    fuse: Fusion,
}

#[derive(Clone, Debug)]
enum Final {
    Light { up: PhiUp, volume: Conv, image: Option<Conv>, psi: Psi, out: Conv },
    Full { up: PhiUp, merge: Phi, fuse: Fusion, out: Conv },
}

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub config: AggregationConfig,
    enc2d: Vec<Enc2d>,
    /// Ordered from level `depth - 1` down to 0.
    dec2d: Vec<Dec2d>,
    enc3d: Vec<Enc3d>,
    /// Ordered from level `depth - 1` down to 1.
    dec3d: Vec<Dec3d>,
    last: Final,
}

/// Aggregation results. The image-side maps are kept so callers can audit
/// that they never depend on the volume.
#[derive(Clone, Debug)]
pub struct AggregationOutput {
    /// `[N, d0, h0, w0]`.
    pub volume: Var,
    /// Image encoder outputs for levels `0..=depth` (level 0 is the input).
    pub image_encoder: Vec<Var>,
    /// Image decoder outputs for levels `0..=depth` (level `depth` is the
    /// deepest encoder output).
    pub image_decoder: Vec<Var>,
}

impl Aggregation {
    pub fn new(b: &mut Builder<'_>, config: AggregationConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths.clone();
        let depth = config.depth;
        let img = config.image_branch;
        let mut enc2d = Vec::new();
        let mut dec2d = Vec::new();
        if img {
            for i in 1..=depth {
                let mut lb = b.scope(&format!("enc2d{i}"));
                enc2d.push(Enc2d {
                    down: Phi::planar(&mut lb.scope("down"), w[i - 1], w[i], 3, 2)?,
                    a: Phi::planar(&mut lb.scope("a"), w[i], w[i], 3, 1)?,
                    b: Phi::planar(&mut lb.scope("b"), w[i], w[i], 3, 1)?,
                });
            }
            for i in (0..depth).rev() {
                let mut lb = b.scope(&format!("dec2d{i}"));
                dec2d.push(Dec2d {
                    up: PhiUp::new(&mut lb.scope("up"), true, w[i + 1], w[i], [1, 2, 2])?,
                    merge: Phi::planar(&mut lb.scope("merge"), 2 * w[i], w[i], 1, 1)?,
                    a: Phi::planar(&mut lb.scope("a"), w[i], w[i], 3, 1)?,
                    b: Phi::planar(&mut lb.scope("b"), w[i], w[i], 3, 1)?,
                });
            }
        }
        let image_ch = |i: usize| img.then_some(w[i]);
        let mut enc3d = Vec::new();
        for i in 1..=depth {
            let mut lb = b.scope(&format!("enc3d{i}"));
            let in_ch = if i == 1 { config.volume_ch } else { w[i - 1] };
            enc3d.push(Enc3d {
                down: Phi::volume(&mut lb.scope("down"), in_ch, w[i], 3, config.stride())?,
                fuse: Fusion::new(&mut lb.scope("fuse"), config.atrous, w[i], image_ch(i), w[i])?,
                post: Phi::volume(&mut lb.scope("post"), w[i], w[i], 3, [1; 3])?,
            });
        }
        let mut dec3d = Vec::new();
        for i in (1..depth).rev() {
            let mut lb = b.scope(&format!("dec3d{i}"));
            dec3d.push(Dec3d {
                up: PhiUp::new(&mut lb.scope("up"), false, w[i + 1], w[i], config.stride())?,
                merge: Phi::volume(&mut lb.scope("merge"), 2 * w[i], w[i], 1, [1; 3])?,
                fuse: Fusion::new(&mut lb.scope("fuse"), config.atrous, w[i], image_ch(i), w[i])?,
            });
        }
        let mut lb = b.scope("dec3d0");
        let up = PhiUp::new(&mut lb.scope("up"), false, w[1], w[0], config.stride())?;
        let cat = w[0] + config.volume_ch;
        let last = if config.light_final {
            Final::Light {
                up,
                volume: lb.conv3d("volume", cat, w[0], 3, [1; 3], [1; 3], true)?,
                image: if img { Some(lb.conv2d("image", w[0], w[0], 3, 1, 1, false)?) } else { None },
                psi: Psi::new(&mut lb.scope("psi"), w[0])?,
                out: lb.conv3d("out", w[0], 1, 3, [1; 3], [1; 3], true)?,
            }
        } else {
            Final::Full {
                up,
                merge: Phi::volume(&mut lb.scope("merge"), cat, w[0], 1, [1; 3])?,
                fuse: Fusion::new(&mut lb.scope("fuse"), config.atrous, w[0], image_ch(0), w[0])?,
                out: lb.conv3d("out", w[0], 1, 3, [1; 3], [1; 3], true)?,
            }
        };
        Ok(Aggregation { config, enc2d, dec2d, enc3d, dec3d, last })
    }

    /// `v0: [N, volume_ch, d0, h0, w0]`, `f0: [N, widths[0], h0, w0]` (absent
    /// without an image branch). Returns the single-channel output volume
    /// squeezed to `[N, d0, h0, w0]`.
    pub fn forward(&self, s: &mut Session<'_>, v0: Var, f0: Option<Var>) -> Result<AggregationOutput> {
        let cfg = &self.config;
        let vs = s.graph.shape(v0).to_vec();
        if vs.len() != 5 || vs[1] != cfg.volume_ch {
            return Err(shape_err!("aggregation expects [N, {}, d, h, w], got {vs:?}", cfg.volume_ch));
        }
        let base = [vs[2], vs[3], vs[4]];
        if cfg.image_branch {
            let f = f0.ok_or_else(|| arg_err!("aggregation with image branch needs f0"))?;
            let fs = s.graph.shape(f);
            if fs != [vs[0], cfg.widths[0], vs[3], vs[4]] {
                return Err(shape_err!("f0 {fs:?} does not match volume {vs:?}"));
            }
        } else if f0.is_some() {
            return Err(arg_err!("aggregation without image branch takes no f0"));
        }

        // Image pipeline: it never reads the volume.
        let mut fenc = Vec::new();
        let mut fdec = Vec::new();
        if let Some(f0) = f0 {
            fenc.push(f0);
            let mut y = f0;
            for (k, e) in self.enc2d.iter().enumerate() {
                y = e.down.forward(s, y)?;
                y = e.a.forward(s, y)?;
                y = e.b.forward(s, y)?;
                s.record(format!("aggregation.enc2d{}", k + 1), y);
                fenc.push(y);
            }
            fdec = vec![y; cfg.depth + 1];
            for (k, d) in self.dec2d.iter().enumerate() {
                let i = cfg.depth - 1 - k;
                let skip = fenc[i];
                let ss = s.graph.shape(skip).to_vec();
                let up = d.up.forward(s, y, [1, ss[2], ss[3]])?;
                let cat = s.graph.concat(&[up, skip], 1)?;
                y = d.merge.forward(s, cat)?;
                y = d.a.forward(s, y)?;
                y = d.b.forward(s, y)?;
                s.record(format!("aggregation.dec2d{i}"), y);
                fdec[i] = y;
            }
        }
        let image_at = |list: &Vec<Var>, i: usize| list.get(i).copied();

        let mut venc = vec![v0];
        let mut v = v0;
        for (k, e) in self.enc3d.iter().enumerate() {
            let i = k + 1;
            v = e.down.forward(s, v)?;
            v = e.fuse.forward(s, v, image_at(&fenc, i))?;
            v = e.post.forward(s, v)?;
            s.record(format!("aggregation.enc3d{i}"), v);
            venc.push(v);
        }
        for (k, d) in self.dec3d.iter().enumerate() {
            let i = cfg.depth - 1 - k;
            let skip = venc[i];
            let ext = cfg.level_extent(base, i);
            let up = d.up.forward(s, v, ext)?;
            let cat = s.graph.concat(&[up, skip], 1)?;
            v = d.merge.forward(s, cat)?;
            v = d.fuse.forward(s, v, image_at(&fdec, i))?;
            s.record(format!("aggregation.dec3d{i}"), v);
        }
        let out = match &self.last {
            Final::Light { up, volume, image, psi, out } => {
                let u = up.forward(s, v, base)?;
                let cat = s.graph.concat(&[u, v0], 1)?;
                let mut sum = volume.forward(s, cat)?;
                if let Some(image) = image {
                    let f = image.forward(s, fdec[0])?;
                    sum = s.graph.broadcast_sum(sum, f)?;
                }
                let y = psi.forward(s, sum)?;
                out.forward(s, y)?
            }
            Final::Full { up, merge, fuse, out } => {
                let u = up.forward(s, v, base)?;
                let cat = s.graph.concat(&[u, v0], 1)?;
                let y = merge.forward(s, cat)?;
                let y = fuse.forward(s, y, image_at(&fdec, 0))?;
                out.forward(s, y)?
            }
        };
        let out = s.graph.reshape(out, &[vs[0], base[0], base[1], base[2]])?;
        s.record("aggregation.out", out);
        Ok(AggregationOutput { volume: out, image_encoder: fenc, image_decoder: fdec })
    }

    /// Every 3D/2D convolution pair joined by a broadcast sum, labelled by site.
    pub fn conv_pairs(&self) -> Vec<(String, ConvPair<'_>)> {
        let mut pairs = Vec::new();
        for (k, e) in self.enc3d.iter().enumerate() {
            pairs.extend(e.fuse.conv_pairs().into_iter().map(|p| (format!("enc3d{}", k + 1), p)));
        }
        for (k, d) in self.dec3d.iter().enumerate() {
            let i = self.config.depth - 1 - k;
            pairs.extend(d.fuse.conv_pairs().into_iter().map(|p| (format!("dec3d{i}"), p)));
        }
        match &self.last {
            Final::Light { volume, image: Some(image), .. } => {
                pairs.push(("dec3d0".to_string(), ConvPair { volume, image }));
            }
            Final::Light { image: None, .. } => {}
            Final::Full { fuse, .. } => pairs.extend(fuse.conv_pairs().into_iter().map(|p| ("dec3d0".to_string(), p))),
        }
        pairs
    }
}
