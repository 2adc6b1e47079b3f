//! Composite layers: conv-BN-activation blocks, dilated branch blocks, and
//! the volume/image fusion operator, plus the concat-convolution check that
//! the fusion's broadcast sum is an exact re-parameterization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::nn::{BatchNorm, Builder, Conv, Deconv, Session, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};

/// Batch normalization followed by a leaky ReLU.
#[derive(Clone, Debug)]
pub struct Psi {
    pub bn: BatchNorm,
}

impl Psi {
    pub fn new(b: &mut Builder<'_>, channels: usize) -> Result<Self> {
        Ok(Psi { bn: b.batchnorm("bn", channels)? })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.bn.forward(s, x)?;
        s.graph.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Convolution (without bias, since batch normalization follows) and [`Psi`].
#[derive(Clone, Debug)]
pub struct Phi {
    pub conv: Conv,
    pub psi: Psi,
}

impl Phi {
    pub fn with_geometry(b: &mut Builder<'_>, planar: bool, in_ch: usize, out_ch: usize, geom: ConvGeometry) -> Result<Self> {
        let conv = b.conv("conv", planar, in_ch, out_ch, geom, false)?;
        Ok(Phi { conv, psi: Psi::new(b, out_ch)? })
    }

    pub fn planar(b: &mut Builder<'_>, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_geometry(b, true, in_ch, out_ch, ConvGeometry::planar(k, stride, 1))
    }

    pub fn volume(b: &mut Builder<'_>, in_ch: usize, out_ch: usize, k: usize, stride: [usize; 3]) -> Result<Self> {
        Self::with_geometry(b, false, in_ch, out_ch, ConvGeometry::same([k; 3], stride, [1; 3]))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.psi.forward(s, y)
    }
}

/// Upsampling counterpart of [`Phi`]: stride-2 transposed convolution and [`Psi`].
#[derive(Clone, Debug)]
pub struct PhiUp {
    pub deconv: Deconv,
    pub psi: Psi,
}

impl PhiUp {
    pub fn new(b: &mut Builder<'_>, planar: bool, in_ch: usize, out_ch: usize, stride: [usize; 3]) -> Result<Self> {
        let deconv = b.deconv("deconv", planar, in_ch, out_ch, stride, false)?;
        Ok(PhiUp { deconv, psi: Psi::new(b, out_ch)? })
    }

    /// `out` is `[D, H, W]`, with `D = 1` for planar blocks.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, out: [usize; 3]) -> Result<Var> {
        let y = self.deconv.forward(s, x, out)?;
        self.psi.forward(s, y)
    }
}

/// Three parallel 3×3 convolutions with dilations 1, 2 and 3 (on the spatial
/// axes only for volumes), concatenated along channels.
#[derive(Clone, Debug)]
pub struct AtrousBlock {
    pub branches: [Conv; 3],
}

impl AtrousBlock {
    pub fn new(b: &mut Builder<'_>, planar: bool, in_ch: usize, branch_ch: usize, bias: bool) -> Result<Self> {
        let mut make = |i: usize| {
            let d = i + 1;
            let geom = if planar {
                ConvGeometry::planar(3, 1, d)
            } else {
                ConvGeometry::same([3; 3], [1; 3], [1, d, d])
            };
            b.conv(&format!("branch{i}"), planar, in_ch, branch_ch, geom, bias)
        };
        Ok(AtrousBlock { branches: [make(0)?, make(1)?, make(2)?] })
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|c| c.out_ch).sum()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(3);
        for c in &self.branches {
            outs.push(c.forward(s, x)?);
        }
        s.graph.concat(&outs, 1)
    }
}

/// One side of a fusion site, applied before the broadcast sum.
#[derive(Clone, Debug)]
pub enum Branch {
    /// Dilated branches, [`Psi`], then a 1×1 projection to the fusion width.
    Atrous { gamma: AtrousBlock, psi: Psi, proj: Conv },
    /// A single 3×3 convolution to the fusion width.
    Plain(Conv),
}

impl Branch {
    /// Atrous branch widths are `ceil(width / 3)` each. The volume side
    /// carries the biases; image-side convolutions are bias-free so that a
    /// zero image contributes nothing.
    pub fn new(b: &mut Builder<'_>, planar: bool, atrous: bool, in_ch: usize, width: usize) -> Result<Self> {
        let bias = !planar;
        if atrous {
            let branch_ch = width.div_ceil(3);
            let gamma = AtrousBlock::new(&mut b.scope("gamma"), planar, in_ch, branch_ch, bias)?;
            let psi = Psi::new(&mut b.scope("psi"), gamma.out_channels())?;
            let geom = if planar { ConvGeometry::planar(1, 1, 1) } else { ConvGeometry::same([1; 3], [1; 3], [1; 3]) };
            let proj = b.conv("proj", planar, gamma.out_channels(), width, geom, bias)?;
            Ok(Branch::Atrous { gamma, psi, proj })
        } else {
            let geom = if planar { ConvGeometry::planar(3, 1, 1) } else { ConvGeometry::same([3; 3], [1; 3], [1; 3]) };
            Ok(Branch::Plain(b.conv("conv", planar, in_ch, width, geom, bias)?))
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Branch::Atrous { gamma, psi, proj } => {
                let y = gamma.forward(s, x)?;
                let y = psi.forward(s, y)?;
                proj.forward(s, y)
            }
            Branch::Plain(conv) => conv.forward(s, x),
        }
    }

    fn convs(&self) -> Vec<&Conv> {
        match self {
            Branch::Atrous { gamma, proj, .. } => gamma.branches.iter().chain(std::iter::once(proj)).collect(),
            Branch::Plain(c) => vec![c],
        }
    }
}

/// Fusion of a cost volume with an image feature map:
/// `phi(psi(volume_branch(v) + image_branch(f)))`, where the image term is
/// broadcast along the disparity axis. Without an image branch the sum
/// degenerates to the volume term alone.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub volume: Branch,
    pub image: Option<Branch>,
    pub psi: Psi,
    pub phi: Phi,
    pub width: usize,
}

/// A 3D convolution and the 2D convolution whose broadcast output is added to
/// it; together they replace one convolution over the concatenated volume.
#[derive(Clone, Copy, Debug)]
pub struct ConvPair<'a> {
    pub volume: &'a Conv,
    pub image: &'a Conv,
}

impl ConvPair<'_> {
    /// Learnable scalars actually held by the pair.
    pub fn scalars(&self) -> usize {
        self.volume.scalars() + self.image.scalars()
    }

    /// Learnable scalars of the single convolution over the concatenated volume.
    pub fn concat_equivalent(&self) -> usize {
        count_params(
            FusionMode::Concat,
            self.volume.in_ch,
            self.image.in_ch,
            self.volume.out_ch,
            self.volume.kernel_size(),
            self.volume.bias.is_some() || self.image.bias.is_some(),
        )
        .expect("pair dimensions are positive")
    }

    /// Closed-form count for the broadcast form.
    pub fn broadcast_formula(&self) -> usize {
        count_params(
            FusionMode::Broadcast,
            self.volume.in_ch,
            self.image.in_ch,
            self.volume.out_ch,
            self.volume.kernel_size(),
            self.volume.bias.is_some() || self.image.bias.is_some(),
        )
        .expect("pair dimensions are positive")
    }
}

impl Fusion {
    /// `image_ch = None` builds a fusion without an image branch.
    pub fn new(b: &mut Builder<'_>, atrous: bool, volume_ch: usize, image_ch: Option<usize>, width: usize) -> Result<Self> {
        let volume = Branch::new(&mut b.scope("volume"), false, atrous, volume_ch, width)?;
        let image = match image_ch {
            Some(c) => Some(Branch::new(&mut b.scope("image"), true, atrous, c, width)?),
            None => None,
        };
        let psi = Psi::new(&mut b.scope("psi"), width)?;
        let phi = Phi::volume(&mut b.scope("phi"), width, width, 3, [1; 3])?;
        Ok(Fusion { volume, image, psi, phi, width })
    }

    pub fn forward(&self, s: &mut Session<'_>, v: Var, f: Option<Var>) -> Result<Var> {
        let mut sum = self.volume.forward(s, v)?;
        match (&self.image, f) {
            (Some(branch), Some(f)) => {
                let vs = s.graph.shape(v);
                let fs = s.graph.shape(f);
                if vs[3..] != fs[2..] {
                    return Err(shape_err!("fusion: volume {vs:?} and image {fs:?} disagree in H/W"));
                }
                let img = branch.forward(s, f)?;
                sum = s.graph.broadcast_sum(sum, img)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(arg_err!("fusion site expects an image feature map")),
            (None, Some(_)) => return Err(arg_err!("fusion site has no image branch")),
        }
        let y = self.psi.forward(s, sum)?;
        self.phi.forward(s, y)
    }

    /// Matching 3D/2D convolution pairs that meet in a broadcast sum.
    pub fn conv_pairs(&self) -> Vec<ConvPair<'_>> {
        match &self.image {
            Some(img) => self
                .volume
                .convs()
                .into_iter()
                .zip(img.convs())
                .map(|(volume, image)| ConvPair { volume, image })
                .collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// One 3D convolution over the channel-concatenated volume.
    Concat,
    /// A 3D convolution plus a broadcast 2D convolution.
    Broadcast,
}

/// Learnable scalars of a fusion convolution with `cv` volume channels, `cf`
/// image channels, `cout` outputs and kernel `k`.
pub fn count_params(mode: FusionMode, cv: usize, cf: usize, cout: usize, k: usize, bias: bool) -> Result<usize> {
    if cv == 0 || cout == 0 || k == 0 {
        return Err(arg_err!("count_params needs positive cv, cout and k (got {cv}, {cout}, {k})"));
    }
    let b = if bias { cout } else { 0 };
    Ok(match mode {
        FusionMode::Concat => cout * (cv + cf) * k * k * k + b,
        FusionMode::Broadcast => cout * cv * k * k * k + cout * cf * k * k + b,
    })
}

/// One configuration of the concat-versus-broadcast check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionTrial {
    pub volume_ch: usize,
    pub image_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl FusionTrial {
    /// A random trial with channels ≤ 8, k ∈ {1, 3}, stride ∈ {1, 2},
    /// depth ≤ 8 and square maps ≤ 12.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kernel = if rng.gen_bool(0.5) { 1 } else { 3 };
        let side = rng.gen_range(4..=12);
        FusionTrial {
            volume_ch: rng.gen_range(1..=8),
            image_ch: rng.gen_range(1..=8),
            out_ch: rng.gen_range(1..=8),
            kernel,
            stride: rng.gen_range(1..=2),
            dilation: if kernel == 3 { rng.gen_range(1..=2) } else { 1 },
            depth: rng.gen_range(1..=8),
            height: side,
            width: side,
        }
    }
}

/// Evaluates one convolution over the concatenated volume `[v, f]` (with `f`
/// repeated along the disparity axis) against the split form
/// `conv3d(v, W_v) + broadcast(conv2d(f, W_f))`, where `W_f` is the image part
/// of the concatenated kernel summed over its disparity taps. Returns the
/// largest absolute deviation.
///
/// The volume is zero-padded along the disparity axis while the image channels
/// stay present in the padded slices, which is what makes the disparity-tap
/// sum exact at the boundary slices as well.
///
/// `corrupt` perturbs one image-side weight after the split; the deviation
/// must then become large.
pub fn verify_fusion_equivalence(trial: &FusionTrial, seed: u64, corrupt: bool) -> Result<f32> {
    let t = trial;
    if [t.volume_ch, t.out_ch, t.kernel, t.stride, t.dilation, t.depth, t.height, t.width].contains(&0) || t.kernel % 2 == 0 {
        return Err(arg_err!("invalid fusion trial {t:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cv, cf, co, k) = (t.volume_ch, t.image_ch, t.out_ch, t.kernel);
    let (d, h, w) = (t.depth, t.height, t.width);
    let pad = t.dilation * (k - 1) / 2;
    let v = Tensor::uniform(&[1, cv, d, h, w], -1.0, 1.0, &mut rng)?;
    let f = if cf > 0 { Some(Tensor::uniform(&[1, cf, h, w], -1.0, 1.0, &mut rng)?) } else { None };
    let scale = 1.0 / (((cv + cf) * k * k * k) as f32).sqrt();
    let w_cat = Tensor::uniform(&[co, cv + cf, k, k, k], -scale, scale, &mut rng)?;
    let bias = Tensor::uniform(&[co], -0.5, 0.5, &mut rng)?;

    // Concatenated volume with explicit disparity padding.
    let dp = d + 2 * pad;
    let plane = h * w;
    let mut cat = vec![0.0f32; (cv + cf) * dp * plane];
    for c in 0..cv {
        for z in 0..d {
            let src = &v.data()[(c * d + z) * plane..(c * d + z + 1) * plane];
            cat[(c * dp + z + pad) * plane..(c * dp + z + pad + 1) * plane].copy_from_slice(src);
        }
    }
    if let Some(f) = &f {
        for c in 0..cf {
            let src = &f.data()[c * plane..(c + 1) * plane];
            for z in 0..dp {
                let o = ((cv + c) * dp + z) * plane;
                cat[o..o + plane].copy_from_slice(src);
            }
        }
    }
    let mut g = Graph::new();
    let cat = g.constant(Tensor::new(&[1, cv + cf, dp, h, w], cat)?);
    let wc = g.constant(w_cat.clone());
    let bc = g.constant(bias.clone());
    let mut geom = ConvGeometry::same([k; 3], [t.stride; 3], [t.dilation; 3]);
    geom.padding[0] = 0;
    let reference = g.conv(cat, wc, Some(bc), geom)?;

    // Split weights.
    let taps = k * k * k;
    let mut w_v = Vec::with_capacity(co * cv * taps);
    let mut w_f = vec![0.0f32; co * cf * k * k];
    for o in 0..co {
        let row = &w_cat.data()[o * (cv + cf) * taps..(o + 1) * (cv + cf) * taps];
        w_v.extend_from_slice(&row[..cv * taps]);
        for c in 0..cf {
            for z in 0..k {
                for yx in 0..k * k {
                    w_f[(o * cf + c) * k * k + yx] += row[(cv + c) * taps + z * k * k + yx];
                }
            }
        }
    }
    if corrupt && !w_f.is_empty() {
        w_f[0] += 0.5;
    }
    let vv = g.constant(v);
    let wv = g.constant(Tensor::new(&[co, cv, k, k, k], w_v)?);
    let mut split = g.conv3d(vv, wv, Some(bc), [t.stride; 3], [t.dilation; 3])?;
    if let Some(f) = f {
        let ff = g.constant(f);
        let wf = g.constant(Tensor::new(&[co, cf, k, k], w_f)?);
        let img = g.conv2d(ff, wf, None, t.stride, t.dilation)?;
        split = g.broadcast_sum(split, img)?;
    }
    g.value(reference).max_abs_diff(g.value(split))
}

/// Checks one constructed fusion pair against the concatenated-volume
/// convolution it stands for. The concatenated kernel places the image
/// weights on the central disparity tap, so its disparity-tap sum is exactly
/// the 2D kernel. `v` is `[N, Cv, D, H, W]`, `f` is `[N, Cf, H, W]`.
pub fn verify_pair_equivalence(store: &ParamStore, pair: ConvPair<'_>, v: &Tensor, f: &Tensor) -> Result<f32> {
    let (vc, ic) = (pair.volume, pair.image);
    if vc.geom.stride != [1; 3] || ic.geom.stride != [1; 3] || vc.geom.dilation[1..] != ic.geom.dilation[1..] {
        return Err(arg_err!("pair geometries disagree"));
    }
    let k = vc.kernel_size();
    let vs = v.shape();
    let (n, d, h, w) = (vs[0], vs[2], vs[3], vs[4]);
    let (cv, cf, co) = (vc.in_ch, ic.in_ch, vc.out_ch);
    let pad = vc.geom.padding[0];
    let taps = k * k * k;
    let wv = store.get(vc.weight).data();
    let wf = store.get(ic.weight).data();
    let mut w_cat = vec![0.0f32; co * (cv + cf) * taps];
    let center = k / 2;
    for o in 0..co {
        let dst = &mut w_cat[o * (cv + cf) * taps..(o + 1) * (cv + cf) * taps];
        dst[..cv * taps].copy_from_slice(&wv[o * cv * taps..(o + 1) * cv * taps]);
        for c in 0..cf {
            let src = &wf[(o * cf + c) * k * k..(o * cf + c + 1) * k * k];
            let base = (cv + c) * taps + center * k * k;
            dst[base..base + k * k].copy_from_slice(src);
        }
    }
    let mut bias = vec![0.0f32; co];
    for b in [vc.bias, ic.bias].into_iter().flatten() {
        bias.iter_mut().zip(store.get(b).data()).for_each(|(a, x)| *a += x);
    }

    let dp = d + 2 * pad;
    let plane = h * w;
    let mut cat = vec![0.0f32; n * (cv + cf) * dp * plane];
    for b in 0..n {
        for c in 0..cv {
            for z in 0..d {
                let s = ((b * cv + c) * d + z) * plane;
                let o = ((b * (cv + cf) + c) * dp + z + pad) * plane;
                cat[o..o + plane].copy_from_slice(&v.data()[s..s + plane]);
            }
        }
        for c in 0..cf {
            let s = (b * cf + c) * plane;
            for z in 0..dp {
                let o = ((b * (cv + cf) + cv + c) * dp + z) * plane;
                cat[o..o + plane].copy_from_slice(&f.data()[s..s + plane]);
            }
        }
    }
    let mut g = Graph::new();
    let cat = g.constant(Tensor::new(&[n, cv + cf, dp, h, w], cat)?);
    let wc = g.constant(Tensor::new(&[co, cv + cf, k, k, k], w_cat)?);
    let bc = g.constant(Tensor::new(&[co], bias)?);
    let mut geom = vc.geom;
    geom.padding[0] = 0;
    let reference = g.conv(cat, wc, Some(bc), geom)?;

    let mut s = Session::new(store, crate::nn::Mode::Eval);
    let vv = s.input(v.clone());
    let ff = s.input(f.clone());
    let a = vc.forward(&mut s, vv)?;
    let b = ic.forward(&mut s, ff)?;
    let split = s.graph.broadcast_sum(a, b)?;
    g.value(reference).max_abs_diff(s.graph.value(split))
}
