//! Eager tape for reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node that
//! remembers its inputs. Node indices are therefore already a topological
//! order, and [`Graph::backward`] walks them once in reverse.

use super::conv::ConvGeometry;
use super::kernels::{self, BnLayout, ConvDims, CorrLayout, ResizePlan, BN_EPS};
use super::Tensor;
use crate::error::{arg_err, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Statistics of one training-mode batch normalization, for updating running
/// averages. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    Deconv { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LeakyRelu { x: Var, slope: f32 },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BroadcastSum { v: Var, f: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Sum { x: Var },
    Reshape { x: Var },
    Resize { x: Var, plan: ResizePlan },
    SoftArgmax { x: Var },
    SmoothL1 { pred: Var, target: Vec<f32>, mask: Vec<bool>, count: usize },
    Correlation { l: Var, r: Var, layout: CorrLayout },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

impl std::fmt::Debug for ResizePlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ResizePlan({:?}→{:?})", self.input, self.output)
    }
}

impl std::fmt::Debug for CorrLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CorrLayout(groups={}, disparities={})", self.groups, self.disparities)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Splits `[N, C, spatial...]` into `(N, C, [D, H, W])` for 2D or 3D layouts.
fn split_spatial(shape: &[usize], spatial_rank: usize) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != spatial_rank + 2 {
        return Err(shape_err!("expected rank {} tensor, got {shape:?}", spatial_rank + 2));
    }
    let ext = if spatial_rank == 2 { [1, shape[2], shape[3]] } else { [shape[2], shape[3], shape[4]] };
    Ok((shape[0], shape[1], ext))
}

fn join_spatial(n: usize, c: usize, ext: [usize; 3], spatial_rank: usize) -> Vec<usize> {
    if spatial_rank == 2 {
        vec![n, c, ext[1], ext[2]]
    } else {
        vec![n, c, ext[0], ext[1], ext[2]]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a tensor as a leaf; it participates in differentiation when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which side of the kink every leaky-ReLU input sits on, in tape order.
    /// Two evaluations with equal patterns lie in one smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu { x, .. } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.data(x).iter().map(|&v| v > 0.0))
            .collect()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ── convolution ──────────────────────────────────────────────────

    /// 2D cross-correlation of `x: [N, C_in, H, W]` with `w: [C_out, C_in, k, k]`
    /// using "same" zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let k = self.kernel_extent(w, 4)?;
        self.conv(x, w, b, ConvGeometry::planar(k[2], stride, dilation))
    }

    /// 3D cross-correlation of `x: [N, C_in, D, H, W]` with
    /// `w: [C_out, C_in, kd, kh, kw]` using "same" zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], dilation: [usize; 3]) -> Result<Var> {
        let k = self.kernel_extent(w, 5)?;
        self.conv(x, w, b, ConvGeometry::same(k, stride, dilation))
    }

    fn kernel_extent(&self, w: Var, rank: usize) -> Result<[usize; 3]> {
        let s = self.shape(w);
        if s.len() != rank {
            return Err(shape_err!("weight must have rank {rank}, got {s:?}"));
        }
        Ok(if rank == 4 { [1, s[2], s[3]] } else { [s[2], s[3], s[4]] })
    }

    /// Convolution with an explicit geometry. The spatial rank is taken from
    /// the weight: rank-4 weights are planar, rank-5 are volumetric.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        geom.validate()?;
        let ws = self.shape(w).to_vec();
        let rank = ws.len() - 2;
        if !(rank == 2 || rank == 3) {
            return Err(shape_err!("conv weight must be rank 4 or 5, got {ws:?}"));
        }
        let kext = self.kernel_extent(w, ws.len())?;
        if kext != geom.kernel {
            return Err(shape_err!("weight kernel {kext:?} disagrees with geometry {:?}", geom.kernel));
        }
        let (n, cin, input) = split_spatial(self.shape(x), rank)?;
        if ws[1] != cin {
            return Err(shape_err!("conv expects {} input channels, got {cin}", ws[1]));
        }
        let cout = ws[0];
        self.check_bias(b, cout)?;
        let output = geom.output_extent(input)?;
        let dims = ConvDims { batch: n, in_ch: cin, out_ch: cout, input, output, geom };
        let y = kernels::conv_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &dims);
        let value = Tensor::from_parts(join_spatial(n, cout, output, rank), y);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv { x, w, b, dims }, "conv", &inputs)
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(shape_err!("bias must be [{channels}], got {:?}", self.shape(b)));
            }
        }
        Ok(())
    }

    /// Transposed convolution with kernel 3 and the given per-axis stride,
    /// producing exactly `out` spatial extents (`[D, H, W]`, `D = 1` for 2D).
    ///
    /// `w` is `[C_in, C_out, k...]`. For stride 2 the admissible outputs are
    /// `2n` and `2n - 1`; `2n` is the doubling used for even skip extents.
    pub fn deconv(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], out: [usize; 3]) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let rank = ws.len().checked_sub(2).ok_or_else(|| shape_err!("bad deconv weight {ws:?}"))?;
        if !(rank == 2 || rank == 3) {
            return Err(shape_err!("deconv weight must be rank 4 or 5, got {ws:?}"));
        }
        let kernel = self.kernel_extent(w, ws.len())?;
        let geom = ConvGeometry::same(kernel, stride, [1; 3]);
        geom.validate()?;
        let (n, cin, input) = split_spatial(self.shape(x), rank)?;
        if ws[0] != cin {
            return Err(shape_err!("deconv expects {} input channels, got {cin}", ws[0]));
        }
        if geom.output_extent(out)? != input {
            return Err(shape_err!(
                "deconv cannot map extents {input:?} to {out:?} with stride {stride:?}"
            ));
        }
        let cout = ws[1];
        self.check_bias(b, cout)?;
        let dims = ConvDims { batch: n, in_ch: cout, out_ch: cin, input: out, output: input, geom };
        let y = kernels::deconv_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &dims);
        let value = Tensor::from_parts(join_spatial(n, cout, out, rank), y);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Deconv { x, w, b, dims }, "deconv", &inputs)
    }

    /// Stride-2 upsampling deconvolution for `[N, C, H, W]` to `out_hw`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, out_hw: [usize; 2]) -> Result<Var> {
        self.deconv(x, w, b, [1, 2, 2], [1, out_hw[0], out_hw[1]])
    }

    /// Upsampling deconvolution for `[N, C, D, H, W]` to `out`.
    pub fn deconv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], out: [usize; 3]) -> Result<Var> {
        self.deconv(x, w, b, stride, out)
    }

    // ── normalization and activation ─────────────────────────────────

    /// Batch normalization over axis 1 with statistics taken over every other
    /// axis. Training mode also returns the batch statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batchnorm needs [N, C, ...], got {shape:?}"));
        }
        let layout = BnLayout { batch: shape[0], channels: shape[1], spatial: shape[2..].iter().product() };
        for p in [gamma, beta] {
            if self.shape(p) != [layout.channels] {
                return Err(shape_err!("batchnorm affine must be [{}], got {:?}", layout.channels, self.shape(p)));
            }
        }
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let (mean, var) = kernels::channel_stats(self.data(x), layout.batch, layout.channels, layout.spatial);
                let m = (layout.batch * layout.spatial) as f64;
                let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let stats = BatchStats {
                    mean: mean.iter().map(|&v| v as f32).collect(),
                    var: var.iter().map(|&v| (v * unbiased) as f32).collect(),
                };
                (mean, var, Some(stats), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != layout.channels || var.len() != layout.channels {
                    return Err(shape_err!("running statistics must have {} entries", layout.channels));
                }
                let m = mean.iter().map(|&v| v as f64).collect();
                let v = var.iter().map(|&v| v as f64).collect();
                (m, v, None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let y = kernels::bn_forward(self.data(x), self.data(gamma), self.data(beta), &mean, &inv_std, &layout);
        let value = Tensor::from_parts(shape, y);
        let out = self.push(value, Op::BatchNorm { x, gamma, beta, mean, inv_std, train }, "batchnorm", &[x, gamma, beta])?;
        Ok((out, stats))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let y = self.data(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), y);
        self.push(value, Op::LeakyRelu { x, slope }, "leaky_relu", &[x])
    }

    // ── structural ───────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| arg_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(a, (p, q))| a == axis || p == q);
            if !same {
                return Err(shape_err!("concat along {axis}: {:?} vs {base:?}", s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.data(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat { xs: xs.to_vec(), axis }, "concat", xs)
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("slice {start}..{} of axis {axis} in {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        self.push(Tensor::from_parts(out, data), Op::Slice { x, axis, start }, "slice", &[x])
    }

    /// `out[n,c,d,i,j] = v[n,c,d,i,j] + f[n,c,i,j]`.
    pub fn broadcast_sum(&mut self, v: Var, f: Var) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        let fs = self.shape(f);
        if vs.len() != 5 || fs.len() != 4 || fs[0] != vs[0] || fs[1] != vs[1] || fs[2] != vs[3] || fs[3] != vs[4] {
            return Err(shape_err!("broadcast_sum of volume {vs:?} and map {fs:?}"));
        }
        let plane = vs[3] * vs[4];
        let depth = vs[2];
        let fd = self.data(f);
        let mut data = self.data(v).to_vec();
        for (k, chunk) in data.chunks_mut(plane).enumerate() {
            let nc = k / depth;
            for (o, add) in chunk.iter_mut().zip(&fd[nc * plane..(nc + 1) * plane]) {
                *o += add;
            }
        }
        self.push(Tensor::from_parts(vs, data), Op::BroadcastSum { v, f }, "broadcast_sum", &[v, f])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape { x }, "reshape", &[x])
    }

    // ── elementwise and reductions ───────────────────────────────────

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Add { a, b }, "add", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Mul { a, b }, "mul", &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Scale { x, factor }, "scale", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, "sum", &[x])
    }

    // ── disparity head ───────────────────────────────────────────────

    /// Trilinear resampling of `[N, D, H, W]` to `[N, D', H', W']` with
    /// half-pixel centres and edge clamping.
    pub fn trilinear_resize(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out.contains(&0) {
            return Err(shape_err!("trilinear_resize expects [N, D, H, W] and positive output, got {s:?} -> {out:?}"));
        }
        let plan = ResizePlan::new(s[0], [s[1], s[2], s[3]], out);
        let y = plan.forward(self.data(x));
        let value = Tensor::from_parts(vec![s[0], out[0], out[1], out[2]], y);
        self.push(value, Op::Resize { x, plan }, "trilinear_resize", &[x])
    }

    /// Integer-factor trilinear upsampling.
    pub fn trilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(arg_err!("upsampling factor must be >= 1"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("trilinear_upsample expects [N, D, H, W], got {s:?}"));
        }
        self.trilinear_resize(x, [s[1] * factor, s[2] * factor, s[3] * factor])
    }

    /// Soft argmax over axis 1: `[N, D, H, W] -> [N, H, W]`, the expected bin
    /// index under a softmax along the disparity axis.
    pub fn soft_argmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("soft_argmax expects [N, D, H, W], got {s:?}"));
        }
        let y = kernels::soft_argmax_forward(self.data(x), s[0], s[1], s[2] * s[3]);
        let value = Tensor::from_parts(vec![s[0], s[2], s[3]], y);
        self.push(value, Op::SoftArgmax { x }, "soft_argmax", &[x])
    }

    /// Mean smooth-L1 error over entries where `mask` is set.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f32], mask: &[bool]) -> Result<Var> {
        let p = self.data(pred);
        if target.len() != p.len() || mask.len() != p.len() {
            return Err(shape_err!("smooth_l1 over {} predictions, {} targets, {} mask entries", p.len(), target.len(), mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(arg_err!("smooth_l1 has no valid pixels"));
        }
        let total: f64 = p
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| {
                let e = (a - b).abs() as f64;
                if e < 1.0 { 0.5 * e * e } else { e - 0.5 }
            })
            .sum();
        let value = Tensor::scalar((total / count as f64) as f32);
        let op = Op::SmoothL1 { pred, target: target.to_vec(), mask: mask.to_vec(), count };
        self.push(value, op, "smooth_l1", &[pred])
    }

    /// Group-wise correlation volume of two `[N, C, H, W]` feature maps:
    /// `[N, groups, disparities, H, W]`.
    pub fn group_correlation(&mut self, l: Var, r: Var, groups: usize, disparities: usize) -> Result<Var> {
        self.same_shape(l, r)?;
        let s = self.shape(l).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("correlation expects [N, C, H, W], got {s:?}"));
        }
        if groups == 0 || s[1] % groups != 0 {
            return Err(arg_err!("{} channels cannot be split into {groups} groups", s[1]));
        }
        if disparities == 0 {
            return Err(arg_err!("correlation needs at least one disparity"));
        }
        let layout = CorrLayout { batch: s[0], channels: s[1], groups, disparities, height: s[2], width: s[3] };
        let y = kernels::correlation_forward(self.data(l), self.data(r), &layout);
        let value = Tensor::from_parts(vec![s[0], groups, disparities, s[2], s[3]], y);
        self.push(value, Op::Correlation { l, r, layout }, "group_correlation", &[l, r])
    }

    // ── reverse pass ─────────────────────────────────────────────────

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, dims } => {
                let want = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let r = kernels::conv_backward(self.data(*x), self.data(*w), g, dims, want);
                self.scatter_conv(grads, *x, *w, *b, r);
            }
            Op::Deconv { x, w, b, dims } => {
                let want = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let r = kernels::deconv_backward(self.data(*x), self.data(*w), g, dims, want);
                self.scatter_conv(grads, *x, *w, *b, r);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let s = self.shape(*x);
                let layout = BnLayout { batch: s[0], channels: s[1], spatial: s[2..].iter().product() };
                let (dx, dg, db) = kernels::bn_backward(self.data(*x), self.data(*gamma), g, mean, inv_std, &layout, *train);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self.data(*x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = self.shape(xs[0]);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total: usize = xs.iter().map(|&x| self.shape(x)[*axis]).sum();
                let mut offset = 0;
                for &x in xs {
                    let ext = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        self.accumulate(grads, x, dx);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = g.len() / (outer * inner);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BroadcastSum { v, f } => {
                let vs = self.shape(*v);
                let plane = vs[3] * vs[4];
                let depth = vs[2];
                if self.wants(*f) {
                    let mut df = vec![0.0; self.value(*f).numel()];
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        let nc = k / depth;
                        for (d, gv) in df[nc * plane..(nc + 1) * plane].iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *f, df);
                }
                self.accumulate(grads, *v, g.to_vec());
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let da = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Resize { x, plan } => self.accumulate(grads, *x, plan.backward(g)),
            Op::SoftArgmax { x } => {
                let s = self.shape(*x);
                let dx = kernels::soft_argmax_backward(self.data(*x), g, s[0], s[1], s[2] * s[3]);
                self.accumulate(grads, *x, dx);
            }
            Op::SmoothL1 { pred, target, mask, count } => {
                let scale = g[0] / *count as f32;
                let dx = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| if m { (p - t).clamp(-1.0, 1.0) * scale } else { 0.0 })
                    .collect();
                self.accumulate(grads, *pred, dx);
            }
            Op::Correlation { l, r, layout } => {
                let (dl, dr) = kernels::correlation_backward(self.data(*l), self.data(*r), g, layout);
                self.accumulate(grads, *l, dl);
                self.accumulate(grads, *r, dr);
            }
        }
    }

    fn scatter_conv(&self, grads: &mut [Option<Vec<f32>>], x: Var, w: Var, b: Option<Var>, r: kernels::ConvGrads) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, dw);
        }
        if let (Some(b), Some(db)) = (b, r.db) {
            self.accumulate(grads, b, db);
        }
    }
}
