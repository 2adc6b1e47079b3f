//! Raw forward/backward kernels over flat buffers. Shape checking happens in
//! the graph layer; everything here assumes consistent extents.

use super::conv::{col2im, gemm, im2col, ConvGeometry, Mat};

pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Spatial extents of the convolution's input side.
    pub input: [usize; 3],
    /// Spatial extents of the convolution's output side.
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn in_size(&self) -> usize {
        self.input.iter().product()
    }
    fn out_size(&self) -> usize {
        self.output.iter().product()
    }
    fn k(&self) -> usize {
        self.in_ch * self.geom.taps()
    }
}

fn add_bias(y: &mut [f32], bias: &[f32], per_channel: usize) {
    for (chunk, b) in y.chunks_mut(per_channel).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(dy: &[f32], channels: usize, per_channel: usize) -> Vec<f32> {
    let mut db = vec![0.0f64; channels];
    for (i, chunk) in dy.chunks(per_channel).enumerate() {
        db[i % channels] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    db.into_iter().map(|v| v as f32).collect()
}

/// `y[n] = W @ im2col(x[n]) + b` with `W: [out_ch, in_ch * taps]`.
pub(crate) fn conv_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let (pi, po, k) = (d.in_size(), d.out_size(), d.k());
    let mut y = vec![0.0; d.batch * d.out_ch * po];
    let mut cols = vec![0.0; k * po];
    for n in 0..d.batch {
        im2col(&x[n * d.in_ch * pi..(n + 1) * d.in_ch * pi], d.in_ch, d.input, &d.geom, d.output, &mut cols);
        gemm(
            Mat::new(w, d.out_ch, k),
            Mat::new(&cols, k, po),
            0.0,
            &mut y[n * d.out_ch * po..(n + 1) * d.out_ch * po],
        );
    }
    if let Some(b) = b {
        add_bias(&mut y, b, po);
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    want: [bool; 3],
) -> ConvGrads {
    let (pi, po, k) = (d.in_size(), d.out_size(), d.k());
    let mut dx = want[0].then(|| vec![0.0; d.batch * d.in_ch * pi]);
    let mut dw = want[1].then(|| vec![0.0; d.out_ch * k]);
    let mut cols = vec![0.0; k * po];
    if want[0] || want[1] {
        for n in 0..d.batch {
            let dyn_ = &dy[n * d.out_ch * po..(n + 1) * d.out_ch * po];
            if let Some(dw) = dw.as_mut() {
                im2col(&x[n * d.in_ch * pi..(n + 1) * d.in_ch * pi], d.in_ch, d.input, &d.geom, d.output, &mut cols);
                gemm(Mat::new(dyn_, d.out_ch, po), Mat::new(&cols, k, po).t(), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(Mat::new(w, d.out_ch, k).t(), Mat::new(dyn_, d.out_ch, po), 0.0, &mut cols);
                col2im(&cols, d.in_ch, d.input, &d.geom, d.output, &mut dx[n * d.in_ch * pi..(n + 1) * d.in_ch * pi]);
            }
        }
    }
    let db = want[2].then(|| bias_grad(dy, d.out_ch, po));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `d` describes the *forward* convolution that maps
/// the deconvolution's output (`d.input`, `d.in_ch`) back onto its input
/// (`d.output`, `d.out_ch`); the weight is `[out_ch, in_ch, taps]` in that
/// convention, which is `[C_in, C_out, k...]` from the deconvolution's side.
pub(crate) fn deconv_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let (py, px, k) = (d.in_size(), d.out_size(), d.k());
    let mut y = vec![0.0; d.batch * d.in_ch * py];
    let mut cols = vec![0.0; k * px];
    for n in 0..d.batch {
        gemm(
            Mat::new(w, d.out_ch, k).t(),
            Mat::new(&x[n * d.out_ch * px..(n + 1) * d.out_ch * px], d.out_ch, px),
            0.0,
            &mut cols,
        );
        col2im(&cols, d.in_ch, d.input, &d.geom, d.output, &mut y[n * d.in_ch * py..(n + 1) * d.in_ch * py]);
    }
    if let Some(b) = b {
        add_bias(&mut y, b, py);
    }
    y
}

pub(crate) fn deconv_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    want: [bool; 3],
) -> ConvGrads {
    let (py, px, k) = (d.in_size(), d.out_size(), d.k());
    let mut dx = want[0].then(|| vec![0.0; d.batch * d.out_ch * px]);
    let mut dw = want[1].then(|| vec![0.0; d.out_ch * k]);
    let mut cols = vec![0.0; k * px];
    if want[0] || want[1] {
        for n in 0..d.batch {
            im2col(&dy[n * d.in_ch * py..(n + 1) * d.in_ch * py], d.in_ch, d.input, &d.geom, d.output, &mut cols);
            if let Some(dx) = dx.as_mut() {
                gemm(Mat::new(w, d.out_ch, k), Mat::new(&cols, k, px), 0.0, &mut dx[n * d.out_ch * px..(n + 1) * d.out_ch * px]);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(
                    Mat::new(&x[n * d.out_ch * px..(n + 1) * d.out_ch * px], d.out_ch, px),
                    Mat::new(&cols, k, px).t(),
                    1.0,
                    dw,
                );
            }
        }
    }
    let db = want[2].then(|| bias_grad(dy, d.in_ch, py));
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics over `[N, C, S]` (all non-channel axes folded into
/// `N` and `S`). Returns `(mean, biased variance)` accumulated in f64.
pub(crate) fn channel_stats(x: &[f32], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * spatial) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..batch {
            let o = (n * channels + c) * spatial;
            s += x[o..o + spatial].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for n in 0..batch {
            let o = (n * channels + c) * spatial;
            q += x[o..o + spatial].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = q / m;
    }
    (mean, var)
}

pub(crate) struct BnLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

pub(crate) fn bn_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f64],
    inv_std: &[f64],
    l: &BnLayout,
) -> Vec<f32> {
    let mut y = vec![0.0; x.len()];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let o = (n * l.channels + c) * l.spatial;
            let scale = gamma[c] as f64 * inv_std[c];
            let shift = beta[c] as f64 - mean[c] * scale;
            for (yv, &xv) in y[o..o + l.spatial].iter_mut().zip(&x[o..o + l.spatial]) {
                *yv = (xv as f64 * scale + shift) as f32;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`. In training mode the batch statistics
/// depend on `x`, which adds the two centering terms to `dx`.
pub(crate) fn bn_backward(
    x: &[f32],
    gamma: &[f32],
    dy: &[f32],
    mean: &[f64],
    inv_std: &[f64],
    l: &BnLayout,
    train: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = (l.batch * l.spatial) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; l.channels];
    let mut dbeta = vec![0.0; l.channels];
    for c in 0..l.channels {
        let (mu, is) = (mean[c], inv_std[c]);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for n in 0..l.batch {
            let o = (n * l.channels + c) * l.spatial;
            for (&g, &xv) in dy[o..o + l.spatial].iter().zip(&x[o..o + l.spatial]) {
                sum_dy += g as f64;
                sum_dy_xhat += g as f64 * (xv as f64 - mu) * is;
            }
        }
        dgamma[c] = sum_dy_xhat as f32;
        dbeta[c] = sum_dy as f32;
        let g = gamma[c] as f64;
        for n in 0..l.batch {
            let o = (n * l.channels + c) * l.spatial;
            for i in o..o + l.spatial {
                let v = if train {
                    let xhat = (x[i] as f64 - mu) * is;
                    g * is * (dy[i] as f64 - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    g * is * dy[i] as f64
                };
                dx[i] = v as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Linear interpolation table for one axis with half-pixel centres and edge
/// clamping: `(i0, i1, lambda)` per output coordinate.
pub(crate) fn interp_table(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, lambda)
        })
        .collect()
}

pub(crate) struct ResizePlan {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub tables: [Vec<(usize, usize, f32)>; 3],
}

impl ResizePlan {
    pub fn new(batch: usize, input: [usize; 3], output: [usize; 3]) -> Self {
        let tables = [0, 1, 2].map(|a| interp_table(input[a], output[a]));
        ResizePlan { batch, input, output, tables }
    }

    /// Visits every output voxel with its 8 weighted source offsets.
    fn for_each(&self, mut f: impl FnMut(usize, [(usize, f32); 8])) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let (pin, pout) = (id * ih * iw, od * oh * ow);
        for n in 0..self.batch {
            for (z, &(z0, z1, lz)) in self.tables[0].iter().enumerate() {
                for (y, &(y0, y1, ly)) in self.tables[1].iter().enumerate() {
                    for (x, &(x0, x1, lx)) in self.tables[2].iter().enumerate() {
                        let at = |zz: usize, yy: usize, xx: usize| n * pin + (zz * ih + yy) * iw + xx;
                        let (wz0, wz1) = (1.0 - lz, lz);
                        let (wy0, wy1) = (1.0 - ly, ly);
                        let (wx0, wx1) = (1.0 - lx, lx);
                        f(
                            n * pout + (z * oh + y) * ow + x,
                            [
                                (at(z0, y0, x0), wz0 * wy0 * wx0),
                                (at(z0, y0, x1), wz0 * wy0 * wx1),
                                (at(z0, y1, x0), wz0 * wy1 * wx0),
                                (at(z0, y1, x1), wz0 * wy1 * wx1),
                                (at(z1, y0, x0), wz1 * wy0 * wx0),
                                (at(z1, y0, x1), wz1 * wy0 * wx1),
                                (at(z1, y1, x0), wz1 * wy1 * wx0),
                                (at(z1, y1, x1), wz1 * wy1 * wx1),
                            ],
                        );
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0; self.batch * self.output.iter().product::<usize>()];
        self.for_each(|o, taps| {
            y[o] = taps.iter().map(|&(i, w)| x[i] * w).sum();
        });
        y
    }

    pub fn backward(&self, dy: &[f32]) -> Vec<f32> {
        let mut dx = vec![0.0; self.batch * self.input.iter().product::<usize>()];
        self.for_each(|o, taps| {
            for (i, w) in taps {
                dx[i] += dy[o] * w;
            }
        });
        dx
    }
}

/// Softmax over axis 1 of `[N, D, S]` followed by the expectation of the bin
/// index. Returns the expectation `[N, S]`.
pub(crate) fn soft_argmax_forward(x: &[f32], batch: usize, bins: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0.0; batch * spatial];
    let mut p = vec![0.0f64; bins];
    for n in 0..batch {
        for s in 0..spatial {
            softmax_column(x, n, bins, spatial, s, &mut p);
            out[n * spatial + s] = p.iter().enumerate().map(|(k, &pk)| pk * k as f64).sum::<f64>() as f32;
        }
    }
    out
}

/// Softmax along axis 1 of `[N, D, spatial]`, the weights soft argmax uses.
pub(crate) fn softmax_weights(x: &[f32], batch: usize, bins: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    let mut p = vec![0.0f64; bins];
    for n in 0..batch {
        for s in 0..spatial {
            softmax_column(x, n, bins, spatial, s, &mut p);
            for (k, &pk) in p.iter().enumerate() {
                out[n * bins * spatial + k * spatial + s] = pk as f32;
            }
        }
    }
    out
}

pub(crate) fn softmax_column(x: &[f32], n: usize, bins: usize, spatial: usize, s: usize, p: &mut [f64]) {
    let base = n * bins * spatial + s;
    let max = (0..bins).map(|k| x[base + k * spatial]).fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut z = 0.0;
    for (k, pk) in p.iter_mut().enumerate() {
        *pk = (x[base + k * spatial] as f64 - max).exp();
        z += *pk;
    }
    p.iter_mut().for_each(|v| *v /= z);
}

pub(crate) fn soft_argmax_backward(x: &[f32], dy: &[f32], batch: usize, bins: usize, spatial: usize) -> Vec<f32> {
    let mut dx = vec![0.0; x.len()];
    let mut p = vec![0.0f64; bins];
    for n in 0..batch {
        for s in 0..spatial {
            softmax_column(x, n, bins, spatial, s, &mut p);
            let mean: f64 = p.iter().enumerate().map(|(k, &pk)| pk * k as f64).sum();
            let g = dy[n * spatial + s] as f64;
            let base = n * bins * spatial + s;
            for (k, &pk) in p.iter().enumerate() {
                dx[base + k * spatial] = (g * pk * (k as f64 - mean)) as f32;
            }
        }
    }
    dx
}

pub(crate) struct CorrLayout {
    pub batch: usize,
    pub channels: usize,
    pub groups: usize,
    pub disparities: usize,
    pub height: usize,
    pub width: usize,
}

/// Group-wise correlation `out[n,g,d,i,j] = <l_g(i,j), r_g(i,j-d)> / (C/G)`,
/// zero where `j < d`.
pub(crate) fn correlation_forward(l: &[f32], r: &[f32], c: &CorrLayout) -> Vec<f32> {
    let cpg = c.channels / c.groups;
    let plane = c.height * c.width;
    let norm = 1.0 / cpg as f32;
    let mut out = vec![0.0; c.batch * c.groups * c.disparities * plane];
    for n in 0..c.batch {
        for g in 0..c.groups {
            for d in 0..c.disparities.min(c.width) {
                let o = ((n * c.groups + g) * c.disparities + d) * plane;
                let dst = &mut out[o..o + plane];
                for ch in g * cpg..(g + 1) * cpg {
                    let fo = (n * c.channels + ch) * plane;
                    for i in 0..c.height {
                        let lrow = &l[fo + i * c.width..fo + (i + 1) * c.width];
                        let rrow = &r[fo + i * c.width..fo + (i + 1) * c.width];
                        let drow = &mut dst[i * c.width..(i + 1) * c.width];
                        for j in d..c.width {
                            drow[j] += lrow[j] * rrow[j - d];
                        }
                    }
                }
                dst.iter_mut().for_each(|v| *v *= norm);
            }
        }
    }
    out
}

pub(crate) fn correlation_backward(l: &[f32], r: &[f32], dy: &[f32], c: &CorrLayout) -> (Vec<f32>, Vec<f32>) {
    let cpg = c.channels / c.groups;
    let plane = c.height * c.width;
    let norm = 1.0 / cpg as f32;
    let mut dl = vec![0.0; l.len()];
    let mut dr = vec![0.0; r.len()];
    for n in 0..c.batch {
        for g in 0..c.groups {
            for d in 0..c.disparities.min(c.width) {
                let o = ((n * c.groups + g) * c.disparities + d) * plane;
                for ch in g * cpg..(g + 1) * cpg {
                    let fo = (n * c.channels + ch) * plane;
                    for i in 0..c.height {
                        for j in d..c.width {
                            let gv = dy[o + i * c.width + j] * norm;
                            dl[fo + i * c.width + j] += gv * r[fo + i * c.width + j - d];
                            dr[fo + i * c.width + j - d] += gv * l[fo + i * c.width + j];
                        }
                    }
                }
            }
        }
    }
    (dl, dr)
}
