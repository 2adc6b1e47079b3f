//! Parameterized layers and the per-forward [`Session`] that binds them to a
//! graph.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{BatchStats, BnMode, ConvGeometry, Graph, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.1;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recorded output shape of a named layer.
pub type TraceEntry = (String, Vec<usize>);

/// One forward pass: a fresh graph, read access to the parameters, and the
/// bookkeeping needed to hand gradients and batch statistics back afterwards.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    mode: Mode,
    grad: bool,
    leaves: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
    trace: Option<Vec<TraceEntry>>,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<(ParamId, Vec<f32>)>,
}

impl<'s> Session<'s> {
    /// Parameters are differentiable in training mode only; see [`Session::with_grad`].
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            mode,
            grad: mode == Mode::Train,
            leaves: HashMap::new(),
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn with_grad(mut self, grad: bool) -> Self {
        self.grad = grad;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let learnable = self.grad && self.store.kind(id) == ParamKind::Learnable;
        let v = self.graph.leaf(self.store.get(id).clone().with_requires_grad(learnable));
        self.leaves.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn record(&mut self, label: impl Into<String>, v: Var) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push((label.into(), self.graph.shape(v).to_vec()));
        }
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut g = self.graph.backward(loss)?;
        let mut grads: Vec<_> = self
            .leaves
            .iter()
            .filter_map(|(&id, &v)| g.take(v).map(|d| (id, d)))
            .collect();
        grads.sort_by_key(|(id, _)| *id);
        Ok(ParamGrads { grads })
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }
}

impl ParamStore {
    /// Stores gradients into each parameter's `grad` buffer, replacing old ones.
    pub fn set_grads(&mut self, grads: ParamGrads) {
        for (id, g) in grads.grads {
            self.get_mut(id).grad = Some(g);
        }
    }

    /// Folds batch statistics into running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                for (r, &x) in self.get_mut(id).data_mut().iter_mut().zip(fresh) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * x;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub planar: bool,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv(x, w, b, self.geom)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Number of learnable scalars.
    pub fn scalars(&self) -> usize {
        self.out_ch * (self.in_ch * self.geom.taps() + usize::from(self.bias.is_some()))
    }

    /// Kernel extent along the spatial axes (2 or 3 of them).
    pub fn kernel_size(&self) -> usize {
        self.geom.kernel[2]
    }
}

/// Transposed convolution, kernel 3, used for upsampling.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: [usize; 3],
    pub planar: bool,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Deconv {
    /// `out` is `[D, H, W]` (with `D = 1` for planar layers).
    pub fn forward(&self, s: &mut Session<'_>, x: Var, out: [usize; 3]) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.deconv(x, w, b, self.stride, out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batchnorm(x, gamma, beta, BnMode::Train)?;
                let stats = stats.expect("training mode yields statistics");
                s.bn_updates.push(BnUpdate { mean: self.running_mean, var: self.running_var, stats });
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store;
                let mode = BnMode::Eval {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                Ok(s.graph.batchnorm(x, gamma, beta, mode)?.0)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Allocates named, initialized parameters. Names are dot-joined scopes.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.path(name);
        Builder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn add(&mut self, name: &str, t: Tensor, kind: ParamKind) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(path, t, kind)
    }

    /// Kaiming-uniform weights for the leaky ReLU slope used throughout.
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let gain2 = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
        let bound = (3.0 * gain2 / fan_in as f32).sqrt();
        Tensor::uniform(shape, -bound, bound, self.rng)
    }

    pub fn conv(&mut self, name: &str, planar: bool, in_ch: usize, out_ch: usize, geom: ConvGeometry, bias: bool) -> Result<Conv> {
        geom.validate()?;
        if in_ch == 0 || out_ch == 0 {
            return Err(arg_err!("{}: channel counts must be positive", self.path(name)));
        }
        if planar && geom.kernel[0] != 1 {
            return Err(shape_err!("planar conv with depth kernel {}", geom.kernel[0]));
        }
        let k = geom.kernel;
        let shape: Vec<usize> = if planar { vec![out_ch, in_ch, k[1], k[2]] } else { vec![out_ch, in_ch, k[0], k[1], k[2]] };
        let w = self.kaiming(&shape, in_ch * geom.taps())?;
        let weight = self.add(&format!("{name}.weight"), w, ParamKind::Learnable)?;
        let bias = if bias { Some(self.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch])?, ParamKind::Learnable)?) } else { None };
        Ok(Conv { weight, bias, geom, planar, in_ch, out_ch })
    }

    pub fn conv2d(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, dilation: usize, bias: bool) -> Result<Conv> {
        self.conv(name, true, in_ch, out_ch, ConvGeometry::planar(k, stride, dilation), bias)
    }

    pub fn conv3d(&mut self, name: &str, in_ch: usize, out_ch: usize, k: usize, stride: [usize; 3], dilation: [usize; 3], bias: bool) -> Result<Conv> {
        self.conv(name, false, in_ch, out_ch, ConvGeometry::same([k; 3], stride, dilation), bias)
    }

    pub fn deconv(&mut self, name: &str, planar: bool, in_ch: usize, out_ch: usize, stride: [usize; 3], bias: bool) -> Result<Deconv> {
        if in_ch == 0 || out_ch == 0 {
            return Err(arg_err!("{}: channel counts must be positive", self.path(name)));
        }
        let (shape, taps): (Vec<usize>, usize) =
            if planar { (vec![in_ch, out_ch, 3, 3], 9) } else { (vec![in_ch, out_ch, 3, 3, 3], 27) };
        let fan_in = (in_ch * taps / stride.iter().product::<usize>()).max(1);
        let w = self.kaiming(&shape, fan_in)?;
        let weight = self.add(&format!("{name}.weight"), w, ParamKind::Learnable)?;
        let bias = if bias { Some(self.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch])?, ParamKind::Learnable)?) } else { None };
        Ok(Deconv { weight, bias, stride, planar, in_ch, out_ch })
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)?, ParamKind::Learnable)?,
            beta: self.add(&format!("{name}.beta"), Tensor::zeros(&[channels])?, ParamKind::Learnable)?,
            running_mean: self.add(&format!("{name}.running_mean"), Tensor::zeros(&[channels])?, ParamKind::Buffer)?,
            running_var: self.add(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)?, ParamKind::Buffer)?,
            channels,
        })
    }
}
