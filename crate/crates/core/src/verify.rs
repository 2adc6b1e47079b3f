//! Self-checks run by `icvp verify`: fusion equivalence over random shapes,
//! finite-difference gradient checks, and the model's shape contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{verify_fusion_equivalence, AtrousBlock, Branch, Fusion, FusionTrial, Phi, PhiUp, Psi};
use crate::cost_volume::{build_cost_volume, GwcConfig, ImageStem};
use crate::error::{Error, Result};
use crate::extractor::{halved, Extractor, ExtractorConfig};
use crate::aggregation::{Aggregation, AggregationConfig};
use crate::head::{disparity_loss, DisparityMap};
use crate::model::{Model, ModelConfig};
use crate::nn::{Builder, Mode, Session, LEAKY_SLOPE};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{BnMode, Graph, Tensor, Var};

/// Largest deviation accepted between concat and broadcast-sum fusion.
pub const FUSION_TOLERANCE: f32 = 1e-4;
/// Finite-difference step.
pub const FD_STEP: f32 = 1e-3;
pub const GRAD_ABS_TOL: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-2;
/// Coordinates sampled per checked tensor group.
pub const GRAD_SAMPLES: usize = 10;
/// Candidate coordinates drawn per accepted one, to replace kink crossings.
const MAX_ATTEMPTS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub trials: usize,
    pub worst: f32,
    pub worst_trial: Option<FusionTrial>,
}

impl FusionReport {
    pub fn passed(&self) -> bool {
        self.worst <= FUSION_TOLERANCE
    }
}

/// Random fusion trials; `corrupt` perturbs one image-side weight so the
/// check is expected to fail.
pub fn fusion_suite(trials: usize, seed: u64, corrupt: bool) -> Result<FusionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FusionReport { trials, worst: 0.0, worst_trial: None };
    for t in 0..trials {
        let trial = FusionTrial::random(&mut rng);
        let dev = verify_fusion_equivalence(&trial, seed.wrapping_add(t as u64), corrupt)?;
        if dev >= report.worst {
            report.worst = dev;
            report.worst_trial = Some(trial);
        }
    }
    Ok(report)
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub coordinates: usize,
    /// Coordinates the check aimed for: the per-tensor quota, capped by
    /// the tensor sizes.
    pub required: usize,
    pub failures: usize,
    /// Coordinates whose stencil straddled a kink and were replaced.
    pub skipped: usize,
    pub max_abs_err: f64,
    /// Relative error at the worst failing coordinate (or the largest overall).
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.coordinates > 0 && self.coordinates >= self.required
    }
}

/// Accepts when either the absolute or the relative error is in bounds.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= GRAD_ABS_TOL || err <= GRAD_REL_TOL * analytic.abs().max(numeric.abs())
}

struct Tally {
    check: GradCheck,
}

impl Tally {
    fn new(name: &str) -> Self {
        Tally { check: GradCheck { name: name.to_string(), coordinates: 0, required: 0, failures: 0, skipped: 0, max_abs_err: 0.0, max_rel_err: 0.0 } }
    }

    /// Central difference at one coordinate. A stencil over which any
    /// leaky-ReLU input changes sign is not differentiable across, so the
    /// coordinate is skipped rather than judged.
    fn check(&mut self, analytic: f64, up: Probe, mid: &Probe, down: Probe) -> bool {
        if up.pattern != mid.pattern || down.pattern != mid.pattern {
            self.check.skipped += 1;
            return false;
        }
        self.add(analytic, (up.value - down.value) / (2.0 * FD_STEP as f64));
        true
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs();
        let rel = err / analytic.abs().max(numeric.abs()).max(1e-12);
        let c = &mut self.check;
        c.coordinates += 1;
        c.max_abs_err = c.max_abs_err.max(err);
        c.max_rel_err = c.max_rel_err.max(rel);
        if !grad_close(analytic, numeric) {
            c.failures += 1;
        }
    }
}

/// Loss value and activation pattern of one evaluation.
struct Probe {
    value: f64,
    pattern: Vec<bool>,
}

/// A random unit-norm projection turns any output into a scalar whose
/// gradient touches every element. The unit norm keeps the absolute
/// tolerance meaningful whatever the output size.
struct Projection {
    weights: Option<Tensor>,
}

impl Projection {
    fn apply(&mut self, g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let w = match &self.weights {
            Some(w) => w.clone(),
            None => {
                let mut w = Tensor::uniform(g.shape(y), -1.0, 1.0, rng)?;
                let norm = w.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                for v in w.data_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
                self.weights = Some(w.clone());
                w
            }
        };
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    /// Same scalar in f64, for finite differences.
    fn eval(&self, y: &Tensor) -> f64 {
        let w = self.weights.as_ref().expect("projection set by the analytic pass");
        y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    }
}

/// Candidate coordinates in random order, at most `count` of them.
fn sample_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

impl Tally {
    /// Once every coordinate of a tensor has been tried, the ones left
    /// over are all at kinks and cannot be judged.
    fn settle(&mut self, wanted: usize, accepted: usize, exhausted: bool) {
        self.check.required += if exhausted { accepted.min(wanted) } else { wanted };
    }
}

/// Checks `f` with respect to each input tensor, sampling coordinates per input.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = Projection { weights: None };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let loss = proj.apply(&mut g, y, &mut rng)?;
    let grads = g.backward(loss)?;

    let eval = |ts: &[Tensor]| -> Result<Probe> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(Probe { value: proj.eval(g.value(y)), pattern: g.activation_pattern() })
    };

    let mut tally = Tally::new(name);
    let per_input = GRAD_SAMPLES.div_ceil(inputs.len().max(1)).max(GRAD_SAMPLES / 2);
    let mut work = inputs.to_vec();
    let mid = eval(&work)?;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).ok_or(Error::MissingGradient(format!("{name} input {k}")))?.to_vec();
        let (mut accepted, mut tried) = (0, 0);
        let pool = sample_indices(work[k].numel(), MAX_ATTEMPTS * per_input, &mut rng);
        for &idx in &pool {
            if accepted == per_input {
                break;
            }
            tried += 1;
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            accepted += tally.check(analytic[idx] as f64, up, &mid, down) as usize;
        }
        tally.settle(per_input.min(work[k].numel()), accepted, tried == work[k].numel());
    }
    Ok(tally.check)
}

/// Checks a parametrized module twice. In training mode only parameters
/// are probed: batch statistics couple every activation to each input
/// element, so nudging one input shifts every leaky-ReLU pre-activation and
/// in a deep module nearly every stencil crosses a kink. With
/// inference-mode normalization (random running statistics) both parameters
/// and inputs are probed.
pub fn check_module<F>(name: &str, store: &mut ParamStore, inputs: &[Tensor], seed: u64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let mut out = Vec::new();
    if store.learnable_scalars() > 0 {
        out.push(check_module_in(&format!("{name} [train, parameters]"), store, inputs, seed, Mode::Train, false, &f)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a7);
    for p in store.iter_mut().filter(|p| p.kind == ParamKind::Buffer) {
        let (lo, hi) = if p.name.ends_with("running_var") { (0.5, 2.0) } else { (-0.5, 0.5) };
        for v in p.tensor.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    out.push(check_module_in(&format!("{name} [eval, parameters and inputs]"), store, inputs, seed, Mode::Eval, true, &f)?);
    Ok(out)
}

/// One finite-difference pass over a module's learnable parameters and,
/// when `wrt_inputs` is set, its inputs.
pub fn check_module_in<F>(
    name: &str,
    store: &mut ParamStore,
    inputs: &[Tensor],
    seed: u64,
    mode: Mode,
    wrt_inputs: bool,
    f: &F,
) -> Result<GradCheck>
where
    F: Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = Projection { weights: None };
    let learnable: Vec<ParamId> = store.ids().filter(|&id| store.kind(id) == ParamKind::Learnable).collect();

    let (param_grads, input_grads) = {
        let mut s = Session::new(store, mode).with_grad(true);
        let vars: Vec<Var> =
            inputs.iter().map(|t| if wrt_inputs { s.graph.variable(t.clone()) } else { s.input(t.clone()) }).collect();
        let y = f(&mut s, &vars)?;
        let loss = proj.apply(&mut s.graph, y, &mut rng)?;
        let grads = s.graph.backward(loss)?;
        let mut pg = Vec::new();
        for &id in &learnable {
            let v = s.param(id);
            let gv = grads.get(v).ok_or_else(|| Error::MissingGradient(store.name(id).to_string()))?;
            pg.push(gv.to_vec());
        }
        let ig: Vec<Vec<f32>> = vars
            .iter()
            .filter(|_| wrt_inputs)
            .enumerate()
            .map(|(k, &v)| grads.get(v).map(<[f32]>::to_vec).ok_or(Error::MissingGradient(format!("{name} input {k}"))))
            .collect::<Result<_>>()?;
        (pg, ig)
    };

    let eval = |store: &ParamStore, ts: &[Tensor]| -> Result<Probe> {
        let mut s = Session::new(store, mode).with_grad(false);
        let vars: Vec<Var> = ts.iter().map(|t| s.input(t.clone())).collect();
        let y = f(&mut s, &vars)?;
        Ok(Probe { value: proj.eval(s.graph.value(y)), pattern: s.graph.activation_pattern() })
    };

    let mut tally = Tally::new(name);
    let mid = eval(store, inputs)?;
    // Parameters: sample uniformly over all learnable scalars.
    let total: usize = learnable.iter().map(|&id| store.get(id).numel()).sum();
    let (mut accepted, mut tried) = (0, 0);
    for flat in sample_indices(total, MAX_ATTEMPTS * GRAD_SAMPLES, &mut rng) {
        if accepted == GRAD_SAMPLES {
            break;
        }
        tried += 1;
        let (mut p, mut idx) = (0, flat);
        while idx >= store.get(learnable[p]).numel() {
            idx -= store.get(learnable[p]).numel();
            p += 1;
        }
        let id = learnable[p];
        let orig = store.get(id).data()[idx];
        store.get_mut(id).data_mut()[idx] = orig + FD_STEP;
        let up = eval(store, inputs)?;
        store.get_mut(id).data_mut()[idx] = orig - FD_STEP;
        let down = eval(store, inputs)?;
        store.get_mut(id).data_mut()[idx] = orig;
        accepted += tally.check(param_grads[p][idx] as f64, up, &mid, down) as usize;
    }
    tally.settle(GRAD_SAMPLES.min(total), accepted, tried == total);
    let mut work = inputs.to_vec();
    for k in 0..input_grads.len() {
        let (mut accepted, mut tried) = (0, 0);
        for idx in sample_indices(work[k].numel(), MAX_ATTEMPTS * GRAD_SAMPLES, &mut rng) {
            if accepted == GRAD_SAMPLES {
                break;
            }
            tried += 1;
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + FD_STEP;
            let up = eval(store, &work)?;
            work[k].data_mut()[idx] = orig - FD_STEP;
            let down = eval(store, &work)?;
            work[k].data_mut()[idx] = orig;
            accepted += tally.check(input_grads[k][idx] as f64, up, &mid, down) as usize;
        }
        tally.settle(GRAD_SAMPLES.min(work[k].numel()), accepted, tried == work[k].numel());
    }
    Ok(tally.check)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Tensor-engine operations.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(1);
        s
    };

    let x = rand_t(&[2, 3, 7, 6], r)?;
    let w = rand_t(&[4, 3, 3, 3], r)?;
    let b = rand_t(&[4], r)?;
    out.push(check_op("conv2d", &[x.clone(), w.clone(), b.clone()], next(), |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?);
    out.push(check_op("conv2d strided", &[x.clone(), w.clone()], next(), |g, v| g.conv2d(v[0], v[1], None, 2, 1))?);
    out.push(check_op("conv2d dilated", &[x.clone(), w.clone(), b.clone()], next(), |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 2))?);

    let x3 = rand_t(&[1, 2, 5, 6, 5], r)?;
    let w3 = rand_t(&[3, 2, 3, 3, 3], r)?;
    let b3 = rand_t(&[3], r)?;
    out.push(check_op("conv3d", &[x3.clone(), w3.clone(), b3.clone()], next(), |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])
    })?);
    out.push(check_op("conv3d strided", &[x3.clone(), w3.clone()], next(), |g, v| g.conv3d(v[0], v[1], None, [2, 2, 2], [1, 1, 1]))?);
    out.push(check_op("conv3d dilated", &[x3.clone(), w3.clone(), b3.clone()], next(), |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 2, 2])
    })?);

    let xd = rand_t(&[2, 3, 4, 3], r)?;
    let wd = rand_t(&[3, 2, 3, 3], r)?;
    let bd = rand_t(&[2], r)?;
    out.push(check_op("deconv2d", &[xd, wd, bd], next(), |g, v| g.deconv2d(v[0], v[1], Some(v[2]), [7, 6]))?);
    let xd3 = rand_t(&[1, 3, 2, 3, 3], r)?;
    let wd3 = rand_t(&[3, 2, 3, 3, 3], r)?;
    out.push(check_op("deconv3d", &[xd3, wd3], next(), |g, v| g.deconv3d(v[0], v[1], None, [2, 2, 2], [4, 5, 6]))?);

    let xb = rand_t(&[3, 4, 3, 2], r)?;
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, r)?;
    let beta = rand_t(&[4], r)?;
    out.push(check_op("batchnorm train", &[xb.clone(), gamma.clone(), beta.clone()], next(), |g, v| {
        Ok(g.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0)
    })?);
    let mean = rand_t(&[4], r)?;
    let var = Tensor::uniform(&[4], 0.5, 2.0, r)?;
    out.push(check_op("batchnorm eval", &[xb.clone(), gamma, beta], next(), |g, v| {
        Ok(g.batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: mean.data(), var: var.data() })?.0)
    })?);
    let xb5 = rand_t(&[2, 3, 2, 3, 2], r)?;
    out.push(check_op("batchnorm train 5d", &[xb5, Tensor::full(&[3], 1.2)?, rand_t(&[3], r)?], next(), |g, v| {
        Ok(g.batchnorm(v[0], v[1], v[2], BnMode::Train)?.0)
    })?);

    out.push(check_op("leaky_relu", &[xb.clone()], next(), |g, v| g.leaky_relu(v[0], LEAKY_SLOPE))?);
    let a = rand_t(&[2, 2, 3, 3], r)?;
    let c = rand_t(&[2, 3, 3, 3], r)?;
    out.push(check_op("concat", &[a.clone(), c.clone()], next(), |g, v| g.concat(&[v[0], v[1]], 1))?);
    out.push(check_op("slice", &[c.clone()], next(), |g, v| g.slice(v[0], 1, 1, 2))?);
    let vol = rand_t(&[2, 3, 4, 3, 3], r)?;
    let img = rand_t(&[2, 3, 3, 3], r)?;
    out.push(check_op("broadcast_sum", &[vol.clone(), img], next(), |g, v| g.broadcast_sum(v[0], v[1]))?);
    out.push(check_op("reshape", &[vol.clone()], next(), |g, v| g.reshape(v[0], &[2, 12, 3, 3]))?);
    let a2 = rand_t(&[2, 3, 3, 3], r)?;
    out.push(check_op("add", &[c.clone(), a2.clone()], next(), |g, v| g.add(v[0], v[1]))?);
    out.push(check_op("mul", &[c.clone(), a2], next(), |g, v| g.mul(v[0], v[1]))?);
    out.push(check_op("scale", &[c.clone()], next(), |g, v| g.scale(v[0], -2.5))?);
    out.push(check_op("sum", &[c.clone()], next(), |g, v| g.sum(v[0]))?);

    let low = rand_t(&[2, 3, 4, 5], r)?;
    out.push(check_op("trilinear_resize", &[low.clone()], next(), |g, v| g.trilinear_resize(v[0], [8, 11, 9]))?);
    out.push(check_op("trilinear_upsample", &[low], next(), |g, v| g.trilinear_upsample(v[0], 3))?);
    let logits = Tensor::uniform(&[2, 6, 3, 4], -2.0, 2.0, r)?;
    out.push(check_op("soft_argmax", &[logits], next(), |g, v| g.soft_argmax(v[0]))?);

    // Residuals kept away from the ±1 switch between the two loss pieces.
    let pred = rand_t(&[2, 3, 4], r)?;
    let target: Vec<f32> = pred
        .data()
        .iter()
        .map(|&p| {
            let e: f32 = if r.gen_bool(0.5) { r.gen_range(0.05..0.8) } else { r.gen_range(1.2..3.0) };
            p + if r.gen_bool(0.5) { e } else { -e }
        })
        .collect();
    let mask: Vec<bool> = (0..pred.numel()).map(|i| i % 5 != 0).collect();
    out.push(check_op("smooth_l1", &[pred], next(), |g, v| g.smooth_l1(v[0], &target, &mask))?);

    let fl = rand_t(&[2, 4, 3, 6], r)?;
    let fr = rand_t(&[2, 4, 3, 6], r)?;
    out.push(check_op("group_correlation", &[fl, fr], next(), |g, v| g.group_correlation(v[0], v[1], 2, 4))?);
    Ok(out)
}

fn module_store(seed: u64, build: impl FnOnce(&mut Builder<'_>) -> Result<()>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut Builder::new(&mut store, &mut rng))?;
    Ok(store)
}

/// Layer blocks, the extractor, the cost volume, the image stem and the
/// aggregation, each on small random inputs.
pub fn block_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let r = &mut rng;
    let mut out = Vec::new();

    let x2 = rand_t(&[2, 3, 6, 5], r)?;
    let x3 = rand_t(&[2, 3, 4, 5, 4], r)?;

    let mut psi = None;
    let mut store = module_store(seed, |b| Ok(psi = Some(Psi::new(b, 3)?)))?;
    let psi = psi.expect("built");
    out.extend(check_module("psi", &mut store, &[x2.clone()], seed, |s, v| psi.forward(s, v[0]))?);

    let mut phi = None;
    let mut store = module_store(seed, |b| Ok(phi = Some(Phi::planar(b, 3, 4, 3, 2)?)))?;
    let phi = phi.expect("built");
    out.extend(check_module("phi planar strided", &mut store, &[x2.clone()], seed, |s, v| phi.forward(s, v[0]))?);

    let mut phi3 = None;
    let mut store = module_store(seed, |b| Ok(phi3 = Some(Phi::volume(b, 3, 4, 3, [2, 2, 2])?)))?;
    let phi3 = phi3.expect("built");
    out.extend(check_module("phi volume strided", &mut store, &[x3.clone()], seed, |s, v| phi3.forward(s, v[0]))?);

    let mut up = None;
    let mut store = module_store(seed, |b| Ok(up = Some(PhiUp::new(b, false, 3, 2, [2, 2, 2])?)))?;
    let up = up.expect("built");
    out.extend(check_module("phi up volume", &mut store, &[x3.clone()], seed, |s, v| up.forward(s, v[0], [8, 9, 8]))?);

    let mut atrous = None;
    let mut store = module_store(seed, |b| Ok(atrous = Some(AtrousBlock::new(b, true, 3, 2, false)?)))?;
    let atrous = atrous.expect("built");
    out.extend(check_module("atrous planar", &mut store, &[x2.clone()], seed, |s, v| atrous.forward(s, v[0]))?);

    let mut branch = None;
    let mut store = module_store(seed, |b| Ok(branch = Some(Branch::new(b, false, true, 3, 4)?)))?;
    let branch = branch.expect("built");
    out.extend(check_module("atrous branch volume", &mut store, &[x3.clone()], seed, |s, v| branch.forward(s, v[0]))?);

    let f = rand_t(&[2, 2, 5, 4], r)?;
    let mut fusion = None;
    let mut store = module_store(seed, |b| Ok(fusion = Some(Fusion::new(b, true, 3, Some(2), 4)?)))?;
    let fusion = fusion.expect("built");
    out.extend(check_module("fusion", &mut store, &[x3.clone(), f], seed, |s, v| fusion.forward(s, v[0], Some(v[1])))?);

    let mut plain = None;
    let mut store = module_store(seed, |b| Ok(plain = Some(Fusion::new(b, false, 3, None, 4)?)))?;
    let plain = plain.expect("built");
    out.extend(check_module("fusion without image", &mut store, &[x3.clone()], seed, |s, v| plain.forward(s, v[0], None))?);

    let ecfg = ExtractorConfig { stem: [4, 6, 6], encoder: vec![6, 8], decoder: 10 };
    let mut ext = None;
    let mut store = module_store(seed, |b| Ok(ext = Some(Extractor::new(b, ecfg)?)))?;
    let ext = ext.expect("built");
    let img = Tensor::uniform(&[2, 3, 13, 12], 0.0, 1.0, r)?;
    out.extend(check_module("extractor", &mut store, &[img.clone()], seed, |s, v| ext.forward(s, v[0], "x"))?);

    let mut stem = None;
    let mut store = module_store(seed, |b| Ok(stem = Some(ImageStem::new(b, 4)?)))?;
    let stem = stem.expect("built");
    out.extend(check_module("image stem", &mut store, &[img], seed, |s, v| stem.forward(s, v[0]))?);

    let gwc = GwcConfig { channels: 6, groups: 3, max_disparity: 12 };
    let fl = rand_t(&[2, 6, 3, 7], r)?;
    let fr = rand_t(&[2, 6, 3, 7], r)?;
    let mut store = ParamStore::new();
    out.extend(check_module("cost volume", &mut store, &[fl, fr], seed, |s, v| build_cost_volume(s, v[0], v[1], &gwc))?);

    for (label, light) in [("aggregation light final", true), ("aggregation full final", false)] {
        let acfg = AggregationConfig { light_final: light, ..AggregationConfig::standard(2, 4, 2) };
        let mut agg = None;
        let mut store = module_store(seed, |b| Ok(agg = Some(Aggregation::new(b, acfg)?)))?;
        let agg = agg.expect("built");
        // Deepest level is 2×3×3, so most kernel taps see real data.
        let v0 = rand_t(&[2, 2, 6, 10, 9], r)?;
        let f0 = rand_t(&[2, 4, 10, 9], r)?;
        out.extend(check_module(label, &mut store, &[v0, f0], seed, |s, v| Ok(agg.forward(s, v[0], Some(v[1]))?.volume))?);
    }
    Ok(out)
}

/// End-to-end smooth-L1 loss of a tiny model on one 24×24 pair.
pub fn model_check(seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = ModelConfig {
        max_disparity: 12,
        groups: 4,
        extractor: ExtractorConfig { stem: [4, 8, 8], encoder: vec![8, 12], decoder: 16 },
        depth: 2,
        ..ModelConfig::desk()
    };
    let (model, mut store) = Model::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let (h, w) = (24, 24);
    let left = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)?;
    let right = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng)?;
    let gt_values: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..11.0)).collect();
    let gt = DisparityMap::dense(w, h, gt_values)?;
    let loss = |s: &mut Session<'_>, v: &[Var]| {
        let out = model.forward(s, v[0], v[1])?;
        disparity_loss(&mut s.graph, out.disparity, &[&gt])
    };
    check_module("end-to-end model loss", &mut store, &[left, right], seed, loss)
}

/// Every gradient check: ops, blocks and modules, and the end-to-end model.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = op_checks(seed)?;
    all.extend(block_checks(seed)?);
    all.extend(model_check(seed)?);
    Ok(all)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCheck {
    pub height: usize,
    pub width: usize,
    pub max_disparity: usize,
    /// `(label, expected, actual)` for every mismatching intermediate.
    pub mismatches: Vec<(String, Vec<usize>, Vec<usize>)>,
    pub checked: usize,
    /// Range of predicted disparities.
    pub range: (f32, f32),
}

impl ShapeCheck {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.range.0 >= 0.0 && self.range.1 <= (self.max_disparity - 1) as f32
    }
}

/// Walks the model at one image size and disparity range, comparing each
/// recorded intermediate with the extent arithmetic written out here.
pub fn check_shapes(config: &ModelConfig, height: usize, width: usize, seed: u64) -> Result<ShapeCheck> {
    let (model, store) = Model::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1;
    let left = Tensor::uniform(&[n, 3, height, width], 0.0, 1.0, &mut rng)?;
    let right = Tensor::uniform(&[n, 3, height, width], 0.0, 1.0, &mut rng)?;
    let mut s = Session::new(&store, Mode::Eval).with_trace();
    let l = s.input(left);
    let r = s.input(right);
    let out = model.forward(&mut s, l, r)?;

    let (h0, w0) = (height / 3, width / 3);
    let d0 = config.max_disparity / 3;
    let ext = &config.extractor;
    let c0 = config.groups;
    let at = |i: usize| (halved(h0, i), halved(w0, i));
    let dz = |i: usize| if config.disparity_stride == 2 { halved(d0, i) } else { d0 };

    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for side in ["left", "right"] {
        let label = format!("extractor.{side}");
        expected.push((format!("{label}.stem.0"), vec![n, ext.stem[0], height, width]));
        expected.push((format!("{label}.stem.1"), vec![n, ext.stem[1], h0, w0]));
        expected.push((format!("{label}.stem.2"), vec![n, ext.stem[2], h0, w0]));
        for (i, &c) in ext.encoder.iter().enumerate() {
            let (h, w) = at(i + 1);
            expected.push((format!("{label}.enc{}", i + 1), vec![n, c, h, w]));
        }
        for lvl in 0..ext.encoder.len() {
            let (h, w) = at(lvl);
            expected.push((format!("{label}.dec{lvl}"), vec![n, ext.decoder, h, w]));
        }
    }
    expected.push(("cost_volume".into(), vec![n, config.volume_channels(), d0, h0, w0]));
    if config.image_branch {
        expected.push(("image_stem.0".into(), vec![n, 16, height, width]));
        expected.push(("image_stem.1".into(), vec![n, c0, h0, w0]));
        expected.push(("image_stem.2".into(), vec![n, c0, h0, w0]));
        for i in 1..=config.depth {
            let (h, w) = at(i);
            expected.push((format!("aggregation.enc2d{i}"), vec![n, c0 << i, h, w]));
        }
        for i in 0..config.depth {
            let (h, w) = at(i);
            expected.push((format!("aggregation.dec2d{i}"), vec![n, c0 << i, h, w]));
        }
    }
    for i in 1..=config.depth {
        let (h, w) = at(i);
        expected.push((format!("aggregation.enc3d{i}"), vec![n, c0 << i, dz(i), h, w]));
    }
    for i in 1..config.depth {
        let (h, w) = at(i);
        expected.push((format!("aggregation.dec3d{i}"), vec![n, c0 << i, dz(i), h, w]));
    }
    expected.push(("aggregation.out".into(), vec![n, d0, h0, w0]));
    expected.push(("disparity".into(), vec![n, height, width]));

    let mut mismatches = Vec::new();
    for (label, want) in &expected {
        let got = s.trace().iter().find(|(l, _)| l == label).map(|(_, sh)| sh.clone()).unwrap_or_default();
        if &got != want {
            mismatches.push((label.clone(), want.clone(), got));
        }
    }
    let d = s.graph.value(out.disparity).data();
    let range = d.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ShapeCheck { height, width, max_disparity: config.max_disparity, mismatches, checked: expected.len(), range })
}

/// Image sizes and disparity ranges of the shape contract.
pub const SHAPE_SIDES: [usize; 3] = [27, 48, 96];
pub const SHAPE_DISPARITIES: [usize; 2] = [12, 24];

/// The shape contract over every listed size, with the desk-scale widths.
pub fn shapes_suite(seed: u64) -> Result<Vec<ShapeCheck>> {
    let mut out = Vec::new();
    for &side in &SHAPE_SIDES {
        for &d in &SHAPE_DISPARITIES {
            let cfg = ModelConfig { max_disparity: d, ..ModelConfig::desk() };
            out.push(check_shapes(&cfg, side, side, seed)?);
        }
    }
    Ok(out)
}
