//! Adam with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Fresh state with zeroed moments for every parameter of `store`.
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros = |p: &crate::params::Param| {
            if p.kind == ParamKind::Learnable { vec![0.0; p.tensor.numel()] } else { Vec::new() }
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Global L2 norm of all learnable gradients, accumulated in f64.
pub fn global_grad_norm(store: &ParamStore) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in store.iter().filter(|p| p.kind == ParamKind::Learnable) {
        let g = p.tensor.grad.as_ref().ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Clips the global gradient norm to `max_norm` (when given) and applies one
/// Adam update to every learnable parameter. Returns the pre-clip norm.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, max_norm: Option<f32>) -> Result<f64> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument("optimizer state was built for a different store".into()));
    }
    let norm = global_grad_norm(store)?;
    let clip = match max_norm {
        Some(max) if norm > max as f64 => (max as f64 / norm) as f32,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - (b1 as f64).powi(t);
    let c2 = 1.0 - (b2 as f64).powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if p.kind != ParamKind::Learnable {
            continue;
        }
        let g = p.tensor.grad.as_ref().expect("checked by global_grad_norm").clone();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((w, &gi), (mi, vi)) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut().zip(v.iter_mut())) {
            let gi = gi * clip;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / c1;
            let v_hat = *vi as f64 / c2;
            *w -= (state.lr as f64 * m_hat / (v_hat.sqrt() + state.eps as f64)) as f32;
        }
    }
    Ok(norm)
}
