//! AdamW with decoupled weight decay, plus the warmup + cosine schedule.

use crate::error::{CvsError, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor4D};

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: Vec<Tensor4D<T>>,
    second: Vec<Tensor4D<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor4D::zeros(p.value.shape())).collect();
        OptimizerState { lr, weight_decay, betas: (0.9, 0.999), eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. Every parameter must carry a gradient; grads are
    /// left in place for the caller to clear.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(CvsError::arg("adamw_step", "optimizer state does not match parameter set"));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(CvsError::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.lr;
        let e = |v: f64| T::from_f64_lossy(v);
        let (b1t, b2t, one) = (e(b1), e(b2), T::one());
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.no_decay { 0.0 } else { self.weight_decay };
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.shape() != p.value.shape() {
                return Err(CvsError::shape("adamw_step", format!("moment shape for {}", p.name)));
            }
            let shrink = e(1.0 - lr * decay);
            let values = p.value.data_mut().iter_mut();
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((w, &g), (mi, vi)) in values.zip(grad.data()).zip(moments) {
                *mi = b1t * *mi + (one - b1t) * g;
                *vi = b2t * *vi + (one - b2t) * g * g;
                let m_hat = mi.as_f64() / bc1;
                let v_hat = vi.as_f64() / bc2;
                *w = *w * shrink - e(lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Learning rate for a 0-based `epoch`: linear warmup where epoch `e < warmup`
/// gets `base_lr·(e+1)/warmup`, then cosine decay from `base_lr` towards 0.
pub fn cosine_lr(epoch: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if epoch < warmup {
        return base_lr * (epoch + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
