//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// AdamW state: first/second moments per parameter plus the step counter.
/// Weight decay is applied directly to the weights (decoupled), never to
/// parameters flagged `no_decay` or matched by the skip filter.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect(),
            v: params.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect(),
            step: 0,
        }
    }

    /// One update. `grads` aligns with the parameter order; a None gradient
    /// (parameter off the loss path) still advances its moment decay but a
    /// skipped parameter is left untouched entirely.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        weight_decay: f64,
        skip: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = T::from_f64(1.0 - libm::pow(self.beta1, t as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(self.beta2, t as f64));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);

        for i in 0..params.len() {
            let id = crate::nn::PId(i);
            let name: String = params.name(id).into();
            if skip(&name) {
                continue;
            }
            let no_decay = params.entries()[i].no_decay;
            let zeros;
            let grad: &Tensor<T> = match &grads[i] {
                Some(g) => {
                    if !g.all_finite() {
                        return Err(Error::NonFiniteGrad { param: name });
                    }
                    g
                }
                None => {
                    zeros = Tensor::zeros(params.value(id).shape().to_vec());
                    &zeros
                }
            };
            let p = params.value_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mv = b1 * *mv + one_m_b1 * gv;
                *vv = b2 * *vv + one_m_b2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr_t * (mhat / (vhat.sqrt() + eps));
                if weight_decay > 0.0 && !no_decay {
                    *pv -= lr_t * T::from_f64(weight_decay) * *pv;
                }
            }
        }
        Ok(())
    }
}

/// Cosine annealing without restarts: lr(step) = lr0/2 * (1 + cos(pi*step/total)).
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

/// Schedule with optional linear warmup before the cosine decay.
pub fn lr_at(step: u64, total_steps: u64, lr0: f64, warmup_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return lr0 * (step + 1) as f64 / warmup_steps as f64;
    }
    cosine_lr(step - warmup_steps, total_steps.saturating_sub(warmup_steps), lr0)
}
