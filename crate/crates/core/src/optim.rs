//! AdamW with decoupled weight decay, a cosine learning-rate schedule and
//! global-norm gradient clipping.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Cosine decay from `base` at step 0 to `floor` at `horizon`, flat after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub horizon: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.horizon == 0 || step >= self.horizon {
            return self.floor;
        }
        let frac = step as f64 / self.horizon as f64;
        self.floor + (self.base - self.floor) * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * frac))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: i32,
    decay: bool,
}

/// Per-tensor AdamW state. Tensors are addressed by position, so the caller
/// must pass parameters and gradients in a fixed order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    names: Vec<String>,
    slots: Vec<Slot<T>>,
}

impl<T: Real> AdamW<T> {
    /// `decay[i]` selects whether tensor `i` receives weight decay.
    pub fn new(cfg: AdamWConfig, params: &[(String, &Tensor<T>)], decay: &[bool]) -> Result<Self> {
        if params.len() != decay.len() {
            return Err(Error::Contract("one decay flag per parameter".into()));
        }
        let slots = params
            .iter()
            .zip(decay)
            .map(|((_, t), &decay)| Slot {
                m: Tensor::zeros(t.shape()),
                v: Tensor::zeros(t.shape()),
                steps: 0,
                decay,
            })
            .collect();
        Ok(Self {
            cfg,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            slots,
        })
    }

    /// One update at learning rate `lr`. Tensors whose gradient is `None`
    /// are left untouched, moments included.
    ///
    /// Every gradient is checked for non-finite values before any parameter
    /// changes; `step` is only used in the error.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64, step: usize) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::Contract(alloc::format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::shape("adamw", g.shape(), params[i].shape()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: self.names[i].clone(),
                        step,
                    });
                }
            }
        }
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps, lr_t) = (T::one(), T::of(c.eps), T::of(lr));
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(g) = g else { continue };
            slot.steps += 1;
            let bc1 = one - b1.powi(slot.steps);
            let bc2 = one - b2.powi(slot.steps);
            let decay = if slot.decay { one - lr_t * T::of(c.weight_decay) } else { one };
            let pd = p.data_mut();
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            for (((p, &g), m), v) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum();
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule {
            base: 1e-3,
            floor: 0.0,
            horizon: 100,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(500), 0.0);
        let f = CosineSchedule { floor: 1e-4, ..s };
        assert!((f.lr(50) - 5.5e-4).abs() < 1e-15);
    }

    #[test]
    fn two_steps_by_hand() {
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut p = Tensor::from_vec(vec![1.0f64]).unwrap();
        let mut opt = AdamW::new(cfg, &[("w".into(), &p)], &[true]).unwrap();
        let (lr, g1, g2) = (0.01, 0.5, -0.2);

        opt.step(&mut [&mut p], &[Some(Tensor::from_vec(vec![g1]).unwrap())], lr, 0).unwrap();
        opt.step(&mut [&mut p], &[Some(Tensor::from_vec(vec![g2]).unwrap())], lr, 1).unwrap();

        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            x = x * (1.0 - lr * 0.1) - lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_leaves_tensor_alone() {
        let mut a = Tensor::from_vec(vec![1.0f64, 2.0]).unwrap();
        let mut b = Tensor::from_vec(vec![3.0f64]).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig::default(),
            &[("a".into(), &a), ("b".into(), &b)],
            &[true, true],
        )
        .unwrap();
        let g = vec![Some(Tensor::from_vec(vec![1.0, 1.0]).unwrap()), None];
        opt.step(&mut [&mut a, &mut b], &g, 0.1, 0).unwrap();
        assert_eq!(b.data(), &[3.0]);
        assert!(a.data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut a = Tensor::from_vec(vec![1.0f64]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[("block0.moe.bank".into(), &a)], &[false]).unwrap();
        let err = opt
            .step(&mut [&mut a], &[Some(Tensor::from_vec(vec![f64::NAN]).unwrap())], 0.1, 17)
            .unwrap_err();
        match err {
            Error::NonFiniteGradient { param, step } => {
                assert_eq!(param, "block0.moe.bank");
                assert_eq!(step, 17);
            }
            e => panic!("{e:?}"),
        }
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Tensor::from_vec(vec![3.0f64]).unwrap()), None, Some(Tensor::from_vec(vec![4.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(Tensor::from_vec(vec![0.1f64]).unwrap())];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.1]);
    }
}
