//! AdamW with decoupled weight decay, and a linear-warmup cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Linear ramp from zero to `peak_lr` over `warmup_steps`, then half-cosine to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(peak_lr > 0.0) || !peak_lr.is_finite() {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {peak_lr}"
            )));
        }
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
            )));
        }
        Ok(LrSchedule {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "lr_at: step {step} outside [0, {}]",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let p = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (PI * p).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// One parameter handed to [`AdamWState::step`].
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    /// `false` exempts the tensor from weight decay (used for `log τ`).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one bias-corrected AdamW update to every parameter.
    ///
    /// Gradients are validated up front; a non-finite gradient leaves all
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut [ParamUpdate<'_>], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        for p in params.iter() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "adamw: gradient for `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    p.grad.shape(),
                    p.value.shape()
                )));
            }
            if !p.grad.all_finite() {
                return Err(Error::PoisonedGradient(p.name.to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in params.iter_mut() {
            let mom = self
                .moments
                .entry(p.name.to_string())
                .or_insert_with(|| Moments {
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                });
            let decay = if p.decay {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            let g = p.grad.data();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(value: f64, grad: f64, lr: f64, cfg: AdamWConfig) -> f64 {
        let mut st = AdamWState::new(cfg);
        let mut w = Tensor::scalar(value);
        let g = Tensor::scalar(grad);
        st.step(
            &mut [ParamUpdate {
                name: "w",
                value: &mut w,
                grad: &g,
                decay: true,
            }],
            lr,
        )
        .unwrap();
        w.item()
    }

    #[test]
    fn schedule_reference_points() {
        let s = LrSchedule::new(5e-4, 10, 110).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(5).unwrap() - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(10).unwrap(), 5e-4);
        assert!((s.lr_at(60).unwrap() - 2.5e-4).abs() < 1e-15);
        assert!(s.lr_at(110).unwrap().abs() < 1e-18);
        assert!(s.lr_at(111).is_err());
        assert!(LrSchedule::new(5e-4, 10, 10).is_err());
    }

    #[test]
    fn first_step_hand_value() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert!((one_step(0.0, 1.0, 0.1, cfg) + 0.1).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_is_bit_exact_noop() {
        let w0 = 0.123_456_789_f64;
        assert_eq!(
            one_step(w0, 3.0, 0.0, AdamWConfig::default()).to_bits(),
            w0.to_bits()
        );
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let w = one_step(2.0, 0.0, 0.1, cfg);
        assert_eq!(w, 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn log_tau_is_not_decayed() {
        let mut st = AdamWState::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut w = Tensor::scalar(2.0);
        let g = Tensor::scalar(0.0);
        st.step(
            &mut [ParamUpdate {
                name: "log_tau",
                value: &mut w,
                grad: &g,
                decay: false,
            }],
            0.1,
        )
        .unwrap();
        assert_eq!(w.item(), 2.0);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut st = AdamWState::new(AdamWConfig::default());
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let ga = Tensor::scalar(1.0);
        let gb = Tensor::from_parts(vec![1], vec![f64::NAN]);
        let err = st
            .step(
                &mut [
                    ParamUpdate {
                        name: "a",
                        value: &mut a,
                        grad: &ga,
                        decay: true,
                    },
                    ParamUpdate {
                        name: "b",
                        value: &mut b,
                        grad: &gb,
                        decay: true,
                    },
                ],
                0.1,
            )
            .unwrap_err();
        assert!(matches!(err, Error::PoisonedGradient(ref n) if n == "b"));
        assert_eq!(a.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    proptest::proptest! {
        #[test]
        fn first_step_opposes_gradient(w in -5.0f64..5.0, g in -10.0f64..10.0) {
            proptest::prop_assume!(g.abs() > 1e-6);
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let w1 = one_step(w, g, 1e-2, cfg);
            proptest::prop_assert!((w1 - w) * g < 0.0);
        }

        #[test]
        fn identical_inputs_identical_states(seed in 0u64..1000) {
            let g = Tensor::scalar((seed as f64).sin());
            let run = || {
                let mut st = AdamWState::new(AdamWConfig::default());
                let mut w = Tensor::scalar(1.0);
                for _ in 0..3 {
                    st.step(&mut [ParamUpdate { name: "w", value: &mut w, grad: &g, decay: true }], 1e-3).unwrap();
                }
                (st, w)
            };
            let (a, b) = (run(), run());
            proptest::prop_assert_eq!(a.1.item().to_bits(), b.1.item().to_bits());
            proptest::prop_assert_eq!(a.0, b.0);
        }
    }
}
