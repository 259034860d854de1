//! Adam with decoupled weight decay, learning-rate schedules and gradient
//! accumulation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}")]
    NonFinite(String),
    #[error("gradient shape {actual:?} does not match parameter {name} {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected {expected} gradient slots, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::hybrid()
    }
}

impl AdamConfig {
    /// β=(0.9, 0.999), ε=1e-6, weight decay 0.01.
    pub fn hybrid() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }

    /// β=(0.9, 0.98), ε=1e-9, no weight decay.
    pub fn e2e() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments, one pair per parameter in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient slot is `None`
/// are left untouched (their moments too). Decay is applied to `θ`
/// directly and skipped for layer-norm parameters and the query seed.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::Count {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(OptimError::Shape {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(OptimError::NonFinite(name.to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let wd = if model::is_decay_exempt(name) {
            T::zero()
        } else {
            T::of(cfg.weight_decay)
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *theta = *theta - lr * (mhat / (vhat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}

/// Linear warmup to `peak`, then linear decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// `k * d_model^exponent * min(n^-0.5, n * warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoamSchedule {
    pub k: f64,
    pub d_model: usize,
    pub warmup_steps: u64,
    #[serde(default = "NoamSchedule::default_exponent")]
    pub exponent: f64,
}

impl NoamSchedule {
    fn default_exponent() -> f64 {
        -0.5
    }

    /// The conventional `d_model^-0.5` scaling.
    pub fn new(k: f64, d_model: usize, warmup_steps: u64) -> Self {
        Self {
            k,
            d_model,
            warmup_steps,
            exponent: -0.5,
        }
    }

    /// `d_model^+0.5`, as the formula is sometimes printed.
    pub fn paper_exact(mut self) -> Self {
        self.exponent = 0.5;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    LinearWarmupDecay(LinearSchedule),
    Noam(NoamSchedule),
}

impl Schedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Schedule(m.to_string()));
        match self {
            Schedule::LinearWarmupDecay(s) => {
                if !(s.peak_lr > 0.0) {
                    return bad("peak_lr must be positive");
                }
                if s.warmup_steps > s.total_steps {
                    return bad("warmup_steps exceeds total_steps");
                }
            }
            Schedule::Noam(s) => {
                if !(s.k > 0.0) || s.d_model == 0 || s.warmup_steps == 0 {
                    return bad("noam needs k > 0, d_model >= 1 and warmup_steps >= 1");
                }
            }
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> Result<f64, OptimError> {
        match self {
            Schedule::LinearWarmupDecay(s) => Ok(lr_linear(step, s)),
            Schedule::Noam(s) => lr_noam(step, s),
        }
    }
}

pub fn lr_linear(step: u64, s: &LinearSchedule) -> f64 {
    if step > s.total_steps {
        return 0.0;
    }
    if step <= s.warmup_steps {
        if s.warmup_steps == 0 {
            return s.peak_lr;
        }
        return s.peak_lr * (step as f64 / s.warmup_steps as f64);
    }
    s.peak_lr * ((s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64)
}

pub fn lr_noam(step: u64, s: &NoamSchedule) -> Result<f64, OptimError> {
    if step == 0 {
        return Err(OptimError::Schedule("noam schedule is undefined at step 0".into()));
    }
    let n = step as f64;
    let w = s.warmup_steps as f64;
    // Same as min(n^-0.5, n·w^-1.5), but picks the branch by comparing n
    // with w so the value at n = w is exactly w^-0.5.
    let branch = if n < w { n * w.powf(-1.5) } else { n.powf(-0.5) };
    Ok(s.k * (s.d_model as f64).powf(s.exponent) * branch)
}

/// Sums micro-batch gradients and hands back their mean.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T> {
    sums: Vec<Option<Tensor<T>>>,
    count: usize,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(slots: usize) -> Self {
        Self {
            sums: vec![None; slots],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, grads: Vec<Option<Tensor<T>>>) -> Result<(), OptimError> {
        if grads.len() != self.sums.len() {
            return Err(OptimError::Count {
                expected: self.sums.len(),
                actual: grads.len(),
            });
        }
        for (slot, g) in self.sums.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(s), Some(g)) => s.add_assign(g.data()),
                (None, Some(g)) => *slot = Some(g),
                (_, None) => {}
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Elementwise sum of everything added; resets the buffer.
    pub fn take_sum(&mut self) -> Vec<Option<Tensor<T>>> {
        self.count = 0;
        self.sums.iter_mut().map(Option::take).collect()
    }

    /// Mean over the collected micro-batches; resets the buffer.
    pub fn take_mean(&mut self) -> Vec<Option<Tensor<T>>> {
        let n = T::of(self.count.max(1) as f64);
        self.count = 0;
        self.sums
            .iter_mut()
            .map(|s| s.take().map(|t| t.map(|v| v / n)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_params(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::hybrid()
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![0.0]).unwrap())], &mut s, 0.1, &no_decay()).unwrap();
        assert_eq!(p.get("theta").unwrap().data(), &[0.3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let cfg = no_decay();
        adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![1.0]).unwrap())], &mut s, 0.01, &cfg).unwrap();
        let got = p.get("theta").unwrap().data()[0];
        assert!((got + 0.01 / (1.0 + cfg.eps)).abs() < 1e-18);
    }

    #[test]
    fn matches_scripted_oracle_on_quadratic() {
        let cfg = AdamConfig::hybrid();
        let lr = 0.05;
        // Oracle written out longhand.
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut want = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= lr * (mh / (vh.sqrt() + 1e-6) + 0.01 * th);
            want.push(th);
        }
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        for w in want {
            let th = p.get("theta").unwrap().data()[0];
            let g = Tensor::new(vec![1], vec![2.0 * th]).unwrap();
            adam_step(&mut p, &[Some(g)], &mut s, lr, &cfg).unwrap();
            assert!((p.get("theta").unwrap().data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_skips_norm_and_seed() {
        let mut p = ParamSet::<f64>::new();
        for name in ["layers.0.ln1.gain", "query_seed", "layers.0.attn.wq"] {
            p.insert(name, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        }
        let mut s = AdamState::new(&p);
        let zero = || Some(Tensor::new(vec![1], vec![0.0]).unwrap());
        adam_step(&mut p, &[zero(), zero(), zero()], &mut s, 0.1, &AdamConfig::hybrid()).unwrap();
        let vals: Vec<f64> = p.tensors().map(|t| t.data()[0]).collect();
        assert_eq!(vals[..2], [1.0, 1.0]);
        assert!((vals[2] - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![f64::NAN]).unwrap())], &mut s, 0.1, &no_decay())
            .unwrap_err();
        assert_eq!(err, OptimError::NonFinite("theta".into()));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn linear_schedule_points() {
        let s = LinearSchedule {
            peak_lr: 6e-4,
            warmup_steps: 115,
            total_steps: 1000,
        };
        assert_eq!(lr_linear(0, &s), 0.0);
        assert_eq!(lr_linear(115, &s), 6e-4);
        assert_eq!(lr_linear(1000, &s), 0.0);
        assert_eq!(lr_linear(1001, &s), 0.0);
        let s = LinearSchedule {
            peak_lr: 1.0,
            warmup_steps: 100,
            total_steps: 200,
        };
        assert_eq!(lr_linear(150, &s), 0.5);
        assert_eq!(lr_linear(50, &s), 0.5);
    }

    #[test]
    fn noam_points() {
        let s = NoamSchedule::new(2.0, 256, 140_000);
        let at = lr_noam(140_000, &s).unwrap();
        assert_eq!(at, 2.0 * 256f64.powf(-0.5) * 140_000f64.powf(-0.5));
        assert!((at - 3.341e-4).abs() < 1e-7);
        let later = lr_noam(280_000, &s).unwrap();
        assert!((later / at - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(lr_noam(0, &s).is_err());
        let exact = s.paper_exact();
        assert_eq!(lr_noam(140_000, &exact).unwrap(), 2.0 * 16.0 * 140_000f64.powf(-0.5));
    }

    #[test]
    fn schedule_validation() {
        let bad = Schedule::LinearWarmupDecay(LinearSchedule {
            peak_lr: 1.0,
            warmup_steps: 10,
            total_steps: 5,
        });
        assert!(bad.validate().is_err());
        let json = r#"{"kind":"noam","k":2.0,"d_model":256,"warmup_steps":10}"#;
        let s: Schedule = serde_json::from_str(json).unwrap();
        assert_eq!(s, Schedule::Noam(NoamSchedule::new(2.0, 256, 10)));
    }

    #[test]
    fn accumulator_means() {
        let g = |v: f64| vec![Some(Tensor::new(vec![2], vec![v, -v]).unwrap()), None];
        let mut acc = GradAccumulator::new(2);
        acc.add(g(1.5)).unwrap();
        assert_eq!(acc.take_mean(), g(1.5));
        acc.add(g(2.0)).unwrap();
        acc.add(g(-2.0)).unwrap();
        assert_eq!(acc.take_mean(), g(0.0));
        acc.add(g(1.0)).unwrap();
        acc.add(g(3.0)).unwrap();
        assert_eq!(acc.take_mean(), g(2.0));
    }

    proptest! {
        #[test]
        fn linear_is_continuous_and_bounded(warmup in 1u64..50, extra in 1u64..50, peak in 1e-5f64..1.0) {
            let s = LinearSchedule { peak_lr: peak, warmup_steps: warmup, total_steps: warmup + extra };
            let left = lr_linear(warmup - 1, &s);
            let right = lr_linear(warmup + 1, &s);
            prop_assert!((lr_linear(warmup, &s) - peak).abs() == 0.0);
            prop_assert!((peak - left) <= peak / warmup as f64 * 1.000001);
            prop_assert!((peak - right) <= peak / extra as f64 * 1.000001);
            for step in 0..=warmup + extra + 3 {
                let lr = lr_linear(step, &s);
                prop_assert!((0.0..=peak).contains(&lr));
            }
        }

        #[test]
        fn noam_rises_then_falls(warmup in 1u64..200, exp in prop::sample::select(vec![-0.5, 0.5])) {
            let s = NoamSchedule { k: 1.0, d_model: 64, warmup_steps: warmup, exponent: exp };
            for n in 1..warmup {
                prop_assert!(lr_noam(n, &s).unwrap() < lr_noam(n + 1, &s).unwrap());
            }
            for n in warmup..warmup * 3 {
                prop_assert!(lr_noam(n, &s).unwrap() > lr_noam(n + 1, &s).unwrap());
            }
        }

        #[test]
        fn steady_gradient_step_is_scale_free(c in 1e-3f64..1e3) {
            // Constant gradient for many steps: m̂/√v̂ -> sign(g) regardless of scale.
            let cfg = AdamConfig { eps: 0.0, ..no_decay() };
            let run = |g: f64| {
                let mut p = scalar_params(0.0);
                let mut s = AdamState::new(&p);
                let mut last = 0.0;
                for _ in 0..200 {
                    let before = p.get("theta").unwrap().data()[0];
                    adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![g]).unwrap())], &mut s, 1e-3, &cfg).unwrap();
                    last = p.get("theta").unwrap().data()[0] - before;
                }
                last
            };
            prop_assert!((run(0.7) - run(0.7 * c)).abs() < 1e-12);
        }
    }
}
