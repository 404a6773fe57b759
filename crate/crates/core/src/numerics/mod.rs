//! Differentiable-function kernel: dense networks, exact gradients, Adam and
//! target-network averaging.

pub mod checkpoint;
pub mod mlp;
pub mod params;

pub use checkpoint::Checkpoint;
pub use mlp::{backward, forward_batch, forward_trace, mlp_forward, Activation, MlpSpec, Trace};
pub use params::{DenseLayer, NormParams, ParamSet};

use crate::error::{Error, Result};

/// A scalar loss over a parameter set.
///
/// `value` must be computed by plain forward evaluation; `value_and_grad`
/// additionally returns the exact gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)>;
}

/// Exact gradient of `loss` at `params`.
pub fn gradient<O: Objective + ?Sized>(loss: &O, params: &ParamSet) -> Result<ParamSet> {
    let (value, grads) = loss.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::NumericalOverflow(format!("loss evaluated to {value}")));
    }
    if !grads.is_finite() {
        return Err(Error::NumericalOverflow("non-finite gradient entry".into()));
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for Adam, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(like: &ParamSet, config: AdamConfig) -> Self {
        AdamState {
            first_moment: like.zeros_like(),
            second_moment: like.zeros_like(),
            step: 0,
            config,
        }
    }

    /// In-place bias-corrected Adam update. Leaves everything untouched when
    /// the gradient has a non-finite entry.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        params.check_same_layout(grads, "adam")?;
        params.check_same_layout(&self.first_moment, "adam state")?;
        if !grads.is_finite() {
            return Err(Error::NumericalOverflow("non-finite gradient passed to adam".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Pure Adam step: returns updated parameters and state.
pub fn adam_step(params: &ParamSet, grads: &ParamSet, state: &AdamState, lr: f64) -> Result<(ParamSet, AdamState)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.apply(&mut params, grads, lr)?;
    Ok((params, state))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("polyak rate {tau} outside [0, 1]")));
    }
    Ok(())
}

/// `target' = (1 - tau) * target + tau * online`.
pub fn polyak_update(target: &ParamSet, online: &ParamSet, tau: f64) -> Result<ParamSet> {
    let mut out = target.clone();
    polyak_update_in_place(&mut out, online, tau)?;
    Ok(out)
}

pub fn polyak_update_in_place(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    check_tau(tau)?;
    target.check_same_layout(online, "polyak")?;
    if tau == 1.0 {
        *target = online.clone();
        return Ok(());
    }
    for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
        t.iter_mut().zip(o).for_each(|(t, o)| *t = (1.0 - tau) * *t + tau * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(x: f64) -> ParamSet {
        let spec = MlpSpec::new(1, &[1], 1, false).unwrap();
        ParamSet::zeros(&spec).map(|_| x)
    }

    struct SumOfSquares;
    impl Objective for SumOfSquares {
        fn value(&self, p: &ParamSet) -> Result<f64> {
            Ok(p.to_flat().iter().map(|x| x * x).sum())
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, ParamSet)> {
            Ok((self.value(p)?, p.map(|x| 2.0 * x)))
        }
    }

    struct Constant(f64);
    impl Objective for Constant {
        fn value(&self, _: &ParamSet) -> Result<f64> {
            Ok(self.0)
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, ParamSet)> {
            Ok((self.0, p.zeros_like()))
        }
    }

    #[test]
    fn gradient_of_quadratic_and_constant() {
        let spec = MlpSpec::new(3, &[4], 2, true).unwrap();
        let p = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let g = gradient(&SumOfSquares, &p).unwrap();
        assert_eq!(g, p.map(|x| 2.0 * x));
        let g = gradient(&Constant(4.0), &p).unwrap();
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
        assert!(matches!(
            gradient(&Constant(f64::INFINITY), &p),
            Err(Error::NumericalOverflow(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let p = scalar_params(0.7);
        let mut state = AdamState::new(&p, AdamConfig::default());
        state.first_moment = p.map(|_| 0.5);
        state.second_moment = p.map(|_| 0.25);
        let (_, s2) = adam_step(&p, &p.zeros_like(), &state, 1e-3).unwrap();
        assert_eq!(s2.first_moment, p.map(|_| 0.9 * 0.5));
        assert_eq!(s2.second_moment, p.map(|_| 0.999 * 0.25));
        assert_eq!(s2.step, 1);

        let fresh = AdamState::new(&p, AdamConfig::default());
        let (p3, _) = adam_step(&p, &p.zeros_like(), &fresh, 1e-3).unwrap();
        assert_eq!(p3, p);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let lr = 3e-4;
        for g in [2.5, -0.01, 40.0] {
            let p = scalar_params(0.1);
            let config = AdamConfig {
                eps: 1e-12,
                ..AdamConfig::default()
            };
            let state = AdamState::new(&p, config);
            let (p2, _) = adam_step(&p, &p.map(|_| g), &state, lr).unwrap();
            for (a, b) in p2.to_flat().iter().zip(p.to_flat()) {
                assert!(((b - a) - lr * g.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let spec = MlpSpec::new(3, &[5], 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ParamSet::init(&spec, &mut rng);
        let g = ParamSet::init(&spec, &mut rng);
        let s = AdamState::new(&p, AdamConfig::default());
        let a = adam_step(&p, &g, &s, 1e-3).unwrap();
        let b = adam_step(&p, &g, &s, 1e-3).unwrap();
        assert_eq!(a, b);

        let mut bad = g.clone();
        bad.layers[0].bias[1] = f64::NAN;
        let mut state = s.clone();
        let mut params = p.clone();
        assert!(state.apply(&mut params, &bad, 1e-3).is_err());
        assert_eq!(state, s);
        assert_eq!(params, p);
    }

    #[test]
    fn polyak_cases() {
        let online = scalar_params(1.0);
        let target = scalar_params(0.0);
        assert_eq!(polyak_update(&target, &online, 1.0).unwrap(), online);
        let mixed = polyak_update(&target, &online, 0.005).unwrap();
        assert!(mixed.to_flat().iter().all(|&x| (x - 0.005).abs() < 1e-15));
        for tau in [0.0, 0.3, 1.0] {
            assert_eq!(polyak_update(&online, &online, tau).unwrap(), online);
        }
        assert!(polyak_update(&target, &online, 1.5).is_err());
        let other = ParamSet::zeros(&MlpSpec::new(2, &[1], 1, false).unwrap());
        assert!(matches!(polyak_update(&target, &other, 0.1), Err(Error::Shape(_))));
    }
}
