use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adam,
    SgdMomentum,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Adam => "adam",
            Algorithm::SgdMomentum => "sgd_momentum",
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
///
/// For Adam `first`/`second` hold the biased moment estimates; for
/// momentum SGD `first` holds the velocity and `second` stays empty.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub algorithm: Algorithm,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    /// Coupled L2 decay added to weight gradients as `2 * l2 * w`.
    pub l2_coefficient: f64,
    pub first: Vec<Vec<F>>,
    pub second: Vec<Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.0,
            l2_coefficient: 0.0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            algorithm: Algorithm::SgdMomentum,
            step_count: 0,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            momentum,
            l2_coefficient: 0.0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.l2_coefficient < 0.0 {
            return Err(Error::Config("l2 coefficient must be >= 0".into()));
        }
        Ok(())
    }

    /// Allocates zeroed buffers matching `store` if none exist yet, and
    /// checks shapes otherwise.
    fn prepare(&mut self, store: &ParamStore<F>) -> Result<()> {
        let want_second = self.algorithm == Algorithm::Adam;
        if self.first.is_empty() {
            self.first = store.ids().map(|id| vec![F::zero(); store.get(id).len()]).collect();
            if want_second {
                self.second = self.first.clone();
            }
        }
        let matches = |bufs: &[Vec<F>]| {
            bufs.len() == store.len()
                && store.ids().zip(bufs).all(|(id, b)| b.len() == store.get(id).len())
        };
        if !matches(&self.first) || (want_second && !matches(&self.second)) {
            return Err(Error::State(
                "optimizer moment buffers do not match the parameter shapes".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        match self.algorithm {
            Algorithm::Adam => adam_step(store, self),
            Algorithm::SgdMomentum => sgd_momentum_step(store, self),
        }
    }
}

fn gradient_of<F: Real>(store: &ParamStore<F>, id: super::ParamId, l2: F, i: usize) -> F {
    let t = store.get(id);
    let g = t.grad.as_ref().map_or(F::zero(), |g| g[i]);
    if store.kind(id) == ParamKind::Weight && l2 != F::zero() {
        g + F::lit(2.0) * l2 * t.data()[i]
    } else {
        g
    }
}

/// Adam with bias correction.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, state: &mut OptimizerState<F>) -> Result<()> {
    if state.algorithm != Algorithm::Adam {
        return Err(Error::State(format!(
            "adam_step called with {} state",
            state.algorithm.name()
        )));
    }
    state.validate()?;
    state.prepare(store)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let c1 = F::one() - b1.powi(t);
    let c2 = F::one() - b2.powi(t);
    let (lr, eps, l2) = (
        F::lit(state.learning_rate),
        F::lit(state.epsilon),
        F::lit(state.l2_coefficient),
    );
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let grads: Vec<F> = (0..n).map(|i| gradient_of(store, id, l2, i)).collect();
        let (m, v) = (&mut state.first[k], &mut state.second[k]);
        let w = store.get_mut(id).data_mut();
        for i in 0..n {
            let g = grads[i];
            m[i] = b1 * m[i] + (F::one() - b1) * g;
            v[i] = b2 * v[i] + (F::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.ensure_finite()
}

/// `v <- mu * v - lr * g; w <- w + v`.
pub fn sgd_momentum_step<F: Real>(store: &mut ParamStore<F>, state: &mut OptimizerState<F>) -> Result<()> {
    if state.algorithm != Algorithm::SgdMomentum {
        return Err(Error::State(format!(
            "sgd_momentum_step called with {} state",
            state.algorithm.name()
        )));
    }
    state.validate()?;
    state.prepare(store)?;
    state.step_count += 1;
    let (lr, mu, l2) = (
        F::lit(state.learning_rate),
        F::lit(state.momentum),
        F::lit(state.l2_coefficient),
    );
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let grads: Vec<F> = (0..n).map(|i| gradient_of(store, id, l2, i)).collect();
        let v = &mut state.first[k];
        let w = store.get_mut(id).data_mut();
        for i in 0..n {
            v[i] = mu * v[i] - lr * grads[i];
            w[i] += v[i];
        }
    }
    store.ensure_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64, g: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::scalar(w));
        store.get_mut(id).grad = Some(vec![g]);
        store
    }

    fn value(store: &ParamStore<f64>) -> f64 {
        store.get(store.ids().next().unwrap()).data()[0]
    }

    #[test]
    fn adam_first_step() {
        let mut store = single(1.0, 0.5);
        let mut st = OptimizerState::adam(1e-4);
        adam_step(&mut store, &mut st).unwrap();
        // m_hat = 0.5, v_hat = 0.25, so the step is lr * 0.5 / (0.5 + 1e-8).
        let expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((value(&store) - expected).abs() < 1e-15);
        assert!((value(&store) - 0.9999).abs() < 1e-9);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut store = single(0.7, 0.0);
        let mut st = OptimizerState::adam(1e-4);
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(value(&store), 0.7);
    }

    #[test]
    fn adam_identical_params_identical_updates() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamKind::Weight, Tensor::scalar(0.3));
        let b = store.add("b", ParamKind::Weight, Tensor::scalar(0.3));
        store.get_mut(a).grad = Some(vec![-1.5]);
        store.get_mut(b).grad = Some(vec![-1.5]);
        let mut st = OptimizerState::adam(1e-3);
        for _ in 0..3 {
            adam_step(&mut store, &mut st).unwrap();
        }
        assert_eq!(store.get(a).data(), store.get(b).data());
    }

    #[test]
    fn sgd_momentum_steps() {
        let mut store = single(2.0, 1.0);
        let mut st = OptimizerState::sgd_momentum(0.001, 0.949);
        sgd_momentum_step(&mut store, &mut st).unwrap();
        assert!((value(&store) - 1.999).abs() < 1e-15);
        let before = value(&store);
        sgd_momentum_step(&mut store, &mut st).unwrap();
        let step = before - value(&store);
        assert!((step - 0.001 * (1.0 + 0.949)).abs() < 1e-15);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn sgd_zero_gradient_keeps_weights() {
        let mut store = single(-4.0, 0.0);
        let mut st = OptimizerState::sgd_momentum(0.001, 0.949);
        sgd_momentum_step(&mut store, &mut st).unwrap();
        assert_eq!(value(&store), -4.0);
    }

    #[test]
    fn wrong_algorithm_and_shape_mismatch_are_state_errors() {
        let mut store = single(1.0, 1.0);
        let mut st = OptimizerState::sgd_momentum(0.001, 0.9);
        assert!(matches!(adam_step(&mut store, &mut st), Err(Error::State(_))));
        let mut st = OptimizerState::<f64>::adam(0.001);
        st.first = vec![vec![0.0; 3]];
        st.second = vec![vec![0.0; 3]];
        assert!(matches!(adam_step(&mut store, &mut st), Err(Error::State(_))));
    }

    #[test]
    fn coupled_l2_only_touches_weights() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Weight, Tensor::scalar(1.0));
        let b = store.add("b", ParamKind::Bias, Tensor::scalar(1.0));
        store.zero_grads();
        let mut st = OptimizerState::sgd_momentum(0.1, 0.0);
        st.l2_coefficient = 0.5;
        sgd_momentum_step(&mut store, &mut st).unwrap();
        assert!((store.get(w).data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(store.get(b).data()[0], 1.0);
    }
}
