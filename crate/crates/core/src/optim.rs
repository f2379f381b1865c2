//! Adam with bias correction. Moment buffers are keyed by parameter name so
//! they can be checkpointed alongside the weights.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{MagError, Result};
use crate::nn::{Parameterized, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, ArrayD<F>>,
    second: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, ArrayD<F>>, &BTreeMap<String, ArrayD<F>>) {
        (&self.first, &self.second)
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn restore(
        learning_rate: f64,
        step: u64,
        first: BTreeMap<String, ArrayD<F>>,
        second: BTreeMap<String, ArrayD<F>>,
    ) -> Result<Self> {
        if first.len() != second.len() || first.keys().zip(second.keys()).any(|(a, b)| a != b) {
            return Err(MagError::Precondition(
                "first and second moments cover different parameters".into(),
            ));
        }
        Ok(Self {
            step,
            first,
            second,
            ..Self::new(learning_rate)
        })
    }

    /// Applies one update using the gradients stored in `model`.
    pub fn step<P: Parameterized<F> + ?Sized>(&mut self, model: &mut P) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let (fb1, fb2) = (F::from_f64_lossy(b1), F::from_f64_lossy(b2));
        let (one_b1, one_b2) = (F::from_f64_lossy(1.0 - b1), F::from_f64_lossy(1.0 - b2));
        let (fc1, fc2) = (F::from_f64_lossy(c1), F::from_f64_lossy(c2));
        let (flr, feps) = (F::from_f64_lossy(lr), F::from_f64_lossy(eps));
        let first = &mut self.first;
        let second = &mut self.second;
        model.visit_params_mut("", &mut |name, p| {
            let m = first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = second
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = fb1 * *m + one_b1 * g;
                    *v = fb2 * *v + one_b2 * g * g;
                    let m_hat = *m / fc1;
                    let v_hat = *v / fc2;
                    *w -= flr * m_hat / (v_hat.sqrt() + feps);
                });
        });
    }
}
