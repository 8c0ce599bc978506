use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// One trainable tensor with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub value: Tensor<S>,
    pub first_moment: Tensor<S>,
    pub second_moment: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            value: value.with_requires_grad(true),
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
        }
    }
}

/// Named trainable tensors plus optimizer state.
///
/// Entries are kept in a `BTreeMap` so iteration order, and therefore every
/// reduction over parameters, is deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<S> {
    entries: BTreeMap<String, Parameter<S>>,
    step_count: u64,
}

/// Gradient table keyed by parameter name.
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore { entries: BTreeMap::new(), step_count: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Parameter::new(value));
        Ok(())
    }

    pub(crate) fn insert_parameter(&mut self, name: String, p: Parameter<S>) {
        self.entries.insert(name, p);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name).ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub(crate) fn get_key_value(&self, name: &str) -> Option<(&str, &Parameter<S>)> {
        self.entries.get_key_value(name).map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<S>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    /// A gradient table with a zero tensor for every parameter.
    pub fn zero_gradients(&self) -> Gradients<S> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }

    /// Converts every tensor (values and moments) to another precision.
    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            first_moment: p.first_moment.cast(),
                            second_moment: p.second_moment.cast(),
                        },
                    )
                })
                .collect(),
            step_count: self.step_count,
        }
    }

    /// One bias-corrected Adam update. Parameters absent from `grads` are
    /// treated as having zero gradient.
    pub fn adam_step(&mut self, grads: &Gradients<S>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .entries
                .get(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::dim("adam_step", p.value.shape(), g.shape()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = S::lit(cfg.beta1);
        let b2 = S::lit(cfg.beta2);
        let one = S::one();
        let bc1 = S::lit(1.0 - cfg.beta1.powf(t));
        let bc2 = S::lit(1.0 - cfg.beta2.powf(t));
        let lr = S::lit(cfg.lr);
        let eps = S::lit(cfg.eps);
        for (name, p) in self.entries.iter_mut() {
            let g = grads.get(name);
            let n = p.value.numel();
            let (vals, m, v) = (p.value.data_mut(), p.first_moment.data_mut(), p.second_moment.data_mut());
            for i in 0..n {
                let gi = g.map_or(S::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `acc += alpha * grads` for every entry of `grads`.
pub fn accumulate<S: Scalar>(acc: &mut Gradients<S>, grads: &Gradients<S>, alpha: S) -> Result<()> {
    for (name, g) in grads {
        match acc.get_mut(name) {
            Some(a) => a.add_scaled(g, alpha)?,
            None => {
                let mut z = Tensor::zeros(g.shape().to_vec());
                z.add_scaled(g, alpha)?;
                acc.insert(name.clone(), z);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(v: f64) -> Gradients<f64> {
        [("w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for g in [3.0, -0.25] {
            let mut s = scalar_store(1.0);
            s.adam_step(&grad(g), &AdamConfig::with_lr(0.01)).unwrap();
            let moved = s.value("w").unwrap().data()[0] - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-8, "{moved}");
            assert_eq!(s.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameter() {
        let mut s = scalar_store(0.7);
        s.adam_step(&grad(0.0), &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.value("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn two_unit_steps_reach_minus_point_two() {
        // Hand iteration: m_hat = v_hat = 1 at both steps, so each step is -lr / (1 + eps).
        let mut s = scalar_store(0.0);
        let cfg = AdamConfig::with_lr(0.1);
        s.adam_step(&grad(1.0), &cfg).unwrap();
        s.adam_step(&grad(1.0), &cfg).unwrap();
        assert!((s.value("w").unwrap().data()[0] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = scalar_store(0.0);
        let bad: Gradients<f64> = [("w".to_string(), Tensor::zeros(vec![2]))].into_iter().collect();
        assert!(matches!(s.adam_step(&bad, &AdamConfig::default()), Err(Error::Dimension { .. })));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn adam_is_bitwise_deterministic() {
        let mut a = ParameterStore::<f32>::new();
        a.insert("x", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
        let mut b = a.clone();
        let g: Gradients<f32> = [("x".to_string(), Tensor::new(vec![3], vec![0.5, 1e-3, -7.0]).unwrap())]
            .into_iter()
            .collect();
        for _ in 0..5 {
            a.adam_step(&g, &AdamConfig::with_lr(0.05)).unwrap();
            b.adam_step(&g, &AdamConfig::with_lr(0.05)).unwrap();
        }
        let bits = |s: &ParameterStore<f32>| s.value("x").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
