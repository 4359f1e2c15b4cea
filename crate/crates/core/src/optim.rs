//! Named parameter storage and the Adam optimiser.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every tensor as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.variable(v.clone())))
                .collect(),
        }
    }
}

/// Parameters registered on one graph.
pub struct BoundParams<'g, T: Scalar> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Gradient per parameter name; parameters the loss does not reach get
    /// explicit zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    for (name, p) in params.tensors.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", g.shape(), format!("{:?}", p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let eps = T::from_f64_lossy(state.eps);
    let lr = T::from_f64_lossy(lr);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (T::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for &(n, v) in vals {
            s.insert(n, Tensor::scalar(v)).unwrap();
        }
        s
    }

    fn grads(vals: &[(&str, f64)]) -> BTreeMap<String, Tensor<f64>> {
        vals.iter().map(|&(n, v)| (n.to_string(), Tensor::scalar(v))).collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(&[("a", 1.5), ("b", -2.0)]);
        let before = p.clone();
        let mut st = AdamState::new();
        adam_step(&mut p, &grads(&[("a", 0.0), ("b", 0.0)]), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[("a", 0.0)]);
        let mut st = AdamState::new();
        adam_step(&mut p, &grads(&[("a", 1.0)]), &mut st, 0.1).unwrap();
        assert!((p.get("a").unwrap().item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = store(&[("a", 0.3), ("b", 0.3)]);
        let mut st = AdamState::new();
        for k in 0..5 {
            let g = 0.1 * k as f64 - 0.2;
            adam_step(&mut p, &grads(&[("a", g), ("b", g)]), &mut st, 0.01).unwrap();
        }
        assert_eq!(
            p.get("a").unwrap().item().to_bits(),
            p.get("b").unwrap().item().to_bits()
        );
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = store(&[("a", 0.0), ("b", 0.0)]);
        let mut st = AdamState::new();
        let err = adam_step(&mut p, &grads(&[("a", 1.0)]), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "b"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn negative_learning_rate_rejected() {
        let mut p = store(&[("a", 0.0)]);
        let mut st = AdamState::new();
        assert!(adam_step(&mut p, &grads(&[("a", 1.0)]), &mut st, -0.1).is_err());
        adam_step(&mut p, &grads(&[("a", 1.0)]), &mut st, 0.0).unwrap();
        assert_eq!(p.get("a").unwrap().item(), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = store(&[("a", 0.0)]);
        assert!(p.insert("a", Tensor::scalar(1.0)).is_err());
    }
}
