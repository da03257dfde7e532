//! Named learnable arrays with gradient slots, and the AdamW optimiser.

use ndarray::ArrayD;
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Missing(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Every learnable value of a model, in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array, decay: bool) -> Result<(), ParamError> {
        if self.index_of(name).is_some() {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            decay,
        });
        Ok(())
    }

    /// Appends all parameters of `other`, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParameterStore) -> Result<(), ParamError> {
        for p in other.params {
            self.insert(&format!("{prefix}{}", p.name), p.value, p.decay)?;
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Array, ParamError> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array, ParamError> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Array, ParamError> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.grad)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Bound<'t>, ParamError> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars,
        })
    }

    /// Names `vars` (one per parameter, in store order) as this store's
    /// parameters.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<Bound<'t>, ParamError> {
        if vars.len() != self.params.len() {
            return Err(ParamError::Missing(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars: vars.to_vec(),
        })
    }

    /// Adds the tape gradients of a bound copy into the gradient slots.
    pub fn accumulate(&mut self, bound: &Bound<'_>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = v.grad() {
                p.grad += &g;
            }
        }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<&Var<'t>, ParamError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.vars[i])
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moment estimates are kept per
/// parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moments: Vec<Array>,
    pub second_moments: Vec<Array>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParameterStore) -> Self {
        let zeros = || store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        AdamW {
            config,
            step: 0,
            first_moments: zeros(),
            second_moments: zeros(),
        }
    }

    /// One update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store
            .iter_mut()
            .zip(&mut self.first_moments)
            .zip(&mut self.second_moments)
        {
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= c.learning_rate * (decay * *w);
                    *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bind_and_accumulate() {
        let mut store = ParameterStore::new();
        store.insert("w", array![1.0, 2.0].into_dyn(), true).unwrap();
        assert!(matches!(
            store.insert("w", array![0.0].into_dyn(), true),
            Err(ParamError::Duplicate(_))
        ));
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let loss = bound.get("w").unwrap().square().sum();
        tape.backward(&loss).unwrap();
        store.accumulate(&bound);
        store.accumulate(&bound);
        assert_eq!(store.grad("w").unwrap(), &array![4.0, 8.0].into_dyn());
        assert!(bound.get("nope").is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut store = ParameterStore::new();
        store.insert("w", array![1.0, -1.0].into_dyn(), false).unwrap();
        store.iter_mut().next().unwrap().grad = array![0.5, -3.0].into_dyn();
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store);
        let w = store.get("w").unwrap();
        // The bias-corrected first step is lr * sign(g) up to eps.
        assert!((w[[0]] - 0.9).abs() < 1e-6);
        assert!((w[[1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled_and_selective() {
        let mut store = ParameterStore::new();
        store.insert("decayed", array![1.0].into_dyn(), true).unwrap();
        store.insert("kept", array![1.0].into_dyn(), false).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.1,
                weight_decay: 0.5,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store);
        assert!((store.get("decayed").unwrap()[[0]] - 0.95).abs() < 1e-12);
        assert_eq!(store.get("kept").unwrap()[[0]], 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParameterStore::new();
        store.insert("w", array![3.0, -2.0].into_dyn(), false).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            store.zero_grads();
            let tape = Tape::new();
            let b = store.bind(&tape).unwrap();
            let target = tape.vector(vec![1.0, 1.0]);
            let loss = b.get("w").unwrap().sub(&target).unwrap().square().sum();
            tape.backward(&loss).unwrap();
            store.accumulate(&b);
            opt.step(&mut store);
        }
        let w = store.get("w").unwrap();
        assert!((w[[0]] - 1.0).abs() < 1e-3 && (w[[1]] - 1.0).abs() < 1e-3);
    }
}
