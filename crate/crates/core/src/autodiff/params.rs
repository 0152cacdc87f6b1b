use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor<f32>,
    grad: Option<Tensor<f32>>,
    m: Tensor<f32>,
    v: Tensor<f32>,
}

/// Named trainable tensors with their AdamW moments, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

/// Parameters bound as leaves of one graph, positionally matching the store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name:?} is not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Point `name` at a different variable, e.g. a probe leaf in a gradient check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter {name:?}")))?;
        self.vars[i] = var;
        Ok(())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::param(format!("duplicate parameter name {name:?}")));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            m,
            v,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Copy of the values alone: fresh optimizer state, no gradients.
    pub fn detached(&self) -> Self {
        let mut out = Self::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.clone()).expect("names are unique");
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).and_then(|&i| self.params[i].grad.as_ref())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Add every parameter to `graph` as a leaf, cast to `T`.
    pub fn bind<T: Scalar>(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.cast(), requires_grad))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Copy leaf gradients from `graph` into the store, adding to any
    /// gradient already present.
    pub fn accumulate_grads<T: Scalar>(&mut self, graph: &Graph<T>, bound: &Bound) -> Result<()> {
        for (p, &var) in self.params.iter_mut().zip(bound.vars()) {
            let g: Tensor<f32> = match graph.grad(var) {
                Some(g) => g.cast(),
                None => Tensor::zeros(p.value.shape()),
            };
            match &mut p.grad {
                Some(existing) => existing.add_assign(&g),
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor<f32>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown parameter {name:?}")))?;
        if grad.shape() != self.params[i].value.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} does not match parameter {name:?} {:?}",
                grad.shape(),
                self.params[i].value.shape()
            )));
        }
        self.params[i].grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One decoupled-weight-decay Adam update over every parameter, then
    /// clears the gradients.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {:?} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for p in &mut self.params {
            let grad = p.grad.take().expect("checked above");
            let values = p.value.data_mut().iter_mut();
            let moments = p.m.data_mut().iter_mut().zip(p.v.data_mut().iter_mut());
            for ((w, (m, v)), &g) in values.zip(moments).zip(grad.data()) {
                let g = g as f64;
                let m_new = opt.beta1 * (*m as f64) + (1.0 - opt.beta1) * g;
                let v_new = opt.beta2 * (*v as f64) + (1.0 - opt.beta2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let old = *w as f64;
                *w = (old - opt.lr * m_hat / (v_hat.sqrt() + opt.eps) - opt.lr * opt.weight_decay * old) as f32;
            }
        }
        Ok(())
    }
}
