//! Named parameter sets, weight initialization and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Parameter, Tensor, Var};

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter::new(name, tensor));
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Records every parameter as a constant (inference, frozen prior).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.constant(p.tensor.clone())).collect()
    }

    /// Moves gradients from a finished backward pass into `Parameter::grad`,
    /// adding to any gradient already present.
    pub fn collect_grads(&mut self, g: &mut Graph, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let Some(grad) = g.take_grad(v) else { continue };
            match &mut p.grad {
                Some(acc) => acc.add_assign(grad.data()),
                None => p.grad = Some(grad),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// He-uniform initialization for a layer with `fan_in` inputs.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to each `(param, grad)` pair. The pairing must be
    /// stable across calls.
    pub fn step<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in pairs.into_iter().enumerate() {
            if self.m.len() <= k {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Steps every parameter of `store` that holds a gradient, then clears
    /// the gradients.
    pub fn step_store(&mut self, store: &mut ParamStore) {
        let zero: Vec<Vec<f64>> = store
            .params()
            .iter()
            .map(|p| if p.grad.is_none() { vec![0.0; p.tensor.len()] } else { Vec::new() })
            .collect();
        let params = store.params_mut();
        let grads: Vec<Vec<f64>> = params
            .iter_mut()
            .zip(zero)
            .map(|(p, z)| p.grad.take().map(|g| g.into_data()).unwrap_or(z))
            .collect();
        self.step(
            params
                .iter_mut()
                .zip(&grads)
                .map(|(p, g)| (p.tensor.data_mut(), g.as_slice())),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step([(x.as_mut_slice(), g.as_slice())]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn init_is_seeded() {
        let a = he_uniform(&[4, 4], 4, &mut ChaCha8Rng::seed_from_u64(1));
        let b = he_uniform(&[4, 4], 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }
}
