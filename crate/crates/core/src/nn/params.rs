//! Named parameter storage and the Adam optimizer.

use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {}: {:?} vs {:?}",
                self.names[id.0],
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}

/// Registers initialized parameters under a hierarchical name prefix.
pub struct ParamBuilder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, T, R>) -> O) -> O {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    /// Uniform samples in `[-bound, bound)`, drawn in f64 so f32 and f64
    /// stores built from one seed hold the same values up to rounding.
    pub fn uniform(&mut self, name: &str, shape: [usize; 4], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| lit::<T>(self.rng.gen_range(-bound..bound)))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("shape by construction");
        self.tensor(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: [usize; 4], value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape, lit(value)))
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update. Parameters without a gradient keep their
    /// value but still see their moments decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradients, {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2): (T, T) = (lit(beta1), lit(beta2));
        let (one_b1, one_b2): (T, T) = (lit(1.0 - beta1), lit(1.0 - beta2));
        let step_size: T = lit(lr / c1);
        let inv_sqrt_c2: T = lit(1.0 / c2.sqrt());
        let eps: T = lit(eps);
        for (i, grad) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match grad {
                Some(g) => {
                    if g.len() != m.len() {
                        return Err(Error::shape(format!("gradient {i} has {} elements", g.len())));
                    }
                    let p = Arc::make_mut(&mut store.values[i]).data_mut();
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_c2 + eps);
                    }
                }
                None => {
                    for (m, v) in m.iter_mut().zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Some(Tensor::scalar(1.0))], 0.00015).unwrap();
        let theta = store.value(id).data()[0];
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((theta + 0.00015).abs() < 1e-9, "{theta}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut store, id) = single(0.25);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Some(Tensor::scalar(0.0))], 0.1).unwrap();
        assert_eq!(store.value(id).data()[0], 0.25);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = [Some(Tensor::scalar(0.7))];
        adam.step(&mut store, &g, 1e-3).unwrap();
        let d1 = store.value(id).data()[0].abs();
        adam.step(&mut store, &g, 1e-3).unwrap();
        let d2 = (store.value(id).data()[0].abs()) - d1;
        assert!(d2.abs() <= d1 * (1.0 + 1e-6), "{d1} {d2}");

        // independent recurrence oracle
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 1e-3, 0.7);
        let (mut m, mut v, mut th) = (0.0, 0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((store.value(id).data()[0] - th).abs() < 1e-15);
    }

    #[test]
    fn builder_names_and_cast() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let id = b.scope("enc", |b| b.scope("conv0", |b| b.uniform("weight", [4, 2, 3, 3], 0.5)));
        assert_eq!(store.name(id), "enc.conv0.weight");
        assert!(store.value(id).data().iter().all(|v| v.abs() <= 0.5));
        let f = store.cast::<f32>();
        assert_eq!(f.find("enc.conv0.weight"), Some(id));
    }
}
