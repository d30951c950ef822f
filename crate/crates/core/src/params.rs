//! Named parameter storage and the adaptive-moment optimizer.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// The trainable (or frozen) weights of one network, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tag: &'static str,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(tag: &'static str) -> Self {
        ParamStore {
            tag,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn tag(&self) -> &'static str {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Zero-mean Gaussian initialization.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut SeededRng) -> usize {
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng.inner());
            T::lit(z * std)
        });
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.add(name, Tensor::full(shape, T::one()))
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.values[index]
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// `(qualified name, tensor)` pairs, qualified as `<tag>.<name>`.
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(move |(n, v)| (format!("{}.{}", self.tag, n), v))
    }

    /// Replaces every value from `(qualified name, tensor)` pairs, checking
    /// that names and shapes agree exactly.
    pub fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for i in 0..self.values.len() {
            let qualified = format!("{}.{}", self.tag, self.names[i]);
            let t = lookup(&qualified)
                .ok_or_else(|| Error::Checkpoint(format!("missing weight array {qualified}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "weight array {qualified} has shape {:?}, network expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Moment coefficients and step size of [`Adam`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one [`ParamStore`]. No weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    settings: AdamSettings,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(settings: AdamSettings, store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Adam {
            settings,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    pub fn from_parts(settings: AdamSettings, steps: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        Adam {
            settings,
            steps,
            first,
            second,
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are skipped
    /// entirely, moments included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.steps += 1;
        let b1 = T::lit(self.settings.beta1);
        let b2 = T::lit(self.settings.beta2);
        let t = self.steps as i32;
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let lr = T::lit(self.settings.learning_rate);
        let eps = T::lit(self.settings.epsilon);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.value_mut(i).data_mut();
            for j in 0..p.len() {
                let g = grad.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new("p");
        store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(AdamSettings::default(), &store);
        let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut store, &[Some(g)]);
        // with bias correction the first step is lr * sign(g) up to epsilon
        let w = store.value(0).data();
        assert!((w[0] - (1.0 - 2e-4)).abs() < 1e-10);
        assert!((w[1] - (-1.0 + 2e-4)).abs() < 1e-10);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::<f32>::new("p");
        store.add("w", Tensor::full(&[3], 0.25));
        let before = store.clone();
        let mut opt = Adam::new(AdamSettings::default(), &store);
        opt.step(&mut store, &[Some(Tensor::zeros(&[3]))]);
        assert_eq!(store, before);
        opt.step(&mut store, &[None]);
        assert_eq!(store, before);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new("p");
        store.add("w", Tensor::scalar(5.0));
        let settings = AdamSettings {
            learning_rate: 0.1,
            ..AdamSettings::default()
        };
        let mut opt = Adam::new(settings, &store);
        for _ in 0..500 {
            let w = store.value(0).data()[0];
            opt.step(&mut store, &[Some(Tensor::scalar(2.0 * (w - 1.0)))]);
        }
        assert!((store.value(0).data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut store = ParamStore::<f32>::new("net");
        store.add_zeros("w", &[2, 2]);
        let err = store.load_named(&|_| Some(Tensor::zeros(&[3]))).unwrap_err();
        assert!(err.to_string().contains("net.w"));
        store.load_named(&|n| (n == "net.w").then(|| Tensor::full(&[2, 2], 1.0))).unwrap();
        assert_eq!(store.value(0).data(), &[1.0; 4]);
    }
}
