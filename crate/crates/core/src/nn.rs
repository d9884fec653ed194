//! Named parameter collections, layer building blocks and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Named parameters, ordered by name so iteration (and serialization) is stable.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamStore { params: iter.into_iter().collect() }
    }
}

/// Group count for normalizing `channels`: up to 8 groups of at least 2 channels.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|&g| channels % g == 0 && channels / g >= 2).unwrap_or(1)
}

/// Parameter initializer with PyTorch-style fan-in scaled uniform weights.
pub struct Init<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Init<'_, T, R> {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(self.rng.random_range(-bound..bound))).collect();
        Tensor::new(shape, data)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = self.uniform(vec![cout, cin, k, k], bound);
        let b = self.uniform(vec![cout], bound);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), b);
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = self.uniform(vec![fout, fin], bound);
        let b = self.uniform(vec![fout], bound);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), b);
    }

    pub fn norm(&mut self, name: &str, channels: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]));
    }

    /// Pre-activation residual block: (norm → SiLU → 3×3 conv) × 2 plus skip.
    ///
    /// With `time_dim`, a projected time embedding is added after the first conv.
    /// A 1×1 skip projection is created only when the width changes.
    pub fn res_block(&mut self, name: &str, cin: usize, cout: usize, time_dim: Option<usize>) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3);
        if let Some(td) = time_dim {
            self.linear(&format!("{name}.time"), td, cout);
        }
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Session<'p, T: Real> {
    pub g: Graph<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p, T: Real> Session<'p, T> {
    /// `trainable` controls whether parameters receive gradients.
    pub fn new(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Session { g: Graph::new(), params, bound: BTreeMap::new(), trainable }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = self.g.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Gradients of the bound parameters, keyed by name.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn conv(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.g.conv2d(x, w, Some(b))
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.g.linear(x, w, Some(b))
    }

    pub fn norm(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let c = self.g.shape(x)[1];
        self.g.group_norm(x, gamma, beta, norm_groups(c))
    }

    pub fn norm_act(&mut self, name: &str, x: Var) -> Var {
        let h = self.norm(name, x);
        self.g.silu(h)
    }

    /// `temb_act` is the already-activated time embedding `[n, time_dim]`.
    pub fn res_block(&mut self, name: &str, x: Var, temb_act: Option<Var>) -> Var {
        let h = self.norm_act(&format!("{name}.norm1"), x);
        let mut h = self.conv(&format!("{name}.conv1"), h);
        let time = format!("{name}.time.weight");
        if let (Some(te), true) = (temb_act, self.has(&time)) {
            let proj = self.linear(&format!("{name}.time"), te);
            h = self.g.add_channel(h, proj);
        }
        let h = self.norm_act(&format!("{name}.norm2"), h);
        let h = self.conv(&format!("{name}.conv2"), h);
        let skip_name = format!("{name}.skip.weight");
        let skip = if self.has(&skip_name) { self.conv(&format!("{name}.skip"), x) } else { x };
        self.g.add(skip, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, first: ParamStore::new(), second: ParamStore::new() }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let step_size = T::of_f64(c.lr / bc1);
        let eps = T::of_f64(c.eps);
        let inv_sqrt_bc2 = T::of_f64(1.0 / bc2.sqrt());
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let shape = g.shape().to_vec();
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Tensor::zeros(shape.clone()));
                self.second.insert(name.clone(), Tensor::zeros(shape));
            }
            let m = self.first.get_mut(name).unwrap().data_mut();
            let v = self.second.get_mut(name).unwrap().data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
                *pi -= step_size * *mi / denom;
            }
        }
    }
}
