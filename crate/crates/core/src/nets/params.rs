use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors keyed by dotted path, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
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
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Number of scalars under `prefix.`.
    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        let p = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Copy of the parameters under `prefix.`, names kept.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(&p))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every parameter of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Renames every `from.` prefix to `to.`.
    pub fn renamed(self, from: &str, to: &str) -> ParamStore {
        let p = format!("{from}.");
        ParamStore {
            params: self
                .params
                .into_iter()
                .map(|(k, v)| match k.strip_prefix(&p) {
                    Some(rest) => (format!("{to}.{rest}"), v),
                    None => (k, v),
                })
                .collect(),
        }
    }

    /// Every name gets `prefix.` prepended.
    pub fn with_prefix(self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .into_iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v))
                .collect(),
        }
    }

    /// Entries under `prefix.`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Moving-average update `self = mu * self + (1 - mu) * source`,
    /// elementwise over every parameter.
    pub fn ema_from(&mut self, source: &ParamStore, mu: f64) -> Result<()> {
        if !self.same_layout(source) {
            return Err(Error::ShapeMismatch(
                "moving-average source layout differs".into(),
            ));
        }
        for ((_, t), (_, s)) in self.params.iter_mut().zip(&source.params) {
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = mu * *a + (1.0 - mu) * b;
            }
        }
        Ok(())
    }
}

/// Lazily turns store entries into graph leaves for one forward pass.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    vars: HashMap<String, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            vars: HashMap::new(),
        }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::new(store, false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = g.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradient for every bound parameter that received one.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect()
    }
}

/// Adds `src` into `acc` by name.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (k, v) in src {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
    Tensor::new(
        &[fan_in, fan_out],
        (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
    )
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// He-normal convolution kernel `[C_out, C_in, kd, kh, kw]`.
pub fn kaiming_conv<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 5]) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    normal(rng, &shape, (2.0 / fan_in as f64).sqrt())
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(format!("{prefix}.w"), xavier_uniform(rng, d_in, d_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

pub fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let w = b.get(g, &format!("{prefix}.w"));
    let bias = b.get(g, &format!("{prefix}.b"));
    g.linear(x, w, Some(bias))
}

pub fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let gamma = b.get(g, &format!("{prefix}.gamma"));
    let beta = b.get(g, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta, 1e-5)
}
