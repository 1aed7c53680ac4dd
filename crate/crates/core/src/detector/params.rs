use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::DetectorConfig;
use crate::attention::PYRAMID_LEVELS;
use crate::autodiff::{Array, Graph, Tensor};

/// Named parameter arrays in creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: Arc<BTreeMap<String, usize>>,
}

impl ParamStore {
    pub fn from_pairs(pairs: Vec<(String, Array)>) -> Self {
        let mut store = Self::default();
        for (name, value) in pairs {
            store.insert(name, value);
        }
        store
    }

    pub fn insert(&mut self, name: String, value: Array) {
        let index = Arc::make_mut(&mut self.index);
        assert!(!index.contains_key(&name), "duplicate parameter {name}");
        index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Binds every parameter as a gradient-tracking leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            tensors: self.values.iter().map(|v| g.param(v)).collect(),
            index: Arc::clone(&self.index),
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_constant<'g>(&self, g: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            tensors: self.values.iter().map(|v| g.constant(v.clone())).collect(),
            index: Arc::clone(&self.index),
        }
    }
}

pub struct BoundParams<'g> {
    tensors: Vec<Tensor<'g>>,
    index: Arc<BTreeMap<String, usize>>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, name: &str) -> Tensor<'g> {
        match self.index.get(name) {
            Some(&i) => self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradients in store order; zeros where nothing flowed.
    pub fn grads(&self) -> Vec<Array> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| Array::zeros(&t.shape())))
            .collect()
    }
}

fn he_uniform(shape: &[usize], rng: &mut impl Rng) -> Array {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    Array::from_fn(shape, |_| dist.sample(rng))
}

fn small_normal(shape: &[usize], rng: &mut impl Rng) -> Array {
    let dist = Normal::new(0.0, 0.01).expect("valid std");
    Array::from_fn(shape, |_| dist.sample(rng))
}

/// Value projections start as the identity so the transformer begins as a
/// channel (or slot) averaging step.
fn identity_1x1(c: usize) -> Array {
    Array::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
}

/// Initial positive probability of the classification heads.
pub(crate) const PRIOR_PROB: f64 = 0.01;

/// `ht_rng` feeds only the transformer parameters, so toggling the
/// transformer leaves every other initial value unchanged.
pub(super) fn init_params<R: Rng>(cfg: &DetectorConfig, anchors_per_location: usize, rng: &mut R, ht_rng: &mut R) -> ParamStore {
    let w = cfg.width;
    let k = cfg.num_classes;
    let mut store = ParamStore::default();
    fn conv<R: Rng>(store: &mut ParamStore, name: &str, cout: usize, cin: usize, ks: usize, rng: &mut R) {
        store.insert(format!("{name}.weight"), he_uniform(&[cout, cin, ks, ks], rng));
        store.insert(format!("{name}.bias"), Array::zeros(&[cout]));
    }
    conv(&mut store, "backbone.stem", w, cfg.in_channels, 3, rng);
    for s in 0..PYRAMID_LEVELS {
        conv(&mut store, &format!("backbone.stage{s}"), w, w, 3, rng);
    }
    for s in 0..PYRAMID_LEVELS {
        conv(&mut store, &format!("fpn.lateral{s}"), w, w, 1, rng);
    }
    if cfg.ht.cst() {
        for name in ["q", "k"] {
            store.insert(format!("ht.cst.{name}"), he_uniform(&[w, w, 1, 1], ht_rng));
        }
        // with the skip path a zero value map makes the block start as the identity
        let v = if cfg.ht_residual { Array::zeros(&[w, w, 1, 1]) } else { identity_1x1(w) };
        store.insert("ht.cst.v".into(), v);
    }
    if cfg.ht.psst() {
        // near-zero reduction with bias 1 keeps the initial level weights near one
        store.insert("ht.psst.reduce.weight".into(), small_normal(&[1, w, 1, 1], ht_rng));
        store.insert("ht.psst.reduce.bias".into(), Array::full(&[1], 1.0));
        for name in ["q", "k"] {
            store.insert(format!("ht.psst.{name}"), he_uniform(&[PYRAMID_LEVELS, PYRAMID_LEVELS, 1, 1], ht_rng));
        }
        store.insert("ht.psst.v".into(), identity_1x1(PYRAMID_LEVELS));
        if cfg.psst_concat {
            store.insert("ht.psst.fuse".into(), he_uniform(&[w, 2 * w, 1, 1], ht_rng));
        }
    }
    let cls_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
    for (branch, slots) in [("head.free", 1), ("head.anchor", anchors_per_location)] {
        for i in 0..cfg.head_layers {
            conv(&mut store, &format!("{branch}.layer{i}"), w, w, 3, rng);
        }
        store.insert(format!("{branch}.cls.weight"), small_normal(&[slots * k, w, 3, 3], rng));
        store.insert(format!("{branch}.cls.bias"), Array::full(&[slots * k], cls_bias));
        store.insert(format!("{branch}.reg.weight"), small_normal(&[slots * 4, w, 3, 3], rng));
        store.insert(format!("{branch}.reg.bias"), Array::zeros(&[slots * 4]));
    }
    store
}
